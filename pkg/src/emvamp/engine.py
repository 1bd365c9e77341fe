"""EM-VAMP iteration: alternating denoiser and LMMSE half-steps.

Each half-step optionally refreshes its parameter estimate by EM, computes
the belief mean and averaged precision, and passes the extrinsic pair
``(r, gamma)`` to the other half.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .denoiser import PseudoMeasurement, denoise, em_update_theta1
from .lmmse import (NORMALIZATION_MODES, RESIDUAL_MODES, LmmseWorkspace, iterate_theta2,
                    lmmse_svd)
from .problem import BgParams, ProblemInstance

CLAMP_G1_LOW, CLAMP_G1_HIGH, CLAMP_G2_LOW, CLAMP_G2_HIGH = 1, 2, 4, 8

TRACE_COLUMNS = [
    "iter", "nmse_db", "beta", "mu", "tau", "theta2", "gamma1", "gamma2", "eta1", "eta2",
    "fp_eta_resid", "fp_xhat_resid", "clamp_flags",
]


class DegenerateInstanceError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class VampConfig:
    max_iters: int = 100
    stop_tol: float = 1e-8
    em_theta1: bool = True
    freeze: tuple[str, ...] = ()
    theta1_updates: int = 1
    em_theta2: bool = True
    theta2_tol: float = 1e-6
    theta2_max_inner: int = 100
    gamma_min: float = 1e-11
    gamma_max: float = 1e11
    gamma1_init: float = 1e-6
    damping: float = 1.0
    residual_mode: str = "posterior_mean"
    normalization_mode: str = "ml_M"
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.damping <= 1):
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if not (self.gamma_min > 0) or self.gamma_max <= self.gamma_min:
            raise ValueError("need 0 < gamma_min < gamma_max")
        if self.residual_mode not in RESIDUAL_MODES:
            raise ValueError(f"unknown residual mode {self.residual_mode!r}")
        if self.normalization_mode not in NORMALIZATION_MODES:
            raise ValueError(f"unknown normalization mode {self.normalization_mode!r}")
        object.__setattr__(self, "freeze", tuple(self.freeze))

    @classmethod
    def oracle(cls, **kw) -> "VampConfig":
        """Known-parameter VAMP: both EM toggles off."""
        return cls(em_theta1=False, em_theta2=False, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "VampConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["freeze"] = list(self.freeze)
        return d


@dataclass(frozen=True, eq=False)
class VampState:
    """Algorithm quantities after the most recent (half-)iteration.

    ``r1, gamma1`` are the inputs the next denoiser pass will use;
    ``r2, gamma2`` are those the most recent LMMSE pass used.
    """

    r1: np.ndarray
    gamma1: float
    r2: np.ndarray
    gamma2: float
    xhat1: np.ndarray
    xhat2: np.ndarray
    eta1: float
    eta2: float
    theta1: BgParams
    theta2: float
    k: int = 0
    clamp_flags: int = 0
    theta2_inner: int = 0


@dataclass
class IterRecord:
    iter: int
    nmse_db: float
    beta: float
    mu: float
    tau: float
    theta2: float
    gamma1: float
    gamma2: float
    eta1: float
    eta2: float
    fp_eta_resid: float
    fp_xhat_resid: float
    clamp_flags: int
    theta2_inner: int = 0
    wall_time: float = 0.0

    def row(self) -> list:
        return [getattr(self, c) for c in TRACE_COLUMNS]


@dataclass
class RunTrace:
    records: list[IterRecord] = field(default_factory=list)
    state: VampState | None = None
    init_nmse_db: float = 0.0
    converged: bool = False
    diverged: bool = False

    @property
    def n_iter(self) -> int:
        return len(self.records)

    @property
    def nmse_db(self) -> np.ndarray:
        return np.array([r.nmse_db for r in self.records])

    @property
    def final_nmse_db(self) -> float:
        return self.records[-1].nmse_db if self.records else self.init_nmse_db

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for rec in self.records:
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in rec.row()])


def nmse_db(xhat: np.ndarray, x: np.ndarray) -> float:
    den = float(x @ x)
    err = xhat - x
    if den == 0:
        return 0.0 if not np.any(err) else np.inf
    val = float(err @ err) / den
    return float(10 * np.log10(val)) if val > 0 else -np.inf


def _relchange(new, old) -> float:
    d = float(np.linalg.norm(new - old))
    n = float(np.linalg.norm(new))
    return d / n if n > 0 else d


def fp_residuals(eta1, eta2, xhat1, xhat2) -> tuple[float, float]:
    eta_gap = abs(eta1 - eta2) / max(eta1, eta2)
    n = float(np.linalg.norm(xhat1))
    d = float(np.linalg.norm(xhat1 - xhat2))
    return eta_gap, d / n if n > 0 else d


def init_state(instance: ProblemInstance, config: VampConfig) -> VampState:
    """Cold start: ``r1 = 0``, small ``gamma1``; EM parameters from ``y``.

    With EM on, ``beta = (M/2)/N``, ``tau = ||y||^2 / (||A||_F^2 beta)``,
    ``mu = 0`` and ``1/theta2 = ||y||^2 / M``.  Disabled EM blocks copy the
    true parameters.
    """
    M, N = instance.M, instance.N
    y2 = float(instance.y @ instance.y)
    if not (y2 > 0):
        raise DegenerateInstanceError("measurement vector is identically zero")
    if config.em_theta1:
        beta = min((M / 2) / N, 1.0)
        theta1 = BgParams(beta=beta, mu=0.0, tau=y2 / (instance.matrix.frob_sq * beta))
        for name in config.freeze:
            theta1 = replace(theta1, **{name: getattr(instance.theta1_true, name)})
    else:
        theta1 = instance.theta1_true
    theta2 = M / y2 if config.em_theta2 else instance.theta2_true
    zeros = np.zeros(N)
    return VampState(
        r1=zeros, gamma1=config.gamma1_init, r2=zeros.copy(), gamma2=np.nan,
        xhat1=zeros.copy(), xhat2=zeros.copy(), eta1=np.nan, eta2=np.nan,
        theta1=theta1, theta2=theta2, k=0,
    )


def _extrinsic(eta, xhat, gamma_in, r_in, config: VampConfig):
    """Lines ``gamma_out = eta - gamma_in`` and ``r_out = (eta xhat - gamma_in r_in)/gamma_out``."""
    g = eta - gamma_in
    flag = 0
    if not (g >= config.gamma_min):
        g, flag = config.gamma_min, 1
    elif g > config.gamma_max:
        g, flag = config.gamma_max, 2
    r = (eta * xhat - gamma_in * r_in) / g
    return r, g, flag


def half_step_denoise(state: VampState, config: VampConfig) -> VampState:
    theta1 = state.theta1
    if config.em_theta1:
        pm = PseudoMeasurement(state.r1, state.gamma1)
        for _ in range(config.theta1_updates):
            theta1 = em_update_theta1(pm, theta1, freeze=config.freeze)
    out = denoise(PseudoMeasurement(state.r1, state.gamma1), theta1)
    if not np.all(np.isfinite(out.xhat)):
        raise NonFiniteError(f"non-finite denoiser output at iteration {state.k}")
    r2, g2, flag = _extrinsic(out.eta, out.xhat, state.gamma1, state.r1, config)
    if config.damping < 1 and state.k > 0:
        a = config.damping
        r2 = a * r2 + (1 - a) * state.r2
        g2 = a * g2 + (1 - a) * state.gamma2
    flags = (state.clamp_flags & ~(CLAMP_G2_LOW | CLAMP_G2_HIGH)) | (flag * CLAMP_G2_LOW)
    return replace(state, theta1=theta1, xhat1=out.xhat, eta1=out.eta, r2=r2, gamma2=g2,
                   clamp_flags=flags)


def half_step_lmmse(state: VampState, config: VampConfig, ws: LmmseWorkspace) -> VampState:
    theta2, inner = state.theta2, 0
    if config.em_theta2:
        res = iterate_theta2(ws, state.r2, state.gamma2, theta2, tol=config.theta2_tol,
                             max_inner=config.theta2_max_inner,
                             residual=config.residual_mode,
                             normalization=config.normalization_mode)
        theta2, inner = res.theta2, res.n_iter
    out = lmmse_svd(ws, state.r2, state.gamma2, theta2)
    if not np.all(np.isfinite(out.xhat)):
        raise NonFiniteError(f"non-finite LMMSE output at iteration {state.k}")
    r1, g1, flag = _extrinsic(out.eta, out.xhat, state.gamma2, state.r2, config)
    if config.damping < 1 and state.k > 0:
        a = config.damping
        r1 = a * r1 + (1 - a) * state.r1
        g1 = a * g1 + (1 - a) * state.gamma1
    flags = (state.clamp_flags & ~(CLAMP_G1_LOW | CLAMP_G1_HIGH)) | (flag * CLAMP_G1_LOW)
    return replace(state, theta2=theta2, xhat2=out.xhat, eta2=out.eta, r1=r1, gamma1=g1,
                   clamp_flags=flags, theta2_inner=inner, k=state.k + 1)


def run(instance: ProblemInstance, config: VampConfig = VampConfig(),
        state: VampState | None = None, callback=None) -> RunTrace:
    """Iterate until ``max_iters`` or the relative change of ``xhat1`` is ``<= stop_tol``.

    ``callback(state)`` is called after each full iteration.  Divergence
    (NMSE above 60 dB or a non-finite estimate) ends the run with
    ``trace.diverged`` set.
    """
    ws = LmmseWorkspace(instance.matrix, instance.y)
    state = init_state(instance, config) if state is None else state
    x = instance.x_true
    trace = RunTrace(state=state, init_nmse_db=nmse_db(state.xhat1, x))
    t0 = time.perf_counter()
    prev = None
    for _ in range(config.max_iters):
        try:
            new = half_step_lmmse(half_step_denoise(state, config), config, ws)
        except (NonFiniteError, FloatingPointError, np.linalg.LinAlgError):
            trace.diverged = True
            break
        err_db = nmse_db(new.xhat1, x)
        eg, xg = fp_residuals(new.eta1, new.eta2, new.xhat1, new.xhat2)
        th = new.theta1
        trace.records.append(IterRecord(
            iter=new.k, nmse_db=err_db, beta=th.beta, mu=th.mu, tau=th.tau,
            theta2=new.theta2, gamma1=new.gamma1, gamma2=new.gamma2, eta1=new.eta1,
            eta2=new.eta2, fp_eta_resid=eg, fp_xhat_resid=xg, clamp_flags=new.clamp_flags,
            theta2_inner=new.theta2_inner, wall_time=time.perf_counter() - t0,
        ))
        trace.state = state = new
        if callback is not None:
            callback(new)
        if not np.isfinite(err_db) and err_db > 0 or err_db > 60.0:
            trace.diverged = True
            break
        if (config.stop_tol > 0 and prev is not None
                and _relchange(new.xhat1, prev) <= config.stop_tol):
            trace.converged = True
            break
        prev = new.xhat1
    return trace


def vamp(instance: ProblemInstance, theta1: BgParams, theta2: float, max_iters: int = 100,
         stop_tol: float = 1e-8, gamma1_init: float = 1e-6, gamma_min: float = 1e-11,
         gamma_max: float = 1e11) -> RunTrace:
    """Plain VAMP with fixed parameters, written without the EM machinery.

    Serves as the reference that :func:`run` must reproduce exactly when both
    EM toggles are off.
    """
    ws = LmmseWorkspace(instance.matrix, instance.y)
    x = instance.x_true
    N = instance.N
    r1, g1 = np.zeros(N), gamma1_init
    trace = RunTrace(init_nmse_db=nmse_db(np.zeros(N), x))
    prev = None
    t0 = time.perf_counter()
    for k in range(max_iters):
        d = denoise(PseudoMeasurement(r1, g1), theta1)
        x1, eta1 = d.xhat, d.eta
        g2 = eta1 - g1
        f2 = 0
        if not (g2 >= gamma_min):
            g2, f2 = gamma_min, 1
        elif g2 > gamma_max:
            g2, f2 = gamma_max, 2
        r2 = (eta1 * x1 - g1 * r1) / g2

        o = lmmse_svd(ws, r2, g2, theta2)
        x2, eta2 = o.xhat, o.eta
        g1_new = eta2 - g2
        f1 = 0
        if not (g1_new >= gamma_min):
            g1_new, f1 = gamma_min, 1
        elif g1_new > gamma_max:
            g1_new, f1 = gamma_max, 2
        r1 = (eta2 * x2 - g2 * r2) / g1_new
        g1 = g1_new

        err_db = nmse_db(x1, x)
        eg, xg = fp_residuals(eta1, eta2, x1, x2)
        trace.records.append(IterRecord(
            iter=k + 1, nmse_db=err_db, beta=theta1.beta, mu=theta1.mu, tau=theta1.tau,
            theta2=theta2, gamma1=g1, gamma2=g2, eta1=eta1, eta2=eta2, fp_eta_resid=eg,
            fp_xhat_resid=xg, clamp_flags=f1 * CLAMP_G1_LOW + f2 * CLAMP_G2_LOW,
            wall_time=time.perf_counter() - t0,
        ))
        trace.state = VampState(r1=r1, gamma1=g1, r2=r2, gamma2=g2, xhat1=x1, xhat2=x2,
                                eta1=eta1, eta2=eta2, theta1=theta1, theta2=theta2, k=k + 1,
                                clamp_flags=f1 * CLAMP_G1_LOW + f2 * CLAMP_G2_LOW)
        if not np.isfinite(err_db) and err_db > 0 or err_db > 60.0:
            trace.diverged = True
            break
        if stop_tol > 0 and prev is not None and _relchange(x1, prev) <= stop_tol:
            trace.converged = True
            break
        prev = x1
    return trace
