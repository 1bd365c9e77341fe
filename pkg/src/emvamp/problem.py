"""Synthetic sparse-recovery problems with controlled conditioning.

Matrices are stored in factored form ``A = U S V^T`` with Haar-distributed
orthogonal factors and a geometric singular-value spectrum; signals follow a
Bernoulli-Gaussian (spike-and-slab) law and the noise level is set from a
target SNR in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class InvalidSpecError(ValueError):
    """Raised for inconsistent problem or matrix specifications."""


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class BgParams:
    """Bernoulli-Gaussian prior ``(1-beta) delta(x) + beta N(x; mu, tau)``."""

    beta: float
    mu: float
    tau: float

    def __post_init__(self):
        if not (0.0 < self.beta <= 1.0):
            raise InvalidSpecError(f"beta must lie in (0, 1], got {self.beta}")
        if not (self.tau > 0.0) or not np.isfinite(self.tau):
            raise InvalidSpecError(f"tau must be positive and finite, got {self.tau}")
        if not np.isfinite(self.mu):
            raise InvalidSpecError(f"mu must be finite, got {self.mu}")

    @property
    def second_moment(self) -> float:
        """E[x^2] of one coordinate."""
        return self.beta * (self.mu**2 + self.tau)

    def as_dict(self) -> dict:
        return {"beta": self.beta, "mu": self.mu, "tau": self.tau}


@dataclass(frozen=True)
class MatrixSpec:
    M: int
    N: int
    cond: float = 1.0
    frob_norm_sq_target: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise InvalidSpecError(f"dimensions must be >= 1, got M={self.M}, N={self.N}")
        if not (self.cond >= 1.0):
            raise InvalidSpecError(f"condition number must be >= 1, got {self.cond}")

    @property
    def frob_sq(self) -> float:
        return float(self.N if self.frob_norm_sq_target is None else self.frob_norm_sq_target)


@dataclass(frozen=True, eq=False)
class SvdMatrix:
    """Measurement matrix ``U @ diag(s) @ V[:, :R].T`` with ``R = min(M, N)``.

    Attributes
    ----------
    U : (M, M) ndarray
    V : (N, N) ndarray
    s : (R,) ndarray
        Nonincreasing, strictly positive singular values.
    """

    U: np.ndarray
    V: np.ndarray
    s: np.ndarray

    @property
    def M(self) -> int:
        return self.U.shape[0]

    @property
    def N(self) -> int:
        return self.V.shape[0]

    @property
    def R(self) -> int:
        return self.s.shape[0]

    @property
    def frob_sq(self) -> float:
        return float(np.sum(self.s**2))

    @property
    def cond(self) -> float:
        return float(self.s[0] / self.s[-1])

    @cached_property
    def dense(self) -> np.ndarray:
        R = self.R
        return (self.U[:, :R] * self.s) @ self.V[:, :R].T

    def matvec(self, x: np.ndarray) -> np.ndarray:
        R = self.R
        return self.U[:, :R] @ (self.s * (self.V[:, :R].T @ x))

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        R = self.R
        return self.V[:, :R] @ (self.s * (self.U[:, :R].T @ y))

    def check(self, tol: float = 1e-10) -> None:
        """Assert the orthogonality and ordering invariants."""
        eU = np.max(np.abs(self.U.T @ self.U - np.eye(self.M)))
        eV = np.max(np.abs(self.V.T @ self.V - np.eye(self.N)))
        if eU > tol or eV > tol:
            raise InvalidSpecError(f"factors not orthogonal (U: {eU:.2e}, V: {eV:.2e})")
        if np.any(np.diff(self.s) > 0) or np.any(self.s <= 0):
            raise InvalidSpecError("singular values must be positive and nonincreasing")


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    matrix: SvdMatrix
    x_true: np.ndarray
    w: np.ndarray
    y: np.ndarray
    theta1_true: BgParams
    theta2_true: float
    snr_db: float
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.matrix.M

    @property
    def N(self) -> int:
        return self.matrix.N


def haar_orthogonal(n: int, seed=None) -> np.ndarray:
    """Draw an ``n x n`` orthogonal matrix from the Haar measure.

    Uses the QR decomposition of a standard Gaussian matrix, with columns
    re-signed so that the triangular factor has a positive diagonal.
    """
    if n < 1:
        raise InvalidSpecError(f"dimension must be >= 1, got {n}")
    rng = _rng(seed)
    Z = rng.standard_normal((n, n))
    Q, R = np.linalg.qr(Z)
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return Q * d


def geometric_spectrum(R: int, cond: float, frob_sq: float) -> np.ndarray:
    """Singular values with constant ratio ``s[i]/s[i-1]`` and ``s[0]/s[-1] = cond``.

    The leading value is scaled so that ``sum(s**2) == frob_sq``.
    """
    if R < 1:
        raise InvalidSpecError(f"rank must be >= 1, got {R}")
    if not (cond >= 1.0):
        raise InvalidSpecError(f"condition number must be >= 1, got {cond}")
    if not (frob_sq > 0):
        raise InvalidSpecError(f"target Frobenius norm must be positive, got {frob_sq}")
    if R == 1:
        if cond != 1.0:
            raise InvalidSpecError("a rank-1 spectrum has condition number 1")
        return np.array([np.sqrt(frob_sq)])
    # s_i / s_1 = cond**(-(i-1)/(R-1)); computing the exponent directly keeps
    # s_1/s_R equal to cond up to a single rounding.
    shape = cond ** (-np.arange(R) / (R - 1))
    s1 = np.sqrt(frob_sq / np.sum(shape**2))
    return s1 * shape


def build_matrix(spec: MatrixSpec) -> SvdMatrix:
    ss = np.random.SeedSequence(spec.seed)
    su, sv = ss.spawn(2)
    U = haar_orthogonal(spec.M, np.random.default_rng(su))
    V = haar_orthogonal(spec.N, np.random.default_rng(sv))
    s = geometric_spectrum(min(spec.M, spec.N), spec.cond, spec.frob_sq)
    return SvdMatrix(U=U, V=V, s=s)


def draw_signal(params: BgParams, N: int, seed=None) -> np.ndarray:
    rng = _rng(seed)
    active = rng.random(N) < params.beta
    values = params.mu + np.sqrt(params.tau) * rng.standard_normal(N)
    return np.where(active, values, 0.0)


def calibrate_noise(matrix: SvdMatrix, params: BgParams, snr_db: float) -> float:
    """Noise precision giving ``E||Ax||^2 / E||w||^2 = 10**(snr_db/10)``.

    ``E||Ax||^2 = beta (mu^2 + tau) ||A||_F^2`` for i.i.d. coordinates and
    ``E||w||^2 = M / theta2``.
    """
    if not np.isfinite(snr_db):
        raise InvalidSpecError("snr_db must be finite")
    signal_energy = params.second_moment * matrix.frob_sq
    if signal_energy <= 0:
        raise InvalidSpecError("signal has zero expected energy")
    return 10.0 ** (snr_db / 10.0) * matrix.M / signal_energy


def synthesize(spec: MatrixSpec, params: BgParams, snr_db: float, seed=None,
               theta2_max: float = 1e18) -> ProblemInstance:
    """Draw a full problem ``y = A x + w``.

    The matrix uses ``spec.seed``; signal and noise are drawn from independent
    streams derived from ``seed`` (defaults to ``spec.seed``).
    """
    matrix = build_matrix(spec)
    seed = spec.seed if seed is None else seed
    sx, sw = np.random.SeedSequence([seed, 1]).spawn(2)
    x = draw_signal(params, spec.N, np.random.default_rng(sx))
    theta2 = min(calibrate_noise(matrix, params, snr_db), theta2_max)
    w = np.random.default_rng(sw).standard_normal(spec.M) / np.sqrt(theta2)
    Ax = matrix.matvec(x)
    y = Ax + w
    ax2 = float(Ax @ Ax)
    w2 = float(w @ w)
    realized = 10 * np.log10(ax2 / w2) if w2 > 0 and ax2 > 0 else float("inf")
    return ProblemInstance(
        matrix=matrix, x_true=x, w=w, y=y, theta1_true=params,
        theta2_true=theta2, snr_db=float(snr_db),
        meta={"realized_snr_db": realized, "seed": seed, "spec": spec},
    )
