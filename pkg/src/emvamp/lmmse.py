"""Gaussian (LMMSE) belief under the quadratic likelihood and the noise EM update.

The belief is ``b2(x) ∝ exp(-theta2/2 ||y - Ax||^2 - gamma2/2 ||x - r2||^2)``
with precision matrix ``Q = theta2 A^T A + gamma2 I``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import SvdMatrix

THETA2_MIN = 1e-12
THETA2_MAX = 1e18

RESIDUAL_MODES = ("paper_r2", "posterior_mean")
NORMALIZATION_MODES = ("paper_N", "ml_M")


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class LmmseOutput:
    """Moments of the Gaussian belief.

    ``resid_energy`` is ``E||y - Ax||^2`` under the belief, i.e.
    ``||y - A xhat||^2 + trace``; ``resid_energy_r2`` replaces ``xhat`` by
    the incoming ``r2``.  ``trace`` is ``Tr(A Q^{-1} A^T)``.
    """

    xhat: np.ndarray
    eta: float
    resid_energy: float
    resid_energy_r2: float
    trace: float


class LmmseWorkspace:
    """SVD-side precomputation for a fixed ``(A, y)`` pair."""

    def __init__(self, matrix: SvdMatrix, y: np.ndarray):
        self.matrix = matrix
        self.y = np.asarray(y, dtype=float)
        R = matrix.R
        self.VR = matrix.V[:, :R]
        self.s = matrix.s
        self.s_sq = matrix.s**2
        ytil = matrix.U.T @ self.y
        self.ytil = ytil
        self.ytil_R = ytil[:R]
        # energy of y outside the range of A (nonzero only when M > N)
        self.tail_sq = float(ytil[R:] @ ytil[R:])
        self.y_norm_sq = float(self.y @ self.y)

    @property
    def M(self) -> int:
        return self.matrix.M

    @property
    def N(self) -> int:
        return self.matrix.N

    def residual_sq(self, x: np.ndarray) -> float:
        """``||y - A x||^2`` evaluated in the U basis."""
        e = self.ytil_R - self.s * (self.VR.T @ x)
        return float(e @ e) + self.tail_sq

    def trace_AQinvAT(self, gamma2: float, theta2: float) -> float:
        return float(np.sum(self.s_sq / (theta2 * self.s_sq + gamma2)))


def lmmse_direct(A: np.ndarray, y: np.ndarray, r2: np.ndarray, gamma2: float,
                 theta2: float) -> LmmseOutput:
    """Dense reference solve with an explicit ``Q^{-1}``."""
    A = np.asarray(A, dtype=float)
    N = A.shape[1]
    Q = theta2 * A.T @ A + gamma2 * np.eye(N)
    w = np.linalg.eigvalsh(Q)
    if w[0] <= 0 or w[0] < 1e-14 * max(w[-1], 1.0):
        raise SingularSystemError(f"Q is singular (min eigenvalue {w[0]:.3e})")
    Qinv = np.linalg.inv(Q)
    xhat = Qinv @ (theta2 * A.T @ y + gamma2 * r2)
    trace = float(np.trace(A @ Qinv @ A.T))
    res = y - A @ xhat
    res_r = y - A @ r2
    return LmmseOutput(
        xhat=xhat,
        eta=N / float(np.trace(Qinv)),
        resid_energy=float(res @ res) + trace,
        resid_energy_r2=float(res_r @ res_r) + trace,
        trace=trace,
    )


def lmmse_svd(ws: LmmseWorkspace, r2: np.ndarray, gamma2: float, theta2: float) -> LmmseOutput:
    """Same contract as :func:`lmmse_direct` using two products with ``V_R``.

    In the right singular basis ``Q`` is diagonal with entries
    ``theta2 s_i^2 + gamma2`` on the range and ``gamma2`` on the complement,
    so ``xhat = r2 + V_R [theta2 s d (ytil - s V_R^T r2)]``.
    """
    N, R = ws.N, ws.matrix.R
    if gamma2 <= 0 and (N > R or theta2 <= 0):
        raise SingularSystemError("gamma2 <= 0 leaves Q singular on the null space of A")
    d = 1.0 / (theta2 * ws.s_sq + gamma2)
    z = ws.VR.T @ r2
    e_r = ws.ytil_R - ws.s * z
    corr = theta2 * ws.s * d * e_r
    xhat = r2 + ws.VR @ corr
    e_x = e_r - ws.s * corr
    trace = float(np.sum(ws.s_sq * d))
    trace_Qinv = float(np.sum(d)) + (N - R) / gamma2
    return LmmseOutput(
        xhat=xhat,
        eta=N / trace_Qinv,
        resid_energy=float(e_x @ e_x) + ws.tail_sq + trace,
        resid_energy_r2=float(e_r @ e_r) + ws.tail_sq + trace,
        trace=trace,
    )


def em_update_theta2(ws: LmmseWorkspace, r2: np.ndarray, gamma2: float, theta2_old: float,
                     residual: str = "paper_r2", normalization: str = "paper_N") -> float:
    """One EM update of the noise precision.

    ``1/theta2_new = E||y - Ax||^2 / n`` with ``Q`` built from
    ``theta2_old``.  ``residual`` selects the expansion point of the
    residual norm (``r2`` or the belief mean) and ``normalization`` the
    divisor ``n`` (``N`` or ``M``).
    """
    if residual not in RESIDUAL_MODES:
        raise ValueError(f"unknown residual mode {residual!r}")
    if normalization not in NORMALIZATION_MODES:
        raise ValueError(f"unknown normalization mode {normalization!r}")
    if not (theta2_old > 0) or not (gamma2 > 0):
        raise ValueError("theta2_old and gamma2 must be positive")
    out = lmmse_svd(ws, r2, gamma2, theta2_old)
    energy = out.resid_energy_r2 if residual == "paper_r2" else out.resid_energy
    n = ws.N if normalization == "paper_N" else ws.M
    if energy <= n / THETA2_MAX:
        return THETA2_MAX
    return float(np.clip(n / energy, THETA2_MIN, THETA2_MAX))


@dataclass(frozen=True)
class Theta2Result:
    theta2: float
    n_iter: int
    converged: bool


def iterate_theta2(ws: LmmseWorkspace, r2: np.ndarray, gamma2: float, theta2_init: float,
                   tol: float = 1e-6, max_inner: int = 100, residual: str = "paper_r2",
                   normalization: str = "paper_N") -> Theta2Result:
    """Repeat :func:`em_update_theta2` until the relative change is below ``tol``."""
    if not (tol > 0):
        raise ValueError("tol must be positive")
    theta = theta2_init
    best, best_step = theta, np.inf
    for it in range(1, max_inner + 1):
        new = em_update_theta2(ws, r2, gamma2, theta, residual, normalization)
        step = abs(new - theta) / theta
        theta = new
        if step < best_step:
            best, best_step = theta, step
        if step <= tol:
            return Theta2Result(theta, it, True)
    return Theta2Result(best, max_inner, False)
