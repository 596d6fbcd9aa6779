"""
Dense min-norm QP solver for CBF safety filters.

    minimise   1/2 ||u - u_nom||^2
    subject to C u >= b,  lo <= D u <= hi

D is an optional orthogonal box basis (identity when omitted) so that each
agent's box can live in its own frame.

Operator splitting in the OSQP form (fixed rho, over-relaxation), followed by an
active-set polish that solves the equality-constrained KKT system exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from utils.logger_config import get_logger

logger = get_logger(__name__)

FEAS_TOL = 1e-6
ACTIVE_TOL = 1e-5


class QPStatus(str, Enum):
    SOLVED = "solved"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class QPProblem:
    u_nom: np.ndarray  # (n,)
    C: np.ndarray  # (m, n)
    b: np.ndarray  # (m,)
    lo: np.ndarray  # (n,)
    hi: np.ndarray  # (n,)
    box_basis: np.ndarray | None = None  # (n, n) orthogonal, None = identity

    def __post_init__(self):
        u_nom = np.asarray(self.u_nom, dtype=np.float64).reshape(-1)
        n = u_nom.size
        object.__setattr__(self, "u_nom", u_nom)
        object.__setattr__(self, "C", np.asarray(self.C, dtype=np.float64).reshape(-1, n))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64).reshape(-1))
        lo = np.broadcast_to(np.asarray(self.lo, dtype=np.float64), (n,)).copy()
        hi = np.broadcast_to(np.asarray(self.hi, dtype=np.float64), (n,)).copy()
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if self.C.shape[0] != self.b.shape[0]:
            raise ValueError(f"constraint rows {self.C.shape[0]} != rhs length {self.b.shape[0]}")
        if self.box_basis is not None:
            D = np.asarray(self.box_basis, dtype=np.float64)
            if D.shape != (n, n) or not np.allclose(D @ D.T, np.eye(n), atol=1e-10):
                raise ValueError("box basis must be an orthogonal (n, n) matrix")
            object.__setattr__(self, "box_basis", D)

    def box_coords(self, u: np.ndarray) -> np.ndarray:
        return u if self.box_basis is None else self.box_basis @ u

    def project_box(self, u: np.ndarray) -> np.ndarray:
        """Euclidean projection onto the (possibly rotated) box."""
        if self.box_basis is None:
            return np.clip(u, self.lo, self.hi)
        return self.box_basis.T @ np.clip(self.box_basis @ u, self.lo, self.hi)

    @property
    def n(self) -> int:
        return self.u_nom.size

    @property
    def m(self) -> int:
        return self.b.size

    def violation(self, u: np.ndarray) -> float:
        """Largest constraint or bound violation (0 when feasible)."""
        worst = 0.0
        if self.m:
            worst = max(worst, float(np.max(self.b - self.C @ u)))
        w = self.box_coords(u)
        worst = max(worst, float(np.max(self.lo - w)), float(np.max(w - self.hi)))
        return worst

    def objective(self, u: np.ndarray) -> float:
        d = u - self.u_nom
        return 0.5 * float(d @ d)

    def stacked(self):
        """(A, l, u) with A = [C; D]."""
        D = np.eye(self.n) if self.box_basis is None else self.box_basis
        A = np.vstack([self.C, D])
        lower = np.concatenate([self.b, self.lo])
        upper = np.concatenate([np.full(self.m, np.inf), self.hi])
        return A, lower, upper


@dataclass
class QPResult:
    u: np.ndarray
    status: QPStatus
    iterations: int = 0
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    primal_residual: float = 0.0
    dual_residual: float = 0.0
    polished: bool = False

    @property
    def ok(self) -> bool:
        return self.status == QPStatus.SOLVED


def kkt_residuals(problem: QPProblem, u: np.ndarray, y: np.ndarray) -> dict:
    """Stationarity, primal feasibility, complementarity and dual-sign residuals (inf-norms)."""
    A, lower, upper = problem.stacked()
    Au = A @ u
    stationarity = np.abs(u - problem.u_nom + A.T @ y)
    primal = np.maximum(np.maximum(lower - Au, Au - upper), 0.0)
    y_low, y_up = np.minimum(y, 0.0), np.maximum(y, 0.0)
    comp_low = np.where(np.isfinite(lower), np.abs(y_low * (Au - lower)), np.abs(y_low))
    comp_up = np.where(np.isfinite(upper), np.abs(y_up * (Au - upper)), np.abs(y_up))
    return {
        "stationarity": float(stationarity.max(initial=0.0)),
        "primal": float(primal.max(initial=0.0)),
        "complementarity": float(np.maximum(comp_low, comp_up).max(initial=0.0)),
    }


def _polish(problem: QPProblem, A, lower, upper, x, z, y, passes: int = 8):
    """Solve the KKT system on the guessed active set, repairing the guess a few times."""
    n = problem.n
    low = (z - lower < ACTIVE_TOL) | (y < -ACTIVE_TOL)
    up = (upper - z < ACTIVE_TOL) | (y > ACTIVE_TOL)
    low &= np.isfinite(lower)
    up &= np.isfinite(upper) & ~low

    for _ in range(passes):
        active = np.flatnonzero(low | up)
        k = active.size
        Aa = A[active]
        target = np.where(low[active], lower[active], upper[active])
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = np.eye(n)
        kkt[:n, n:] = Aa.T
        kkt[n:, :n] = Aa
        rhs = np.concatenate([problem.u_nom, target])
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        x_p = sol[:n]
        y_p = np.zeros_like(y)
        y_p[active] = sol[n:]

        Ax = A @ x_p
        bad_sign = (low & (y_p > FEAS_TOL)) | (up & (y_p < -FEAS_TOL))
        violated = ((Ax < lower - FEAS_TOL) | (Ax > upper + FEAS_TOL)) & ~(low | up)
        if not bad_sign.any() and not violated.any():
            return x_p, y_p
        low &= ~bad_sign
        up &= ~bad_sign
        low |= violated & (Ax < lower)
        up |= violated & (Ax > upper) & ~low
    return None


def solve_qp(
    problem: QPProblem,
    rho: float = 0.1,
    sigma: float = 1e-6,
    alpha: float = 1.6,
    max_iter: int = 10_000,
    eps_abs: float = 1e-7,
    eps_rel: float = 1e-7,
    eps_pinf: float = 1e-7,
    polish: bool = True,
) -> QPResult:
    n, m = problem.n, problem.m
    u_nom = problem.u_nom
    if problem.violation(u_nom) <= 0.0:
        return QPResult(u=u_nom.copy(), status=QPStatus.SOLVED, y=np.zeros(m + n))

    # row-normalise the CBF rows; the box rows are already unit
    scale = np.ones(m + n)
    if m:
        norms = np.linalg.norm(problem.C, axis=1)
        scale[:m] = np.where(norms > 0, 1.0 / np.maximum(norms, 1e-300), 1.0)
    A, lower, upper = problem.stacked()
    A_s, lower_s, upper_s = A * scale[:, None], lower * scale, upper * scale

    q = -u_nom
    factor = cho_factor((1.0 + sigma) * np.eye(n) + rho * A_s.T @ A_s)

    x = problem.project_box(u_nom)
    z = np.clip(A_s @ x, lower_s, upper_s)
    y = np.zeros(m + n)
    best_x, best_violation = x.copy(), problem.violation(x)
    status = None
    r_prim = r_dual = np.inf

    it = 0
    for it in range(1, max_iter + 1):
        x_tilde = cho_solve(factor, sigma * x - q + A_s.T @ (rho * z - y))
        z_tilde = A_s @ x_tilde
        x_next = alpha * x_tilde + (1.0 - alpha) * x
        z_relaxed = alpha * z_tilde + (1.0 - alpha) * z
        z_next = np.clip(z_relaxed + y / rho, lower_s, upper_s)
        y_next = y + rho * (z_relaxed - z_next)

        dy = y_next - y
        x, z, y = x_next, z_next, y_next

        viol = problem.violation(x)
        if viol < best_violation:
            best_x, best_violation = x.copy(), viol

        Ax = A_s @ x
        r_prim = float(np.max(np.abs(Ax - z)))
        r_dual = float(np.max(np.abs(x + q + A_s.T @ y)))
        e_prim = eps_abs + eps_rel * max(np.max(np.abs(Ax)), np.max(np.abs(z)))
        e_dual = eps_abs + eps_rel * max(np.max(np.abs(x)), np.max(np.abs(A_s.T @ y)), np.max(np.abs(q)))
        if r_prim <= e_prim and r_dual <= e_dual:
            status = QPStatus.SOLVED
            break

        dy_norm = float(np.max(np.abs(dy)))
        if dy_norm > eps_pinf:
            pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
            unbounded_pos = np.isinf(upper_s) & (pos > eps_pinf * dy_norm)
            if not unbounded_pos.any():
                fin_up, fin_low = np.isfinite(upper_s), np.isfinite(lower_s)
                support = float(upper_s[fin_up] @ pos[fin_up]) + float(lower_s[fin_low] @ neg[fin_low])
                if (
                    np.max(np.abs(A_s.T @ dy)) <= eps_pinf * dy_norm
                    and support <= -eps_pinf * dy_norm
                ):
                    status = QPStatus.INFEASIBLE
                    break

    polished = False
    if polish and status != QPStatus.INFEASIBLE:
        out = _polish(problem, A_s, lower_s, upper_s, x, z, y)
        if out is not None:
            x, y = out
            polished = True

    x = problem.project_box(x)
    y = y * scale
    if problem.violation(x) <= FEAS_TOL:
        return QPResult(x, QPStatus.SOLVED, it, y, r_prim, r_dual, polished)

    if problem.violation(best_x) < problem.violation(x):
        x = problem.project_box(best_x)
    logger.debug(
        f"QP infeasible after {it} iterations (n={n}, m={m}, violation={problem.violation(x):.3g})"
    )
    return QPResult(x, QPStatus.INFEASIBLE, it, y, r_prim, r_dual, polished)
