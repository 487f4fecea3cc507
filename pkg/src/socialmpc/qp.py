"""Convex QP solver: operator splitting (ADMM) with Ruiz scaling, adaptive
penalty, infeasibility detection and active-set polishing.

Solves   min ½ xᵀPx + qᵀx   s.t.  Aeq x = beq,  bin_lo ≤ Ain x ≤ bin_hi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

RHO_MIN, RHO_MAX = 1e-6, 1e6
EQ_RHO_FACTOR = 1e3
SIGMA = 1e-6
ALPHA = 1.6
DENSE_LIMIT = 800


class QpError(ValueError):
    pass


def _mat(M, n_cols: int) -> np.ndarray | sp.csr_matrix:
    if M is None:
        return np.zeros((0, n_cols))
    return M.tocsr().astype(float) if sp.issparse(M) else np.atleast_2d(np.asarray(M, dtype=float))


@dataclass
class QpProblem:
    P: np.ndarray | sp.spmatrix
    q: np.ndarray
    Aeq: np.ndarray | sp.spmatrix | None = None
    beq: np.ndarray | None = None
    Ain: np.ndarray | sp.spmatrix | None = None
    bin_lo: np.ndarray | None = None
    bin_hi: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        self.P = _mat(self.P, n)
        if self.P.shape != (n, n):
            raise QpError(f"P must be {n}x{n}, got {self.P.shape}")
        asym = abs(self.P - self.P.T)
        if (asym.max() if asym.shape[0] else 0.0) > 1e-10:
            raise QpError("P must be symmetric")
        self.Aeq = _mat(self.Aeq, n)
        self.beq = np.zeros(0) if self.beq is None else np.asarray(self.beq, dtype=float).ravel()
        self.Ain = _mat(self.Ain, n)
        m_in = self.Ain.shape[0]
        self.bin_lo = np.full(m_in, -np.inf) if self.bin_lo is None else np.asarray(self.bin_lo, float).ravel()
        self.bin_hi = np.full(m_in, np.inf) if self.bin_hi is None else np.asarray(self.bin_hi, float).ravel()
        if self.Aeq.shape[1] != n or self.Ain.shape[1] != n:
            raise QpError("constraint matrices must have one column per variable")
        if self.beq.size != self.Aeq.shape[0]:
            raise QpError("beq length must match Aeq rows")
        if self.bin_lo.size != m_in or self.bin_hi.size != m_in:
            raise QpError("inequality bounds must match Ain rows")
        if np.any(self.bin_lo > self.bin_hi):
            raise QpError("inequality lower bound exceeds upper bound")

    @property
    def n(self) -> int:
        return self.q.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x)

    def stacked(self):
        """Constraints as one two-sided system l ≤ A x ≤ u (equalities first)."""
        if sp.issparse(self.Aeq) or sp.issparse(self.Ain):
            A = sp.vstack([sp.csr_matrix(self.Aeq), sp.csr_matrix(self.Ain)], format="csr")
        else:
            A = np.vstack([self.Aeq, self.Ain])
        lo = np.concatenate([self.beq, self.bin_lo])
        hi = np.concatenate([self.beq, self.bin_hi])
        return A, lo, hi


@dataclass
class QpSolution:
    x: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    iterations: int
    y_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    objective: float = float("nan")
    polished: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def kkt_residuals(p: QpProblem, x: np.ndarray, y_eq: np.ndarray, y_in: np.ndarray) -> dict[str, float]:
    """Stationarity, primal feasibility and complementarity residuals (inf-norms)."""
    stat = p.P @ x + p.q
    if p.Aeq.shape[0]:
        stat = stat + p.Aeq.T @ y_eq
    if p.Ain.shape[0]:
        stat = stat + p.Ain.T @ y_in
    prim = 0.0
    comp = 0.0
    if p.Aeq.shape[0]:
        prim = max(prim, float(np.abs(p.Aeq @ x - p.beq).max()))
    if p.Ain.shape[0]:
        ax = p.Ain @ x
        prim = max(prim, float(np.maximum(p.bin_lo - ax, 0).max()), float(np.maximum(ax - p.bin_hi, 0).max()))
        lo_gap = np.where(np.isfinite(p.bin_lo), ax - p.bin_lo, np.inf)
        hi_gap = np.where(np.isfinite(p.bin_hi), p.bin_hi - ax, np.inf)
        neg, pos = np.minimum(y_in, 0.0), np.maximum(y_in, 0.0)
        c = np.maximum(np.abs(neg * np.where(np.isfinite(lo_gap), lo_gap, 0.0)) + np.where(np.isfinite(lo_gap), 0.0, np.abs(neg) * 1e20),
                       np.abs(pos * np.where(np.isfinite(hi_gap), hi_gap, 0.0)) + np.where(np.isfinite(hi_gap), 0.0, np.abs(pos) * 1e20))
        comp = float(c.max()) if c.size else 0.0
    return {"stationarity": float(np.abs(stat).max()) if stat.size else 0.0,
            "primal": prim, "complementarity": comp}


# --------------------------------------------------------------------------- #
# scaling

def _col_inf(M) -> np.ndarray:
    if sp.issparse(M):
        return np.asarray(abs(M).max(axis=0).todense()).ravel() if M.shape[0] else np.zeros(M.shape[1])
    return np.abs(M).max(axis=0) if M.shape[0] else np.zeros(M.shape[1])


def _row_inf(M) -> np.ndarray:
    if sp.issparse(M):
        return np.asarray(abs(M).max(axis=1).todense()).ravel() if M.shape[1] else np.zeros(M.shape[0])
    return np.abs(M).max(axis=1) if M.shape[1] else np.zeros(M.shape[0])


def _diag_scale(M, left: np.ndarray | None, right: np.ndarray | None):
    if sp.issparse(M):
        if left is not None:
            M = sp.diags(left) @ M
        if right is not None:
            M = M @ sp.diags(right)
        return M.tocsr()
    if left is not None:
        M = left[:, None] * M
    if right is not None:
        M = M * right[None, :]
    return M


def _ruiz(P, q, A, iters: int = 15):
    n, m = q.size, A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    for _ in range(iters):
        cn = np.maximum(_col_inf(P), _col_inf(A) if m else 0.0)
        d = 1.0 / np.sqrt(np.clip(np.where(cn == 0, 1.0, cn), 1e-4, 1e4))
        e = 1.0 / np.sqrt(np.clip(np.where(_row_inf(A) == 0, 1.0, _row_inf(A)), 1e-4, 1e4)) if m else np.ones(0)
        P = _diag_scale(P, d, d)
        A = _diag_scale(A, e, d) if m else A
        q = q * d
        D *= d
        E *= e
    pn = _col_inf(P).mean() if n else 0.0
    c = 1.0 / np.clip(max(pn, np.abs(q).max() if n else 0.0, 1e-12), 1e-4, 1e4)
    return P * c, q * c, A, D, E, c


# --------------------------------------------------------------------------- #
# linear system

class _Reduced:
    """Factorization of P + σI + Aᵀ diag(ρ) A."""

    def __init__(self, P, A, rho: np.ndarray, sigma: float):
        self.dense = not sp.issparse(P)
        n = P.shape[0]
        if self.dense:
            K = P + sigma * np.eye(n) + (A.T * rho) @ A if A.shape[0] else P + sigma * np.eye(n)
            shift = 0.0
            while True:
                try:
                    self.f = la.cho_factor(K + shift * np.eye(n), check_finite=False)
                    break
                except la.LinAlgError:
                    shift = max(1e-10, shift * 10)
                    if shift > 1e6:
                        raise QpError("reduced KKT matrix is not positive definite")
        else:
            K = (P + sigma * sp.identity(n) + A.T @ sp.diags(rho) @ A).tocsc()
            self.f = spla.splu(K)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return la.cho_solve(self.f, b, check_finite=False) if self.dense else self.f.solve(b)


# --------------------------------------------------------------------------- #
# solver

def solve(p: QpProblem, tol: float = 1e-6, max_iter: int = 20000, x0: np.ndarray | None = None,
          rho: float = 0.1, polish: bool = True, check_every: int = 10, adapt_every: int = 50,
          polish_every: int = 500) -> QpSolution:
    n = p.n
    A, lo, hi = p.stacked()
    m = A.shape[0]
    m_eq = p.Aeq.shape[0]
    P = p.P
    if not sp.issparse(P) and (sp.issparse(A) and n > DENSE_LIMIT):
        P = sp.csr_matrix(P)
    if sp.issparse(P) and n <= DENSE_LIMIT:
        P = P.toarray()
    if not sp.issparse(P) and sp.issparse(A):
        A = A.toarray()
    if sp.issparse(P) and not sp.issparse(A):
        A = sp.csr_matrix(A)
    Ps, qs, As, D, E, c = _ruiz(P, p.q, A)
    los = np.where(np.isfinite(lo), lo * E, -np.inf)
    his = np.where(np.isfinite(hi), hi * E, np.inf)
    eq_mask = (his - los) < 1e-12
    free_mask = ~np.isfinite(los) & ~np.isfinite(his)

    def rho_vec(r):
        v = np.full(m, r)
        v[eq_mask] = r * EQ_RHO_FACTOR
        v[free_mask] = RHO_MIN
        return v

    rho = float(np.clip(rho, RHO_MIN, RHO_MAX))
    rv = rho_vec(rho)
    K = _Reduced(Ps, As, rv, SIGMA)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / D
    z = np.clip(As @ x, los, his) if m else np.zeros(0)
    y = np.zeros(m)
    status = "max_iter"
    it = 0
    best = None
    eps_pinf = 1e-7

    def residuals(x, z, y):
        Ax = As @ x if m else np.zeros(0)
        Px = Ps @ x
        Aty = As.T @ y if m else np.zeros(n)
        r_p = float(np.abs((Ax - z) / E).max()) if m else 0.0
        r_d = float(np.abs((Px + qs + Aty) / D).max() / c) if n else 0.0
        sc_p = max(float(np.abs(Ax / E).max()) if m else 0.0, float(np.abs(z / E).max()) if m else 0.0)
        sc_d = max(float(np.abs(Px / D).max()), float(np.abs(Aty / D).max()), float(np.abs(qs / D).max())) / c
        return r_p, r_d, sc_p, sc_d

    r_p = r_d = np.inf
    for it in range(1, max_iter + 1):
        rhs = SIGMA * x - qs + (As.T @ (rv * z - y) if m else 0.0)
        xt = K.solve(rhs)
        zt = As @ xt if m else np.zeros(0)
        x_new = ALPHA * xt + (1 - ALPHA) * x
        zr = ALPHA * zt + (1 - ALPHA) * z
        z_new = np.clip(zr + y / rv, los, his) if m else z
        y_new = y + rv * (zr - z_new)
        dy = y_new - y
        x, z, y = x_new, z_new, y_new
        if it % check_every and it != max_iter:
            continue
        r_p, r_d, sc_p, sc_d = residuals(x, z, y)
        if best is None or max(r_p, r_d) < best[0]:
            best = (max(r_p, r_d), x.copy(), z.copy(), y.copy(), r_p, r_d)
        if r_p <= tol + tol * sc_p and r_d <= tol + tol * sc_d:
            status = "optimal"
            break
        if m and _primal_infeasible(As, los, his, dy, E, eps_pinf):
            status = "infeasible"
            break
        if polish and it % polish_every == 0:
            # slow tail on degenerate problems: accept an active-set solve that
            # meets the KKT tolerances outright
            y_out = E * y / c
            trial = QpSolution(D * x, "optimal", r_p, r_d, it, y_out[:m_eq], y_out[m_eq:])
            _polish(p, trial, z / E, tol)
            if trial.polished and max(kkt_residuals(p, trial.x, trial.y_eq, trial.y_in).values()) <= tol:
                trial.objective = p.objective(trial.x)
                res = kkt_residuals(p, trial.x, trial.y_eq, trial.y_in)
                trial.primal_residual, trial.dual_residual = res["primal"], res["stationarity"]
                return trial
        if it % adapt_every == 0 and r_d > 0 and sc_p > 0:
            ratio = np.sqrt((r_p / max(sc_p, 1e-12)) / max(r_d / max(sc_d, 1e-12), 1e-30))
            new_rho = float(np.clip(rho * ratio, RHO_MIN, RHO_MAX))
            if new_rho > 5 * rho or new_rho < 0.2 * rho:
                rho = new_rho
                rv = rho_vec(rho)
                K = _Reduced(Ps, As, rv, SIGMA)
    if status == "max_iter" and best is not None:
        _, x, z, y, r_p, r_d = best
    x_out = D * x
    y_out = E * y / c
    sol = QpSolution(x_out, status, r_p, r_d, it, y_out[:m_eq], y_out[m_eq:])
    if status == "optimal" and polish:
        _polish(p, sol, z / E, tol)
    if status == "optimal":
        res = kkt_residuals(p, sol.x, sol.y_eq, sol.y_in)
        sol.primal_residual = res["primal"]
        sol.dual_residual = res["stationarity"]
    sol.objective = p.objective(sol.x)
    return sol


def _primal_infeasible(A, lo, hi, dy, E, eps) -> bool:
    nd = np.abs(dy).max()
    if nd < 1e-30:
        return False
    dy = dy / nd
    if np.abs(A.T @ dy).max() > eps:
        return False
    supp = np.sum(np.where(np.isfinite(hi), hi, 0.0) * np.maximum(dy, 0)
                  + np.where(np.isfinite(lo), lo, 0.0) * np.minimum(dy, 0))
    unbounded = np.any((dy > eps) & ~np.isfinite(hi)) or np.any((dy < -eps) & ~np.isfinite(lo))
    return (not unbounded) and supp < -eps


def _polish(p: QpProblem, sol: QpSolution, z: np.ndarray, tol: float, delta: float = 1e-9,
            refinements: int = 5) -> None:
    """Solve the equality-constrained QP on the guessed active set and keep the
    result if its KKT residuals are no worse.

    Rows the active-set solution violates are added to the set and the solve
    repeated, so a guess taken from a loosely converged iterate can recover."""
    n = p.n
    m_eq = p.Aeq.shape[0]
    A, lo, hi = p.stacked()
    A = A.toarray() if sp.issparse(A) else A
    P = p.P.toarray() if sp.issparse(p.P) else p.P
    y = np.concatenate([sol.y_eq, sol.y_in])
    idx = np.arange(A.shape[0])
    lower = (z - lo < -y) & np.isfinite(lo)
    upper = (hi - z < y) & np.isfinite(hi)
    lower[:m_eq] = True
    upper[:m_eq] = False
    for _ in range(refinements + 1):
        found = _active_set_solve(P, p.q, A, lo, hi, lower, upper, delta)
        if found is None:
            return
        x_p, y_full = found
        ax = A @ x_p
        over_lo = (ax < lo - 1e-12 * (1 + np.abs(lo))) & ~lower & ~upper
        over_hi = (ax > hi + 1e-12 * (1 + np.abs(hi))) & ~lower & ~upper
        if not (over_lo.any() or over_hi.any()):
            break
        lower |= over_lo
        upper |= over_hi
    # multipliers with the wrong sign mean a wrong active-set guess
    if np.any(y_full[lower & (idx >= m_eq)] > 1e-9) or np.any(y_full[upper] < -1e-9):
        return
    before = kkt_residuals(p, sol.x, sol.y_eq, sol.y_in)
    after = kkt_residuals(p, x_p, y_full[:m_eq], y_full[m_eq:])
    if (max(after.values()) <= max(max(before.values()), tol)
            and after["primal"] <= max(before["primal"], tol)):
        sol.x = x_p
        sol.y_eq = y_full[:m_eq]
        sol.y_in = y_full[m_eq:]
        sol.polished = True


def _active_set_solve(P, q, A, lo, hi, lower, upper, delta):
    """Regularised KKT solve with the rows in ``lower``/``upper`` held at their
    bounds; iterative refinement removes the regularisation bias."""
    n = P.shape[0]
    act = np.flatnonzero(lower | upper)
    b = np.where(lower, lo, hi)[act]
    Aa = A[act]
    na = act.size
    if n + na > 6000:
        return None
    Kmat = np.block([[P + delta * np.eye(n), Aa.T], [Aa, -delta * np.eye(na)]])
    rhs = np.concatenate([-q, b])
    try:
        lu = la.lu_factor(Kmat, check_finite=False)
    except (la.LinAlgError, ValueError):
        return None
    Ktrue = np.block([[P, Aa.T], [Aa, np.zeros((na, na))]])
    sol_v = la.lu_solve(lu, rhs, check_finite=False)
    for _ in range(5):
        sol_v = sol_v + la.lu_solve(lu, rhs - Ktrue @ sol_v, check_finite=False)
    if not np.all(np.isfinite(sol_v)):
        return None
    y_full = np.zeros(A.shape[0])
    y_full[act] = sol_v[n:]
    return sol_v[:n], y_full
