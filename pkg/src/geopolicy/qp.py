"""Dense convex QP solver for small problems.

Solves  min 1/2 a' H a - f' a  subject to  C a >= d  with H symmetric
positive semidefinite, sized for tens of variables and ~100 rows.  The
method is an exchange active-set iteration: solve the equality-constrained
problem on the working set, drop the row with the most negative multiplier,
otherwise add the most violated row, repeat.  Equality subproblems are
solved by a null-space method with symmetric-eigendecomposition
pseudoinverses (cutoff 1e-10 relative), which yields the minimum-norm
minimizer when free directions remain.

If the iteration cap (3 (m + k) exchanges) is hit -- which covers both
cycling and genuinely infeasible rows -- the problem is re-solved with a
single shared slack variable `s >= 0` appended to every row and penalized
quadratically at 1e6; the result is reported as relaxed when the slack
exceeds 1e-8.  Identical inputs (including the warm start) produce
bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OPTIMAL = "optimal"
RELAXED = "relaxed"
RANK_DEFICIENT = "rank_deficient_free_directions"

EIG_CUTOFF = 1e-10
DUAL_TOL = 1e-10
FEAS_TOL = 1e-8
SLACK_PENALTY = 1e6


class QpStallError(RuntimeError):
    """Active-set iteration failed to settle; carries the best iterate."""

    def __init__(self, message: str, best: "QpSolution"):
        super().__init__(message)
        self.best = best


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    C: np.ndarray | None = None
    d: np.ndarray | None = None
    warm_start: np.ndarray | None = None
    trusted: bool = False  # skip input validation (caller-built symmetric data)

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        m = self.f.size
        if self.C is None:
            self.C = np.zeros((0, m))
            self.d = np.zeros(0)
        elif not self.trusted:
            self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
            self.d = np.atleast_1d(np.asarray(self.d, dtype=float))
        if self.trusted:
            return
        if self.H.shape != (m, m):
            raise ValueError("H must be square and match f")
        if np.max(np.abs(self.H - self.H.T)) > 1e-12 * (1.0 + np.max(np.abs(self.H))):
            raise ValueError("H must be symmetric")
        if self.C.shape != (self.d.size, m):
            raise ValueError("C/d shapes inconsistent with f")
        if self.C.size and not np.all(np.isfinite(self.C)):
            raise ValueError("constraint rows must be finite")

    @property
    def num_vars(self) -> int:
        return self.f.size

    @property
    def num_constraints(self) -> int:
        return self.d.size

    def objective(self, a: np.ndarray) -> float:
        a = np.asarray(a, dtype=float)
        return 0.5 * float(a @ self.H @ a) - float(self.f @ a)


@dataclass
class QpSolution:
    a: np.ndarray
    duals: np.ndarray
    status: str
    kkt: float
    iterations: int = 0
    max_slack: float = 0.0
    active_set: tuple[int, ...] = field(default_factory=tuple)


def _psd_eig(H: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Eigendecomposition with small negative eigenvalues clipped to zero."""
    w, v = np.linalg.eigh(0.5 * (H + H.T))
    top = max(float(w[-1]), 0.0)
    if w[0] < -1e-10 * max(top, 1.0):
        raise ValueError(f"H is not positive semidefinite (min eigenvalue {w[0]:.3e})")
    w = np.clip(w, 0.0, None)
    cutoff = EIG_CUTOFF * max(top, 1.0)
    kept = w > cutoff
    return w, v, bool(np.all(kept))


def psd_pinv_apply(H: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, bool]:
    """Minimum-norm solution of H x = b for symmetric PSD H.

    Returns ``(x, full_rank)``; components of ``b`` outside the numerical
    range of ``H`` are projected away.  Well-conditioned positive definite
    matrices take a Cholesky fast path; everything else falls back to the
    eigendecomposition with relative cutoff ``EIG_CUTOFF``.
    """
    shift = EIG_CUTOFF * max(float(np.trace(H)), 1.0)
    try:
        np.linalg.cholesky(H - shift * np.eye(H.shape[0]))
    except np.linalg.LinAlgError:
        pass
    else:
        return np.linalg.solve(H, b), True
    w, v, full = _psd_eig(H)
    cutoff = EIG_CUTOFF * max(float(w[-1]) if w.size else 0.0, 1.0)
    kept = w > cutoff
    if not np.any(kept):
        return np.zeros_like(b), False
    coeffs = (v[:, kept].T @ b) / w[kept]
    return v[:, kept] @ coeffs, full


def _equality_solve(problem: QpProblem, working: list[int]) -> tuple[np.ndarray, np.ndarray, bool]:
    """Minimize subject to the working rows as equalities (min-norm tie-break).

    Returns (a, duals_on_working, had_free_directions).
    """
    H, f = problem.H, problem.f
    m = problem.num_vars
    if not working:
        a, full = psd_pinv_apply(H, f)
        return a, np.zeros(0), not full
    cw = problem.C[working]
    dw = problem.d[working]
    t = len(working)
    # fast path: directly solve the KKT system when it is nonsingular
    kkt = np.zeros((m + t, m + t))
    kkt[:m, :m] = H
    kkt[:m, m:] = -cw.T
    kkt[m:, :m] = cw
    rhs = np.concatenate([f, dw])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        pass
    else:
        if np.all(np.isfinite(sol)) and np.max(
            np.abs(kkt @ sol - rhs)
        ) <= 1e-9 * (1.0 + np.max(np.abs(rhs))):
            return sol[:m], sol[m:], False
    u, s, vt = np.linalg.svd(cw, full_matrices=True)
    rank = int(np.sum(s > 1e-12 * (s[0] if s.size else 1.0)))
    a_part = vt[:rank].T @ ((u.T @ dw)[:rank] / s[:rank])
    free = False
    if rank < m:
        z = vt[rank:].T  # null-space basis of the working rows
        hz = z.T @ H @ z
        bz = z.T @ (f - H @ a_part)
        zz, full = psd_pinv_apply(hz, bz)
        a = a_part + z @ zz
        free = not full
    else:
        a = a_part
    lam, *_ = np.linalg.lstsq(cw.T, H @ a - f, rcond=None)
    return a, lam, free


def solve(problem: QpProblem, _allow_relax: bool = True) -> QpSolution:
    """Solve the QP; see the module docstring for the method and guarantees."""
    m = problem.num_vars
    k = problem.num_constraints
    try:
        np.linalg.cholesky(problem.H + 1e-14 * (1.0 + np.trace(problem.H)) * np.eye(m))
    except np.linalg.LinAlgError:
        _psd_eig(problem.H)  # validates PSD up to the tolerated clip

    d_scale = 1.0 + (np.max(np.abs(problem.d)) if k else 0.0)
    working: list[int] = []
    if problem.warm_start is not None and k:
        a0 = np.asarray(problem.warm_start, dtype=float)
        resid = problem.C @ a0 - problem.d
        working = [i for i in range(k) if abs(resid[i]) <= FEAS_TOL * d_scale]

    cap = 3 * (m + k) + 10
    infeasible = False
    for it in range(1, cap + 1):
        a, lam, free = _equality_solve(problem, working)
        # drop the most negative multiplier first
        if lam.size:
            worst_drop = int(np.argmin(lam))
            if lam[worst_drop] < -DUAL_TOL:
                working.pop(worst_drop)
                continue
        # then add the most violated row outside the working set
        resid = problem.C @ a - problem.d if k else np.zeros(0)
        candidates = [i for i in range(k) if i not in working]
        worst_add = -1
        worst_val = -FEAS_TOL * d_scale
        for i in candidates:
            if resid[i] < worst_val:
                worst_val = resid[i]
                worst_add = i
        if worst_add >= 0:
            cw = problem.C[working]
            c_new = problem.C[worst_add]
            if working:
                mu, res, *_ = np.linalg.lstsq(cw.T, c_new, rcond=None)
                dep = np.linalg.norm(cw.T @ mu - c_new) < 1e-10 * (1 + np.linalg.norm(c_new))
            else:
                mu, dep = np.zeros(0), False
            if dep:
                # the new normal is spanned by the working set: exchange via a
                # dual ratio step, or declare the rows jointly infeasible
                pos = [i for i in range(len(working)) if mu[i] > 1e-12]
                if not pos:
                    infeasible = True
                    break
                ratios = [lam[i] / mu[i] for i in pos]
                working.pop(pos[int(np.argmin(ratios))])
            working.append(worst_add)
            working.sort()
            continue
        duals = np.zeros(k)
        for idx, lam_i in zip(working, lam):
            duals[idx] = max(float(lam_i), 0.0)
        status = RANK_DEFICIENT if free else OPTIMAL
        sol = QpSolution(
            a=a,
            duals=duals,
            status=status,
            kkt=0.0,
            iterations=it,
            active_set=tuple(working),
        )
        sol.kkt = kkt_residual(problem, sol)
        return sol

    best_a, best_lam, _ = _equality_solve(problem, working)
    duals = np.zeros(k)
    for idx, lam_i in zip(working, best_lam):
        duals[idx] = max(float(lam_i), 0.0)
    best = QpSolution(best_a, duals, OPTIMAL, np.inf, cap, active_set=tuple(working))
    best.kkt = kkt_residual(problem, best)

    if _allow_relax and k:
        return _solve_relaxed(problem)
    raise QpStallError(f"active-set iteration exceeded {cap} exchanges", best)


def _solve_relaxed(problem: QpProblem) -> QpSolution:
    """Re-solve with one shared nonnegative slack on every row."""
    m, k = problem.num_vars, problem.num_constraints
    h_aug = np.zeros((m + 1, m + 1))
    h_aug[:m, :m] = problem.H
    h_aug[m, m] = SLACK_PENALTY
    f_aug = np.concatenate([problem.f, [0.0]])
    c_aug = np.zeros((k + 1, m + 1))
    c_aug[:k, :m] = problem.C
    c_aug[:k, m] = 1.0
    c_aug[k, m] = 1.0
    d_aug = np.concatenate([problem.d, [0.0]])
    warm = None
    if problem.warm_start is not None:
        warm = np.concatenate([problem.warm_start, [0.0]])
    aug = QpProblem(H=h_aug, f=f_aug, C=c_aug, d=d_aug, warm_start=warm)
    try:
        sol = solve(aug, _allow_relax=False)
    except QpStallError as err:
        inner = err.best
        best = QpSolution(
            inner.a[:m],
            inner.duals[:k],
            RELAXED,
            np.inf,
            inner.iterations,
            max_slack=float(inner.a[m]),
        )
        raise QpStallError("relaxed re-solve also stalled", best) from err
    slack = float(sol.a[m])
    status = RELAXED if slack > FEAS_TOL else sol.status
    out = QpSolution(
        a=sol.a[:m],
        duals=sol.duals[:k],
        status=status,
        kkt=0.0,
        iterations=sol.iterations,
        max_slack=max(slack, 0.0),
        active_set=tuple(i for i in sol.active_set if i < k),
    )
    out.kkt = kkt_residual(problem, out)
    return out


def kkt_residual(problem: QpProblem, solution: QpSolution) -> float:
    """Max violation over stationarity, primal feasibility (beyond any
    reported slack), dual nonnegativity, and complementary slackness."""
    a = np.asarray(solution.a, dtype=float)
    lam = np.asarray(solution.duals, dtype=float)
    stat = problem.H @ a - problem.f
    if problem.num_constraints:
        stat = stat - problem.C.T @ lam
        resid = problem.C @ a - problem.d
        primal = float(np.max(np.maximum(-resid - solution.max_slack, 0.0)))
        dual_neg = float(np.max(np.maximum(-lam, 0.0)))
        comp = float(np.max(np.abs(lam * (resid + solution.max_slack))))
    else:
        primal = dual_neg = comp = 0.0
    return max(float(np.max(np.abs(stat))), primal, dual_neg, comp)
