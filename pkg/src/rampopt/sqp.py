"""Constrained sequential quadratic programming with damped BFGS.

The optimizer is generic: it sees the problem only through callbacks
(objective, optional gradient, vector constraints with optional Jacobians)
and a box. Each iteration linearizes the constraints, solves a strictly
convex QP in least-squares form (reduced through equality elimination to
an inequality-constrained least-distance problem and finally to
nonnegative least squares), and line-searches an exact-penalty merit
function whose weights follow Powell's update. The Hessian approximation
uses Powell's damped BFGS formula, which keeps it positive definite.

Gradients default to one-sided finite differences with a relative step,
probing backward at an active upper bound so iterates never leave the
box. Objective evaluations are counted exactly: one for the starting
point, one per coordinate for every finite-difference gradient, and one
per line-search probe.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "SqpSettings",
    "SqpState",
    "SqpResult",
    "Constraint",
    "IterationRecord",
    "CallbackFailure",
    "QpInfeasible",
    "minimize",
    "bfgs_update",
    "solve_qp",
    "nnls",
]

_EPS = float(np.finfo(np.float64).eps)


class CallbackFailure(Exception):
    """A user callback raised; the message carries the iteration context."""


class QpInfeasible(Exception):
    """The linearized subproblem has no feasible point inside the box."""


@dataclass(frozen=True)
class SqpSettings:
    f_tol: float = 1e-8
    max_iter: int = 200
    fd_step: float = 1.49e-8          # relative forward-difference step
    central: bool = False             # central differences instead
    feas_tol: float = 1e-6
    penalty_growth: float = 2.0
    max_backtracks: int = 10
    armijo: float = 0.1
    stall_limit: int = 3              # consecutive line-search failures
    workers: int = 1
    restart: bool = True              # one retry with a fresh Hessian

    def __post_init__(self) -> None:
        if self.f_tol <= 0.0:
            raise ValueError("f_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.fd_step <= 0.0 or self.max_backtracks < 1:
            raise ValueError("bad line-search or differencing settings")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass
class Constraint:
    """c(x) = 0 for kind 'eq', c(x) >= 0 for kind 'ineq' (vector valued)."""

    kind: str
    fun: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("eq", "ineq"):
            raise ValueError("constraint kind must be 'eq' or 'ineq'")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    f: float
    max_violation: float
    step_norm: float
    evaluations: int
    merit: float


@dataclass
class SqpState:
    """Working state owned by a single minimize() call."""

    x: np.ndarray
    f: float
    grad: np.ndarray
    c_eq: np.ndarray
    c_in: np.ndarray
    jac_eq: np.ndarray
    jac_in: np.ndarray
    B: np.ndarray
    lam_eq: np.ndarray
    lam_in: np.ndarray
    iteration: int = 0
    evaluations: int = 0


@dataclass(frozen=True)
class SqpResult:
    x: np.ndarray
    f: float
    status: str
    iterations: int
    evaluations: int
    history: list[IterationRecord]
    max_violation: float
    kkt_residual: float

    @property
    def success(self) -> bool:
        return self.status == "Converged"


# ---------------------------------------------------------------------------
# Damped BFGS
# ---------------------------------------------------------------------------


def bfgs_update(B: np.ndarray, s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Powell-damped BFGS update; the result stays symmetric positive definite.

    When the curvature s.y falls below 0.2 s.Bs the gradient difference is
    blended with Bs so the damped product equals 0.2 s.Bs exactly.
    """
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.linalg.norm(s) == 0.0:
        return B
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 0.0:  # numerically lost definiteness; start over
        return np.eye(len(s))
    sy = float(s @ y)
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y = theta * y + (1.0 - theta) * Bs
        sy = float(s @ y)
    B_new = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
    return 0.5 * (B_new + B_new.T)


# ---------------------------------------------------------------------------
# Nonnegative least squares (Lawson-Hanson active set)
# ---------------------------------------------------------------------------


def nnls(A: np.ndarray, b: np.ndarray, max_iter: int | None = None):
    """Minimize ||A u - b|| subject to u >= 0. Returns (u, residual norm)."""
    m, n = A.shape
    if max_iter is None:
        max_iter = 3 * n + 30
    u = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    resid = b - A @ u
    w = A.T @ resid
    tol = 10.0 * _EPS * np.linalg.norm(A, 1) * (max(m, n) + 1)
    for _ in range(max_iter):
        if passive.all() or np.all(w[~passive] <= tol):
            break
        free = np.flatnonzero(~passive)
        passive[free[np.argmax(w[free])]] = True
        for _ in range(5 * n + 10):
            z = np.zeros(n)
            z[passive], *_ = np.linalg.lstsq(A[:, passive], b, rcond=None)
            if np.all(z[passive] > tol):
                u = z
                break
            mask = passive & (z <= tol)
            ratio = u[mask] / (u[mask] - z[mask])
            alpha = ratio.min()
            u = u + alpha * (z - u)
            passive &= u > tol
            u[~passive] = 0.0
        resid = b - A @ u
        w = A.T @ resid
    return u, float(np.linalg.norm(resid))


def _ldp(G: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Least distance: min ||w|| s.t. G w >= h, via dual NNLS."""
    if len(h) == 0:
        return np.zeros(G.shape[1])
    n = G.shape[1]
    E = np.vstack([G.T, h[None, :]])
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    u, _ = nnls(E, rhs)
    r = E @ u - rhs
    if abs(r[n]) < 1e-12:
        raise QpInfeasible("incompatible linearized inequality set")
    w = -r[:n] / r[n]
    return w


def solve_qp(
    B: np.ndarray,
    g: np.ndarray,
    jac_eq: np.ndarray,
    c_eq: np.ndarray,
    jac_in: np.ndarray,
    c_in: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
):
    """Direction d minimizing 0.5 d'Bd + g'd under linearized constraints.

    Constraints: jac_eq d + c_eq = 0, jac_in d + c_in >= 0 and the box
    lower <= d <= upper. Solved in least-squares form: a Cholesky factor
    turns the QP into a linear least-squares problem, equalities are
    eliminated through a QR basis of their null space, and the remaining
    inequality-constrained problem is reduced to a least-distance program
    solved by nonnegative least squares. Returns (d, mult_eq, mult_in,
    mult_box); inequality multipliers and the magnitudes stored in
    mult_box for active bounds are nonnegative.
    """
    n = len(g)
    L = np.linalg.cholesky(B)
    E = L.T
    f = -np.linalg.solve(L, g)

    rows = [jac_in] if jac_in.size else []
    rhs = [-c_in] if jac_in.size else []
    finite_lo = np.isfinite(lower)
    finite_up = np.isfinite(upper)
    eye = np.eye(n)
    if finite_lo.any():
        rows.append(eye[finite_lo])
        rhs.append(lower[finite_lo])
    if finite_up.any():
        rows.append(-eye[finite_up])
        rhs.append(-upper[finite_up])
    G = np.vstack(rows) if rows else np.empty((0, n))
    h = np.concatenate(rhs) if rhs else np.empty(0)

    m_eq = len(c_eq)
    if m_eq:
        Q, R = np.linalg.qr(jac_eq.T, mode="complete")
        R1 = R[:m_eq, :m_eq]
        if np.abs(np.diag(R1)).min() < 1e-12 * max(1.0, np.abs(R1).max()):
            raise QpInfeasible("equality linearizations are rank deficient")
        y1 = np.linalg.solve(R1.T, -c_eq)
        d0 = Q[:, :m_eq] @ y1
        Z = Q[:, m_eq:]
        if Z.shape[1] == 0:
            d = d0
            if (d < lower - 1e-9).any() or (d > upper + 1e-9).any():
                raise QpInfeasible("equalities pin the step outside the box")
            return (d, *_recover_multipliers(
                B, g, d, jac_eq, jac_in, c_in, lower, upper))
        E2 = E @ Z
        f2 = f - E @ d0
        G2 = G @ Z if len(h) else np.empty((0, Z.shape[1]))
        h2 = h - G @ d0 if len(h) else h
    else:
        d0 = np.zeros(n)
        Z = np.eye(n)
        E2, f2, G2, h2 = E, f, G, h

    # LSI -> LDP through a QR factorization of the full-column-rank E2
    Qe, Re = np.linalg.qr(E2)
    f_hat = Qe.T @ f2
    if len(h2):
        Gt = np.linalg.solve(Re.T, G2.T).T          # G2 Re^-1
        w = _ldp(Gt, h2 - Gt @ f_hat)
        z = np.linalg.solve(Re, w + f_hat)
    else:
        z = np.linalg.solve(Re, f_hat)
    d = d0 + Z @ z
    overshoot = max(
        float(np.maximum(lower - d, 0.0).max(initial=0.0)),
        float(np.maximum(d - upper, 0.0).max(initial=0.0)),
    )
    if overshoot > 1e-6 * max(1.0, float(np.abs(d).max())):
        raise QpInfeasible("least-distance phase lost the box constraints")
    d = np.clip(d, lower, upper)   # exact box compliance against roundoff
    return (d, *_recover_multipliers(B, g, d, jac_eq, jac_in, c_in, lower, upper))


def _recover_multipliers(B, g, d, jac_eq, jac_in, c_in, lower, upper):
    """Least-squares KKT multipliers on the active set at d."""
    n = len(d)
    grad_L = B @ d + g
    cols = [jac_eq.T] if jac_eq.size else []
    act_in = (
        np.flatnonzero(jac_in @ d + c_in <= 1e-8) if jac_in.size else np.empty(0, int)
    )
    if len(act_in):
        cols.append(jac_in[act_in].T)
    lo_act = np.flatnonzero(np.isfinite(lower) & (d <= lower + 1e-10))
    up_act = np.flatnonzero(np.isfinite(upper) & (d >= upper - 1e-10))
    eye = np.eye(n)
    if len(lo_act):
        cols.append(eye[lo_act].T)
    if len(up_act):
        cols.append(-eye[up_act].T)
    mult_eq = np.zeros(len(jac_eq) if jac_eq.size else 0)
    mult_in = np.zeros(len(jac_in) if jac_in.size else 0)
    mult_box = np.zeros(n)
    if cols:
        A = np.hstack(cols)
        m, *_ = np.linalg.lstsq(A, grad_L, rcond=None)
        k = len(mult_eq)
        mult_eq[:] = m[:k]
        if len(act_in):
            mult_in[act_in] = np.maximum(m[k:k + len(act_in)], 0.0)
            k += len(act_in)
        if len(lo_act):
            mult_box[lo_act] = np.maximum(m[k:k + len(lo_act)], 0.0)
            k += len(lo_act)
        if len(up_act):
            mult_box[up_act] = np.maximum(m[k:k + len(up_act)], 0.0)
    return mult_eq, mult_in, mult_box


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def _fd_points(x, lower, upper, rel_step, central):
    """Probe points and signed steps, flipped away from an active bound."""
    n = len(x)
    h = rel_step * np.maximum(1.0, np.abs(x))
    pts = []
    for i in range(n):
        hi = h[i]
        if not central and x[i] + hi > upper[i]:
            hi = -hi
        if central:
            pts.append((i, hi, x[i] + hi <= upper[i] and x[i] - hi >= lower[i]))
        else:
            pts.append((i, hi, True))
    return pts


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------


def _violation(c_eq: np.ndarray, c_in: np.ndarray) -> float:
    v = 0.0
    if len(c_eq):
        v = max(v, float(np.abs(c_eq).max()))
    if len(c_in):
        v = max(v, float(np.maximum(-c_in, 0.0).max()))
    return v


def _merit(f, c_eq, c_in, rho_eq, rho_in) -> float:
    val = f
    if len(c_eq):
        val += float(rho_eq @ np.abs(c_eq))
    if len(c_in):
        val += float(rho_in @ np.maximum(-c_in, 0.0))
    return val


class _Problem:
    """Callback plumbing: evaluation counting, FD sweeps, error context."""

    def __init__(self, fun, jac, constraints, lower, upper, settings):
        self.fun = fun
        self.jac = jac
        self.constraints = list(constraints)
        self.lower = lower
        self.upper = upper
        self.settings = settings
        self.evaluations = 0

    def _call(self, cb, x, what, iteration):
        try:
            return cb(np.array(x))
        except Exception as exc:  # noqa: BLE001 - context then re-raise
            raise CallbackFailure(
                f"{what} callback failed at iteration {iteration}: {exc}"
            ) from exc

    def objective(self, x, iteration) -> float:
        self.evaluations += 1
        return float(self._call(self.fun, x, "objective", iteration))

    def constraint_values(self, x, iteration):
        c_eq, c_in = [], []
        for k, con in enumerate(self.constraints):
            v = np.atleast_1d(
                np.asarray(self._call(con.fun, x, f"constraint[{k}]", iteration),
                           dtype=np.float64)
            )
            (c_eq if con.kind == "eq" else c_in).append(v)
        cat = lambda parts: np.concatenate(parts) if parts else np.empty(0)  # noqa: E731
        return cat(c_eq), cat(c_in)

    def derivatives(self, x, f0, c_eq0, c_in0, iteration):
        """Gradient and constraint Jacobians, sharing one FD sweep.

        Constraints with an explicit Jacobian use it; the objective and
        any remaining constraints are differenced at identical probe
        points so a memoizing model underneath runs once per point.
        """
        st = self.settings
        n = len(x)
        need_fd_f = self.jac is None
        fd_cons = [k for k, con in enumerate(self.constraints) if con.jac is None]

        grad = None
        if not need_fd_f:
            grad = np.asarray(
                self._call(self.jac, x, "gradient", iteration), dtype=np.float64
            )
        jacs: dict[int, np.ndarray] = {}
        for k, con in enumerate(self.constraints):
            if con.jac is not None:
                jacs[k] = np.atleast_2d(np.asarray(
                    self._call(con.jac, x, f"constraint[{k}] jacobian", iteration),
                    dtype=np.float64,
                ))

        if need_fd_f or fd_cons:
            base_c = {k: np.atleast_1d(np.asarray(
                self._call(self.constraints[k].fun, x, f"constraint[{k}]", iteration)
            )) for k in fd_cons}
            points = _fd_points(x, self.lower, self.upper, st.fd_step, st.central)
            cols_f = np.empty(n)
            cols_c = {k: np.empty((len(base_c[k]), n)) for k in fd_cons}

            def probe(item):
                i, hi, _ = item
                xp = np.array(x)
                xp[i] += hi
                fp = self.objective(xp, iteration) if need_fd_f else None
                cps = {k: np.atleast_1d(np.asarray(self._call(
                    self.constraints[k].fun, xp, f"constraint[{k}]", iteration
                ))) for k in fd_cons}
                if st.central:
                    xm = np.array(x)
                    xm[i] -= hi
                    fm = self.objective(xm, iteration) if need_fd_f else None
                    cms = {k: np.atleast_1d(np.asarray(self._call(
                        self.constraints[k].fun, xm, f"constraint[{k}]", iteration
                    ))) for k in fd_cons}
                    return i, hi, fp, cps, fm, cms
                return i, hi, fp, cps, None, None

            if st.workers > 1:
                with ThreadPoolExecutor(max_workers=st.workers) as pool:
                    results = list(pool.map(probe, points))
            else:
                results = [probe(p) for p in points]
            for i, hi, fp, cps, fm, cms in results:
                if st.central:
                    if need_fd_f:
                        cols_f[i] = (fp - fm) / (2.0 * hi)
                    for k in fd_cons:
                        cols_c[k][:, i] = (cps[k] - cms[k]) / (2.0 * hi)
                else:
                    if need_fd_f:
                        cols_f[i] = (fp - f0) / hi
                    for k in fd_cons:
                        cols_c[k][:, i] = (cps[k] - base_c[k]) / hi
            if need_fd_f:
                grad = cols_f
            for k in fd_cons:
                jacs[k] = cols_c[k]

        j_eq, j_in = [], []
        for k, con in enumerate(self.constraints):
            (j_eq if con.kind == "eq" else j_in).append(jacs[k])
        stack = lambda parts, m: (  # noqa: E731
            np.vstack(parts) if parts else np.empty((0, m)))
        return grad, stack(j_eq, n), stack(j_in, n)


def _as_bounds(bounds, n):
    if bounds is None:
        return np.full(n, -np.inf), np.full(n, np.inf)
    b = np.asarray(bounds, dtype=np.float64)
    if b.shape == (2,) and n != 2:
        b = np.tile(b, (n, 1))
    if b.shape != (n, 2):
        raise ValueError("bounds must be (n, 2) pairs or None")
    if (b[:, 0] > b[:, 1]).any():
        raise ValueError("lower bound exceeds upper bound")
    return b[:, 0].copy(), b[:, 1].copy()


def minimize(
    fun,
    x0,
    jac=None,
    constraints: Sequence[Constraint] = (),
    bounds=None,
    settings: SqpSettings | None = None,
    callback=None,
) -> SqpResult:
    """Minimize fun(x) subject to constraints and a box.

    Runs damped-BFGS SQP: each iterate solves a convex QP in the
    linearized constraints, then backtracks on an exact-penalty merit
    function until sufficient decrease. Terminates on the objective
    tolerance (with feasibility), on the iteration cap, or with
    ``NonsmoothStall`` when the line search keeps failing while the
    gradient is not negligible.
    """
    st = settings or SqpSettings()
    x0 = np.asarray(x0, dtype=np.float64)
    n = len(x0)
    lower, upper = _as_bounds(bounds, n)
    prob = _Problem(fun, jac, constraints, lower, upper, st)

    x = np.clip(x0, lower, upper)
    f = prob.objective(x, 0)
    c_eq, c_in = prob.constraint_values(x, 0)
    grad, j_eq, j_in = prob.derivatives(x, f, c_eq, c_in, 0)
    state = SqpState(
        x=x, f=f, grad=grad, c_eq=c_eq, c_in=c_in, jac_eq=j_eq, jac_in=j_in,
        B=np.eye(n), lam_eq=np.zeros(len(c_eq)), lam_in=np.zeros(len(c_in)),
    )
    rho_eq = np.zeros(len(c_eq))
    rho_in = np.zeros(len(c_in))
    history: list[IterationRecord] = []
    status = "NotConverged"
    stalls = 0
    restarted = not st.restart

    k = 0
    while k < st.max_iter:
        k += 1
        state.iteration = k
        d, mult_eq, mult_in, mult_box = _qp_with_relaxation(state, lower, upper)

        # Powell's penalty update keeps the merit exact for these multipliers
        if len(rho_eq):
            rho_eq = np.maximum(np.abs(mult_eq), 0.5 * (rho_eq + np.abs(mult_eq)))
        if len(rho_in):
            rho_in = np.maximum(np.abs(mult_in), 0.5 * (rho_in + np.abs(mult_in)))

        merit0 = _merit(state.f, state.c_eq, state.c_in, rho_eq, rho_in)
        # model reduction of the merit: penalty at the linearized
        # prediction minus penalty now (a relaxed step may remove only
        # part of the violation)
        descent = float(state.grad @ d)
        if len(state.c_eq):
            pred = state.c_eq + state.jac_eq @ d
            descent += float(rho_eq @ (np.abs(pred) - np.abs(state.c_eq)))
        if len(state.c_in):
            pred = state.c_in + state.jac_in @ d
            descent += float(rho_in @ (
                np.maximum(-pred, 0.0) - np.maximum(-state.c_in, 0.0)))
        if descent >= 0.0:
            descent = -float(d @ state.B @ d)

        alpha, f_new, c_eq_new, c_in_new, merit_new = _line_search(
            prob, state, d, merit0, descent, rho_eq, rho_in, st, k
        )

        if alpha == 0.0:
            stalls += 1
            history.append(IterationRecord(
                k, state.f, _violation(state.c_eq, state.c_in), 0.0,
                prob.evaluations, merit0))
            if (
                _violation(state.c_eq, state.c_in) <= st.feas_tol
                and _kkt_residual(state, lower, upper)
                <= np.sqrt(st.f_tol) * (1.0 + np.abs(state.grad).max())
            ):
                # stuck at the attainable floor of a stationary point
                status = "Converged"
                break
            if stalls >= st.stall_limit:
                if np.abs(state.grad).max() > np.sqrt(st.f_tol):
                    status = "NonsmoothStall"
                else:
                    status = "NotConverged"
                if not restarted:
                    restarted = True
                    state.B = np.eye(n)
                    rho_eq = np.zeros(len(rho_eq))
                    rho_in = np.zeros(len(rho_in))
                    stalls = 0
                    continue
                break
            continue
        stalls = 0

        assert merit_new <= merit0 + 1e-12 * max(1.0, abs(merit0)), \
            "line search accepted a merit increase"

        s = alpha * d
        f_prev = state.f
        state.x = np.clip(state.x + s, lower, upper)
        state.f = f_new
        state.c_eq, state.c_in = c_eq_new, c_in_new
        grad_new, j_eq_new, j_in_new = prob.derivatives(
            state.x, state.f, state.c_eq, state.c_in, k)

        y = grad_new - state.grad
        if len(mult_eq):
            y -= (j_eq_new - state.jac_eq).T @ mult_eq
        if len(mult_in):
            y -= (j_in_new - state.jac_in).T @ mult_in
        state.B = bfgs_update(state.B, s, y)
        state.grad, state.jac_eq, state.jac_in = grad_new, j_eq_new, j_in_new
        state.lam_eq, state.lam_in = mult_eq, mult_in

        viol = _violation(state.c_eq, state.c_in)
        step_norm = float(np.linalg.norm(s))
        history.append(IterationRecord(
            k, state.f, viol, step_norm, prob.evaluations,
            _merit(state.f, state.c_eq, state.c_in, rho_eq, rho_in)))
        if callback is not None:
            callback(history[-1])

        if (
            viol <= st.feas_tol
            and _kkt_residual(state, lower, upper)
            <= np.sqrt(st.f_tol) * (1.0 + np.abs(state.grad).max())
            and (
                abs(state.f - f_prev) <= st.f_tol * (1.0 + abs(state.f))
                or step_norm
                <= np.sqrt(st.f_tol) * (1.0 + np.linalg.norm(state.x))
            )
        ):
            status = "Converged"
            break

    state.evaluations = prob.evaluations
    kkt = _kkt_residual(state, lower, upper)
    return SqpResult(
        x=state.x.copy(), f=state.f, status=status, iterations=k,
        evaluations=prob.evaluations, history=history,
        max_violation=_violation(state.c_eq, state.c_in), kkt_residual=kkt,
    )


def _qp_with_relaxation(state: SqpState, lower, upper):
    """QP step with right-hand-side relaxation, then an elastic phase.

    When the full linearization is incompatible inside the box, only a
    fraction of the current violation is asked for; if even that fails,
    the constraints are made elastic (slack variables priced into the
    objective), which is always feasible and steers toward feasibility.
    """
    lo = lower - state.x
    up = upper - state.x
    for beta in (1.0, 0.9, 0.5, 0.1):
        c_eq = beta * state.c_eq
        c_in = np.where(state.c_in < 0.0, beta * state.c_in, state.c_in)
        try:
            return solve_qp(
                state.B, state.grad, state.jac_eq, c_eq,
                state.jac_in, c_in, lo, up,
            )
        except QpInfeasible:
            continue
        except np.linalg.LinAlgError:
            state.B = np.eye(len(state.x))
    return _elastic_qp(state, lo, up)


def _elastic_qp(state: SqpState, lo, up):
    """Relaxation phase: slacks absorb the linearized violation at a price.

    Solves min 0.5 d'Bd + g'd + gamma 1'v over (d, v >= 0) with
    jac_eq d + c_eq = v+ - v- and jac_in d + c_in + v_i >= 0; always
    feasible (d = 0 with v matching the violation), so steps exist even
    when the plain linearization is contradictory inside the box.
    """
    n = len(state.x)
    m_eq, m_in = len(state.c_eq), len(state.c_in)
    n_ext = n + 2 * m_eq + m_in
    gamma = 10.0 * (1.0 + float(np.abs(state.grad).max()))
    # slacks carry the average curvature: they sit on their lower
    # envelope anyway, and the subproblem stays well conditioned
    eps = max(float(np.trace(state.B)) / n, 1e-6)
    B_ext = np.eye(n_ext) * eps
    B_ext[:n, :n] = state.B
    g_ext = np.concatenate([state.grad, np.full(2 * m_eq + m_in, gamma)])
    jac_eq = np.hstack([
        state.jac_eq,
        -np.eye(m_eq), np.eye(m_eq),
        np.zeros((m_eq, m_in)),
    ]) if m_eq else np.empty((0, n_ext))
    jac_in = np.hstack([
        state.jac_in,
        np.zeros((m_in, 2 * m_eq)),
        np.eye(m_in),
    ]) if m_in else np.empty((0, n_ext))
    lo_ext = np.concatenate([lo, np.zeros(2 * m_eq + m_in)])
    up_ext = np.concatenate([up, np.full(2 * m_eq + m_in, np.inf)])
    d, mult_eq, mult_in, mult_box = solve_qp(
        B_ext, g_ext, jac_eq, state.c_eq, jac_in, state.c_in, lo_ext, up_ext)
    return d[:n], mult_eq, mult_in, mult_box[:n]


def _line_search(prob, state, d, merit0, descent, rho_eq, rho_in, st, iteration):
    alpha = 1.0
    for _ in range(st.max_backtracks):
        x_try = state.x + alpha * d
        f_try = prob.objective(x_try, iteration)
        c_eq_t, c_in_t = prob.constraint_values(x_try, iteration)
        merit_t = _merit(f_try, c_eq_t, c_in_t, rho_eq, rho_in)
        if merit_t <= merit0 + st.armijo * alpha * descent:
            return alpha, f_try, c_eq_t, c_in_t, merit_t
        alpha *= 0.5
    return 0.0, state.f, state.c_eq, state.c_in, merit0


def _kkt_residual(state: SqpState, lower, upper) -> float:
    """Infinity norm of the projected first-order optimality residual."""
    r = state.grad.copy()
    if len(state.lam_eq):
        r -= state.jac_eq.T @ state.lam_eq
    if len(state.lam_in):
        r -= state.jac_in.T @ state.lam_in
    # at an active box bound the residual may point out of the box
    at_lo = state.x <= lower + 1e-12
    at_up = state.x >= upper - 1e-12
    r[at_lo] = np.minimum(r[at_lo], 0.0)
    r[at_up] = np.maximum(r[at_up], 0.0)
    comp = 0.0
    if len(state.lam_in):
        comp = float(np.abs(state.lam_in * state.c_in).max())
    return max(float(np.abs(r).max()), comp)
