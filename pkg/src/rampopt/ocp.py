"""Activation-schedule optimal control over the coupled forward model.

The decision vector stacks the two control schedules at the N time knots:
gas temperature first, rotation speed second, nondimensionalized
(temperature by 1000 degC, rotation by 60 Hz; the objective, peak von
Mises stress, by 1000 MPa) so the optimizer sees O(1) quantities. The
objective is the maximum of the von Mises stress over all element
vertices and all knots. Constraints: a one-sided rate limit on the
rotation increments (acceleration only, measured from rest), terminal
targets on the final gas temperature (inequality), final rotation
(equality) and final maximum material temperature (inequality), plus the
box bounds.

Only the objective and the final-temperature constraint need the finite
element model; the rest are linear with analytic Jacobians. Forward runs
are memoized by the packed vector, so a finite-difference sweep shared
between the objective and the nonlinear constraint costs exactly 2N
model evaluations.
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import heat, linsolve, sqp, stress
from .fem import MaterialProperties
from .mesh import Mesh, promote_to_p2

__all__ = [
    "ControlSchedule",
    "OcpProblem",
    "EvaluationRecord",
    "GradientBundle",
    "ForwardModel",
    "ForwardModelFailure",
    "InfeasibleRateLimit",
    "OptimizationDriver",
    "evaluate",
    "fd_gradient",
    "finite_difference",
    "initial_guess",
    "rate_residuals",
    "pack",
    "unpack",
]

STRESS_SCALE = 1000.0   # MPa
TEMP_SCALE = 1000.0     # degC
OMEGA_SCALE = 60.0      # Hz
DEFAULT_FD_STEP = 1.49e-8


class ForwardModelFailure(Exception):
    """A forward solve did not produce a usable state."""


class InfeasibleRateLimit(Exception):
    """The rate limit cannot reach the terminal rotation in the horizon."""


@dataclass(frozen=True)
class ControlSchedule:
    """Knot values of the two controls; knot n sits at time (n+1) dt."""

    t_e: np.ndarray    # (N,) gas temperature, degC
    omega: np.ndarray  # (N,) rotation speed, Hz
    dt: float

    def __post_init__(self) -> None:
        t_e = np.ascontiguousarray(np.asarray(self.t_e, dtype=np.float64))
        om = np.ascontiguousarray(np.asarray(self.omega, dtype=np.float64))
        object.__setattr__(self, "t_e", t_e)
        object.__setattr__(self, "omega", om)
        if len(t_e) != len(om):
            raise ValueError("control schedules must share the knot count")
        if self.dt <= 0.0:
            raise ValueError("time step must be positive")
        if not (np.isfinite(t_e).all() and np.isfinite(om).all()):
            raise ValueError("control values must be finite")

    @property
    def n(self) -> int:
        return len(self.t_e)

    @property
    def t_final(self) -> float:
        return self.n * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, self.n + 1)


@dataclass(frozen=True)
class OcpProblem:
    """Bounds, terminal targets and the rotation rate limit."""

    n_steps: int = 20
    t_final: float = 1800.0
    t_e_bounds: tuple[float, float] = (0.0, 1000.0)
    omega_bounds: tuple[float, float] = (0.0, 60.0)
    t_e_terminal: float = 750.0      # T_e(t_f) >= this
    omega_terminal: float = 60.0     # omega(t_f) == this
    temp_terminal: float = 400.0     # max T(t_f) >= this
    omega_rate_limit: float = 0.1    # Hz/s, acceleration only
    symmetric_rate: bool = False     # also limit deceleration

    def __post_init__(self) -> None:
        if self.n_steps < 1 or self.t_final <= 0.0:
            raise ValueError("need at least one knot and a positive horizon")
        for lo, hi in (self.t_e_bounds, self.omega_bounds):
            if not lo < hi:
                raise ValueError("bounds must satisfy min < max")
        if not self.t_e_bounds[0] <= self.t_e_terminal <= self.t_e_bounds[1]:
            raise ValueError("terminal gas temperature outside its bounds")
        if not self.omega_bounds[0] <= self.omega_terminal <= self.omega_bounds[1]:
            raise ValueError("terminal rotation outside its bounds")
        if self.omega_rate_limit <= 0.0:
            raise ValueError("rate limit must be positive")
        # a plain linear ramp must be admissible, otherwise the problem
        # statement contradicts itself
        if self.omega_terminal / self.t_final > self.omega_rate_limit + 1e-12:
            raise ValueError(
                "rate limit forbids even the linear ramp to the terminal speed"
            )

    @property
    def dt(self) -> float:
        return self.t_final / self.n_steps


@dataclass(frozen=True)
class EvaluationRecord:
    """One forward run: objective, constraint residuals, step maxima.

    Residual conventions match the optimizer: inequality entries are
    slacks (feasible >= 0), the terminal rotation residual is an equality
    mismatch. All residuals are in scaled (dimensionless) units. Step
    arrays have N+1 entries including the initial state.
    """

    schedule: ControlSchedule
    J: float                        # MPa
    rate: np.ndarray                # (N,) or (2N,) slacks
    terminal_t_e: float             # slack
    terminal_omega: float           # equality residual
    terminal_temp: float            # slack
    step_max_sigma: np.ndarray      # (N+1,) MPa
    step_max_temp: np.ndarray       # (N+1,) degC
    step_argmax_node: np.ndarray    # (N+1,)
    failed: bool = False
    trajectories: tuple | None = None  # (ThermalTrajectory, MechanicalTrajectory)

    def __post_init__(self) -> None:
        if not self.failed:
            if not np.isfinite(self.J):
                raise ValueError("objective must be finite on a clean run")
            peak = float(self.step_max_sigma.max())
            if abs(self.J - peak) > 1e-9 * max(1.0, peak):
                raise ValueError("objective must equal the trajectory peak")

    @property
    def argmax_step(self) -> int:
        return int(np.argmax(self.step_max_sigma))

    def max_violation(self) -> float:
        worst = max(0.0, -min(self.rate.min(), self.terminal_t_e,
                              self.terminal_temp))
        return max(worst, abs(self.terminal_omega))

    def per_step_table(self) -> list[tuple]:
        """Rows (step, time, T_e, omega, max sigma_v, max T, argmax node)."""
        t_e = np.concatenate([[np.nan], self.schedule.t_e])
        om = np.concatenate([[0.0], self.schedule.omega])
        times = np.concatenate([[0.0], self.schedule.times])
        return [
            (n, times[n], t_e[n], om[n], self.step_max_sigma[n],
             self.step_max_temp[n], int(self.step_argmax_node[n]))
            for n in range(len(times))
        ]


@dataclass(frozen=True)
class GradientBundle:
    """Finite-difference derivatives from one shared probe sweep."""

    objective: np.ndarray       # (2N,) of scaled J
    rate: np.ndarray            # (n_rate, 2N)
    terminal_t_e: np.ndarray    # (2N,)
    terminal_omega: np.ndarray  # (2N,)
    terminal_temp: np.ndarray   # (2N,)
    failed: np.ndarray          # (2N,) bool, per probed component


# ---------------------------------------------------------------------------
# Packing and the model-free constraint algebra
# ---------------------------------------------------------------------------


def pack(schedule: ControlSchedule) -> np.ndarray:
    """Scaled decision vector: temperatures then rotations."""
    return np.concatenate([
        schedule.t_e / TEMP_SCALE, schedule.omega / OMEGA_SCALE,
    ])


def unpack(x: np.ndarray, problem: OcpProblem) -> ControlSchedule:
    n = problem.n_steps
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (2 * n,):
        raise ValueError(f"expected a vector of length {2 * n}")
    return ControlSchedule(
        t_e=x[:n] * TEMP_SCALE, omega=x[n:] * OMEGA_SCALE, dt=problem.dt,
    )


def rate_residuals(omega: np.ndarray, problem: OcpProblem) -> np.ndarray:
    """Scaled slacks of the rotation rate limit, measured from rest.

    One-sided by default (acceleration only); with ``symmetric_rate`` the
    mirrored deceleration slacks are appended.
    """
    omega = np.asarray(omega, dtype=np.float64)
    inc = np.diff(omega, prepend=0.0)
    allowed = problem.omega_rate_limit * problem.dt
    slack = (allowed - inc) / OMEGA_SCALE
    if problem.symmetric_rate:
        slack = np.concatenate([slack, (allowed + inc) / OMEGA_SCALE])
    return slack


def _rate_jacobian(problem: OcpProblem) -> np.ndarray:
    n = problem.n_steps
    D = (np.eye(n) - np.eye(n, k=-1))        # increments of scaled omega
    block = np.hstack([np.zeros((n, n)), -D])
    if problem.symmetric_rate:
        block = np.vstack([block, np.hstack([np.zeros((n, n)), D])])
    return block


def scaled_bounds(problem: OcpProblem) -> list[tuple[float, float]]:
    n = problem.n_steps
    te = tuple(b / TEMP_SCALE for b in problem.t_e_bounds)
    om = tuple(b / OMEGA_SCALE for b in problem.omega_bounds)
    return [te] * n + [om] * n


# ---------------------------------------------------------------------------
# Initial guesses
# ---------------------------------------------------------------------------


def initial_guess(kind: str, problem: OcpProblem) -> ControlSchedule:
    """Feasible starting schedules.

    ``linear-ramp`` takes both controls linearly from zero to their
    terminal targets. ``heat-first`` applies maximum gas temperature
    immediately (stepping down to the terminal target at the last knot)
    and starts the rotation as late as the rate limit allows.
    """
    n, dt = problem.n_steps, problem.dt
    t_f = problem.t_final
    if problem.omega_rate_limit * t_f < problem.omega_terminal:
        raise InfeasibleRateLimit(
            "the rate limit cannot reach the terminal rotation in time"
        )
    steps = np.arange(1, n + 1)
    if kind == "linear-ramp":
        sched = ControlSchedule(
            t_e=problem.t_e_terminal * steps / n,
            omega=problem.omega_terminal * steps / n,
            dt=dt,
        )
    elif kind == "heat-first":
        t_e = np.full(n, problem.t_e_bounds[1])
        t_e[-1] = problem.t_e_terminal
        start = t_f - problem.omega_terminal / problem.omega_rate_limit
        omega = np.clip(
            (steps * dt - start) * problem.omega_rate_limit,
            0.0, problem.omega_terminal,
        )
        omega[-1] = problem.omega_terminal
        sched = ControlSchedule(t_e=t_e, omega=omega, dt=dt)
    else:
        raise ValueError(f"unknown guess kind {kind!r}")

    assert rate_residuals(sched.omega, problem).min() > -1e-9
    assert sched.t_e[-1] >= problem.t_e_terminal - 1e-9
    assert abs(sched.omega[-1] - problem.omega_terminal) < 1e-9
    lo, hi = problem.t_e_bounds
    assert sched.t_e.min() >= lo and sched.t_e.max() <= hi
    lo, hi = problem.omega_bounds
    assert sched.omega.min() >= lo and sched.omega.max() <= hi
    return sched


# ---------------------------------------------------------------------------
# Forward model
# ---------------------------------------------------------------------------


class ForwardModel:
    """Coupled heat/stress evaluation with caching and an exact counter.

    Operators and factorizations are built once per mesh/material pair;
    each evaluation is then a transient heat run plus one equilibrium
    solve per knot. Records are memoized on the packed decision vector,
    so repeated queries (objective and constraints at the same point, or
    a shared finite-difference sweep) run the model once. The lumped-mass
    heat discretization is used: optimization probes sweep arbitrary gas
    temperature jumps, and lumping keeps the transient monotone where the
    consistent form could undershoot.
    """

    def __init__(
        self,
        mesh: Mesh,
        mat: MaterialProperties,
        problem: OcpProblem,
        settings: linsolve.SolverSettings | None = None,
        lumped: bool = True,
        extra_pins=None,
    ) -> None:
        if mesh.order != 2:
            mesh = promote_to_p2(mesh)
        self.mesh = mesh
        self.mat = mat
        self.problem = problem
        self.heat = heat.HeatSolver(mesh, mat, settings, lumped=lumped)
        self.elastic = stress.ElasticSolver(mesh, mat, settings,
                                            extra_pins=extra_pins)
        self.evaluations = 0
        self._lock = threading.Lock()
        self._memo: dict[bytes, EvaluationRecord] = {}

    def evaluate(self, schedule: ControlSchedule,
                 want_trajectories: bool = False) -> EvaluationRecord:
        key = pack(schedule).tobytes()
        if not want_trajectories:
            hit = self._memo.get(key)
            if hit is not None:
                return hit
        record = self._run(schedule, want_trajectories)
        with self._lock:
            self.evaluations += 1
            if not want_trajectories:
                if len(self._memo) > 4096:
                    self._memo.clear()
                self._memo[key] = record
        return record

    def _run(self, schedule, want_trajectories) -> EvaluationRecord:
        problem = self.problem
        n = schedule.n
        rate = rate_residuals(schedule.omega, problem)
        t_e_slack = (schedule.t_e[-1] - problem.t_e_terminal) / TEMP_SCALE
        omega_res = (schedule.omega[-1] - problem.omega_terminal) / OMEGA_SCALE
        try:
            thermal = self.heat.run(schedule)
            max_temp = np.asarray(thermal.max_T)
            sig = np.zeros(n + 1)
            nodes = np.zeros(n + 1, dtype=np.int64)
            nodes[0] = int(self.mesh.tets.min())
            snaps = [None] * (n + 1)
            for k in range(n):
                snap = self.elastic.solve_step(
                    thermal.fields[k + 1],
                    2.0 * np.pi * schedule.omega[k],
                )
                sig[k + 1] = snap.max_value
                nodes[k + 1] = snap.max_node
                if want_trajectories:
                    snaps[k + 1] = snap
        except (stress.RigidBodyMode, linsolve.SingularMatrix) as exc:
            raise ForwardModelFailure(str(exc)) from exc

        trajectories = None
        if want_trajectories:
            snaps[0] = self.elastic.solve_step(thermal.fields[0], 0.0)
            arg = int(np.argmax([s.max_value for s in snaps]))
            mech = stress.MechanicalTrajectory(
                snaps, snaps[arg].max_value, arg)
            trajectories = (thermal, mech)

        return EvaluationRecord(
            schedule=schedule,
            J=float(sig.max()),
            rate=rate,
            terminal_t_e=t_e_slack,
            terminal_omega=omega_res,
            terminal_temp=(float(max_temp[-1]) - problem.temp_terminal)
            / TEMP_SCALE,
            step_max_sigma=sig,
            step_max_temp=max_temp,
            step_argmax_node=nodes,
            trajectories=trajectories,
        )

    def failure_record(self, schedule: ControlSchedule,
                       reason: str) -> EvaluationRecord:
        """Sentinel for a failed solve: infinite objective, flagged."""
        n = schedule.n
        return EvaluationRecord(
            schedule=schedule,
            J=np.inf,
            rate=rate_residuals(schedule.omega, self.problem),
            terminal_t_e=(schedule.t_e[-1] - self.problem.t_e_terminal)
            / TEMP_SCALE,
            terminal_omega=(schedule.omega[-1] - self.problem.omega_terminal)
            / OMEGA_SCALE,
            terminal_temp=-1.0,
            step_max_sigma=np.full(n + 1, np.inf),
            step_max_temp=np.full(n + 1, np.nan),
            step_argmax_node=np.zeros(n + 1, dtype=np.int64),
            failed=True,
        )

    def record_at(self, x: np.ndarray) -> EvaluationRecord:
        """Evaluate at a packed decision vector; failures become sentinels."""
        schedule = unpack(x, self.problem)
        try:
            return self.evaluate(schedule)
        except ForwardModelFailure as exc:
            return self.failure_record(schedule, str(exc))


def evaluate(mesh, mat, problem, schedule,
             want_trajectories: bool = False) -> EvaluationRecord:
    """One-off forward evaluation (builds the cached model internally)."""
    return ForwardModel(mesh, mat, problem).evaluate(schedule,
                                                     want_trajectories)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_difference(
    fun,
    x: np.ndarray,
    f0: np.ndarray | None = None,
    step: float = DEFAULT_FD_STEP,
    bounds=None,
    workers: int = 1,
    central: bool = False,
):
    """Columnwise difference quotients of a vector-valued function.

    Forward differences with relative step, probing backward where a
    forward probe would leave the box; central differences on request.
    Returns (jacobian (m, n), failed (n,) bool); a probe that raises
    flags its column instead of aborting the sweep.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if f0 is None and not central:
        f0 = np.atleast_1d(np.asarray(fun(x), dtype=np.float64))
    lo = np.full(n, -np.inf) if bounds is None else np.asarray(
        [b[0] for b in bounds], dtype=np.float64)
    hi = np.full(n, np.inf) if bounds is None else np.asarray(
        [b[1] for b in bounds], dtype=np.float64)

    def probe(i):
        h = step * max(1.0, abs(x[i]))
        if not central and x[i] + h > hi[i]:
            h = -h
        try:
            xp = np.array(x)
            xp[i] += h
            fp = np.atleast_1d(np.asarray(fun(xp), dtype=np.float64))
            if central:
                xm = np.array(x)
                xm[i] -= h
                fm = np.atleast_1d(np.asarray(fun(xm), dtype=np.float64))
                return i, (fp - fm) / (2.0 * h), False
            return i, (fp - f0) / h, False
        except ForwardModelFailure:
            return i, None, True

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(probe, range(n)))
    else:
        results = [probe(i) for i in range(n)]

    if f0 is not None:
        m = len(f0)
    else:
        try:
            m = next(len(col) for _, col, bad in results if not bad)
        except StopIteration:
            raise ForwardModelFailure("every finite-difference probe failed")
    jac = np.zeros((m, n))
    failed = np.zeros(n, dtype=bool)
    for i, col, bad in results:
        if bad:
            failed[i] = True
        else:
            jac[:, i] = col
    return jac, failed


def _record_values(record: EvaluationRecord) -> np.ndarray:
    """Objective and all constraint residuals, stacked and scaled."""
    return np.concatenate([
        [record.J / STRESS_SCALE],
        record.rate,
        [record.terminal_t_e, record.terminal_omega, record.terminal_temp],
    ])


def fd_gradient(
    model: ForwardModel,
    schedule: ControlSchedule,
    step: float = DEFAULT_FD_STEP,
    workers: int = 1,
    central: bool = False,
) -> GradientBundle:
    """Difference-quotient derivatives of the objective and constraints.

    One probe per decision component (two for central differences), all
    sharing the memoized forward model, so the sweep costs exactly 2N
    evaluations beyond the baseline.
    """
    x = pack(schedule)
    base = _record_values(model.evaluate(schedule))

    def stacked(xp):
        rec = model.evaluate(unpack(xp, model.problem))
        return _record_values(rec)

    jac, failed = finite_difference(
        stacked, x, f0=base, step=step,
        bounds=scaled_bounds(model.problem), workers=workers, central=central,
    )
    n_rate = len(rate_residuals(schedule.omega, model.problem))
    return GradientBundle(
        objective=jac[0],
        rate=jac[1:1 + n_rate],
        terminal_t_e=jac[1 + n_rate],
        terminal_omega=jac[2 + n_rate],
        terminal_temp=jac[3 + n_rate],
        failed=failed,
    )


# ---------------------------------------------------------------------------
# Optimization driver
# ---------------------------------------------------------------------------


class OptimizationDriver:
    """Wires the forward model and the constraint algebra into the SQP.

    The linear constraints (rate limit, terminal gas temperature and
    rotation) carry analytic Jacobians; the objective and the terminal
    material temperature share one finite-difference sweep per point,
    cached on the packed vector.
    """

    def __init__(self, model: ForwardModel,
                 settings: sqp.SqpSettings | None = None) -> None:
        self.model = model
        self.settings = settings or sqp.SqpSettings()
        self._bundles: dict[bytes, GradientBundle] = {}

    def _bundle(self, x: np.ndarray) -> GradientBundle:
        key = np.asarray(x).tobytes()
        bundle = self._bundles.get(key)
        if bundle is None:
            bundle = fd_gradient(
                self.model, unpack(x, self.model.problem),
                step=self.settings.fd_step, workers=self.settings.workers,
                central=self.settings.central,
            )
            if len(self._bundles) > 64:
                self._bundles.clear()
            self._bundles[key] = bundle
        return bundle

    def constraints(self) -> list[sqp.Constraint]:
        problem = self.model.problem
        rate_jac = _rate_jacobian(problem)
        n = problem.n_steps
        e_te = np.zeros(2 * n)
        e_te[n - 1] = 1.0
        e_om = np.zeros(2 * n)
        e_om[2 * n - 1] = 1.0
        return [
            sqp.Constraint(
                "ineq",
                lambda x: rate_residuals(
                    x[n:] * OMEGA_SCALE, problem),
                jac=lambda x: rate_jac,
            ),
            sqp.Constraint(
                "ineq",
                lambda x: np.array([
                    x[n - 1] - problem.t_e_terminal / TEMP_SCALE]),
                jac=lambda x: e_te[None, :],
            ),
            sqp.Constraint(
                "eq",
                lambda x: np.array([
                    x[2 * n - 1] - problem.omega_terminal / OMEGA_SCALE]),
                jac=lambda x: e_om[None, :],
            ),
            sqp.Constraint(
                "ineq",
                lambda x: np.array([self.model.record_at(x).terminal_temp]),
                jac=lambda x: self._bundle(x).terminal_temp[None, :],
            ),
        ]

    def objective(self, x: np.ndarray) -> float:
        return self.model.record_at(x).J / STRESS_SCALE

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self._bundle(x).objective

    def run(self, guess: ControlSchedule, callback=None) -> sqp.SqpResult:
        return sqp.minimize(
            self.objective,
            x0=pack(guess),
            jac=self.gradient,
            constraints=self.constraints(),
            bounds=scaled_bounds(self.model.problem),
            settings=self.settings,
            callback=callback,
        )

    def schedule_at(self, x: np.ndarray) -> ControlSchedule:
        return unpack(x, self.model.problem)
