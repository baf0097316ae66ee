"""Closed-loop time integration, chart-switch management, and trace recording.

The integrator is classical RK4 on the chart state (y, yd) with the policy
re-evaluated at every stage (a per-step-hold mode is available for
comparison).  Action inputs are zero-order-hold: they are set once per
integrator step, before the first stage, and held across stages.  Chart
switches re-express the state in the opposite stereographic chart after a
completed step and leave the embedded trajectory unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .geom import ChartId, Metric, chart_transition
from .policy import Policy, PolicyStep

FLOAT_FMT = "%.17g"


class IntegrationAbortError(RuntimeError):
    """Non-finite acceleration; carries the partial trace."""

    def __init__(self, message: str, trace: "Trace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class SimState:
    chart: ChartId
    y: np.ndarray
    ydot: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.ydot = np.asarray(self.ydot, dtype=float)

    def copy(self) -> "SimState":
        return SimState(self.chart, self.y.copy(), self.ydot.copy(), self.t)


@dataclass
class ConvergenceSpec:
    """Terminate once error and speed stay under tolerance for a sustained
    number of steps."""

    error_fn: Callable[[SimState], float]
    speed_fn: Callable[[SimState], float]
    error_tol: float = 1e-2
    speed_tol: float = 1e-2
    sustain_steps: int = 50


@dataclass
class ActionPhase:
    """One scheduled steering input on one control task.

    ``provider`` is either a constant covector or a callable of the state
    (evaluated once per step, then held across RK4 stages).  Start/stop
    times are compared against step start times, which quantizes them to
    step boundaries.
    """

    control_index: int
    start: float
    end: float
    provider: np.ndarray | Callable[[SimState], np.ndarray]

    def input_at(self, state: SimState) -> np.ndarray | None:
        if not (self.start <= state.t < self.end):
            return None
        if callable(self.provider):
            return np.asarray(self.provider(state), dtype=float)
        return np.asarray(self.provider, dtype=float)


@dataclass
class ActionSchedule:
    phases: list[ActionPhase] = field(default_factory=list)

    def apply(self, policy: Policy, state: SimState) -> dict[int, np.ndarray]:
        applied: dict[int, np.ndarray] = {}
        for index in range(len(policy.controls)):
            total = np.zeros(policy.controls[index].task_map.output_dim)
            for phase in self.phases:
                if phase.control_index != index:
                    continue
                u = phase.input_at(state)
                if u is not None:
                    total = total + u
            policy.set_action(index, total)
            applied[index] = total
        return applied


AccelFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _rk4(accel: AccelFn, y, v, dt, a1=None, per_step_hold=False):
    if a1 is None:
        a1 = accel(y, v)
    if per_step_hold:
        hold = np.asarray(a1, dtype=float)

        def accel(_y, _v, _a=hold):  # noqa: A001 - local shadowing intended
            return _a

    k1y, k1v = v, a1
    k2y = v + 0.5 * dt * k1v
    k2v = accel(y + 0.5 * dt * k1y, k2y)
    k3y = v + 0.5 * dt * k2v
    k3v = accel(y + 0.5 * dt * k2y, k3y)
    k4y = v + dt * k3v
    k4v = accel(y + dt * k3y, k4y)
    y_new = y + dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
    v_new = v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return y_new, v_new


def rk4_step_flat(
    accel: AccelFn,
    state: SimState,
    dt: float,
    k1_accel: np.ndarray | None = None,
    per_step_hold: bool = False,
) -> SimState:
    """RK4 on (y, yd) with yd_dot = accel(y, yd); chart coordinates are
    integrated as plain Euclidean variables."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    y_new, v_new = _rk4(accel, state.y, state.ydot, dt, k1_accel, per_step_hold)
    if not (np.all(np.isfinite(y_new)) and np.all(np.isfinite(v_new))):
        raise FloatingPointError("non-finite state after integration step")
    return SimState(state.chart, y_new, v_new, state.t + dt)


def rk4_step_geometric(
    metric: Metric, state: SimState, force: np.ndarray, dt: float
) -> SimState:
    """RK4 on the geodesic-forced equation ydd^k + Gamma^k_ij yd^i yd^j = F^k."""
    force = np.asarray(force, dtype=float)

    def accel(y, v):
        gamma = metric.christoffel(y)
        return force - np.einsum("kij,i,j->k", gamma, v, v)

    return rk4_step_flat(accel, state, dt)


def maybe_switch_chart(state: SimState, enabled: bool, threshold: float = 2.0) -> SimState:
    """Re-express the state in the opposite chart once |y| exceeds the
    threshold; the embedded state is unchanged."""
    if not enabled or not state.chart.is_stereo:
        return state
    if float(np.linalg.norm(state.y)) <= threshold:
        return state
    new_chart = state.chart.opposite()
    y_new, ydot_new = chart_transition(state.chart, new_chart, state.y, state.ydot)
    return SimState(new_chart, y_new, ydot_new, state.t)


@dataclass
class Trace:
    """Step-indexed record of one rollout.

    One row per accepted step plus one terminal row.  ``x`` holds the
    embedded point when the scenario defines one (sphere embedding, or the
    arm end-effector position).
    """

    safety_names: list[str]
    columns: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self._t: list[float] = []
        self._chart: list[str] = []
        self._y: list[np.ndarray] = []
        self._ydot: list[np.ndarray] = []
        self._x: list[np.ndarray] = []
        self._h0: list[np.ndarray] = []
        self._h: list[np.ndarray] = []
        self._qp1: list[str] = []
        self._qp2: list[str] = []
        self._slack: list[float] = []
        self._min_sv: list[float] = []
        self._actions: list[dict] = []
        self._warnings: list[tuple[float, str]] = []

    def append(
        self,
        state: SimState,
        x: np.ndarray | None,
        h0: np.ndarray,
        h: np.ndarray,
        qp1_status: str,
        qp2_status: str,
        slack: float,
        min_sv: float,
        actions: dict | None = None,
        warnings: list[str] | None = None,
    ):
        self._t.append(state.t)
        self._chart.append(state.chart.kind)
        self._y.append(state.y.copy())
        self._ydot.append(state.ydot.copy())
        self._x.append(None if x is None else np.asarray(x, dtype=float))
        self._h0.append(np.asarray(h0, dtype=float))
        self._h.append(np.asarray(h, dtype=float))
        self._qp1.append(qp1_status)
        self._qp2.append(qp2_status)
        self._slack.append(float(slack))
        self._min_sv.append(float(min_sv))
        self._actions.append(actions or {})
        for w in warnings or []:
            self._warnings.append((state.t, w))

    def __len__(self) -> int:
        return len(self._t)

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self._t)

    @property
    def chart(self) -> list[str]:
        return list(self._chart)

    @property
    def y(self) -> np.ndarray:
        return np.asarray(self._y)

    @property
    def ydot(self) -> np.ndarray:
        return np.asarray(self._ydot)

    @property
    def x(self) -> np.ndarray:
        if self._x and self._x[0] is None:
            raise ValueError("trace has no embedded coordinates")
        return np.asarray(self._x)

    @property
    def h0(self) -> np.ndarray:
        """Array (steps, n_safety) of raw safety values."""
        return np.asarray(self._h0)

    @property
    def h_barrier(self) -> np.ndarray:
        return np.asarray(self._h)

    @property
    def slack(self) -> np.ndarray:
        return np.asarray(self._slack)

    @property
    def min_sv(self) -> np.ndarray:
        return np.asarray(self._min_sv)

    @property
    def qp_statuses(self) -> tuple[list[str], list[str]]:
        return list(self._qp1), list(self._qp2)

    @property
    def warnings(self) -> list[tuple[float, str]]:
        return list(self._warnings)

    @property
    def actions(self) -> list[dict]:
        return list(self._actions)

    def csv_header(self) -> list[str]:
        m = self._y[0].size if self._y else 0
        cols = ["t", "chart"]
        cols += [f"y{i}" for i in range(m)]
        cols += [f"yd{i}" for i in range(m)]
        if self._x and self._x[0] is not None:
            cols += [f"x{i}" for i in range(3)]
        cols += [f"h0_{name}" for name in self.safety_names]
        cols += ["qp1_status", "qp2_status", "slack_max"]
        return cols

    def to_csv(self, path) -> None:
        header = self.csv_header()
        with_x = self._x and self._x[0] is not None
        lines = [",".join(header)]
        for i in range(len(self._t)):
            vals = [FLOAT_FMT % self._t[i], self._chart[i]]
            vals += [FLOAT_FMT % v for v in self._y[i]]
            vals += [FLOAT_FMT % v for v in self._ydot[i]]
            if with_x:
                vals += [FLOAT_FMT % v for v in self._x[i]]
            vals += [FLOAT_FMT % v for v in self._h0[i]]
            vals += [self._qp1[i], self._qp2[i], FLOAT_FMT % self._slack[i]]
            lines.append(",".join(vals))
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")

    def write_config_sidecar(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.config, f, indent=2, sort_keys=True)
            f.write("\n")


def rollout(
    policies: Policy | Mapping[str, Policy],
    initial: SimState,
    schedule: ActionSchedule | None,
    dt: float,
    t_end: float,
    stop: ConvergenceSpec | None = None,
    *,
    switching: bool = False,
    switch_threshold: float = 2.0,
    embed_fn: Callable[[SimState], np.ndarray] | None = None,
    per_step_hold: bool = False,
    config: dict | None = None,
) -> Trace:
    """Integrate the closed loop and record one row per step.

    ``policies`` maps chart kinds to policy instances (a bare policy is
    wrapped); scheduled actions are applied at step starts, quantized to step
    boundaries.  Terminates at ``t_end`` or once the convergence spec has
    held for its sustain window; the terminal state is appended as a final
    row.
    """
    if not 0.0 < dt <= 0.1:
        raise ValueError("dt must lie in (0, 0.1]")
    if t_end <= 0.0:
        raise ValueError("t_end must be positive")
    if isinstance(policies, Policy):
        policies = {initial.chart.kind: policies}
    for pol in policies.values():
        pol.reset()

    safety_names = [task.name for task in next(iter(policies.values())).safeties]
    trace = Trace(safety_names=safety_names, config=dict(config or {}))
    state = initial.copy()
    n_steps = int(round(t_end / dt))
    sustain = 0

    def record(state: SimState, step: PolicyStep, actions: dict):
        h0 = np.array([row.h0 for row in step.rows]) if step.rows else np.zeros(0)
        h = np.array(
            [row.h if row.h is not None else np.nan for row in step.rows]
        ) if step.rows else np.zeros(0)
        min_sv = np.nan
        for task, row in zip(policies[state.chart.kind].safeties, step.rows):
            if row.kind == "bcbf":
                sv = task.task_map.min_singular_value(state.y)
                min_sv = sv if np.isnan(min_sv) else min(min_sv, sv)
        trace.append(
            state,
            None if embed_fn is None else embed_fn(state),
            h0,
            h,
            step.qp1.status,
            step.qp2.status,
            step.max_slack,
            min_sv,
            actions={k: v.tolist() for k, v in actions.items()},
            warnings=step.warnings,
        )

    for _ in range(n_steps):
        policy = policies[state.chart.kind]
        actions = schedule.apply(policy, state) if schedule is not None else {}
        step = policy.control_step(state.y, state.ydot)
        if not np.all(np.isfinite(step.sigma_ddot)):
            record(state, step, actions)
            raise IntegrationAbortError("non-finite acceleration", trace)
        record(state, step, actions)

        def accel(y, v, _p=policy):
            return _p.control_step(y, v).sigma_ddot

        try:
            state = rk4_step_flat(
                accel, state, dt, k1_accel=step.sigma_ddot, per_step_hold=per_step_hold
            )
        except FloatingPointError as err:
            raise IntegrationAbortError(str(err), trace) from err
        state = maybe_switch_chart(state, switching, switch_threshold)

        if stop is not None:
            if stop.error_fn(state) < stop.error_tol and stop.speed_fn(state) < stop.speed_tol:
                sustain += 1
            else:
                sustain = 0
            if sustain >= stop.sustain_steps:
                break

    # terminal row
    policy = policies[state.chart.kind]
    final_step = policy.control_step(state.y, state.ydot)
    record(state, final_step, {})
    return trace


def rollout_ode(
    accel: AccelFn,
    initial: SimState,
    dt: float,
    t_end: float,
    *,
    embed_fn: Callable[[SimState], np.ndarray] | None = None,
    config: dict | None = None,
) -> Trace:
    """Policy-free rollout of ydd = accel(y, yd); used by the free-motion
    chart-invariance runs."""
    if not 0.0 < dt <= 0.1:
        raise ValueError("dt must lie in (0, 0.1]")
    trace = Trace(safety_names=[], config=dict(config or {}))
    state = initial.copy()
    n_steps = int(round(t_end / dt))
    for _ in range(n_steps + 1):
        trace.append(
            state,
            None if embed_fn is None else embed_fn(state),
            np.zeros(0),
            np.zeros(0),
            "optimal",
            "optimal",
            0.0,
            np.nan,
        )
        if len(trace) > n_steps:
            break
        state = rk4_step_flat(accel, state, dt)
    return trace
