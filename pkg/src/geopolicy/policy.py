"""Per-step control policy: blend behavior tasks under safety rows, then
apply steering inputs around the autonomous solution.

Each control step solves two convex QPs over the coordinate acceleration a:

    QP 1:  min  sum_i 1/2 |Jf_i a - A_i|^2_{w_i}      s.t.  C a >= d
    QP 2:  min  QP1 objective
              + sum_l 1/2 |Jf_l (a - a_bar) - u_l#|^2_{w_l}   s.t.  C a >= d

where a_bar is the QP 1 minimizer, C/d stack the safety rows, and u_l# is
the steering covector u_l raised through the control task's metric.  QP 2 is
warm-started at a_bar, so zero steering input reproduces the autonomous
acceleration exactly.  The Jf_dot terms cancel between the steered and
autonomous task images, which is why the control residual contains only
Jf_l (a - a_bar).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qp
from .behaviors import BehaviorTask, normal_equations
from .geom import Metric
from .safety import BcbfTask, ConstraintRow, EcbfTask
from .taskmaps import StepCache, TaskMap

ACTIVE_TOL = 1e-8


@dataclass
class ControlTask:
    """Steerable task: a map, a behavior metric for raising inputs, a weight,
    and a runtime covector input (zero by default)."""

    name: str
    task_map: TaskMap
    metric: Metric
    weight: np.ndarray | Metric
    weight_scale: float = 1.0
    u: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.u is None:
            self.u = np.zeros(self.task_map.output_dim)
        self.u = np.asarray(self.u, dtype=float)
        if self.u.shape != (self.task_map.output_dim,):
            raise ValueError("input dimension does not match the control task map")

    def weight_matrix(self, x: np.ndarray) -> np.ndarray:
        if isinstance(self.weight, Metric):
            return self.weight_scale * self.weight.matrix(x)
        return self.weight_scale * np.asarray(self.weight, dtype=float)

    def sharped_input(self, x: np.ndarray) -> np.ndarray:
        return self.metric.inverse(x) @ self.u


@dataclass
class PolicyStep:
    a_bar: np.ndarray
    sigma_ddot: np.ndarray
    qp1: qp.QpSolution
    qp2: qp.QpSolution
    rows: list[ConstraintRow]
    active: list[bool]
    warnings: list[str] = field(default_factory=list)

    @property
    def max_slack(self) -> float:
        return max(self.qp1.max_slack, self.qp2.max_slack)


class Policy:
    """Owns the task lists, QP workspace, and mutable action inputs.

    Single-threaded per instance; build one policy per concurrent rollout.
    ``prefetch(sigma, sigmadot, cache)``, when given, seeds the step cache
    with fused forward-kinematics results.
    """

    def __init__(
        self,
        behaviors: list[BehaviorTask],
        safeties: list[EcbfTask | BcbfTask] | None = None,
        controls: list[ControlTask] | None = None,
        accel_bounds: np.ndarray | None = None,
        prefetch=None,
    ):
        if not behaviors:
            raise ValueError("need at least one behavior task")
        self.behaviors = list(behaviors)
        self.safeties = list(safeties or [])
        self.controls = list(controls or [])
        self.accel_bounds = None if accel_bounds is None else np.asarray(accel_bounds, float)
        self.prefetch = prefetch
        self.dim = behaviors[0].task_map.input_dim
        self._last_a_bar: np.ndarray | None = None

    def set_action(self, index: int, u: np.ndarray) -> None:
        """Set the steering covector of one control task (applied from the
        next control step on)."""
        task = self.controls[index]
        u = np.asarray(u, dtype=float)
        if u.shape != (task.task_map.output_dim,):
            raise ValueError(
                f"action for {task.name} must have shape ({task.task_map.output_dim},)"
            )
        if not np.all(np.isfinite(u)):
            raise ValueError("action input must be finite")
        task.u = u

    def reset(self) -> None:
        self._last_a_bar = None

    # ------------------------------------------------------------------

    def assemble_rows(
        self, sigma, sigmadot, cache: StepCache | None = None
    ) -> tuple[list[ConstraintRow], np.ndarray, np.ndarray, list[int], list[str]]:
        """Evaluate all safety rows; returns (rows, C, d, qp_row_index, warnings).

        ``qp_row_index[i]`` is the row's index in C, or -1 for rows with no
        acceleration coefficient (vacuous or dropped).
        """
        rows: list[ConstraintRow] = []
        coeffs: list[np.ndarray] = []
        rhs: list[float] = []
        index: list[int] = []
        warnings: list[str] = []
        for task in self.safeties:
            row = task.row(sigma, sigmadot, cache)
            rows.append(row)
            if row.coeff is None:
                index.append(-1)
                # degenerate-gradient drops are recorded on the row itself;
                # they are routine for links the obstacle cannot see
                if not row.dropped and row.rhs > ACTIVE_TOL:
                    warnings.append(
                        f"{row.name}: vacuous row infeasible (rhs={row.rhs:.3e})"
                    )
            else:
                index.append(len(coeffs))
                coeffs.append(row.coeff)
                rhs.append(row.rhs)
            if row.domain_clamp:
                warnings.append(f"{row.name}: safety function domain clamped")
        if self.accel_bounds is not None:
            eye = np.eye(self.dim)
            for j in range(self.dim):
                bound = float(self.accel_bounds[j])
                coeffs.append(eye[j].copy())
                rhs.append(-bound)
                coeffs.append(-eye[j])
                rhs.append(-bound)
        c_mat = np.array(coeffs) if coeffs else np.zeros((0, self.dim))
        d_vec = np.array(rhs) if rhs else np.zeros(0)
        return rows, c_mat, d_vec, index, warnings

    def qp_problems(self, sigma, sigmadot, cache: StepCache | None = None):
        """QP 1 problem and a builder mapping a_bar to the QP 2 problem."""
        sigma = np.asarray(sigma, dtype=float)
        sigmadot = np.asarray(sigmadot, dtype=float)
        if cache is None:
            cache = StepCache()
            if self.prefetch is not None:
                self.prefetch(sigma, sigmadot, cache)
        h1, f1 = normal_equations(self.behaviors, sigma, sigmadot, cache)
        rows, c_mat, d_vec, index, warnings = self.assemble_rows(sigma, sigmadot, cache)
        p1 = qp.QpProblem(H=h1, f=f1, C=c_mat, d=d_vec, warm_start=self._last_a_bar, trusted=True)

        controls_geo = []
        for task in self.controls:
            x = task.task_map.value(sigma, cache)
            jac = task.task_map.jacobian(sigma, cache)
            w = task.weight_matrix(x)
            controls_geo.append((jac, w, task.sharped_input(x)))

        def build_qp2(a_bar: np.ndarray) -> qp.QpProblem:
            h2 = h1.copy()
            f2 = f1.copy()
            for jac, w, u_sharp in controls_geo:
                wj = w @ jac
                h2 += jac.T @ wj
                f2 += wj.T @ (jac @ a_bar + u_sharp)
            return qp.QpProblem(
                H=0.5 * (h2 + h2.T), f=f2, C=c_mat, d=d_vec, warm_start=a_bar.copy(),
                trusted=True,
            )

        return p1, build_qp2, rows, index, warnings

    def control_step(self, sigma, sigmadot) -> PolicyStep:
        sigma = np.asarray(sigma, dtype=float)
        sigmadot = np.asarray(sigmadot, dtype=float)
        cache = StepCache()
        if self.prefetch is not None:
            self.prefetch(sigma, sigmadot, cache)
        p1, build_qp2, rows, index, warnings = self.qp_problems(sigma, sigmadot, cache)

        try:
            sol1 = qp.solve(p1)
        except qp.QpStallError as err:
            sol1 = err.best
            warnings.append(f"qp1 stalled; using best iterate (kkt={sol1.kkt:.2e})")
        if sol1.status == qp.RELAXED:
            warnings.append(f"qp1 relaxed with max slack {sol1.max_slack:.3e}")
        a_bar = sol1.a
        self._last_a_bar = a_bar.copy()

        if self.controls:
            p2 = build_qp2(a_bar)
            try:
                sol2 = qp.solve(p2)
            except qp.QpStallError as err:
                sol2 = err.best
                warnings.append(f"qp2 stalled; using best iterate (kkt={sol2.kkt:.2e})")
            if sol2.status == qp.RELAXED:
                warnings.append(f"qp2 relaxed with max slack {sol2.max_slack:.3e}")
        else:
            sol2 = sol1
        sigma_ddot = sol2.a

        active = []
        for row, idx in zip(rows, index):
            if idx < 0 or row.coeff is None:
                active.append(False)
                continue
            margin = float(row.coeff @ sigma_ddot) - row.rhs
            tight = margin <= ACTIVE_TOL * (1.0 + abs(row.rhs))
            active.append(tight or sol1.duals[idx] > 1e-10 or sol2.duals[idx] > 1e-10)

        return PolicyStep(
            a_bar=a_bar,
            sigma_ddot=sigma_ddot,
            qp1=sol1,
            qp2=sol2,
            rows=rows,
            active=active,
            warnings=warnings,
        )
