"""Behavior tasks: second-order objectives on task spaces, blended into one
configuration acceleration by weighted least squares.

Each task carries a map f, a task metric g, an optional potential and
dissipative force, and a PSD weight w.  Its desired task acceleration is

    a_des = g^-1 F_D(xd) - g^-1 dPhi - Gamma(xd, xd),

with xd = Jf sd; the acceleration actually produced by a candidate
configuration acceleration a is Jf a + Jf_dot sd, so each task contributes
the affine residual Jf a - A with A = a_des - Jf_dot sd.  Stacking the
weighted normal equations gives the closed form

    sdd = (sum Jf' w Jf)^+ (sum Jf' w A),

with the pseudoinverse taken by symmetric eigendecomposition (relative
cutoff 1e-10).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import FlatMetric, Metric
from .qp import psd_pinv_apply
from .taskmaps import StepCache, TaskMap


class Potential:
    """Smooth potential on a task space."""

    def value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class QuadraticPotential(Potential):
    """Phi(x) = (gain/2) |x - center|^2."""

    center: tuple[float, ...]
    gain: float

    def value(self, x):
        diff = np.asarray(x, dtype=float) - np.asarray(self.center)
        return 0.5 * self.gain * float(diff @ diff)

    def gradient(self, x):
        return self.gain * (np.asarray(x, dtype=float) - np.asarray(self.center))


@dataclass(frozen=True)
class ScalarSquarePotential(Potential):
    """Phi(x) = gain * x^2 on a scalar task space."""

    gain: float

    def value(self, x):
        v = float(np.asarray(x).reshape(-1)[0])
        return self.gain * v * v

    def gradient(self, x):
        v = float(np.asarray(x).reshape(-1)[0])
        return np.array([2.0 * self.gain * v])


class Dissipation:
    """Force covector as a function of task velocity; must not add energy."""

    def covector(self, xdot: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class LinearDissipation(Dissipation):
    """F_D(xd) = -B xd with B positive semidefinite."""

    damping: np.ndarray

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.damping, dtype=float))
        eigs = np.linalg.eigvalsh(0.5 * (b + b.T))
        if eigs[0] < -1e-12:
            raise ValueError("damping matrix must be positive semidefinite")
        object.__setattr__(self, "damping", b)

    def covector(self, xdot):
        return -self.damping @ np.asarray(xdot, dtype=float)


@dataclass
class BehaviorTask:
    name: str
    task_map: TaskMap
    metric: Metric | None = None
    potential: Potential | None = None
    dissipation: Dissipation | None = None
    weight: np.ndarray | None = None

    def __post_init__(self):
        n = self.task_map.output_dim
        if self.metric is None:
            self.metric = FlatMetric(n)
        if self.weight is None:
            self.weight = np.eye(n)
        self.weight = np.asarray(self.weight, dtype=float)
        if self.weight.shape != (n, n):
            raise ValueError("weight shape must match the task dimension")
        eigs = np.linalg.eigvalsh(0.5 * (self.weight + self.weight.T))
        if eigs[0] < -1e-12:
            raise ValueError("weight must be positive semidefinite")
        self._weight_is_identity = bool(np.array_equal(self.weight, np.eye(n)))


def desired_task_accel(
    task: BehaviorTask, sigma, sigmadot, cache: StepCache | None = None
) -> np.ndarray:
    """Desired coordinate acceleration of the task state."""
    sigma = np.asarray(sigma, dtype=float)
    sigmadot = np.asarray(sigmadot, dtype=float)
    x = task.task_map.value(sigma, cache)
    xdot = task.task_map.jacobian(sigma, cache) @ sigmadot
    out = np.zeros(task.task_map.output_dim)
    flat = task.metric.is_flat and isinstance(task.metric, FlatMetric)
    g_inv = None if flat else task.metric.inverse(x)
    if task.dissipation is not None:
        cov = task.dissipation.covector(xdot)
        out += cov if flat else g_inv @ cov
    if task.potential is not None:
        grad = task.potential.gradient(x)
        out -= grad if flat else g_inv @ grad
    if not task.metric.is_flat:
        gamma = task.metric.christoffel(x)
        out -= np.einsum("kij,i,j->k", gamma, xdot, xdot)
    return out


def residual(task: BehaviorTask, sigma, sigmadot, cache: StepCache | None = None) -> np.ndarray:
    """A = a_des - Jf_dot sd, the affine offset of the task residual."""
    sigmadot = np.asarray(sigmadot, dtype=float)
    a_des = desired_task_accel(task, sigma, sigmadot, cache)
    return a_des - task.task_map.jdot(sigma, sigmadot, cache) @ sigmadot


def normal_equations(
    tasks: list[BehaviorTask], sigma, sigmadot, cache: StepCache | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Assemble (H, f) with H = sum Jf' w Jf and f = sum Jf' w A."""
    m = tasks[0].task_map.input_dim
    h = np.zeros((m, m))
    f = np.zeros(m)
    for task in tasks:
        jac = task.task_map.jacobian(sigma, cache)
        wj = jac if task._weight_is_identity else task.weight @ jac
        h += jac.T @ wj
        f += wj.T @ residual(task, sigma, sigmadot, cache)
    return 0.5 * (h + h.T), f


def closed_form_accel(
    tasks: list[BehaviorTask], sigma, sigmadot, cache: StepCache | None = None, diag=None
) -> np.ndarray:
    """Unconstrained weighted least-squares blend of all task residuals."""
    if not tasks:
        raise ValueError("need at least one behavior task")
    h, f = normal_equations(tasks, sigma, sigmadot, cache)
    accel, full_rank = psd_pinv_apply(h, f)
    if diag is not None:
        diag["rank_deficient"] = not full_rank
    return accel
