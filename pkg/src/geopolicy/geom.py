"""Charts, metrics, and Christoffel symbols for the manifolds used by the policies.

The sphere is handled through the two stereographic charts (projection from the
north or south pole onto the equatorial plane); joint spaces are open Euclidean
boxes.  All functions here are pure and operate on plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORTH_STEREO = "north_stereo"
SOUTH_STEREO = "south_stereo"
EUCLIDEAN_BOX = "euclidean_box"

# Distance (in embedding coordinates) below which a point counts as sitting on
# the excluded pole of a stereographic chart.
POLE_EPS = 1e-9
# Chart-coordinate norm below which the inversion y -> y/|y|^2 is singular.
TRANSITION_EPS = 1e-9


class InvalidChartError(ValueError):
    """Operation applied to a chart kind that does not support it."""


class NearPoleError(ValueError):
    """Embedded point is numerically on the excluded pole of the chart."""


class TransitionSingularityError(ValueError):
    """Chart transition evaluated at the singular point of the inversion."""


@dataclass(frozen=True)
class ChartId:
    """Identifies a coordinate chart.

    ``north_stereo`` / ``south_stereo`` are the two-dimensional stereographic
    charts of the unit sphere.  ``euclidean_box`` is an m-dimensional open box
    with optional per-coordinate bounds (informational only; bounds are
    enforced by joint-limit safety tasks, not by the chart).
    """

    kind: str
    dim: int = 2
    lower: tuple[float, ...] | None = None
    upper: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in (NORTH_STEREO, SOUTH_STEREO, EUCLIDEAN_BOX):
            raise InvalidChartError(f"unknown chart kind {self.kind!r}")
        if self.kind in (NORTH_STEREO, SOUTH_STEREO) and self.dim != 2:
            raise InvalidChartError("stereographic charts are two-dimensional")
        if self.kind == EUCLIDEAN_BOX:
            if self.dim < 1:
                raise InvalidChartError("box chart needs dim >= 1")
            if self.lower is not None and self.upper is not None:
                lo = np.asarray(self.lower, dtype=float)
                hi = np.asarray(self.upper, dtype=float)
                if lo.shape != (self.dim,) or hi.shape != (self.dim,):
                    raise InvalidChartError("box bounds must match dim")
                if not np.all(lo < hi):
                    raise InvalidChartError("box bounds must satisfy lower < upper")

    @property
    def is_stereo(self) -> bool:
        return self.kind in (NORTH_STEREO, SOUTH_STEREO)

    def opposite(self) -> "ChartId":
        if self.kind == NORTH_STEREO:
            return ChartId(SOUTH_STEREO)
        if self.kind == SOUTH_STEREO:
            return ChartId(NORTH_STEREO)
        raise InvalidChartError("only stereographic charts have an opposite")


NORTH = ChartId(NORTH_STEREO)
SOUTH = ChartId(SOUTH_STEREO)


def box_chart(dim: int, lower=None, upper=None) -> ChartId:
    lo = None if lower is None else tuple(float(v) for v in lower)
    hi = None if upper is None else tuple(float(v) for v in upper)
    return ChartId(EUCLIDEAN_BOX, dim=dim, lower=lo, upper=hi)


def _require_stereo(chart: ChartId) -> None:
    if not chart.is_stereo:
        raise InvalidChartError(f"{chart.kind} is not a stereographic chart")


def stereo_embed(chart: ChartId, y: np.ndarray) -> np.ndarray:
    """Map chart coordinates ``(y1, y2)`` to a unit vector in R^3.

    North chart: (2 y1 / (s+1), 2 y2 / (s+1), (s-1)/(s+1)) with s = |y|^2, so
    y = 0 maps to the south pole.  The south chart flips the sign of the third
    component.
    """
    _require_stereo(chart)
    y = np.asarray(y, dtype=float)
    s = float(y @ y)
    d = s + 1.0
    z = (s - 1.0) / d if chart.kind == NORTH_STEREO else (1.0 - s) / d
    return np.array([2.0 * y[0] / d, 2.0 * y[1] / d, z])


def stereo_unembed(chart: ChartId, x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`stereo_embed` for unit vectors away from the pole.

    Raises :class:`NearPoleError` within ``POLE_EPS`` of the excluded pole;
    callers use this to trigger a chart switch.
    """
    _require_stereo(chart)
    x = np.asarray(x, dtype=float)
    if chart.kind == NORTH_STEREO:
        denom = 1.0 - x[2]
    else:
        denom = 1.0 + x[2]
    if abs(denom) < POLE_EPS:
        raise NearPoleError(f"point too close to the excluded pole of {chart.kind}")
    return np.array([x[0] / denom, x[1] / denom])


_EYE2 = np.eye(2)


def stereo_jacobian(chart: ChartId, y: np.ndarray) -> np.ndarray:
    """3x2 Jacobian of the chart-to-embedding map at ``y``."""
    _require_stereo(chart)
    y = np.asarray(y, dtype=float)
    s = float(y @ y)
    d = s + 1.0
    jac = np.empty((3, 2))
    jac[:2] = (2.0 / d) * _EYE2 - (4.0 / d**2) * np.outer(y, y)
    jac[2] = (4.0 / d**2) * y
    if chart.kind == SOUTH_STEREO:
        jac[2] *= -1.0
    return jac


def stereo_second_derivative(chart: ChartId, y: np.ndarray) -> np.ndarray:
    """Second derivative tensor ``d2[a, i, j] = d^2 f^a / dy_i dy_j`` (3x2x2)."""
    _require_stereo(chart)
    y = np.asarray(y, dtype=float)
    s = float(y @ y)
    d = s + 1.0
    yy = np.outer(y, y)
    sym = (
        _EYE2[:, :, None] * y[None, None, :]
        + _EYE2[:, None, :] * y[None, :, None]
        + _EYE2[None, :, :] * y[:, None, None]
    )
    d2 = np.empty((3, 2, 2))
    d2[:2] = (-4.0 / d**2) * sym + (16.0 / d**3) * (y[:, None, None] * yy[None, :, :])
    d2[2] = (4.0 / d**2) * _EYE2 - (16.0 / d**3) * yy
    if chart.kind == SOUTH_STEREO:
        d2[2] *= -1.0
    return d2


def chart_transition(
    frm: ChartId, to: ChartId, y: np.ndarray, ydot: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Re-express a chart state in the other stereographic chart.

    The transition map is the plane inversion y -> y / |y|^2; velocities are
    pushed through its Jacobian.  The embedded point and embedded velocity are
    preserved exactly.
    """
    _require_stereo(frm)
    _require_stereo(to)
    y = np.asarray(y, dtype=float)
    ydot = np.asarray(ydot, dtype=float)
    if frm.kind == to.kind:
        return y.copy(), ydot.copy()
    s = float(y @ y)
    if s <= TRANSITION_EPS**2:
        raise TransitionSingularityError("transition map singular at y = 0")
    y_new = y / s
    jac = np.eye(2) / s - 2.0 * np.outer(y, y) / s**2
    return y_new, jac @ ydot


class Metric:
    """Riemannian metric on an n-dimensional chart domain."""

    dim: int

    def matrix(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return np.linalg.inv(self.matrix(y))

    def christoffel(self, y: np.ndarray) -> np.ndarray:
        """Christoffel symbols, indexed ``gamma[k, i, j]``."""
        raise NotImplementedError

    @property
    def is_flat(self) -> bool:
        return False


@dataclass(frozen=True)
class FlatMetric(Metric):
    """Identity metric on R^n; all Christoffel symbols vanish.

    The returned arrays are cached constants; callers must not mutate them.
    """

    dim: int

    def __post_init__(self):
        object.__setattr__(self, "_eye", np.eye(self.dim))
        object.__setattr__(self, "_gamma", np.zeros((self.dim,) * 3))

    def matrix(self, y):
        return self._eye

    def inverse(self, y):
        return self._eye

    def christoffel(self, y):
        return self._gamma

    @property
    def is_flat(self):
        return True


@dataclass(frozen=True)
class RoundStereographicMetric(Metric):
    """Round sphere metric in stereographic coordinates.

    g_ij = 4 / (1 + |y|^2)^2 delta_ij, the pullback of the embedded unit-sphere
    metric through either stereographic chart, with
    Gamma^k_ij = -2/(1+|y|^2) (y_i d_jk + y_j d_ik - y_k d_ij).
    """

    dim: int = 2

    def matrix(self, y):
        y = np.asarray(y, dtype=float)
        s = float(y @ y)
        return (4.0 / (1.0 + s) ** 2) * _EYE2

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        s = float(y @ y)
        return ((1.0 + s) ** 2 / 4.0) * _EYE2

    def christoffel(self, y):
        y = np.asarray(y, dtype=float)
        s = float(y @ y)
        c = -2.0 / (1.0 + s)
        return c * (
            y[None, :, None] * _EYE2[:, None, :]
            + y[None, None, :] * _EYE2[:, :, None]
            - y[:, None, None] * _EYE2[None, :, :]
        )


@dataclass(frozen=True)
class ScalarDiagonalMetric(Metric):
    """Constant diagonal metric with positive weights."""

    weights: tuple[float, ...]
    dim: int = field(init=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w <= 0.0):
            raise ValueError("diagonal metric weights must be positive")
        object.__setattr__(self, "dim", w.size)
        object.__setattr__(self, "_mat", np.diag(w))
        object.__setattr__(self, "_inv", np.diag(1.0 / w))
        object.__setattr__(self, "_gamma", np.zeros((w.size,) * 3))

    def matrix(self, y):
        return self._mat

    def inverse(self, y):
        return self._inv

    def christoffel(self, y):
        return self._gamma

    @property
    def is_flat(self):
        return True


def metric_eval(metric: Metric, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate ``(g, g_inv, christoffel)`` at a point."""
    y = np.asarray(y, dtype=float)
    return metric.matrix(y), metric.inverse(y), metric.christoffel(y)


def sharp(g_inv: np.ndarray, covector: np.ndarray) -> np.ndarray:
    """Raise a covector to a vector: ``g_inv @ covector``."""
    return np.asarray(g_inv, dtype=float) @ np.asarray(covector, dtype=float)


def riemannian_hessian_correction(
    coord_hessian_quadform: float,
    grad_row: np.ndarray,
    christoffel_m: np.ndarray,
    vel: np.ndarray,
) -> float:
    """Convert a coordinate Hessian quadratic form to the metric Hessian.

    Returns ``quadform - grad_k Gamma^k_ij v^i v^j``; with flat configuration
    Christoffels the correction vanishes.
    """
    grad_row = np.asarray(grad_row, dtype=float)
    vel = np.asarray(vel, dtype=float)
    correction = float(np.einsum("k,kij,i,j->", grad_row, christoffel_m, vel, vel))
    return float(coord_hessian_quadform) - correction


def geodesic_distance_s2(x_a: np.ndarray, x_b: np.ndarray) -> float:
    """Arc length between two unit vectors on the sphere."""
    dot = float(np.clip(np.dot(x_a, x_b), -1.0, 1.0))
    return float(np.arccos(dot))
