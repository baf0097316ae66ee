"""Safety tasks: linear inequality rows on the configuration acceleration.

Two constructions are provided.  The exponential form (relative degree two)
enforces

    d(h0 o f)/ds . sdd  >=  - sd' H sd - kappa2 h0_dot - kappa1 h0

with pole-placed gains kappa1 = p1 p2, kappa2 = p1 + p2; it involves only
coordinate partial derivatives of the composite h0 o f and is therefore
independent of any task-space metric.  The backstepping form lifts a safe
velocity field xi_tilde (half-Sontag filtered nominal field plus a strict
margin along grad h0) to the tangent-bundle barrier

    h(x, xd) = h0(x) - (eps/2) |xd - xi_tilde|_g^2

and enforces hdot >= -c_alpha h, which is again affine in the configuration
acceleration; it depends on the task metric through grad h0, the velocity
error norm, and the covariant derivative of xi_tilde.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .taskmaps import StepCache, TaskMap, composed_grad_hess

DEGENERATE_GRAD_EPS = 1e-12
SUBMERSION_EPS = 1e-6
ARCCOS_CLAMP = 1.0 - 1e-12
DEFAULT_PADDING = 1e-3


class SubmersionViolationError(RuntimeError):
    """Backstepping row requested where the task map loses row rank."""


class SafetyFunction:
    """Scalar function on a task space whose nonnegative set is the safe set.

    ``padding`` widens the *classification* of violations only: a state
    counts as violating when ``value + padding < 0``.  Constraint rows always
    use the raw value.
    """

    analytic: bool = False
    affine_slope: float | None = None
    padding: float = DEFAULT_PADDING

    def value(self, x, diag=None) -> float:
        raise NotImplementedError

    def grad(self, x, diag=None) -> np.ndarray:
        raise NotImplementedError

    def hess(self, x, diag=None) -> np.ndarray:
        raise NotImplementedError

    def violates(self, value: float) -> bool:
        return value + self.padding < 0.0


@dataclass
class ArcDistS2(SafetyFunction):
    """Spherical arc distance to a fixed center minus a cap radius.

    Evaluates ``arccos(x . center) - radius``.  With ``chart`` set, the input
    is a 2-vector of stereographic chart coordinates which is embedded first;
    otherwise the input is the embedded unit 3-vector itself.  The arccos
    argument is clamped to 1 - 1e-12 in magnitude (flagged via ``diag``).
    """

    center: np.ndarray
    radius: float
    chart: geom.ChartId | None = None
    padding: float = DEFAULT_PADDING
    analytic: bool = field(default=True, init=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if abs(np.linalg.norm(self.center) - 1.0) > 1e-9:
            raise ValueError("cap center must be a unit vector")

    def _clamped_dot(self, x, diag):
        u = float(np.dot(x, self.center))
        if abs(u) > ARCCOS_CLAMP:
            if diag is not None:
                diag["domain_clamp"] = True
            u = np.clip(u, -ARCCOS_CLAMP, ARCCOS_CLAMP)
        return u

    def _embed(self, x):
        if self.chart is None:
            return np.asarray(x, dtype=float)
        return geom.stereo_embed(self.chart, np.asarray(x, dtype=float))

    def value(self, x, diag=None) -> float:
        return float(np.arccos(self._clamped_dot(self._embed(x), diag))) - self.radius

    def value_and_grad(self, x, diag=None) -> tuple[float, np.ndarray]:
        u = self._clamped_dot(self._embed(x), diag)
        g_emb = -self.center / np.sqrt(1.0 - u * u)
        value = float(np.arccos(u)) - self.radius
        if self.chart is None:
            return value, g_emb
        jac = geom.stereo_jacobian(self.chart, np.asarray(x, dtype=float))
        return value, jac.T @ g_emb

    def grad(self, x, diag=None) -> np.ndarray:
        return self.value_and_grad(x, diag)[1]

    def hess(self, x, diag=None) -> np.ndarray:
        u = self._clamped_dot(self._embed(x), diag)
        s = 1.0 - u * u
        h_emb = -u / s**1.5 * np.outer(self.center, self.center)
        if self.chart is None:
            return h_emb
        y = np.asarray(x, dtype=float)
        jac = geom.stereo_jacobian(self.chart, y)
        d2 = geom.stereo_second_derivative(self.chart, y)
        g_emb = -self.center / np.sqrt(s)
        return jac.T @ h_emb @ jac + np.einsum("a,aij->ij", g_emb, d2)


@dataclass
class LowerBound(SafetyFunction):
    """h0(x) = x - limit on a scalar task space."""

    limit: float
    padding: float = DEFAULT_PADDING
    analytic: bool = field(default=True, init=False)
    affine_slope: float | None = field(default=1.0, init=False)

    def value(self, x, diag=None):
        return float(np.asarray(x).reshape(-1)[0]) - self.limit

    def grad(self, x, diag=None):
        return np.array([1.0])

    def hess(self, x, diag=None):
        return np.zeros((1, 1))


@dataclass
class UpperBound(SafetyFunction):
    """h0(x) = limit - x on a scalar task space."""

    limit: float
    padding: float = DEFAULT_PADDING
    analytic: bool = field(default=True, init=False)
    affine_slope: float | None = field(default=-1.0, init=False)

    def value(self, x, diag=None):
        return self.limit - float(np.asarray(x).reshape(-1)[0])

    def grad(self, x, diag=None):
        return np.array([-1.0])

    def hess(self, x, diag=None):
        return np.zeros((1, 1))


@dataclass
class SignedDistanceMargin(SafetyFunction):
    """h0(x) = x - margin for signed-distance task spaces."""

    margin: float = 0.0
    padding: float = DEFAULT_PADDING
    analytic: bool = field(default=True, init=False)
    affine_slope: float | None = field(default=1.0, init=False)

    def value(self, x, diag=None):
        return float(np.asarray(x).reshape(-1)[0]) - self.margin

    def grad(self, x, diag=None):
        return np.array([1.0])

    def hess(self, x, diag=None):
        return np.zeros((1, 1))


@dataclass
class ConstraintRow:
    """One half-space ``coeff . sdd >= rhs`` plus per-row diagnostics."""

    name: str
    kind: str
    coeff: np.ndarray | None  # None when the row is vacuous at this state
    rhs: float
    h0: float
    h0dot: float | None = None
    h: float | None = None
    e_norm: float | None = None
    dropped: bool = False
    domain_clamp: bool = False


@dataclass
class EcbfTask:
    """Pole-placed relative-degree-two safety row on a task map."""

    name: str
    task_map: TaskMap
    h0: SafetyFunction
    p1: float
    p2: float

    def __post_init__(self):
        if self.p1 <= 0.0 or self.p2 <= 0.0:
            raise ValueError("poles must be positive")
        # affine composite: constant gradient row and vanishing Hessian
        self._const_grad = None
        slope = getattr(self.h0, "affine_slope", None)
        if self.task_map.is_affine and slope is not None:
            zero = np.zeros(self.task_map.input_dim)
            self._const_grad = slope * self.task_map.jacobian(zero)[0]

    @property
    def kappa1(self) -> float:
        return self.p1 * self.p2

    @property
    def kappa2(self) -> float:
        return self.p1 + self.p2

    def row(self, sigma, sigmadot, cache: StepCache | None = None) -> ConstraintRow:
        sigma = np.asarray(sigma, dtype=float)
        sigmadot = np.asarray(sigmadot, dtype=float)
        if self._const_grad is not None:
            grad = self._const_grad
            h0v = self.h0.value(self.task_map.value(sigma, cache))
            h0dot = float(grad @ sigmadot)
            rhs = -self.kappa2 * h0dot - self.kappa1 * h0v
            return ConstraintRow(self.name, "ecbf", grad, rhs, h0v, h0dot)
        diag: dict = {}
        grad, hess = composed_grad_hess(self.task_map, self.h0, sigma, cache, diag=diag)
        h0v = self.h0.value(self.task_map.value(sigma, cache), diag=diag)
        clamp = bool(diag.get("domain_clamp", False))
        if np.linalg.norm(grad) < DEGENERATE_GRAD_EPS:
            return ConstraintRow(
                self.name, "ecbf", None, 0.0, h0v, 0.0, dropped=True, domain_clamp=clamp
            )
        h0dot = float(grad @ sigmadot)
        quad = float(sigmadot @ hess @ sigmadot)
        rhs = -quad - self.kappa2 * h0dot - self.kappa1 * h0v
        return ConstraintRow(
            self.name, "ecbf", grad, rhs, h0v, h0dot, domain_clamp=clamp
        )

    def initial_check(self, sigma0, sigmadot0) -> tuple[bool, float | None]:
        """Pole admissibility at the initial state.

        Returns ``(ok, required_p1)``.  Vacuously ok when starting at or
        outside the boundary (recovery mode); otherwise requires
        ``p1 >= -h0_dot / h0``.
        """
        row = self.row(np.asarray(sigma0, float), np.asarray(sigmadot0, float))
        if row.h0 <= 0.0:
            return True, None
        required = -(row.h0dot or 0.0) / row.h0
        if self.p1 >= required:
            return True, None
        return False, required


class NominalField:
    """Velocity field on the task space used as the backstepping nominal."""

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ZeroField(NominalField):
    def __call__(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


@dataclass
class NegGradPotentialField(NominalField):
    """xi = -grad Phi, sharped through the task metric."""

    potential: object  # behaviors.Potential
    metric: geom.Metric

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return -self.metric.inverse(x) @ self.potential.gradient(x)


def half_sontag(
    g: np.ndarray,
    g_inv: np.ndarray,
    dh0: np.ndarray,
    xi: np.ndarray,
    h0_value: float,
    c_alpha: float,
    delta: float,
) -> np.ndarray:
    """Safe velocity field value at one point.

    Adds ``lam * grad h0`` to the nominal field, where ``lam`` solves the
    smooth half-Sontag tradeoff between the constraint margin
    ``a = c_alpha h0 + <grad h0, xi>`` and the gradient energy
    ``b = |grad h0|^2`` (``lam = (-a + sqrt(a^2 + b^2)) / (2 b)``, zero when
    b vanishes), then appends the strict margin ``delta * grad h0``.
    """
    grad = g_inv @ dh0
    beta = float(dh0 @ grad)
    if beta <= 0.0:
        return np.asarray(xi, dtype=float).copy()
    alpha = c_alpha * h0_value + float(dh0 @ xi)
    lam = (-alpha + np.sqrt(alpha * alpha + beta * beta)) / (2.0 * beta)
    return xi + (lam + delta) * grad


@dataclass
class BcbfTask:
    """Backstepping safety row on a submersive task map with metric ``metric``."""

    name: str
    task_map: TaskMap
    h0: SafetyFunction
    metric: geom.Metric
    nominal: NominalField = field(default_factory=ZeroField)
    c_alpha: float = 1.0
    delta: float = 0.05
    epsilon: float = 0.5

    def __post_init__(self):
        if min(self.c_alpha, self.delta, self.epsilon) <= 0.0:
            raise ValueError("c_alpha, delta, epsilon must be positive")

    def safe_velocity(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        g_inv = self.metric.inverse(x)
        if hasattr(self.h0, "value_and_grad"):
            h0v, dh0 = self.h0.value_and_grad(x)
        else:
            h0v, dh0 = self.h0.value(x), self.h0.grad(x)
        return half_sontag(
            self.metric.matrix(x), g_inv, dh0, self.nominal(x), h0v, self.c_alpha, self.delta
        )

    def value(self, sigma, sigmadot, cache: StepCache | None = None):
        """Barrier value ``h`` and velocity error ``e_x`` at the state."""
        sigma = np.asarray(sigma, dtype=float)
        sigmadot = np.asarray(sigmadot, dtype=float)
        x = self.task_map.value(sigma, cache)
        xdot = self.task_map.jacobian(sigma, cache) @ sigmadot
        e = xdot - self.safe_velocity(x)
        g = self.metric.matrix(x)
        h = self.h0.value(x) - 0.5 * self.epsilon * float(e @ g @ e)
        return h, e

    def _field_derivative(self, x, xdot, xi_here, dh0, g_inv, gamma):
        """Covariant derivative of the safe velocity field along xdot.

        Directional finite difference (step 1e-5, taken only where the
        gradient energy is bounded away from zero so the filter is smooth)
        plus the task Christoffel correction.
        """
        nv = float(np.linalg.norm(xdot))
        if nv < 1e-12:
            deriv = np.zeros_like(xi_here)
        else:
            beta = float(dh0 @ (g_inv @ dh0))
            eps = 1e-5 / max(1.0, nv)
            if beta > 1e-10:
                xp = self.safe_velocity(x + eps * xdot)
                xm = self.safe_velocity(x - eps * xdot)
            else:
                xp = self.nominal(x + eps * xdot)
                xm = self.nominal(x - eps * xdot)
            deriv = (xp - xm) / (2.0 * eps)
        return deriv + np.einsum("kij,i,j->k", gamma, xdot, xi_here)

    def row(self, sigma, sigmadot, cache: StepCache | None = None) -> ConstraintRow:
        sigma = np.asarray(sigma, dtype=float)
        sigmadot = np.asarray(sigmadot, dtype=float)
        x = self.task_map.value(sigma, cache)
        jac = self.task_map.jacobian(sigma, cache)
        g, g_inv, gamma = geom.metric_eval(self.metric, x)
        if hasattr(self.h0, "value_and_grad"):
            h0v, dh0 = self.h0.value_and_grad(x)
        else:
            h0v, dh0 = self.h0.value(x), self.h0.grad(x)
        xdot = jac @ sigmadot
        xi_tilde = half_sontag(g, g_inv, dh0, self.nominal(x), h0v, self.c_alpha, self.delta)
        e = xdot - xi_tilde
        e_norm = float(np.sqrt(max(e @ g @ e, 0.0)))
        h = h0v - 0.5 * self.epsilon * float(e @ g @ e)

        if e_norm <= 1e-12:
            # zero velocity error: the row has no acceleration coefficient and
            # reduces to the first-order condition on xi_tilde, which the
            # half-Sontag construction satisfies.
            drift = float(dh0 @ xdot)
            rhs = -self.c_alpha * h - drift
            return ConstraintRow(self.name, "bcbf", None, rhs, h0v, h=h, e_norm=e_norm)

        min_sv = self.task_map.min_singular_value(sigma, cache)
        if min_sv < SUBMERSION_EPS:
            raise SubmersionViolationError(
                f"{self.name}: task map is not a submersion at this state "
                f"(min singular value {min_sv:.3e}) with nonzero velocity error"
            )

        coeff = -self.epsilon * (jac.T @ (g @ e))
        curv = self.task_map.jdot(sigma, sigmadot, cache) @ sigmadot + np.einsum(
            "kij,i,j->k", gamma, xdot, xdot
        )
        field_deriv = self._field_derivative(x, xdot, xi_tilde, dh0, g_inv, gamma)
        drift = (
            float(dh0 @ xdot)
            + self.epsilon * float(e @ g @ field_deriv)
            - self.epsilon * float(e @ g @ curv)
        )
        rhs = -self.c_alpha * h - drift
        return ConstraintRow(self.name, "bcbf", coeff, rhs, h0v, h=h, e_norm=e_norm)
