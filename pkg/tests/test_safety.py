import numpy as np
import pytest

from geopolicy.geom import NORTH, FlatMetric, RoundStereographicMetric, metric_eval
from geopolicy.safety import (
    ArcDistS2,
    BcbfTask,
    EcbfTask,
    LowerBound,
    SignedDistanceMargin,
    SubmersionViolationError,
    UpperBound,
    ZeroField,
    half_sontag,
)
from geopolicy.taskmaps import (
    CoordinateProjection,
    IdentityMap,
    StereoEmbeddingMap,
    TaskMap,
)

CENTER = np.array([1.0, 1.0, 0.0]) / np.sqrt(2)


def s2_ecbf(p1=2.0, p2=4.0):
    return EcbfTask(
        "obstacle",
        StereoEmbeddingMap(NORTH),
        ArcDistS2(center=CENTER, radius=0.5),
        p1,
        p2,
    )


def s2_bcbf(metric=None, **kw):
    return BcbfTask(
        "obstacle",
        IdentityMap(2),
        ArcDistS2(center=CENTER, radius=0.5, chart=NORTH),
        metric or RoundStereographicMetric(),
        **kw,
    )


class TestSafetyFunctions:
    def test_arc_distance_values(self):
        h0 = ArcDistS2(center=np.array([0.0, 0.0, 1.0]), radius=0.5)
        # at the center itself the arccos argument is clamped to 1 - 1e-12,
        # which perturbs the value by ~1.4e-6
        assert h0.value(np.array([0.0, 0.0, 1.0])) == pytest.approx(-0.5, abs=2e-6)
        assert h0.value(np.array([1.0, 0.0, 0.0])) == pytest.approx(np.pi / 2 - 0.5)

    def test_arc_distance_grad_hess_match_fd(self):
        h0 = ArcDistS2(center=CENTER, radius=0.5)
        rng = np.random.default_rng(0)
        h = 1e-6
        for _ in range(20):
            x = rng.normal(size=3)
            x /= np.linalg.norm(x)
            if abs(abs(x @ CENTER) - 1.0) < 1e-3:
                continue
            grad = h0.grad(x)
            fd = np.array(
                [
                    (h0.value(x + h * e) - h0.value(x - h * e)) / (2 * h)
                    for e in np.eye(3)
                ]
            )
            np.testing.assert_allclose(grad, fd, atol=1e-6)

    def test_bounds(self):
        lo = LowerBound(limit=-1.0)
        hi = UpperBound(limit=2.0)
        assert lo.value([0.5]) == pytest.approx(1.5)
        assert hi.value([0.5]) == pytest.approx(1.5)
        assert lo.grad([0.5])[0] == 1.0
        assert hi.grad([0.5])[0] == -1.0
        margin = SignedDistanceMargin(margin=0.1)
        assert margin.value([0.25]) == pytest.approx(0.15)

    def test_violation_uses_padding_only_for_classification(self):
        h0 = SignedDistanceMargin(margin=0.0, padding=1e-3)
        assert not h0.violates(-5e-4)
        assert h0.violates(-2e-3)


class TestEcbfRow:
    def test_joint_limit_row(self):
        # lower joint limit: c = e_j, rhs = -k2 vd_j - k1 (s_j - lo)
        task = EcbfTask("jlim", CoordinateProjection(7, 2), LowerBound(limit=-1.5), 2.0, 4.0)
        sigma = np.zeros(7)
        sigma[2] = -1.0
        vel = np.zeros(7)
        vel[2] = -0.3
        row = task.row(sigma, vel)
        expected = np.zeros(7)
        expected[2] = 1.0
        np.testing.assert_allclose(row.coeff, expected)
        assert row.rhs == pytest.approx(-6.0 * (-0.3) - 8.0 * 0.5)
        assert row.h0 == pytest.approx(0.5)
        assert row.h0dot == pytest.approx(-0.3)

    def test_rest_on_boundary(self):
        task = EcbfTask("jlim", CoordinateProjection(3, 0), LowerBound(limit=0.0), 1.0, 2.0)
        row = task.row(np.zeros(3), np.zeros(3))
        assert row.rhs == pytest.approx(0.0)

    def test_sphere_row_matches_fd_assembly(self):
        # term-by-term finite-difference oracle of the second-order condition
        task = s2_ecbf()
        rng = np.random.default_rng(1)
        for _ in range(10):
            y = rng.normal(scale=1.2, size=2)
            vel = rng.normal(size=2)
            row = task.row(y, vel)

            def h0_of(s):
                return task.h0.value(task.task_map.value(s))

            h = 1e-5
            fd_grad = np.array(
                [(h0_of(y + h * e) - h0_of(y - h * e)) / (2 * h) for e in np.eye(2)]
            )
            hh = 1e-4
            fd_hess = np.empty((2, 2))
            for k, ek in enumerate(np.eye(2)):
                for l, el in enumerate(np.eye(2)):
                    fd_hess[k, l] = (
                        h0_of(y + hh * ek + hh * el)
                        - h0_of(y + hh * ek - hh * el)
                        - h0_of(y - hh * ek + hh * el)
                        + h0_of(y - hh * ek - hh * el)
                    ) / (4 * hh * hh)
            h0v = h0_of(y)
            h0dot = fd_grad @ vel
            rhs = -(vel @ fd_hess @ vel) - task.kappa2 * h0dot - task.kappa1 * h0v
            np.testing.assert_allclose(row.coeff, fd_grad, atol=1e-4)
            assert row.rhs == pytest.approx(rhs, abs=1e-4)

    def test_degenerate_gradient_dropped(self):
        # at the antipode of the cap center the composite gradient vanishes
        task = EcbfTask(
            "obstacle",
            StereoEmbeddingMap(NORTH),
            ArcDistS2(center=np.array([0.0, 0.0, 1.0]), radius=0.3),
            2.0,
            4.0,
        )
        row = task.row(np.zeros(2), np.zeros(2))  # chart origin = south pole
        assert row.dropped
        assert row.coeff is None

    def test_pole_validation(self):
        with pytest.raises(ValueError):
            EcbfTask("bad", CoordinateProjection(2, 0), LowerBound(limit=0.0), -1.0, 2.0)


class TestEcbfInitialCheck:
    def test_safe_at_rest_ok(self):
        task = EcbfTask("jlim", CoordinateProjection(1, 0), LowerBound(limit=-0.5), 1.0, 2.0)
        ok, req = task.initial_check(np.array([0.0]), np.array([0.0]))
        assert ok and req is None

    def test_approaching_boundary_warns(self):
        # h0 = 0.5, h0dot = -1: requires p1 >= 2
        task = EcbfTask("jlim", CoordinateProjection(1, 0), LowerBound(limit=-0.5), 1.0, 2.0)
        ok, req = task.initial_check(np.array([0.0]), np.array([-1.0]))
        assert not ok
        assert req == pytest.approx(2.0)

    def test_unsafe_start_is_vacuous(self):
        task = EcbfTask("jlim", CoordinateProjection(1, 0), LowerBound(limit=0.1), 1.0, 2.0)
        ok, req = task.initial_check(np.array([0.0]), np.array([5.0]))
        assert ok and req is None


class TestHalfSontag:
    def test_zero_gradient_returns_nominal(self):
        g = np.eye(2)
        xi = np.array([0.3, -0.4])
        out = half_sontag(g, g, np.zeros(2), xi, 0.7, 1.0, 0.05)
        np.testing.assert_allclose(out, xi)

    def test_matches_scalar_reimplementation(self):
        rng = np.random.default_rng(2)
        metric = RoundStereographicMetric()
        for _ in range(30):
            y = rng.normal(scale=1.2, size=2)
            g, g_inv, _ = metric_eval(metric, y)
            dh0 = rng.normal(size=2)
            h0v = rng.normal()
            c_alpha, delta = 1.0, 0.05
            out = half_sontag(g, g_inv, dh0, np.zeros(2), h0v, c_alpha, delta)
            grad = g_inv @ dh0
            beta = float(dh0 @ grad)
            alpha = c_alpha * h0v
            lam = (-alpha + np.sqrt(alpha**2 + beta**2)) / (2 * beta)
            np.testing.assert_allclose(out, (lam + delta) * grad, atol=1e-12)

    def test_asymptotic_regime(self):
        # alpha >> beta: lam -> beta / (4 alpha), so the correction fades and
        # only the strict margin remains
        g = np.eye(1)
        dh0 = np.array([1.0])  # beta = 1
        out = half_sontag(g, g, dh0, np.zeros(1), 100.0, 1.0, 0.05)
        lam = (-100.0 + np.sqrt(100.0**2 + 1.0)) / 2.0
        assert lam == pytest.approx(1.0 / 400.0, rel=1e-3)
        np.testing.assert_allclose(out, [(lam + 0.05)], atol=1e-12)


class TestBcbfValue:
    def test_matching_velocity_recovers_h0(self):
        task = s2_bcbf()
        y = np.array([0.2, -0.4])
        xi = task.safe_velocity(y)
        h, e = task.value(y, xi)
        np.testing.assert_allclose(e, 0.0, atol=1e-14)
        assert h == pytest.approx(task.h0.value(y))

    def test_monotone_in_epsilon(self):
        y = np.array([0.2, -0.4])
        vel = np.array([1.0, 0.5])
        h_small, _ = s2_bcbf(epsilon=0.1).value(y, vel)
        h_large, _ = s2_bcbf(epsilon=1.0).value(y, vel)
        assert h_large < h_small

    def test_flat_metric_hand_example(self):
        # h0 = 0.5, xi_tilde = 0, xd = (1, 0), eps = 0.5 -> h = 0.25
        class ConstH0:
            analytic = True
            affine_slope = None
            padding = 1e-3

            def value(self, x, diag=None):
                return 0.5

            def grad(self, x, diag=None):
                return np.zeros(2)

            def hess(self, x, diag=None):
                return np.zeros((2, 2))

        task = BcbfTask("c", IdentityMap(2), ConstH0(), FlatMetric(2), epsilon=0.5)
        h, e = task.value(np.zeros(2), np.array([1.0, 0.0]))
        assert h == pytest.approx(0.5 - 0.25)


class TestBcbfRow:
    def test_zero_error_row_is_vacuous_and_feasible(self):
        task = s2_bcbf()
        y = np.array([0.2, -0.4])
        xi = task.safe_velocity(y)
        row = task.row(y, xi)
        assert row.coeff is None
        assert row.rhs <= 1e-9  # first-order condition holds by construction

    def test_identity_flat_constant_field_hand_expansion(self):
        # identity map, flat metric, and a stub h0 with constant value and
        # gradient so the safe field is rigorously constant; then
        # hdot = dh0 . yd - eps e . ydd with no other terms
        class FrozenH0:
            analytic = True
            affine_slope = None
            padding = 1e-3

            def value(self, x, diag=None):
                return 0.6

            def grad(self, x, diag=None):
                return np.array([1.0, 0.0])

            def hess(self, x, diag=None):
                return np.zeros((2, 2))

        eps = 0.5
        task = BcbfTask("p", IdentityMap(2), FrozenH0(), FlatMetric(2), epsilon=eps)
        y = np.array([0.8, 0.3])
        vel = np.array([0.4, -0.1])
        xi = task.safe_velocity(y)
        e = vel - xi
        row = task.row(y, vel)
        np.testing.assert_allclose(row.coeff, -eps * e, atol=1e-12)
        h = task.value(y, vel)[0]
        drift = np.array([1.0, 0.0]) @ vel  # constant field: derivative vanishes
        assert row.rhs == pytest.approx(-task.c_alpha * h - drift, abs=1e-9)

    def test_round_vs_flat_rows_differ(self):
        y = np.array([0.8, 0.5])
        vel = np.array([0.6, -0.2])
        row_round = s2_bcbf(RoundStereographicMetric()).row(y, vel)
        row_flat = s2_bcbf(FlatMetric(2)).row(y, vel)
        rel = np.linalg.norm(row_round.coeff - row_flat.coeff) / np.linalg.norm(
            row_round.coeff
        )
        assert rel > 1e-3

    def test_submersion_violation_raises(self):
        class DegenerateMap(TaskMap):
            analytic = True
            input_dim = 2
            output_dim = 2

            def value(self, sigma, cache=None):
                return np.zeros(2)

            def jacobian(self, sigma, cache=None):
                return np.zeros((2, 2))

            def jdot(self, sigma, sigmadot, cache=None):
                return np.zeros((2, 2))

            def second_derivative(self, sigma, cache=None):
                return np.zeros((2, 2, 2))

        class PlaneH0:
            analytic = True
            affine_slope = None
            padding = 1e-3

            def value(self, x, diag=None):
                return float(x[0])

            def grad(self, x, diag=None):
                return np.array([1.0, 0.0])

            def hess(self, x, diag=None):
                return np.zeros((2, 2))

        task = BcbfTask("d", DegenerateMap(), PlaneH0(), FlatMetric(2))
        with pytest.raises(SubmersionViolationError):
            task.row(np.zeros(2), np.ones(2))

    def test_barrier_below_h0(self):
        rng = np.random.default_rng(3)
        task = s2_bcbf()
        for _ in range(20):
            y = rng.normal(scale=1.2, size=2)
            vel = rng.normal(size=2)
            h, _ = task.value(y, vel)
            assert h <= task.h0.value(y) + 1e-12

    def test_nominal_field_zero(self):
        assert np.all(ZeroField()(np.array([1.0, 2.0])) == 0.0)
