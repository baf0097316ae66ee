import numpy as np
import pytest

from geopolicy.behaviors import (
    BehaviorTask,
    LinearDissipation,
    QuadraticPotential,
    closed_form_accel,
)
from geopolicy.geom import NORTH, FlatMetric, RoundStereographicMetric
from geopolicy.policy import ControlTask, Policy
from geopolicy.safety import ArcDistS2, BcbfTask, EcbfTask, LowerBound
from geopolicy.taskmaps import CoordinateProjection, IdentityMap, StereoEmbeddingMap

CENTER = np.array([1.0, 1.0, 0.0]) / np.sqrt(2)
GOAL = np.array([0.0, 1.0, 0.0])


def s2_behaviors(k=4.0, b=4.0):
    emb = StereoEmbeddingMap(NORTH)
    return [
        BehaviorTask("attract", emb, potential=QuadraticPotential(tuple(GOAL), k)),
        BehaviorTask("damp", emb, dissipation=LinearDissipation(b * np.eye(3))),
    ]


def s2_safeties(kind="ecbf"):
    if kind == "ecbf":
        return [
            EcbfTask(
                "obstacle",
                StereoEmbeddingMap(NORTH),
                ArcDistS2(center=CENTER, radius=0.5),
                2.0,
                4.0,
            )
        ]
    return [
        BcbfTask(
            "obstacle",
            IdentityMap(2),
            ArcDistS2(center=CENTER, radius=0.5, chart=NORTH),
            RoundStereographicMetric(),
        )
    ]


def chart_control(scale=4.0):
    metric = RoundStereographicMetric()
    return ControlTask("steer", IdentityMap(2), metric, metric, weight_scale=scale)


class TestAutonomous:
    def test_unconstrained_step_matches_closed_form(self):
        behaviors = s2_behaviors()
        policy = Policy(behaviors)
        rng = np.random.default_rng(0)
        for _ in range(10):
            y, v = rng.normal(size=2), rng.normal(size=2)
            step = policy.control_step(y, v)
            expected = closed_form_accel(behaviors, y, v)
            np.testing.assert_allclose(step.sigma_ddot, expected, atol=1e-9)
            np.testing.assert_allclose(step.a_bar, expected, atol=1e-9)

    def test_constraint_rows_respected(self):
        policy = Policy(s2_behaviors(), s2_safeties("ecbf"))
        rng = np.random.default_rng(1)
        for _ in range(20):
            y, v = rng.normal(size=2), 0.5 * rng.normal(size=2)
            step = policy.control_step(y, v)
            for row in step.rows:
                if row.coeff is not None:
                    margin = row.coeff @ step.sigma_ddot - row.rhs
                    assert margin >= -1e-8 * (1 + abs(row.rhs))
            assert step.qp1.status != "relaxed"

    def test_safety_rows_constrain_both_solves(self):
        policy = Policy(s2_behaviors(), s2_safeties("ecbf"), [chart_control()])
        y = np.array([0.55, 0.28])  # near the cap boundary
        v = np.array([0.5, 0.5])
        policy.set_action(0, np.array([5.0, 5.0]))
        step = policy.control_step(y, v)
        for row in step.rows:
            if row.coeff is not None:
                assert row.coeff @ step.sigma_ddot - row.rhs >= -1e-8
                assert row.coeff @ step.a_bar - row.rhs >= -1e-8


class TestZeroActionRecovery:
    @pytest.mark.parametrize("kind", ["ecbf", "bcbf"])
    def test_zero_input_returns_autonomous(self, kind):
        policy = Policy(s2_behaviors(), s2_safeties(kind), [chart_control()])
        rng = np.random.default_rng(2)
        for _ in range(25):
            y, v = rng.normal(size=2), rng.normal(size=2)
            step = policy.control_step(y, v)
            assert np.linalg.norm(step.sigma_ddot - step.a_bar) <= 1e-8 * (
                1 + np.linalg.norm(step.a_bar)
            )

    def test_qp2_objective_minimal_at_abar(self):
        policy = Policy(s2_behaviors(), s2_safeties("ecbf"), [chart_control()])
        rng = np.random.default_rng(3)
        for _ in range(20):
            y, v = rng.normal(size=2), rng.normal(size=2)
            p1, build_qp2, *_ = policy.qp_problems(y, v)
            from geopolicy.qp import solve

            a_bar = solve(p1).a
            p2 = build_qp2(a_bar)
            sol2 = solve(p2)
            scale = 1.0 + abs(p2.objective(a_bar))
            assert p2.objective(a_bar) <= p2.objective(sol2.a) + 1e-10 * scale


class TestSteering:
    def test_dominant_control_weight_shifts_by_sharped_input(self):
        # a single full-rank identity control task with enormous weight and no
        # binding constraints drives sigma_ddot toward a_bar + u#
        behaviors = s2_behaviors()
        control = ControlTask(
            "steer", IdentityMap(2), FlatMetric(2), np.eye(2), weight_scale=1e6
        )
        policy = Policy(behaviors, [], [control])
        y = np.array([0.3, -0.2])
        v = np.array([0.1, 0.4])
        u = np.array([0.7, -0.3])
        policy.set_action(0, u)
        step = policy.control_step(y, v)
        expected = step.a_bar + u  # flat metric: u# = u
        rel = np.linalg.norm(step.sigma_ddot - expected) / np.linalg.norm(expected)
        assert rel < 1e-3

    def test_objective_decomposition(self):
        # QP2 objective(a) = QP1 objective(a) + control residual(a)
        policy = Policy(s2_behaviors(), s2_safeties("ecbf"), [chart_control()])
        rng = np.random.default_rng(4)
        y, v = rng.normal(size=2), rng.normal(size=2)
        policy.set_action(0, rng.normal(size=2))
        p1, build_qp2, *_ = policy.qp_problems(y, v)
        from geopolicy.qp import solve

        a_bar = solve(p1).a
        p2 = build_qp2(a_bar)
        ctrl = policy.controls[0]
        x = ctrl.task_map.value(y)
        w = ctrl.weight_matrix(x)
        u_sharp = ctrl.sharped_input(x)
        jac = ctrl.task_map.jacobian(y)
        for _ in range(20):
            a = rng.normal(size=2)
            resid = jac @ (a - a_bar) - u_sharp
            extra = 0.5 * resid @ w @ resid
            lhs = p2.objective(a)
            rhs = p1.objective(a) + extra
            # both sides share a constant offset independent of a
            a0 = np.zeros(2)
            resid0 = jac @ (a0 - a_bar) - u_sharp
            offset = (p2.objective(a0)) - (p1.objective(a0) + 0.5 * resid0 @ w @ resid0)
            assert lhs == pytest.approx(rhs + offset, abs=1e-9)

    def test_binding_row_stays_tight_with_adversarial_push(self):
        # one control task pushing into a single binding row: the row stays
        # satisfied with equality and carries a positive dual
        behaviors = s2_behaviors()
        safeties = s2_safeties("ecbf")
        control = chart_control(scale=10.0)
        policy = Policy(behaviors, safeties, [control])
        y = np.array([0.55, 0.28])
        v = np.array([0.6, 0.6])
        # push straight toward the cap center in the chart
        from geopolicy.geom import stereo_jacobian, stereo_embed

        x = stereo_embed(NORTH, y)
        d = CENTER - (CENTER @ x) * x
        u = 10.0 * stereo_jacobian(NORTH, y).T @ (d / np.linalg.norm(d))
        policy.set_action(0, u)
        step = policy.control_step(y, v)
        row = step.rows[0]
        if row.coeff is not None and step.active[0]:
            margin = row.coeff @ step.sigma_ddot - row.rhs
            assert abs(margin) <= 1e-6 * (1 + abs(row.rhs))
            idx = 0
            assert step.qp2.duals[idx] > 0.0

    def test_set_action_validation(self):
        policy = Policy(s2_behaviors(), [], [chart_control()])
        with pytest.raises(ValueError):
            policy.set_action(0, np.zeros(3))
        with pytest.raises(ValueError):
            policy.set_action(0, np.array([np.nan, 0.0]))


class TestJointLimits:
    def test_limit_rows_clamp_runaway(self):
        # strong pull toward the limit; the row must keep the acceleration
        # from violating the second-order condition
        m = 3
        behaviors = [
            BehaviorTask(
                "pull",
                IdentityMap(m),
                potential=QuadraticPotential((-5.0, 0.0, 0.0), 10.0),
            )
        ]
        safeties = [
            EcbfTask("jlim0_lo", CoordinateProjection(m, 0), LowerBound(limit=-1.0), 2.0, 4.0)
        ]
        policy = Policy(behaviors, safeties)
        sigma = np.array([-0.99, 0.0, 0.0])
        vel = np.array([-0.1, 0.0, 0.0])
        step = policy.control_step(sigma, vel)
        row = step.rows[0]
        assert row.coeff @ step.sigma_ddot >= row.rhs - 1e-8

    def test_accel_bounds_rows(self):
        behaviors = [
            BehaviorTask(
                "pull",
                IdentityMap(2),
                potential=QuadraticPotential((10.0, 0.0), 100.0),
            )
        ]
        policy = Policy(behaviors, accel_bounds=np.array([1.0, 1.0]))
        step = policy.control_step(np.zeros(2), np.zeros(2))
        assert np.all(np.abs(step.sigma_ddot) <= 1.0 + 1e-8)
