import numpy as np
import pytest

from geopolicy.behaviors import (
    BehaviorTask,
    LinearDissipation,
    QuadraticPotential,
    ScalarSquarePotential,
    closed_form_accel,
    desired_task_accel,
    normal_equations,
    residual,
)
from geopolicy.geom import NORTH, FlatMetric, RoundStereographicMetric
from geopolicy.taskmaps import IdentityMap, StereoEmbeddingMap


def embedding_tasks(goal, k=4.0, b=4.0):
    emb = StereoEmbeddingMap(NORTH)
    return [
        BehaviorTask(
            "attractor", emb, potential=QuadraticPotential(center=tuple(goal), gain=k)
        ),
        BehaviorTask("damping", emb, dissipation=LinearDissipation(b * np.eye(3))),
    ]


class TestDesiredAccel:
    def test_all_terms_absent_gives_zero(self):
        task = BehaviorTask("idle", IdentityMap(3))
        np.testing.assert_allclose(
            desired_task_accel(task, np.ones(3), np.ones(3)), 0.0
        )

    def test_flat_spring_damper(self):
        k, b = 3.0, 2.0
        center = np.array([1.0, -1.0])
        task = BehaviorTask(
            "sd",
            IdentityMap(2),
            potential=QuadraticPotential(center=tuple(center), gain=k),
            dissipation=LinearDissipation(b * np.eye(2)),
        )
        sig = np.array([0.5, 0.5])
        vel = np.array([0.1, -0.2])
        np.testing.assert_allclose(
            desired_task_accel(task, sig, vel), -b * vel - k * (sig - center), atol=1e-14
        )

    def test_round_metric_curvature_term(self):
        # identity map on the chart with the round metric, no forces: the
        # desired acceleration is the pure geodesic term -Gamma(v, v)
        task = BehaviorTask("geo", IdentityMap(2), metric=RoundStereographicMetric())
        out = desired_task_accel(task, np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-14)

    def test_matches_index_loop_oracle(self):
        # assemble the desired acceleration term by term in a scalar loop
        rng = np.random.default_rng(0)
        metric = RoundStereographicMetric()
        k, b = 2.0, 1.5
        task = BehaviorTask(
            "full",
            IdentityMap(2),
            metric=metric,
            potential=QuadraticPotential(center=(0.3, -0.2), gain=k),
            dissipation=LinearDissipation(b * np.eye(2)),
        )
        for _ in range(20):
            sig = rng.normal(scale=1.2, size=2)
            vel = rng.normal(size=2)
            g_inv = metric.inverse(sig)
            gamma = metric.christoffel(sig)
            dphi = k * (sig - np.array([0.3, -0.2]))
            fd = -b * vel
            expected = np.zeros(2)
            for a in range(2):
                for bb in range(2):
                    expected[a] += g_inv[a, bb] * (fd[bb] - dphi[bb])
                for i in range(2):
                    for j in range(2):
                        expected[a] -= gamma[a, i, j] * vel[i] * vel[j]
            np.testing.assert_allclose(
                desired_task_accel(task, sig, vel), expected, atol=1e-12
            )


class TestResidual:
    def test_identity_map_keeps_desired(self):
        task = BehaviorTask(
            "sd",
            IdentityMap(2),
            potential=QuadraticPotential(center=(0.0, 0.0), gain=1.0),
        )
        sig, vel = np.array([0.4, 0.1]), np.array([1.0, 2.0])
        np.testing.assert_allclose(
            residual(task, sig, vel), desired_task_accel(task, sig, vel)
        )

    def test_zero_velocity_reduces_to_potential_pull(self):
        goal = np.array([0.0, 1.0, 0.0])
        task = embedding_tasks(goal)[0]
        sig = np.array([0.7, -0.3])
        x = StereoEmbeddingMap(NORTH).value(sig)
        np.testing.assert_allclose(
            residual(task, sig, np.zeros(2)), -4.0 * (x - goal), atol=1e-12
        )

    def test_embedding_attractor_matches_term_by_term_oracle(self):
        rng = np.random.default_rng(1)
        goal = np.array([0.0, 1.0, 0.0])
        emb = StereoEmbeddingMap(NORTH)
        k, b = 4.0, 4.0
        task = BehaviorTask(
            "att",
            emb,
            potential=QuadraticPotential(center=tuple(goal), gain=k),
            dissipation=LinearDissipation(b * np.eye(3)),
        )
        for _ in range(20):
            sig = rng.normal(scale=1.2, size=2)
            vel = rng.normal(size=2)
            x = emb.value(sig)
            jac = emb.jacobian(sig)
            xdot = jac @ vel
            a_des = -b * xdot - k * (x - goal)  # flat task metric
            jd = emb.jdot(sig, vel)
            expected = a_des - jd @ vel
            np.testing.assert_allclose(residual(task, sig, vel), expected, atol=1e-10)


class TestClosedForm:
    def test_single_identity_task_returns_desired(self):
        task = BehaviorTask(
            "sd",
            IdentityMap(3),
            potential=QuadraticPotential(center=(0, 0, 0), gain=2.0),
            dissipation=LinearDissipation(np.eye(3)),
        )
        sig, vel = np.ones(3), np.full(3, -0.5)
        np.testing.assert_allclose(
            closed_form_accel([task], sig, vel),
            desired_task_accel(task, sig, vel),
            atol=1e-12,
        )

    def test_two_identity_tasks_weighted_average(self):
        rng = np.random.default_rng(2)
        a1, a2 = rng.normal(size=2), rng.normal(size=2)
        w1 = np.diag([2.0, 1.0])
        w2 = np.diag([1.0, 3.0])
        t1 = BehaviorTask(
            "t1",
            IdentityMap(2),
            potential=QuadraticPotential(center=tuple(a1), gain=1.0),
            weight=w1,
        )
        t2 = BehaviorTask(
            "t2",
            IdentityMap(2),
            potential=QuadraticPotential(center=tuple(a2), gain=1.0),
            weight=w2,
        )
        # at sigma = 0 the desired accelerations are a1 and a2
        out = closed_form_accel([t1, t2], np.zeros(2), np.zeros(2))
        expected = np.linalg.solve(w1 + w2, w1 @ a1 + w2 @ a2)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_matches_dense_least_squares_oracle(self):
        # three-task blend on the sphere chart: embedding attractor + damping
        # plus chart damping; oracle assembles the stacked least-squares
        # problem densely and solves it with lstsq
        rng = np.random.default_rng(3)
        goal = np.array([0.0, 1.0, 0.0])
        tasks = embedding_tasks(goal)
        tasks.append(
            BehaviorTask(
                "joint_damp",
                IdentityMap(2),
                dissipation=LinearDissipation(0.5 * np.eye(2)),
                weight=0.25 * np.eye(2),
            )
        )
        for _ in range(30):
            sig = rng.normal(scale=1.2, size=2)
            vel = rng.normal(size=2)
            rows = []
            rhs = []
            for task in tasks:
                w = task.weight
                sqrt_w = np.linalg.cholesky(w + 1e-15 * np.eye(w.shape[0]))
                jac = task.task_map.jacobian(sig)
                rows.append(sqrt_w.T @ jac)
                rhs.append(sqrt_w.T @ residual(task, sig, vel))
            sol, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
            np.testing.assert_allclose(
                closed_form_accel(tasks, sig, vel), sol, atol=1e-9
            )

    def test_weight_scaling_invariance(self):
        rng = np.random.default_rng(4)
        goal = np.array([0.0, 1.0, 0.0])
        tasks = embedding_tasks(goal)
        sig, vel = rng.normal(size=2), rng.normal(size=2)
        base = closed_form_accel(tasks, sig, vel)
        scaled = [
            BehaviorTask(
                t.name,
                t.task_map,
                metric=t.metric,
                potential=t.potential,
                dissipation=t.dissipation,
                weight=7.3 * t.weight,
            )
            for t in tasks
        ]
        np.testing.assert_allclose(closed_form_accel(scaled, sig, vel), base, atol=1e-10)

    def test_rank_deficient_normal_matrix(self):
        task = BehaviorTask(
            "proj",
            StereoEmbeddingMap(NORTH),
            weight=np.zeros((3, 3)),
        )
        diag = {}
        out = closed_form_accel([task], np.zeros(2), np.zeros(2), diag=diag)
        np.testing.assert_allclose(out, 0.0)
        assert diag["rank_deficient"] is True

    def test_scalar_square_potential_gradient(self):
        pot = ScalarSquarePotential(gain=1.5)
        assert pot.value([0.4]) == pytest.approx(1.5 * 0.16)
        np.testing.assert_allclose(pot.gradient([0.4]), [2 * 1.5 * 0.4])

    def test_task_image_is_affine_in_acceleration(self):
        # Z(a) - Z(a') = Jf (a - a') exactly
        rng = np.random.default_rng(5)
        emb = StereoEmbeddingMap(NORTH)
        sig, vel = rng.normal(size=2), rng.normal(size=2)
        jac = emb.jacobian(sig)
        jd = emb.jdot(sig, vel)
        for _ in range(10):
            a1, a2 = rng.normal(size=2), rng.normal(size=2)
            z1 = jac @ a1 + jd @ vel
            z2 = jac @ a2 + jd @ vel
            # the jd term cancels identically; only rounding remains
            np.testing.assert_allclose(z1 - z2, jac @ (a1 - a2), rtol=0, atol=1e-14)

    def test_normal_equations_symmetry(self):
        goal = np.array([0.0, 1.0, 0.0])
        tasks = embedding_tasks(goal)
        h, _ = normal_equations(tasks, np.array([0.3, 0.2]), np.array([0.1, 0.1]))
        np.testing.assert_array_equal(h, h.T)
