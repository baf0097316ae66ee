"""Built-in scenario catalog and builders.

Sphere runs (point robot on the unit sphere, chart-coordinate double
integrator):

* ``s2_i`` .. ``s2_xii``  - obstacle-avoidance runs: fixed-chart exponential
  and backstepping rows (round vs. flat chart metric), chart switching,
  recovery from an unsafe start, and steered runs with tangential,
  adversarial, and opposite-chart inputs.
* ``s2_app_a`` .. ``s2_app_f`` - free motion with nonzero initial velocity:
  geodesic integration vs. flat chart integration vs. a forceless embedding
  task, on both charts.

Arm runs (7-DOF serial chain with capsule collision geometry):

* ``arm_pose``           - pose tracking past a workspace obstacle.
* ``arm_so3_batch``      - 50 seeded orientation-tracking scenes with random
  obstacles (``arm_so3_batch_ablation`` removes the obstacle rows).
* ``arm_homotopy_plus`` / ``arm_homotopy_minus`` - position tracking with a
  transient joint-1 steering input selecting the avoidance side.

Scene parameters that the experiments leave open (start/goal points, gains,
steering weights) are fixed here and echoed into every trace's config
sidecar.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .behaviors import (
    BehaviorTask,
    LinearDissipation,
    QuadraticPotential,
    ScalarSquarePotential,
)
from .geom import (
    NORTH,
    SOUTH,
    ChartId,
    FlatMetric,
    RoundStereographicMetric,
    box_chart,
    geodesic_distance_s2,
    stereo_embed,
    stereo_jacobian,
    stereo_unembed,
)
from .kinematics import (
    KinematicChain,
    SphereObstacle,
    load_builtin_chain,
    quat_from_axis_angle,
    quat_mul,
)
from .policy import ControlTask, Policy
from .safety import ArcDistS2, BcbfTask, EcbfTask, LowerBound, SignedDistanceMargin, UpperBound
from .sim import (
    ActionPhase,
    ActionSchedule,
    ConvergenceSpec,
    SimState,
    Trace,
    rk4_step_geometric,
    rollout,
    rollout_ode,
)
from .taskmaps import (
    ChainDistanceMap,
    ChainPositionMap,
    ChainQuatChordMap,
    ChainQuaternionMap,
    CoordinateProjection,
    IdentityMap,
    StereoEmbeddingMap,
    prefetch_chain_step,
)


class ConfigError(ValueError):
    """Invalid scenario configuration; ``field`` names the offending entry."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


# ----------------------------------------------------------------------
# shared sphere scene
# ----------------------------------------------------------------------

X_START_NOMINAL = np.array([1.0, 0.0, 0.0])
X_GOAL = np.array([0.0, 1.0, 0.0])
X_OBSTACLE = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
OBSTACLE_ARC = 0.5
# small out-of-plane offset so the autonomous runs pick a side of the
# obstacle instead of stalling on the symmetric geodesic
START_TILT = 0.02

S2_ATTRACT_GAIN = 4.0
S2_DAMP_GAIN = 4.0
S2_POLES = (2.0, 4.0)
S2_BCBF = {"c_alpha": 1.0, "delta": 0.05, "epsilon": 0.5}
S2_CONTROL_WEIGHT = 4.0
S2_PERP_DURATION = 6.0
S2_DT = 5e-3
S2_T_END = 30.0
# with the 0.5 rad cap on the equator the chart norm peaks near 1.7, so the
# switch must trigger below that to be exercised at all
S2_SWITCH_THRESHOLD = 1.3

ROMANS = ["i", "ii", "iii", "iv", "v", "vi", "vii", "viii", "ix", "x", "xi", "xii"]

S2_TABLE = {
    "s2_i": {"chart": "north", "safety": "ecbf", "metric": "round", "start": "safe"},
    "s2_ii": {"chart": "north", "safety": "bcbf", "metric": "round", "start": "safe"},
    "s2_iii": {"chart": "north", "safety": "bcbf", "metric": "flat", "start": "safe"},
    "s2_iv": {"chart": "switching", "safety": "ecbf", "metric": "round", "start": "safe"},
    "s2_v": {"chart": "switching", "safety": "bcbf", "metric": "round", "start": "safe"},
    "s2_vi": {"chart": "north", "safety": "ecbf", "metric": "round", "start": "unsafe"},
    "s2_vii": {"chart": "north", "safety": "bcbf", "metric": "round", "start": "unsafe"},
    "s2_viii": {"chart": "north", "safety": "ecbf", "metric": "round", "start": "safe",
                 "action": {"type": "zero"}},
    "s2_ix": {"chart": "north", "safety": "ecbf", "metric": "round", "start": "safe",
               "action": {"type": "perp", "sign": 1.0}},
    "s2_x": {"chart": "north", "safety": "ecbf", "metric": "round", "start": "safe",
              "action": {"type": "perp", "sign": -1.0}},
    "s2_xi": {"chart": "north", "safety": "ecbf", "metric": "round", "start": "safe",
               "action": {"type": "unsafe", "magnitude": 10.0}},
    "s2_xii": {"chart": "south", "safety": "ecbf", "metric": "round", "start": "safe",
                "action": {"type": "perp", "sign": -1.0}},
}

APPENDIX_TABLE = {
    "s2_app_a": {"chart": "north", "dynamics": "geometric", "tasks": "none"},
    "s2_app_b": {"chart": "north", "dynamics": "flat", "tasks": "none"},
    "s2_app_c": {"chart": "south", "dynamics": "geometric", "tasks": "none"},
    "s2_app_d": {"chart": "south", "dynamics": "flat", "tasks": "none"},
    "s2_app_e": {"chart": "north", "dynamics": "flat", "tasks": "trivial_embedding"},
    "s2_app_f": {"chart": "south", "dynamics": "flat", "tasks": "trivial_embedding"},
}

ARM_IDS = [
    "arm_pose",
    "arm_so3_batch",
    "arm_so3_batch_ablation",
    "arm_homotopy_plus",
    "arm_homotopy_minus",
]

BUILTIN_IDS = list(S2_TABLE) + list(APPENDIX_TABLE) + ARM_IDS

ARM_HOME = np.array([0.0, -np.pi / 4, 0.0, -3 * np.pi / 4, 0.0, np.pi / 2, np.pi / 4])
ARM_DT = 5e-3
ARM_JLIM_POLES = (2.0, 4.0)
ARM_OBS_POLES = (2.0, 4.0)
ARM_GAINS = {
    "pos_attract": 25.0,
    "pos_damp": 10.0,
    "ori_attract": 12.0,
    "ori_damp": 6.0,
    "joint_damp": 2.0,
    "joint_damp_weight": 0.5,
    "steer_weight": 2.0,
}
SO3_OBSTACLE_RADIUS = 0.08
SO3_CLEARANCE_MIN = 0.05
SO3_BOX_LO = np.array([0.15, -0.45, 0.25])
SO3_BOX_HI = np.array([0.65, 0.45, 0.85])


def _chart_from_name(name: str) -> ChartId:
    return {"north": NORTH, "south": SOUTH}[name]


def tangent_chart_velocity(chart: ChartId, y: np.ndarray, v_emb: np.ndarray) -> np.ndarray:
    """Chart velocity whose pushforward equals the (tangential) embedded velocity."""
    jac = stereo_jacobian(chart, y)
    return np.linalg.solve(jac.T @ jac, jac.T @ v_emb)


def geodesic_point(x_from: np.ndarray, x_toward: np.ndarray, arc: float) -> np.ndarray:
    """Point at the given arc length along the great circle from x_from toward x_toward."""
    t = x_toward - float(x_toward @ x_from) * x_from
    t = t / np.linalg.norm(t)
    return np.cos(arc) * x_from + np.sin(arc) * t


def _s2_start_embedding(start: str) -> np.ndarray:
    if start == "safe":
        x = X_START_NOMINAL + np.array([0.0, 0.0, START_TILT])
        return x / np.linalg.norm(x)
    # recovery start: inside the cap, slightly off the symmetry plane
    toward = X_START_NOMINAL + np.array([0.0, 0.0, 0.15])
    return geodesic_point(X_OBSTACLE, toward / np.linalg.norm(toward), 0.3)


def _s2_policy(chart: ChartId, cfg: dict, with_control: bool) -> Policy:
    emb = StereoEmbeddingMap(chart)
    behaviors = [
        BehaviorTask(
            "attract", emb, potential=QuadraticPotential(tuple(X_GOAL), S2_ATTRACT_GAIN)
        ),
        BehaviorTask(
            "damp", emb, dissipation=LinearDissipation(S2_DAMP_GAIN * np.eye(3))
        ),
    ]
    metric_name = cfg.get("metric", "round")
    if cfg["safety"] == "ecbf":
        # the exponential row ignores the task metric entirely; the metric
        # entry is accepted so round/flat configurations can be compared
        safeties = [
            EcbfTask(
                "obstacle",
                StereoEmbeddingMap(chart),
                ArcDistS2(center=X_OBSTACLE, radius=OBSTACLE_ARC),
                *cfg.get("poles", S2_POLES),
            )
        ]
    else:
        metric = RoundStereographicMetric() if metric_name == "round" else FlatMetric(2)
        params = {**S2_BCBF, **cfg.get("bcbf", {})}
        safeties = [
            BcbfTask(
                "obstacle",
                IdentityMap(2),
                ArcDistS2(center=X_OBSTACLE, radius=OBSTACLE_ARC, chart=chart),
                metric,
                c_alpha=params["c_alpha"],
                delta=params["delta"],
                epsilon=params["epsilon"],
            )
        ]
    controls = []
    if with_control:
        # the steering task lives on the embedding space so the held covector
        # is the same geometric object in every chart; holding a chart
        # covector instead leaves O(dt) chart-dependent residue in the
        # zero-order hold
        controls = [
            ControlTask(
                "steer",
                StereoEmbeddingMap(chart),
                FlatMetric(3),
                np.eye(3),
                weight_scale=S2_CONTROL_WEIGHT,
            )
        ]
    return Policy(behaviors, safeties, controls)


def _tangential_unit(state: SimState, direction_emb: np.ndarray) -> np.ndarray:
    """Unit tangential part of an embedded direction at the current point."""
    x = stereo_embed(state.chart, state.y)
    tang = direction_emb - float(direction_emb @ x) * x
    norm = float(np.linalg.norm(tang))
    if norm < 1e-9:
        return np.zeros(3)
    return tang / norm


def _perp_provider(sign: float):
    normal = np.cross(X_START_NOMINAL, X_GOAL)
    normal = normal / np.linalg.norm(normal)

    def provider(state: SimState) -> np.ndarray:
        return _tangential_unit(state, sign * normal)

    return provider


def _unsafe_provider(magnitude: float):
    def provider(state: SimState) -> np.ndarray:
        return magnitude * _tangential_unit(state, X_OBSTACLE)

    return provider


def _s2_stop() -> ConvergenceSpec:
    return ConvergenceSpec(
        error_fn=lambda s: geodesic_distance_s2(stereo_embed(s.chart, s.y), X_GOAL),
        speed_fn=lambda s: float(
            np.linalg.norm(stereo_jacobian(s.chart, s.y) @ s.ydot)
        ),
        error_tol=1e-2,
        speed_tol=1e-2,
        sustain_steps=50,
    )


@dataclass
class Scenario:
    id: str
    config: dict
    policies: dict[str, Policy] | None
    initial: SimState
    dt: float
    t_end: float
    stop: ConvergenceSpec | None = None
    schedule: ActionSchedule | None = None
    switching: bool = False
    switch_threshold: float = 2.0
    embed_fn: Callable[[SimState], np.ndarray] | None = None
    ode_accel: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)
    build_warnings: list[str] = field(default_factory=list)
    per_step_hold: bool = False

    def run(self) -> Trace:
        if self.ode_accel is not None:
            trace = rollout_ode(
                self.ode_accel,
                self.initial,
                self.dt,
                self.t_end,
                embed_fn=self.embed_fn,
                config=self.config,
            )
        else:
            trace = rollout(
                self.policies,
                self.initial,
                self.schedule,
                self.dt,
                self.t_end,
                self.stop,
                switching=self.switching,
                switch_threshold=self.switch_threshold,
                embed_fn=self.embed_fn,
                per_step_hold=self.per_step_hold,
                config=self.config,
            )
        if self.build_warnings:
            trace.config.setdefault("build_warnings", list(self.build_warnings))
        return trace


@dataclass
class BatchScenario:
    id: str
    config: dict

    def run(self, workers: int = 1) -> dict:
        return run_so3_batch(
            seed=self.config["seed"],
            count=self.config["count"],
            ablate_obstacle_rows=self.config["ablate"],
            workers=workers,
        )


def _build_s2_run(run_id: str, cfg: dict) -> Scenario:
    chart_name = cfg["chart"]
    switching = chart_name == "switching"
    base_chart = NORTH if switching else _chart_from_name(chart_name)
    with_control = "action" in cfg

    policies = {}
    charts = (NORTH, SOUTH) if switching else (base_chart,)
    for chart in charts:
        policies[chart.kind] = _s2_policy(chart, cfg, with_control)

    x0 = _s2_start_embedding(cfg["start"])
    y0 = stereo_unembed(base_chart, x0)
    initial = SimState(base_chart, y0, np.zeros(2))

    schedule = None
    if with_control:
        action = cfg["action"]
        phases = []
        if action["type"] == "perp":
            # transient tangential steering: long enough to commit to a side,
            # then the autonomous behavior finishes the approach
            phases = [
                ActionPhase(
                    0, 0.0, S2_PERP_DURATION, _perp_provider(action["sign"])
                )
            ]
        elif action["type"] == "unsafe":
            # the adversarial push stays on for the whole run
            phases = [ActionPhase(0, 0.0, np.inf, _unsafe_provider(action["magnitude"]))]
        elif action["type"] != "zero":
            raise ConfigError("action.type", f"unknown action {action['type']!r}")
        schedule = ActionSchedule(phases)

    warnings = []
    for chart in charts:
        for task in policies[chart.kind].safeties:
            if isinstance(task, EcbfTask):
                y_chart = stereo_unembed(chart, x0)
                ok, required = task.initial_check(y_chart, np.zeros(2))
                if not ok:
                    warnings.append(
                        f"{task.name}: initial state needs p1 >= {required:.3f}"
                    )

    config = {"id": run_id, "kind": "s2", **cfg,
              "gains": {"attract": S2_ATTRACT_GAIN, "damp": S2_DAMP_GAIN},
              "dt": S2_DT, "t_end": S2_T_END,
              "obstacle": {"center": X_OBSTACLE.tolist(), "arc_radius": OBSTACLE_ARC},
              "goal": X_GOAL.tolist(), "start_embedding": x0.tolist(),
              "switch_threshold": S2_SWITCH_THRESHOLD if switching else None}
    return Scenario(
        id=run_id,
        config=config,
        policies=policies,
        initial=initial,
        dt=S2_DT,
        t_end=S2_T_END,
        stop=_s2_stop(),
        schedule=schedule,
        switching=switching,
        switch_threshold=S2_SWITCH_THRESHOLD,
        embed_fn=lambda s: stereo_embed(s.chart, s.y),
        metadata={
            "goal": X_GOAL,
            "obstacle_center": X_OBSTACLE,
            "obstacle_arc": OBSTACLE_ARC,
            "plane_normal": np.array([0.0, 0.0, 1.0]),
        },
        build_warnings=warnings,
    )


APPENDIX_SPEED = 1.0
APPENDIX_TILT = np.pi / 4
APPENDIX_T_END = 3.0


def _appendix_initial(chart: ChartId) -> SimState:
    x0 = X_START_NOMINAL
    v0 = APPENDIX_SPEED * np.array([0.0, np.cos(APPENDIX_TILT), np.sin(APPENDIX_TILT)])
    y0 = stereo_unembed(chart, x0)
    return SimState(chart, y0, tangent_chart_velocity(chart, y0, v0))


def _build_appendix_run(run_id: str, cfg: dict) -> Scenario:
    chart = _chart_from_name(cfg["chart"])
    initial = _appendix_initial(chart)
    config = {"id": run_id, "kind": "s2_free", **cfg, "dt": S2_DT,
              "t_end": APPENDIX_T_END, "speed": APPENDIX_SPEED,
              "tilt": APPENDIX_TILT}
    metadata = {
        "start_embedding": X_START_NOMINAL,
        "velocity_embedding": APPENDIX_SPEED
        * np.array([0.0, np.cos(APPENDIX_TILT), np.sin(APPENDIX_TILT)]),
    }
    embed = lambda s: stereo_embed(s.chart, s.y)  # noqa: E731

    if cfg["tasks"] == "trivial_embedding":
        policy = Policy([BehaviorTask("embed", StereoEmbeddingMap(chart))])
        return Scenario(
            id=run_id, config=config, policies={chart.kind: policy}, initial=initial,
            dt=S2_DT, t_end=APPENDIX_T_END, embed_fn=embed, metadata=metadata,
        )

    if cfg["dynamics"] == "geometric":
        metric = RoundStereographicMetric()

        def accel(y, v):
            gamma = metric.christoffel(y)
            return -np.einsum("kij,i,j->k", gamma, v, v)

    else:

        def accel(y, v):
            return np.zeros(2)

    return Scenario(
        id=run_id, config=config, policies=None, initial=initial, dt=S2_DT,
        t_end=APPENDIX_T_END, embed_fn=embed, ode_accel=accel, metadata=metadata,
    )


# ----------------------------------------------------------------------
# arm scenarios
# ----------------------------------------------------------------------


def _arm_chart(chain: KinematicChain) -> ChartId:
    return box_chart(chain.dof, chain.lower, chain.upper)


def _joint_limit_tasks(chain: KinematicChain) -> list[EcbfTask]:
    tasks = []
    for j in range(chain.dof):
        tasks.append(
            EcbfTask(
                f"jlim{j}_lo",
                CoordinateProjection(chain.dof, j),
                LowerBound(limit=float(chain.lower[j])),
                *ARM_JLIM_POLES,
            )
        )
        tasks.append(
            EcbfTask(
                f"jlim{j}_hi",
                CoordinateProjection(chain.dof, j),
                UpperBound(limit=float(chain.upper[j])),
                *ARM_JLIM_POLES,
            )
        )
    return tasks


def _obstacle_tasks(chain: KinematicChain, obstacle: SphereObstacle) -> list[EcbfTask]:
    return [
        EcbfTask(
            f"obs_link{k}",
            ChainDistanceMap(chain, k, obstacle),
            SignedDistanceMargin(margin=0.0),
            *ARM_OBS_POLES,
        )
        for k in range(len(chain.links))
    ]


def _arm_behaviors(
    chain: KinematicChain,
    *,
    goal_pos: np.ndarray | None = None,
    goal_quat: np.ndarray | None = None,
) -> list[BehaviorTask]:
    g = ARM_GAINS
    tasks = []
    if goal_pos is not None:
        pos_map = ChainPositionMap(chain)  # shared by attractor and damper
        tasks.append(
            BehaviorTask(
                "pos_attract",
                pos_map,
                potential=QuadraticPotential(tuple(goal_pos), g["pos_attract"]),
            )
        )
        tasks.append(
            BehaviorTask(
                "pos_damp",
                pos_map,
                dissipation=LinearDissipation(g["pos_damp"] * np.eye(3)),
            )
        )
    if goal_quat is not None:
        tasks.append(
            BehaviorTask(
                "ori_attract",
                ChainQuatChordMap(chain, goal_quat),
                potential=ScalarSquarePotential(g["ori_attract"]),
            )
        )
        tasks.append(
            BehaviorTask(
                "ori_damp",
                ChainQuaternionMap(chain, goal_quat),
                dissipation=LinearDissipation(g["ori_damp"] * np.eye(4)),
            )
        )
    tasks.append(
        BehaviorTask(
            "joint_damp",
            IdentityMap(chain.dof),
            dissipation=LinearDissipation(g["joint_damp"] * np.eye(chain.dof)),
            weight=g["joint_damp_weight"] * np.eye(chain.dof),
        )
    )
    return tasks


def _arm_policy(
    chain: KinematicChain,
    *,
    goal_pos=None,
    goal_quat=None,
    obstacle: SphereObstacle | None = None,
    steer_joint: int | None = None,
) -> Policy:
    behaviors = _arm_behaviors(chain, goal_pos=goal_pos, goal_quat=goal_quat)
    safeties = _joint_limit_tasks(chain)
    if obstacle is not None:
        safeties += _obstacle_tasks(chain, obstacle)
    controls = []
    if steer_joint is not None:
        controls = [
            ControlTask(
                "joint_steer",
                CoordinateProjection(chain.dof, steer_joint),
                FlatMetric(1),
                np.eye(1),
                weight_scale=ARM_GAINS["steer_weight"],
            )
        ]

    def prefetch(sigma, sigmadot, cache, _chain=chain, _obs=obstacle, _goal=goal_quat):
        prefetch_chain_step(
            _chain, sigma, sigmadot, cache, chord_goal=_goal, obstacle=_obs
        )

    return Policy(behaviors, safeties, controls, prefetch=prefetch)


def _goal_quat_from_rotation(chain: KinematicChain, axis, angle) -> np.ndarray:
    q_home = chain.ee_quaternion(ARM_HOME)
    return quat_mul(quat_from_axis_angle(np.asarray(axis, float), float(angle)), q_home)


ARM_POSE_EULER = (np.pi / 4, np.pi / 3, np.pi / 2)


def _arm_pose_scene(chain: KinematicChain):
    from .kinematics import quat_from_rpy

    q_goal = quat_mul(chain.ee_quaternion(ARM_HOME), quat_from_rpy(*ARM_POSE_EULER))
    p_home = chain.ee_position(ARM_HOME)
    p_goal = np.array([0.45, 0.35, 0.35])
    mid = 0.5 * (p_home + p_goal)
    obstacle = SphereObstacle(center=tuple(mid), radius=0.10)
    return p_goal, q_goal, obstacle


def _arm_stop(error_fn, error_tol) -> ConvergenceSpec:
    return ConvergenceSpec(
        error_fn=error_fn,
        speed_fn=lambda s: float(np.linalg.norm(s.ydot)),
        error_tol=error_tol,
        speed_tol=0.05,
        sustain_steps=50,
    )


def _build_arm_pose(run_id: str) -> Scenario:
    chain = load_builtin_chain()
    p_goal, q_goal, obstacle = _arm_pose_scene(chain)
    policy = _arm_policy(chain, goal_pos=p_goal, goal_quat=q_goal, obstacle=obstacle)
    chart = _arm_chart(chain)
    pos_map = ChainPositionMap(chain)
    chord = ChainQuatChordMap(chain, q_goal)

    def error_fn(s: SimState) -> float:
        return max(
            float(np.linalg.norm(pos_map.value(s.y) - p_goal)),
            float(chord.value(s.y)[0]),
        )

    config = {"id": run_id, "kind": "arm", "variant": "pose", "dt": ARM_DT,
              "t_end": 15.0, "obstacle": {"center": list(obstacle.center),
                                           "radius": obstacle.radius},
              "goal_pos": p_goal.tolist(), "goal_quat": q_goal.tolist(),
              "gains": dict(ARM_GAINS)}
    return Scenario(
        id=run_id,
        config=config,
        policies={chart.kind: policy},
        initial=SimState(chart, ARM_HOME.copy(), np.zeros(chain.dof)),
        dt=ARM_DT,
        t_end=15.0,
        stop=_arm_stop(error_fn, 0.02),
        embed_fn=lambda s: pos_map.value(s.y),
        metadata={"chain": chain, "obstacle": obstacle, "goal_pos": p_goal,
                  "goal_quat": q_goal},
    )


HOMOTOPY_STEER = 15.0
HOMOTOPY_STEER_DURATION = 3.5


def _arm_homotopy_scene(chain: KinematicChain):
    # obstacle slightly outward and below the start-goal line so both
    # converged configurations keep clearance while the transit must commit
    # to one side
    p_home = chain.ee_position(ARM_HOME)
    p_goal = np.array([0.35, 0.45, 0.55])
    mid = 0.55 * p_home + 0.45 * p_goal + np.array([0.05, 0.0, -0.06])
    obstacle = SphereObstacle(center=(float(mid[0]), float(mid[1]), float(mid[2])), radius=0.08)
    return p_goal, obstacle


def _build_arm_homotopy(run_id: str, sign: float) -> Scenario:
    chain = load_builtin_chain()
    p_goal, obstacle = _arm_homotopy_scene(chain)
    policy = _arm_policy(chain, goal_pos=p_goal, obstacle=obstacle, steer_joint=0)
    chart = _arm_chart(chain)
    pos_map = ChainPositionMap(chain)
    schedule = ActionSchedule(
        [ActionPhase(0, 0.0, HOMOTOPY_STEER_DURATION, np.array([sign * HOMOTOPY_STEER]))]
    )

    def error_fn(s: SimState) -> float:
        return float(np.linalg.norm(pos_map.value(s.y) - p_goal))

    p_start = chain.ee_position(ARM_HOME)
    normal = np.cross(p_goal - p_start, obstacle.center_arr - p_start)
    normal = normal / np.linalg.norm(normal)
    config = {"id": run_id, "kind": "arm", "variant": "homotopy", "dt": ARM_DT,
              "t_end": 20.0, "steer_sign": sign, "steer_magnitude": HOMOTOPY_STEER,
              "steer_duration": HOMOTOPY_STEER_DURATION,
              "obstacle": {"center": list(obstacle.center), "radius": obstacle.radius},
              "goal_pos": p_goal.tolist(), "gains": dict(ARM_GAINS)}
    return Scenario(
        id=run_id,
        config=config,
        policies={chart.kind: policy},
        initial=SimState(chart, ARM_HOME.copy(), np.zeros(chain.dof)),
        dt=ARM_DT,
        t_end=20.0,
        stop=_arm_stop(error_fn, 0.01),
        schedule=schedule,
        embed_fn=lambda s: pos_map.value(s.y),
        metadata={"chain": chain, "obstacle": obstacle, "goal_pos": p_goal,
                  "plane_point": obstacle.center_arr, "plane_normal": normal},
    )


def _build_so3_scenario(chain: KinematicChain, q_goal, obstacle, ablate: bool, index: int):
    policy = _arm_policy(
        chain, goal_quat=q_goal, obstacle=None if ablate else obstacle
    )
    chart = _arm_chart(chain)
    chord = ChainQuatChordMap(chain, q_goal)

    def error_fn(s: SimState) -> float:
        return float(chord.value(s.y)[0])

    config = {"id": f"so3_{index}", "kind": "arm", "variant": "so3",
              "ablate": ablate, "dt": ARM_DT, "t_end": 15.0,
              "obstacle": {"center": list(obstacle.center), "radius": obstacle.radius},
              "goal_quat": np.asarray(q_goal).tolist()}
    return Scenario(
        id=config["id"],
        config=config,
        policies={chart.kind: policy},
        initial=SimState(chart, ARM_HOME.copy(), np.zeros(chain.dof)),
        dt=ARM_DT,
        t_end=15.0,
        stop=_arm_stop(error_fn, 0.02),
        metadata={"chain": chain, "obstacle": obstacle, "goal_quat": q_goal},
    )


def sample_so3_scene(rng: np.random.Generator, chain: KinematicChain, max_attempts=1000):
    """Draw (goal quaternion, obstacle) with start clearance >= 5 cm."""
    for _ in range(max_attempts):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(np.deg2rad(30.0), np.deg2rad(150.0))
        center = rng.uniform(SO3_BOX_LO, SO3_BOX_HI)
        obstacle = SphereObstacle(center=tuple(center), radius=SO3_OBSTACLE_RADIUS)
        if chain.min_obstacle_clearance(obstacle, ARM_HOME) < SO3_CLEARANCE_MIN:
            continue
        return _goal_quat_from_rotation(chain, axis, angle), obstacle
    raise ConfigError("so3_batch", f"no admissible scene in {max_attempts} attempts")


def _so3_run_one(args) -> dict:
    seed, index, ablate = args
    chain = load_builtin_chain()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    q_goal, obstacle = sample_so3_scene(rng, chain)
    scenario = _build_so3_scenario(chain, q_goal, obstacle, ablate, index)
    trace = scenario.run()
    dists = chain.capsule_sphere_distances_batch(obstacle, trace.y)
    min_h = float(np.min(dists))
    chord = ChainQuatChordMap(chain, q_goal)
    final_chord = float(chord.value(trace.y[-1])[0])
    pad = SignedDistanceMargin(margin=0.0)
    return {
        "index": index,
        "min_h_obs": min_h,
        "violated": bool(pad.violates(min_h)),
        "final_chord": final_chord,
        "converged": bool(final_chord < 0.05),
        "duration": float(trace.t[-1]),
    }


def run_so3_batch(
    seed: int = 0, count: int = 50, ablate_obstacle_rows: bool = False, workers: int = 1
) -> dict:
    """Seeded batch of orientation-tracking scenes; identical seeds produce
    identical scene draws for the full and ablated arms."""
    jobs = [(seed, i, ablate_obstacle_rows) for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_so3_run_one, jobs))
    else:
        runs = [_so3_run_one(j) for j in jobs]
    runs.sort(key=lambda r: r["index"])
    report = {
        "seed": seed,
        "count": count,
        "ablate": ablate_obstacle_rows,
        "runs": runs,
        "num_violations": int(sum(r["violated"] for r in runs)),
        "min_h_obs": float(min(r["min_h_obs"] for r in runs)),
        "all_converged": bool(all(r["converged"] for r in runs)),
    }
    return report


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


# ----------------------------------------------------------------------
# entry points
# ----------------------------------------------------------------------


def build_scenario(spec: str | dict):
    """Build a runnable scenario from a built-in id or a config dict."""
    if isinstance(spec, str):
        if spec in S2_TABLE:
            return _build_s2_run(spec, dict(S2_TABLE[spec]))
        if spec in APPENDIX_TABLE:
            return _build_appendix_run(spec, dict(APPENDIX_TABLE[spec]))
        if spec == "arm_pose":
            return _build_arm_pose(spec)
        if spec == "arm_homotopy_plus":
            return _build_arm_homotopy(spec, +1.0)
        if spec == "arm_homotopy_minus":
            return _build_arm_homotopy(spec, -1.0)
        if spec == "arm_so3_batch":
            return BatchScenario(spec, {"seed": 0, "count": 50, "ablate": False})
        if spec == "arm_so3_batch_ablation":
            return BatchScenario(spec, {"seed": 0, "count": 50, "ablate": True})
        raise ConfigError("id", f"unknown scenario {spec!r}")
    return _build_from_config(spec)


def _require(cfg: dict, key: str, kind, path: str):
    if key not in cfg:
        raise ConfigError(f"{path}.{key}", "missing required field")
    value = cfg[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{path}.{key}", f"expected {kind.__name__}")
    return value


def _build_from_config(cfg: dict):
    """Build from a user config dict; see docs/scenario_schema.md."""
    kind = _require(cfg, "kind", str, "config")
    run_id = _require(cfg, "id", str, "config")
    if kind == "s2":
        table_cfg = {
            "chart": _require(cfg, "chart", str, "config"),
            "safety": _require(cfg, "safety", str, "config"),
            "metric": cfg.get("metric", "round"),
            "start": cfg.get("start", "safe"),
        }
        if table_cfg["chart"] not in ("north", "south", "switching"):
            raise ConfigError("config.chart", "must be north, south, or switching")
        if table_cfg["safety"] not in ("ecbf", "bcbf"):
            raise ConfigError("config.safety", "must be ecbf or bcbf")
        if table_cfg["metric"] not in ("round", "flat"):
            raise ConfigError("config.metric", "must be round or flat")
        if table_cfg["start"] not in ("safe", "unsafe"):
            raise ConfigError("config.start", "must be safe or unsafe")
        if "action" in cfg:
            action = cfg["action"]
            if not isinstance(action, dict) or "type" not in action:
                raise ConfigError("config.action", "must be an object with a type")
            if action["type"] not in ("zero", "perp", "unsafe"):
                raise ConfigError("config.action.type", "must be zero, perp, or unsafe")
            if action["type"] == "perp" and "sign" not in action:
                raise ConfigError("config.action.sign", "missing required field")
            if action["type"] == "unsafe" and "magnitude" not in action:
                raise ConfigError("config.action.magnitude", "missing required field")
            table_cfg["action"] = action
        if "poles" in cfg:
            poles = cfg["poles"]
            if (
                not isinstance(poles, (list, tuple))
                or len(poles) != 2
                or any(p <= 0 for p in poles)
            ):
                raise ConfigError("config.poles", "must be two positive numbers")
            table_cfg["poles"] = tuple(float(p) for p in poles)
        if "bcbf" in cfg:
            if not isinstance(cfg["bcbf"], dict):
                raise ConfigError("config.bcbf", "must be an object")
            for key in cfg["bcbf"]:
                if key not in ("c_alpha", "delta", "epsilon"):
                    raise ConfigError(f"config.bcbf.{key}", "unknown field")
            table_cfg["bcbf"] = cfg["bcbf"]
        scenario = _build_s2_run(run_id, table_cfg)
    elif kind == "s2_free":
        table_cfg = {
            "chart": _require(cfg, "chart", str, "config"),
            "dynamics": _require(cfg, "dynamics", str, "config"),
            "tasks": cfg.get("tasks", "none"),
        }
        if table_cfg["chart"] not in ("north", "south"):
            raise ConfigError("config.chart", "must be north or south")
        if table_cfg["dynamics"] not in ("geometric", "flat"):
            raise ConfigError("config.dynamics", "must be geometric or flat")
        if table_cfg["tasks"] not in ("none", "trivial_embedding"):
            raise ConfigError("config.tasks", "must be none or trivial_embedding")
        scenario = _build_appendix_run(run_id, table_cfg)
    elif kind == "arm":
        variant = _require(cfg, "variant", str, "config")
        if variant == "pose":
            scenario = _build_arm_pose(run_id)
        elif variant == "homotopy":
            sign = float(cfg.get("steer_sign", 1.0))
            scenario = _build_arm_homotopy(run_id, sign)
        else:
            raise ConfigError("config.variant", "must be pose or homotopy")
    else:
        raise ConfigError("config.kind", "must be s2, s2_free, or arm")
    # overridable timing knobs
    if "dt" in cfg:
        dt = float(cfg["dt"])
        if not 0.0 < dt <= 0.1:
            raise ConfigError("config.dt", "must lie in (0, 0.1]")
        scenario.dt = dt
        scenario.config["dt"] = dt
    if "t_end" in cfg:
        t_end = float(cfg["t_end"])
        if t_end <= 0:
            raise ConfigError("config.t_end", "must be positive")
        scenario.t_end = t_end
        scenario.config["t_end"] = t_end
    scenario.config["id"] = run_id
    scenario.id = run_id
    return scenario


def classify_avoidance_side(points: np.ndarray, h_series: np.ndarray,
                            plane_point: np.ndarray, plane_normal: np.ndarray) -> float:
    """Side of the start/goal/obstacle plane at the point of closest approach."""
    idx = int(np.argmin(h_series))
    return float(np.sign((points[idx] - plane_point) @ plane_normal))


def arm_closest_approach(
    chain: KinematicChain, obstacle: SphereObstacle, configs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-step closest capsule point to the obstacle and its signed distance.

    The closest point is the natural 'trajectory point' for classifying which
    side of the scene plane the arm body passed on.
    """
    frames = chain.fk_batch(configs)
    a, c = chain.capsule_endpoints_batch(frames)
    center = obstacle.center_arr
    seg = c - a
    seg_sq = np.einsum("bli,bli->bl", seg, seg)
    t = np.einsum("bli,bli->bl", center - a, seg)
    t = np.where(seg_sq > 1e-24, t / np.maximum(seg_sq, 1e-24), 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * seg
    dists = (
        np.linalg.norm(center - closest, axis=-1) - chain._link_radii - obstacle.radius
    )
    link = np.argmin(dists, axis=1)
    rows = np.arange(configs.shape[0])
    return closest[rows, link], dists[rows, link]
