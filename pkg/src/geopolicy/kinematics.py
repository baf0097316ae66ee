"""Serial-chain kinematics: forward kinematics, geometric Jacobians, a
quaternion chord-distance orientation error, and capsule/sphere signed
distances for collision rows.

Quaternions are wxyz and unit norm.  Forward kinematics is vectorized over
batches of configurations; the scalar entry points wrap the batched ones.
Chain models are immutable after construction and safe to share across
concurrent rollouts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Central-difference steps: first derivatives of distance-like maps, and the
# outer step when differencing those gradients into Hessians.
FD_JACOBIAN_STEP = 1e-6
FD_HESSIAN_STEP = 1e-4

QUAT_SIGN_EPS = 1e-9


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product; broadcasts over leading axes."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions; broadcasts over leading axes."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - z * w)
    r[..., 0, 2] = 2 * (x * z + y * w)
    r[..., 1, 0] = 2 * (x * y + z * w)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - x * w)
    r[..., 2, 0] = 2 * (x * z - y * w)
    r[..., 2, 1] = 2 * (y * z + x * w)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_from_rpy(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """URDF-style fixed-axis rpy to quaternion (R = Rz Ry Rx)."""
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    qx = np.array([cr, sr, 0.0, 0.0])
    qy = np.array([cp, 0.0, sp, 0.0])
    qz = np.array([cy, 0.0, 0.0, sy])
    return quat_mul(quat_mul(qz, qy), qx)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def _right_mul_matrix(q: np.ndarray) -> np.ndarray:
    """Matrix R with p (x) q = R @ p for all quaternions p."""
    w, x, y, z = q
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, z, -y],
            [y, -z, w, x],
            [z, y, -x, w],
        ]
    )


@dataclass(frozen=True)
class Joint:
    axis: tuple[float, float, float]
    origin_xyz: tuple[float, float, float]
    origin_quat: tuple[float, float, float, float]
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("joint limits must satisfy lower < upper")
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-10:
            raise ValueError("joint axis must be unit norm")
        if abs(np.linalg.norm(self.origin_quat) - 1.0) > 1e-10:
            raise ValueError("joint origin quaternion must be unit norm")


@dataclass(frozen=True)
class Capsule:
    """Collision capsule attached to the frame after joint ``joint``."""

    joint: int
    p1: tuple[float, float, float]
    p2: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ValueError("capsule radius must be positive")


@dataclass(frozen=True)
class SphereObstacle:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ValueError("sphere radius must be positive")

    @property
    def center_arr(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)


@dataclass(frozen=True)
class FkFrames:
    """Batched world frames: joint origins/rotations/quats plus the tool frame."""

    positions: np.ndarray  # (B, J, 3) joint frame origins
    rotations: np.ndarray  # (B, J, 3, 3) frames after the joint rotation
    quats: np.ndarray      # (B, J, 4)
    ee_pos: np.ndarray     # (B, 3)
    ee_quat: np.ndarray    # (B, 4)


class KinematicChain:
    """Immutable revolute serial chain with capsule collision geometry."""

    def __init__(self, joints, links, ee_joint, ee_offset_xyz, ee_offset_quat, name=""):
        self.name = name
        self.joints = tuple(joints)
        self.links = tuple(links)
        self.ee_joint = int(ee_joint)
        self.ee_offset_xyz = np.asarray(ee_offset_xyz, dtype=float)
        self.ee_offset_quat = np.asarray(ee_offset_quat, dtype=float)
        self.dof = len(self.joints)
        if not 0 <= self.ee_joint < self.dof:
            raise ValueError("end-effector joint index out of range")
        self.lower = np.array([j.lower for j in self.joints])
        self.upper = np.array([j.upper for j in self.joints])
        self._axes = np.array([j.axis for j in self.joints])
        self._xyz = np.array([j.origin_xyz for j in self.joints])
        self._fixed_quat = np.array([j.origin_quat for j in self.joints])
        self._ee_rot = quat_to_rot(self.ee_offset_quat)
        # right-multiplication matrices of the fixed origin quaternions:
        # q (x) q_fixed = R_right(q_fixed) @ q
        self._right_mul = np.array([_right_mul_matrix(q) for q in self._fixed_quat])
        if self.links:
            self._link_joints = np.array([l.joint for l in self.links])
            self._link_pts = np.array([[l.p1, l.p2] for l in self.links])  # (L, 2, 3)
            self._link_radii = np.array([l.radius for l in self.links])

    @classmethod
    def from_dict(cls, spec: dict) -> "KinematicChain":
        joints = []
        for j in spec["joints"]:
            joints.append(
                Joint(
                    axis=tuple(j["axis"]),
                    origin_xyz=tuple(j["origin_xyz"]),
                    origin_quat=tuple(j["origin_quat"]),
                    lower=float(j["limits"][0]),
                    upper=float(j["limits"][1]),
                )
            )
        links = [
            Capsule(
                joint=int(l["joint"]),
                p1=tuple(l["p1"]),
                p2=tuple(l["p2"]),
                radius=float(l["radius"]),
            )
            for l in spec.get("links", [])
        ]
        ee = spec["end_effector"]
        return cls(
            joints=joints,
            links=links,
            ee_joint=ee["joint"],
            ee_offset_xyz=ee.get("offset_xyz", (0.0, 0.0, 0.0)),
            ee_offset_quat=ee.get("offset_quat", (1.0, 0.0, 0.0, 0.0)),
            name=spec.get("name", ""),
        )

    @classmethod
    def from_json(cls, path) -> "KinematicChain":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    # ------------------------------------------------------------------
    # forward kinematics
    # ------------------------------------------------------------------

    def fk_batch(self, q_batch: np.ndarray) -> FkFrames:
        q_batch = np.atleast_2d(np.asarray(q_batch, dtype=float))
        b, m = q_batch.shape
        if m != self.dof:
            raise ValueError(f"expected {self.dof} joint values, got {m}")
        positions = np.empty((b, m, 3))
        rotations = np.empty((b, m, 3, 3))
        quats = np.empty((b, m, 4))
        p = np.zeros((b, 3))
        r = np.broadcast_to(np.eye(3), (b, 3, 3))
        q = np.broadcast_to(np.array([1.0, 0.0, 0.0, 0.0]), (b, 4))
        for j in range(m):
            p = p + r @ self._xyz[j]
            q_mid = q @ self._right_mul[j].T
            half = 0.5 * q_batch[:, j]
            cj = np.cos(half)
            sj = np.sin(half)
            ax, ay, az = self._axes[j]
            xj, yj, zj = sj * ax, sj * ay, sj * az
            aw, ax_, ay_, az_ = q_mid[:, 0], q_mid[:, 1], q_mid[:, 2], q_mid[:, 3]
            q = np.empty((b, 4))
            q[:, 0] = aw * cj - ax_ * xj - ay_ * yj - az_ * zj
            q[:, 1] = aw * xj + ax_ * cj + ay_ * zj - az_ * yj
            q[:, 2] = aw * yj - ax_ * zj + ay_ * cj + az_ * xj
            q[:, 3] = aw * zj + ax_ * yj - ay_ * xj + az_ * cj
            r = quat_to_rot(q)
            positions[:, j] = p
            rotations[:, j] = r
            quats[:, j] = q
        ee_pos = positions[:, self.ee_joint] + rotations[:, self.ee_joint] @ self.ee_offset_xyz
        ee_quat = quat_mul(quats[:, self.ee_joint], self.ee_offset_quat)
        return FkFrames(positions, rotations, quats, ee_pos, ee_quat)

    def fk(self, sigma: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """World pose of every joint frame followed by the tool frame."""
        frames = self.fk_batch(sigma)
        out = [(frames.positions[0, j], frames.quats[0, j]) for j in range(self.dof)]
        out.append((frames.ee_pos[0], frames.ee_quat[0]))
        return out

    def ee_position(self, sigma) -> np.ndarray:
        return self.fk_batch(sigma).ee_pos[0]

    def ee_quaternion(self, sigma) -> np.ndarray:
        return self.fk_batch(sigma).ee_quat[0]

    def world_axes(self, frames: FkFrames) -> np.ndarray:
        """World joint axes, shape (B, J, 3)."""
        return np.einsum("bjik,jk->bji", frames.rotations, self._axes)

    # ------------------------------------------------------------------
    # Jacobians (at the tool frame)
    # ------------------------------------------------------------------

    def position_jacobian(self, sigma, frames: FkFrames | None = None) -> np.ndarray:
        """Geometric point Jacobian of the tool position, columns z_j x (p - p_j)."""
        if frames is None:
            frames = self.fk_batch(sigma)
        n = self.ee_joint + 1
        axes = self.world_axes(frames)[0, :n]
        diffs = frames.ee_pos[0] - frames.positions[0, :n]
        jac = np.zeros((3, self.dof))
        jac[:, :n] = np.cross(axes, diffs).T
        return jac

    def angular_jacobian(self, sigma, frames: FkFrames | None = None) -> np.ndarray:
        if frames is None:
            frames = self.fk_batch(sigma)
        n = self.ee_joint + 1
        jac = np.zeros((3, self.dof))
        jac[:, :n] = self.world_axes(frames)[0, :n].T
        return jac

    def quat_jacobian(self, sigma, frames: FkFrames | None = None) -> np.ndarray:
        """4 x m Jacobian of the tool quaternion: dq/ds_j = 1/2 (0, z_j) * q."""
        if frames is None:
            frames = self.fk_batch(sigma)
        q = frames.ee_quat[0]
        n = self.ee_joint + 1
        omegas = np.zeros((n, 4))
        omegas[:, 1:] = self.world_axes(frames)[0, :n]
        jac = np.zeros((4, self.dof))
        jac[:, :n] = 0.5 * quat_mul(omegas, q[None, :]).T
        return jac

    # ------------------------------------------------------------------
    # capsule/sphere signed distances
    # ------------------------------------------------------------------

    def capsule_endpoints_batch(self, frames: FkFrames) -> tuple[np.ndarray, np.ndarray]:
        """World capsule endpoints, each (B, L, 3)."""
        rots = frames.rotations[:, self._link_joints]  # (B, L, 3, 3)
        base = frames.positions[:, self._link_joints]  # (B, L, 3)
        ends = base[:, :, None, :] + np.einsum("bljk,lek->blej", rots, self._link_pts)
        return ends[:, :, 0], ends[:, :, 1]

    def capsule_sphere_distances_batch(
        self, obstacle: SphereObstacle, q_batch: np.ndarray, frames: FkFrames | None = None
    ) -> np.ndarray:
        """Signed distances of every capsule link to the obstacle, shape (B, L)."""
        if frames is None:
            frames = self.fk_batch(q_batch)
        a, c = self.capsule_endpoints_batch(frames)
        center = obstacle.center_arr
        seg = c - a
        seg_sq = np.einsum("bli,bli->bl", seg, seg)
        t = np.einsum("bli,bli->bl", center - a, seg)
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(seg_sq > 1e-24, t / np.maximum(seg_sq, 1e-24), 0.0)
        t = np.clip(t, 0.0, 1.0)
        closest = a + t[..., None] * seg
        diff = center - closest
        dist = np.sqrt(np.einsum("bli,bli->bl", diff, diff))
        return dist - self._link_radii - obstacle.radius

    def capsule_sphere_distance(self, link: int, obstacle: SphereObstacle, sigma) -> float:
        if not 0 <= link < len(self.links):
            raise ValueError("link index out of range")
        return float(self.capsule_sphere_distances_batch(obstacle, sigma)[0, link])

    def min_obstacle_clearance(self, obstacle: SphereObstacle, sigma) -> float:
        return float(np.min(self.capsule_sphere_distances_batch(obstacle, sigma)[0]))

    def distance_rows_all_links(
        self, obstacle: SphereObstacle, sigma: np.ndarray, with_hessian: bool = True
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """Values, gradients, and (optionally) Hessians of all link distances.

        Gradients are central differences with step ``FD_JACOBIAN_STEP``;
        Hessians are central differences of those gradients with outer step
        ``FD_HESSIAN_STEP``, symmetrized.  All perturbed configurations are
        evaluated in a single batched FK pass.
        """
        sigma = np.asarray(sigma, dtype=float)
        m = self.dof
        n_links = len(self.links)
        h1 = FD_JACOBIAN_STEP
        h2 = FD_HESSIAN_STEP
        eye = np.eye(m)

        base = sigma[None, :]
        grad_pts = np.concatenate([sigma + h1 * eye, sigma - h1 * eye])  # (2m, m)
        batch = [base, grad_pts]
        if with_hessian:
            # gradient stencils recentered at sigma +- h2 e_k
            shifts = np.concatenate([sigma + h2 * eye, sigma - h2 * eye])  # (2m, m)
            hess_pts = (shifts[:, None, :] + np.concatenate([h1 * eye, -h1 * eye])[None, :, :])
            batch.append(hess_pts.reshape(-1, m))  # (2m * 2m, m)
        all_pts = np.concatenate(batch)
        dists = self.capsule_sphere_distances_batch(obstacle, all_pts)  # (B, L)

        values = dists[0]
        plus, minus = dists[1 : 1 + m], dists[1 + m : 1 + 2 * m]
        grads = (plus - minus).T / (2.0 * h1)  # (L, m)
        hessians = None
        if with_hessian:
            rest = dists[1 + 2 * m :].reshape(2 * m, 2 * m, n_links)
            g_shift = (rest[:, :m] - rest[:, m:]) / (2.0 * h1)  # (2m, m, L)
            g_plus, g_minus = g_shift[:m], g_shift[m:]
            hess = (g_plus - g_minus) / (2.0 * h2)  # (m, m, L) rows d grad / d s_k
            hess = np.transpose(hess, (2, 0, 1))
            hessians = 0.5 * (hess + np.transpose(hess, (0, 2, 1)))
        return values, grads, hessians


def resolve_quat_sign(q: np.ndarray, goal: np.ndarray) -> tuple[float, bool]:
    """Sign putting ``q`` on the same hemisphere as ``goal``.

    Returns ``(sign, boundary)`` where ``boundary`` flags a nearly orthogonal
    pair (sign frozen to +1 there).
    """
    dot = float(np.dot(q, goal))
    if abs(dot) < QUAT_SIGN_EPS:
        return 1.0, True
    return (1.0 if dot >= 0.0 else -1.0), False


def quat_chord_distance(
    chain: KinematicChain, goal: np.ndarray, sigma: np.ndarray, with_grad: bool = True
):
    """Chord distance ``| s q(sigma) - goal |`` with hemisphere sign ``s`` frozen
    at the evaluation point, and its configuration gradient by central
    differences of the sign-frozen composite.

    Returns ``(d, grad, boundary)``; ``grad`` is None when ``with_grad`` is
    false.
    """
    goal = np.asarray(goal, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    m = chain.dof
    h = FD_JACOBIAN_STEP
    if with_grad:
        eye = np.eye(m)
        pts = np.concatenate([sigma[None, :], sigma + h * eye, sigma - h * eye])
        quats = chain.fk_batch(pts).ee_quat
    else:
        quats = chain.fk_batch(sigma).ee_quat
    sign, boundary = resolve_quat_sign(quats[0], goal)
    dists = np.linalg.norm(sign * quats - goal, axis=-1)
    d = float(dists[0])
    if not with_grad:
        return d, None, boundary
    grad = (dists[1 : 1 + m] - dists[1 + m :]) / (2.0 * h)
    return d, grad, boundary


_DATA_DIR = Path(__file__).parent / "data"


def load_builtin_chain(name: str = "arm7") -> KinematicChain:
    """Load a chain definition shipped with the package."""
    return KinematicChain.from_json(_DATA_DIR / f"{name}.json")
