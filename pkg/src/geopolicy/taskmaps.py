"""Differentiable task maps from the configuration chart to task spaces.

Each map exposes value / Jacobian / time-derivative-of-Jacobian, and scalar
maps additionally expose a fused (value, gradient, Hessian) path used by
safety rows.  Analytic derivatives are used where available (identity,
projections, affine, stereographic embedding, chain position/quaternion via
geometric Jacobians); distance-like maps use central finite differences with
step 1e-6, and their Hessians are finite differences of those gradients with
outer step 1e-4.

A :class:`StepCache` is threaded through evaluation so that all chain-backed
maps evaluated within one control step share a single batched
forward-kinematics pass (see :func:`prefetch_chain_step`).
"""

from __future__ import annotations

import numpy as np

from . import geom
from .kinematics import (
    FD_HESSIAN_STEP,
    FD_JACOBIAN_STEP,
    FkFrames,
    KinematicChain,
    SphereObstacle,
    resolve_quat_sign,
)

JDOT_STEP = 1e-5
FD_GRAD_STEP = 1e-5


class StepCache(dict):
    """Scratch memo shared by all evaluations at one (sigma, sigmadot)."""


def _key(name: str, sigma: np.ndarray, *extra) -> tuple:
    return (name, sigma.tobytes()) + extra


class TaskMap:
    """Smooth map from an m-dimensional chart domain to an n-dimensional task space."""

    input_dim: int
    output_dim: int
    analytic: bool = False
    is_affine: bool = False  # constant Jacobian, vanishing second derivative

    def value(self, sigma: np.ndarray, cache: StepCache | None = None) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, sigma: np.ndarray, cache: StepCache | None = None) -> np.ndarray:
        raise NotImplementedError

    def jdot(
        self, sigma: np.ndarray, sigmadot: np.ndarray, cache: StepCache | None = None
    ) -> np.ndarray:
        """d/dt of the Jacobian along sigmadot, by a directional central difference."""
        sigma = np.asarray(sigma, dtype=float)
        sigmadot = np.asarray(sigmadot, dtype=float)
        nv = float(np.linalg.norm(sigmadot))
        if nv < 1e-12:
            return np.zeros((self.output_dim, self.input_dim))
        eps = JDOT_STEP / max(1.0, nv)
        jp = self.jacobian(sigma + eps * sigmadot)
        jm = self.jacobian(sigma - eps * sigmadot)
        return (jp - jm) / (2.0 * eps)

    def second_derivative(self, sigma: np.ndarray, cache: StepCache | None = None) -> np.ndarray:
        """Tensor d2f[a, i, j]; implemented only by analytic maps."""
        raise NotImplementedError

    def min_singular_value(self, sigma, cache: StepCache | None = None) -> float:
        return float(np.linalg.svd(self.jacobian(sigma, cache), compute_uv=False)[-1])

    def scalar_grad_hess(self, sigma, cache: StepCache | None = None):
        """Fused (value, grad, hess) for scalar-output maps; None if unsupported."""
        return None


class IdentityMap(TaskMap):
    analytic = True
    is_affine = True

    def __init__(self, dim: int):
        self.input_dim = dim
        self.output_dim = dim

    def value(self, sigma, cache=None):
        return np.asarray(sigma, dtype=float).copy()

    def jacobian(self, sigma, cache=None):
        return np.eye(self.input_dim)

    def jdot(self, sigma, sigmadot, cache=None):
        return np.zeros((self.output_dim, self.input_dim))

    def second_derivative(self, sigma, cache=None):
        n = self.input_dim
        return np.zeros((n, n, n))

    def min_singular_value(self, sigma, cache=None):
        return 1.0


class CoordinateProjection(TaskMap):
    """Projection onto a single chart coordinate."""

    analytic = True
    is_affine = True

    def __init__(self, dim: int, index: int):
        if not 0 <= index < dim:
            raise ValueError("projection index out of range")
        self.input_dim = dim
        self.output_dim = 1
        self.index = index

    def value(self, sigma, cache=None):
        return np.array([float(sigma[self.index])])

    def jacobian(self, sigma, cache=None):
        row = np.zeros((1, self.input_dim))
        row[0, self.index] = 1.0
        return row

    def jdot(self, sigma, sigmadot, cache=None):
        return np.zeros((1, self.input_dim))

    def second_derivative(self, sigma, cache=None):
        m = self.input_dim
        return np.zeros((1, m, m))

    def min_singular_value(self, sigma, cache=None):
        return 1.0


class AffineScalar(TaskMap):
    """f(sigma) = sign * sigma[index] + offset."""

    analytic = True
    is_affine = True

    def __init__(self, dim: int, index: int, sign: float = 1.0, offset: float = 0.0):
        if not 0 <= index < dim:
            raise ValueError("affine index out of range")
        self.input_dim = dim
        self.output_dim = 1
        self.index = index
        self.sign = float(sign)
        self.offset = float(offset)

    def value(self, sigma, cache=None):
        return np.array([self.sign * float(sigma[self.index]) + self.offset])

    def jacobian(self, sigma, cache=None):
        row = np.zeros((1, self.input_dim))
        row[0, self.index] = self.sign
        return row

    def jdot(self, sigma, sigmadot, cache=None):
        return np.zeros((1, self.input_dim))

    def second_derivative(self, sigma, cache=None):
        m = self.input_dim
        return np.zeros((1, m, m))


class StereoEmbeddingMap(TaskMap):
    """Chart coordinates to the unit-sphere embedding in R^3."""

    analytic = True

    def __init__(self, chart: geom.ChartId):
        if not chart.is_stereo:
            raise geom.InvalidChartError("embedding map needs a stereographic chart")
        self.chart = chart
        self.input_dim = 2
        self.output_dim = 3

    def _memo(self, name, sigma, cache, fn):
        if cache is None:
            return fn(self.chart, sigma)
        key = (name, self.chart.kind, sigma.tobytes())
        if key not in cache:
            cache[key] = fn(self.chart, sigma)
        return cache[key]

    def value(self, sigma, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        return self._memo("stereo_val", sigma, cache, geom.stereo_embed)

    def jacobian(self, sigma, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        return self._memo("stereo_jac", sigma, cache, geom.stereo_jacobian)

    def jdot(self, sigma, sigmadot, cache=None):
        d2 = self.second_derivative(sigma, cache)
        return np.einsum("aij,i->aj", d2, np.asarray(sigmadot, dtype=float))

    def second_derivative(self, sigma, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        return self._memo("stereo_d2", sigma, cache, geom.stereo_second_derivative)


# ----------------------------------------------------------------------
# chain-backed maps
# ----------------------------------------------------------------------


def _frames(chain: KinematicChain, sigma: np.ndarray, cache: StepCache | None) -> FkFrames:
    if cache is None:
        return chain.fk_batch(sigma)
    key = _key("frames", sigma, id(chain))
    if key not in cache:
        cache[key] = chain.fk_batch(sigma)
    return cache[key]


def _shift_frames(chain, sigma, sigmadot, cache):
    """Frames at sigma +- eps*sigmadot for Jacobian time derivatives."""
    nv = float(np.linalg.norm(sigmadot))
    eps = JDOT_STEP / max(1.0, nv)
    if cache is None:
        pts = np.stack([sigma + eps * sigmadot, sigma - eps * sigmadot])
        return eps, chain.fk_batch(pts)
    key = _key("shift_frames", sigma, sigmadot.tobytes(), id(chain))
    if key not in cache:
        pts = np.stack([sigma + eps * sigmadot, sigma - eps * sigmadot])
        cache[key] = (eps, chain.fk_batch(pts))
    return cache[key]


class ChainPositionMap(TaskMap):
    """World position of the chain tool frame."""

    analytic = True

    def __init__(self, chain: KinematicChain):
        self.chain = chain
        self.input_dim = chain.dof
        self.output_dim = 3

    def value(self, sigma, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        return _frames(self.chain, sigma, cache).ee_pos[0].copy()

    def jacobian(self, sigma, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        key = None
        if cache is not None:
            key = _key("pos_jac", sigma, id(self.chain))
            if key in cache:
                return cache[key]
        out = self.chain.position_jacobian(sigma, _frames(self.chain, sigma, cache))
        if cache is not None:
            cache[key] = out
        return out

    def jdot(self, sigma, sigmadot, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        sigmadot = np.asarray(sigmadot, dtype=float)
        if np.linalg.norm(sigmadot) < 1e-12:
            return np.zeros((3, self.input_dim))
        key = None
        if cache is not None:
            key = _key("pos_jdot", sigma, sigmadot.tobytes(), id(self.chain))
            if key in cache:
                return cache[key]
        eps, frames = _shift_frames(self.chain, sigma, sigmadot, cache)
        jp = self.chain.position_jacobian(None, _slice_frames(frames, 0))
        jm = self.chain.position_jacobian(None, _slice_frames(frames, 1))
        out = (jp - jm) / (2.0 * eps)
        if cache is not None:
            cache[key] = out
        return out


class ChainQuaternionMap(TaskMap):
    """Sign-resolved tool quaternion in the R^4 embedding.

    The hemisphere sign is resolved against ``goal`` at every evaluation,
    which keeps the output continuous along trajectories that stay away from
    the orthogonality boundary.
    """

    analytic = True

    def __init__(self, chain: KinematicChain, goal: np.ndarray):
        self.chain = chain
        self.goal = np.asarray(goal, dtype=float)
        if abs(np.linalg.norm(self.goal) - 1.0) > 1e-9:
            raise ValueError("goal quaternion must be unit norm")
        self.input_dim = chain.dof
        self.output_dim = 4

    def _sign(self, frames) -> float:
        sign, _ = resolve_quat_sign(frames.ee_quat[0], self.goal)
        return sign

    def value(self, sigma, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        frames = _frames(self.chain, sigma, cache)
        return self._sign(frames) * frames.ee_quat[0]

    def jacobian(self, sigma, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        key = None
        if cache is not None:
            key = _key("quat_jac", sigma, id(self.chain), self.goal.tobytes())
            if key in cache:
                return cache[key]
        frames = _frames(self.chain, sigma, cache)
        out = self._sign(frames) * self.chain.quat_jacobian(sigma, frames)
        if cache is not None:
            cache[key] = out
        return out

    def jdot(self, sigma, sigmadot, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        sigmadot = np.asarray(sigmadot, dtype=float)
        if np.linalg.norm(sigmadot) < 1e-12:
            return np.zeros((4, self.input_dim))
        key = None
        if cache is not None:
            key = _key("quat_jdot", sigma, sigmadot.tobytes(), id(self.chain), self.goal.tobytes())
            if key in cache:
                return cache[key]
        base = _frames(self.chain, sigma, cache)
        sign = self._sign(base)
        eps, frames = _shift_frames(self.chain, sigma, sigmadot, cache)
        jp = self.chain.quat_jacobian(None, _slice_frames(frames, 0))
        jm = self.chain.quat_jacobian(None, _slice_frames(frames, 1))
        out = sign * (jp - jm) / (2.0 * eps)
        if cache is not None:
            cache[key] = out
        return out


class ChainQuatChordMap(TaskMap):
    """Chord distance between the sign-resolved tool quaternion and a goal."""

    analytic = False

    def __init__(self, chain: KinematicChain, goal: np.ndarray):
        self.chain = chain
        self.goal = np.asarray(goal, dtype=float)
        self.input_dim = chain.dof
        self.output_dim = 1

    def _chord(self, sigma, cache):
        key = None
        if cache is not None:
            key = _key("chord", sigma, id(self.chain), self.goal.tobytes())
            if key in cache:
                return cache[key]
        d, grad, boundary = _chord_from_scratch(self.chain, self.goal, sigma)
        if cache is not None:
            cache[key] = (d, grad, boundary)
        return d, grad, boundary

    def value(self, sigma, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        d, _, _ = self._chord(sigma, cache)
        return np.array([d])

    def jacobian(self, sigma, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        _, grad, _ = self._chord(sigma, cache)
        return grad[None, :]

    def jdot(self, sigma, sigmadot, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        sigmadot = np.asarray(sigmadot, dtype=float)
        nv = float(np.linalg.norm(sigmadot))
        if nv < 1e-12:
            return np.zeros((1, self.input_dim))
        key = None
        if cache is not None:
            key = _key("chord_jdot", sigma, sigmadot.tobytes(), id(self.chain), self.goal.tobytes())
            if key in cache:
                return cache[key]
        eps = JDOT_STEP / max(1.0, nv)
        _, gp, _ = _chord_from_scratch(self.chain, self.goal, sigma + eps * sigmadot)
        _, gm, _ = _chord_from_scratch(self.chain, self.goal, sigma - eps * sigmadot)
        out = ((gp - gm) / (2.0 * eps))[None, :]
        if cache is not None:
            cache[key] = out
        return out


def _chord_from_scratch(chain, goal, sigma):
    from .kinematics import quat_chord_distance

    return quat_chord_distance(chain, goal, sigma, with_grad=True)


class ChainDistanceMap(TaskMap):
    """Signed capsule/sphere distance of one chain link to a fixed obstacle."""

    analytic = False

    def __init__(self, chain: KinematicChain, link: int, obstacle: SphereObstacle):
        if not 0 <= link < len(chain.links):
            raise ValueError("link index out of range")
        self.chain = chain
        self.link = link
        self.obstacle = obstacle
        self.input_dim = chain.dof
        self.output_dim = 1

    def _rows(self, sigma, cache):
        if cache is None:
            return self.chain.distance_rows_all_links(self.obstacle, sigma)
        key = _key("dist_rows", sigma, id(self.chain), self.obstacle.center, self.obstacle.radius)
        if key not in cache:
            cache[key] = self.chain.distance_rows_all_links(self.obstacle, sigma)
        return cache[key]

    def value(self, sigma, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        if cache is not None:
            values, _, _ = self._rows(sigma, cache)
            return np.array([values[self.link]])
        return np.array([self.chain.capsule_sphere_distance(self.link, self.obstacle, sigma)])

    def jacobian(self, sigma, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        _, grads, _ = self._rows(sigma, cache if cache is not None else None)
        return grads[self.link][None, :]

    def scalar_grad_hess(self, sigma, cache=None):
        sigma = np.asarray(sigma, dtype=float)
        values, grads, hessians = self._rows(sigma, cache)
        return float(values[self.link]), grads[self.link].copy(), hessians[self.link].copy()


def _slice_frames(frames: FkFrames, i: int) -> FkFrames:
    return FkFrames(
        frames.positions[i : i + 1],
        frames.rotations[i : i + 1],
        frames.quats[i : i + 1],
        frames.ee_pos[i : i + 1],
        frames.ee_quat[i : i + 1],
    )


def _slice_frames_range(frames: FkFrames, lo: int, hi: int) -> FkFrames:
    return FkFrames(
        frames.positions[lo:hi],
        frames.rotations[lo:hi],
        frames.quats[lo:hi],
        frames.ee_pos[lo:hi],
        frames.ee_quat[lo:hi],
    )


# ----------------------------------------------------------------------
# composed gradients and Hessians
# ----------------------------------------------------------------------


def composed_grad_hess(task_map: TaskMap, h0, sigma, cache: StepCache | None = None, diag=None):
    """Gradient and Hessian of the scalar composite ``h0(f(sigma))``.

    Uses analytic chain-rule composition when both factors provide analytic
    derivatives, the fused scalar path for distance-like maps with affine
    ``h0``, and central finite differences of the composite otherwise (step
    1e-5 for the gradient, 1e-4 for the Hessian).  The Hessian is
    symmetrized.  ``diag`` (a dict, if given) receives a ``domain_clamp``
    flag when ``h0`` had to clamp its argument.
    """
    sigma = np.asarray(sigma, dtype=float)
    m = task_map.input_dim

    if task_map.analytic and getattr(h0, "analytic", False):
        x = task_map.value(sigma, cache)
        jac = task_map.jacobian(sigma, cache)
        gx = h0.grad(x, diag=diag)
        hx = h0.hess(x, diag=diag)
        d2 = task_map.second_derivative(sigma, cache)
        grad = jac.T @ gx
        hess = jac.T @ hx @ jac + np.einsum("a,aij->ij", gx, d2)
        return grad, 0.5 * (hess + hess.T)

    slope = getattr(h0, "affine_slope", None)
    if slope is not None:
        fused = task_map.scalar_grad_hess(sigma, cache)
        if fused is not None:
            _, g, h = fused
            return slope * g, slope * h

    def phi(s):
        return float(h0.value(task_map.value(s), diag=diag))

    h1 = FD_GRAD_STEP
    h2 = FD_HESSIAN_STEP
    grad = np.empty(m)
    for j in range(m):
        e = np.zeros(m)
        e[j] = h1
        grad[j] = (phi(sigma + e) - phi(sigma - e)) / (2.0 * h1)
    hess = np.empty((m, m))
    for k in range(m):
        ek = np.zeros(m)
        ek[k] = h2
        for l in range(k, m):
            el = np.zeros(m)
            el[l] = h2
            val = (
                phi(sigma + ek + el)
                - phi(sigma + ek - el)
                - phi(sigma - ek + el)
                + phi(sigma - ek - el)
            ) / (4.0 * h2 * h2)
            hess[k, l] = val
            hess[l, k] = val
    return grad, 0.5 * (hess + hess.T)


# ----------------------------------------------------------------------
# fused per-step prefetch for chain scenarios
# ----------------------------------------------------------------------


def prefetch_chain_step(
    chain: KinematicChain,
    sigma: np.ndarray,
    sigmadot: np.ndarray,
    cache: StepCache,
    *,
    chord_goal: np.ndarray | None = None,
    obstacle: SphereObstacle | None = None,
):
    """Evaluate every FK-dependent quantity of a control step in one batch.

    Seeds the cache entries consumed by the chain-backed task maps: base
    frames, jdot shift frames, obstacle distance rows (values, gradients,
    Hessians for all links), and the chord distance value/gradient and its
    time derivative.  Results are arithmetically identical to the unfused
    per-map paths; this only changes how many FK batches are launched.
    """
    sigma = np.asarray(sigma, dtype=float)
    sigmadot = np.asarray(sigmadot, dtype=float)
    m = chain.dof
    h1 = FD_JACOBIAN_STEP
    h2 = FD_HESSIAN_STEP
    eye = np.eye(m)
    nv = float(np.linalg.norm(sigmadot))
    with_shift = nv >= 1e-12
    eps = JDOT_STEP / max(1.0, nv) if with_shift else 0.0

    grad_sten = np.concatenate([h1 * eye, -h1 * eye])  # (2m, m) offsets
    blocks = [sigma[None, :], sigma + grad_sten]
    n_hess = 0
    if obstacle is not None:
        shifts = np.concatenate([sigma + h2 * eye, sigma - h2 * eye])
        hess_pts = (shifts[:, None, :] + grad_sten[None, :, :]).reshape(-1, m)
        blocks.append(hess_pts)
        n_hess = hess_pts.shape[0]
    if with_shift:
        sp = sigma + eps * sigmadot
        sm = sigma - eps * sigmadot
        blocks.append(sp[None, :])
        blocks.append(sp + grad_sten)
        blocks.append(sm[None, :])
        blocks.append(sm + grad_sten)
    pts = np.concatenate(blocks)
    frames = chain.fk_batch(pts)

    cache[_key("frames", sigma, id(chain))] = _slice_frames(frames, 0)
    i0 = 1 + 2 * m
    i1 = i0 + n_hess
    if with_shift:
        shift = FkFrames(
            frames.positions[[i1, i1 + 1 + 2 * m]],
            frames.rotations[[i1, i1 + 1 + 2 * m]],
            frames.quats[[i1, i1 + 1 + 2 * m]],
            frames.ee_pos[[i1, i1 + 1 + 2 * m]],
            frames.ee_quat[[i1, i1 + 1 + 2 * m]],
        )
        cache[_key("shift_frames", sigma, sigmadot.tobytes(), id(chain))] = (eps, shift)

    if obstacle is not None:
        dists = chain.capsule_sphere_distances_batch(
            obstacle, None, _slice_frames_range(frames, 0, i1)
        )
        values = dists[0]
        grads = (dists[1 : 1 + m] - dists[1 + m : 1 + 2 * m]).T / (2.0 * h1)
        rest = dists[i0:i1].reshape(2 * m, 2 * m, len(chain.links))
        g_shift = (rest[:, :m] - rest[:, m:]) / (2.0 * h1)
        hess = (g_shift[:m] - g_shift[m:]) / (2.0 * h2)
        hess = np.transpose(hess, (2, 0, 1))
        hess = 0.5 * (hess + np.transpose(hess, (0, 2, 1)))
        cache[_key("dist_rows", sigma, id(chain), obstacle.center, obstacle.radius)] = (
            values,
            grads,
            hess,
        )

    if chord_goal is not None:
        goal = np.asarray(chord_goal, dtype=float)

        def chord_block(base_idx, base_sigma):
            quats = frames.ee_quat[base_idx : base_idx + 1 + 2 * m]
            sign, boundary = resolve_quat_sign(quats[0], goal)
            dist = np.linalg.norm(sign * quats - goal, axis=-1)
            grad = (dist[1 : 1 + m] - dist[1 + m :]) / (2.0 * h1)
            return float(dist[0]), grad, boundary

        d, grad, boundary = chord_block(0, sigma)
        cache[_key("chord", sigma, id(chain), goal.tobytes())] = (d, grad, boundary)
        if with_shift:
            _, gp, _ = chord_block(i1, None)
            _, gm, _ = chord_block(i1 + 1 + 2 * m, None)
            cache[
                _key("chord_jdot", sigma, sigmadot.tobytes(), id(chain), goal.tobytes())
            ] = ((gp - gm) / (2.0 * eps))[None, :]
