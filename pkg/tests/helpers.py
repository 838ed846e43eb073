"""Shared builders and independent oracles for the test-suite."""

from __future__ import annotations

import functools

import numpy as np

from mosca import se3
from mosca.bundle import loss_depth_align, loss_proj
from mosca.camera import CameraModel
from mosca.gaussians import DynGaussianSet, bind, loss_track
from mosca.lift import loss_arap, loss_smooth
from mosca.priors import DepthStack, TrackSet
from mosca.scaffold import MotionScaffold
from mosca.synth import SceneSpec, make_scene


# ---------------------------------------------------------------------------
# random states


def random_transform(rng: np.random.Generator, scale: float = 2.0) -> se3.RigidTransform:
    return se3.RigidTransform(se3.random_quat(rng), rng.normal(scale=scale, size=3))


def random_scaffold(rng: np.random.Generator, M: int = 6, T: int = 5, K: int = 3, levels: int = 2) -> MotionScaffold:
    quats = se3.random_quat(rng, (M, T))
    trans = rng.normal(size=(M, T, 3))
    radius = rng.uniform(0.5, 2.0, size=M)
    return MotionScaffold(quats, trans, radius).with_structure(K, levels, 0.5, 2)


def random_camera_problem(rng: np.random.Generator, N: int = 6, T: int = 4):
    """Tracks, camera and depth with points in front of every camera."""
    fx, fy = rng.uniform(40, 60, size=2)
    intr = np.array([fx, fy, 32.0, 24.0])
    quats = se3.quat_normalize(np.array([1.0, 0, 0, 0]) + 0.05 * rng.normal(size=(T, 4)))
    trans = 0.2 * rng.normal(size=(T, 3))
    cam = CameraModel(intr, quats, trans, 64, 48)
    pts = rng.uniform(4, 28, size=(N, T, 2)) + np.array([10.0, 6.0])
    vis = rng.random((N, T)) < 0.85
    vis[:, 0] = True
    depth = rng.uniform(3.0, 6.0, size=(T, 48, 64))
    scale = np.exp(0.1 * rng.normal(size=T))
    return TrackSet(pts, vis), cam, DepthStack(depth, scale)


def random_bound_gaussians(rng: np.random.Generator, scaffold: MotionScaffold, n: int = 5) -> DynGaussianSet:
    T = scaffold.num_frames
    t_ref = rng.integers(0, T, size=n)
    anchors = rng.integers(0, scaffold.num_nodes, size=n)
    mu = scaffold.trans[anchors, t_ref] + 0.3 * rng.normal(size=(n, 3))
    g = DynGaussianSet(
        mu=mu,
        quats=se3.random_quat(rng, n),
        scales=np.full((n, 3), 0.05),
        opacity=np.full(n, 0.8),
        color=np.full((n, 3), 0.5),
        t_ref=t_ref,
        anchor=np.full(n, -1),
        dw=np.zeros((n, scaffold.K + 1)),
        track=np.arange(n),
    )
    g = bind(g, scaffold)
    g.dw = 0.05 * rng.normal(size=g.dw.shape)
    return g


# ---------------------------------------------------------------------------
# flat-vector objectives for central-difference checks


def _split(x: np.ndarray, shapes: list[tuple]) -> list[np.ndarray]:
    out, off = [], 0
    for s in shapes:
        k = int(np.prod(s))
        out.append(x[off : off + k].reshape(s))
        off += k
    return out


def camera_objective(loss, tracks: TrackSet, cam: CameraModel, depth: DepthStack, corrections: np.ndarray):
    """Flat objective over (intrinsics, quats, trans, log scale, corrections)."""
    keys = ("intrinsics", "quats", "trans", "log_scale", "corrections")
    x0 = [cam.intrinsics, cam.quats, cam.trans, np.log(depth.scale), corrections]
    shapes = [np.shape(a) for a in x0]

    def f(x):
        intr, q, t, ls, corr = _split(x, shapes)
        c = CameraModel(intr, q, t, cam.width, cam.height)
        d = DepthStack(depth.maps, np.exp(ls))
        v, g = loss(tracks, c, d, corr)
        return v, np.concatenate([np.asarray(g[k]).reshape(-1) for k in keys])

    return f, np.concatenate([np.asarray(a, float).reshape(-1) for a in x0])


def scaffold_objective(loss, scaffold: MotionScaffold, **kw):
    shapes = [scaffold.quats.shape, scaffold.trans.shape]

    def f(x):
        q, t = _split(x, shapes)
        s = scaffold.copy()
        s.quats, s.trans = q, t
        v, g = loss(s, **kw)
        return v, np.concatenate([g["quats"].reshape(-1), g["trans"].reshape(-1)])

    return f, np.concatenate([scaffold.quats.reshape(-1), scaffold.trans.reshape(-1)])


def track_objective(gaussians: DynGaussianSet, scaffold: MotionScaffold, tracks: TrackSet, cam: CameraModel):
    shapes = [scaffold.quats.shape, scaffold.trans.shape, gaussians.dw.shape, gaussians.mu.shape]

    def f(x):
        q, t, dw, mu = _split(x, shapes)
        s = scaffold.copy()
        s.quats, s.trans = q, t
        g = gaussians.copy()
        g.dw, g.mu = dw, mu
        v, gr = loss_track(g, s, tracks, cam)
        return v, np.concatenate([gr[k].reshape(-1) for k in ("quats", "trans", "dw", "mu")])

    x0 = np.concatenate([a.reshape(-1) for a in (scaffold.quats, scaffold.trans, gaussians.dw, gaussians.mu)])
    return f, x0


def gradient_cases():
    """name -> builder(rng) returning (flat objective, point)."""

    def proj(rng):
        tr, cam, d = random_camera_problem(rng)
        return camera_objective(loss_proj, tr, cam, d, 0.02 * rng.normal(size=tr.vis.shape))

    def depth_align(rng):
        tr, cam, d = random_camera_problem(rng)
        return camera_objective(loss_depth_align, tr, cam, d, 0.02 * rng.normal(size=tr.vis.shape))

    def arap(rng):
        return scaffold_objective(loss_arap, random_scaffold(rng), deltas=(1, 2), lambda_l=1.0, lambda_c=0.3)

    def smooth(rng):
        return scaffold_objective(loss_smooth, random_scaffold(rng), lambda_vel=0.7, lambda_acc=1.3)

    def track(rng):
        sc = random_scaffold(rng, M=5, T=4, K=2, levels=1)
        g = random_bound_gaussians(rng, sc, 4)
        _, cam, _ = random_camera_problem(rng, 1, sc.num_frames)
        cam.trans = cam.trans + np.array([0.0, 0.0, -8.0])  # keep the random cloud in front
        obs = rng.uniform(5, 60, size=(4, sc.num_frames, 2))
        vis = rng.random((4, sc.num_frames)) < 0.8
        return track_objective(g, sc, TrackSet(obs, vis), cam)

    return {"loss_proj": proj, "loss_depth_align": depth_align, "loss_arap": arap, "loss_smooth": smooth, "loss_track": track}


# ---------------------------------------------------------------------------
# oracles


def brute_force_knn(trans: np.ndarray, K: int) -> np.ndarray:
    """KNN under the max-over-time distance by full sort with lower-index tie-break."""
    M = trans.shape[0]
    out = np.zeros((M, K), dtype=np.int64)
    for i in range(M):
        d = np.array([max(np.linalg.norm(trans[i, t] - trans[j, t]) for t in range(trans.shape[1])) for j in range(M)])
        order = sorted((j for j in range(M) if j != i), key=lambda j: (d[j], j))
        out[i] = order[:K]
    return out


def linear_fill(values: np.ndarray, vis: np.ndarray) -> np.ndarray:
    """Per-trajectory linear interpolation of occluded frames with end clamping."""
    out = values.copy()
    T = values.shape[1]
    for i in range(values.shape[0]):
        idx = [t for t in range(T) if vis[i, t]]
        for t in range(T):
            if vis[i, t]:
                continue
            before = [s for s in idx if s < t]
            after = [s for s in idx if s > t]
            if not before:
                out[i, t] = values[i, after[0]]
            elif not after:
                out[i, t] = values[i, before[-1]]
            else:
                a, b = before[-1], after[0]
                w = (t - a) / (b - a)
                out[i, t] = (1 - w) * values[i, a] + w * values[i, b]
    return out


def scene(**kw):
    """Synthetic scenes are deterministic; build each configuration once per session."""
    kw = {k: (tuple(sorted(v.items())) if isinstance(v, dict) else v) for k, v in kw.items()}
    return _scene_by_key(tuple(sorted(kw.items())))


@functools.lru_cache(maxsize=None)
def _scene_by_key(key):
    kw = {k: (dict(v) if isinstance(v, tuple) else v) for k, v in key}
    return make_scene(SceneSpec(**kw))
