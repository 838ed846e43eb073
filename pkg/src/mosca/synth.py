"""Synthetic dynamic scenes with exact ground truth.

Every scene is a set of planar triangle meshes (a static room plus moving
parts) watched by a camera on an orbit arc. Depth maps are ray cast at pixel
centres; tracks are surface points whose 2x2 pixel neighbourhood lies on the
point's own plane in every frame, so inverse-depth bilinear sampling of the
clean depth map returns the exact point depth.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import se3
from .camera import CameraModel
from .priors import TrackSet, write_priors

SCENE_KINDS = ("rigid-orbit", "articulated-arm", "bending-sheet", "two-body")


@dataclass
class SceneSpec:
    kind: str = "rigid-orbit"
    frames: int = 24
    width: int | None = None            # default 64 for rigid-orbit, 128 otherwise
    height: int | None = None           # default 3/4 of width
    focal: float | None = None          # px; default 0.9 * width
    static_tracks: int = 200
    dynamic_tracks: int = 100
    depth_noise: float = 0.0            # relative sigma, per pixel
    track_noise: float = 0.0            # px sigma, per entry
    occlusion_rate: float = 0.0
    depth_scales: dict[int, float] = field(default_factory=dict)  # frame -> multiplier
    orbit_degrees: float | None = None  # total camera arc
    orbit_radius: float = 4.0
    height_wobble: float = 0.3
    camera_json: str = "intrinsics"     # none | intrinsics | full
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; choose from {SCENE_KINDS}")
        if self.frames < 3:
            raise ValueError("scenes need at least 3 frames")
        for name in ("depth_noise", "track_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must lie in [0, 1]")
        if self.camera_json not in ("none", "intrinsics", "full"):
            raise ValueError("camera_json must be none, intrinsics or full")
        self.depth_scales = {int(k): float(v) for k, v in dict(self.depth_scales).items()}
        if self.width is None:
            self.width = 64 if self.kind == "rigid-orbit" else 128
        if self.height is None:
            self.height = self.width * 3 // 4

    @property
    def intrinsics(self) -> np.ndarray:
        f = self.focal if self.focal is not None else 0.9 * self.width
        return np.array([f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth_scales"] = {str(k): v for k, v in self.depth_scales.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "SceneSpec":
        import yaml

        return cls.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {})


# ---------------------------------------------------------------------------
# geometry


@dataclass
class Part:
    name: str
    verts: np.ndarray          # (V, 3) local (rigid) or rest (deformable) vertices
    faces: np.ndarray          # (F, 3)
    planes: np.ndarray         # (F,) plane id local to the part
    colors: np.ndarray         # (F, 3)
    dynamic: bool = False
    motion: Callable[[float], tuple[np.ndarray, np.ndarray]] | None = None  # t -> (R, p)
    deform: Callable[[float], np.ndarray] | None = None                     # t -> world verts
    trackable: bool = True

    def world_verts(self, t: float) -> np.ndarray:
        if self.deform is not None:
            return self.deform(t)
        if self.motion is None:
            return self.verts
        R, p = self.motion(t)
        return self.verts @ R.T + p

    def face_rotations(self, t: float) -> np.ndarray:
        """(F, 3, 3) local frames of each face at time t."""
        if self.deform is None:
            R = np.eye(3) if self.motion is None else self.motion(t)[0]
            return np.broadcast_to(R, (len(self.faces), 3, 3)).copy()
        v = self.world_verts(t)[self.faces]
        e1 = v[:, 1] - v[:, 0]
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        n = np.cross(e1, v[:, 2] - v[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        e2 = np.cross(n, e1)
        return np.stack([e1, e2, n], axis=-1)


def _box(lo, hi, color) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces, planes, colors = [], [], []
    base = np.asarray(color, float)
    for k, (a, b, c, d) in enumerate(quads):
        faces += [(a, b, c), (a, c, d)]
        planes += [k, k]
        shade = 0.7 + 0.3 * (k % 3) / 2.0
        colors += [base * shade] * 2
    return v, np.array(faces), np.array(planes), np.array(colors)


def _quad(p0, u, v, color):
    p0, u, v = (np.asarray(a, float) for a in (p0, u, v))
    verts = np.array([p0, p0 + u, p0 + u + v, p0 + v])
    return verts, np.array([(0, 1, 2), (0, 2, 3)]), np.array([0, 0]), np.array([color, color], float)


def _rot(axis, angle) -> np.ndarray:
    return se3.quat_to_matrix(se3.axis_angle_to_quat(axis, angle))


def _room() -> list[Part]:
    parts = []
    v, f, p, c = _quad([-14, -9, 9.0], [28, 0, 0], [0, 11.5, 0], [0.55, 0.6, 0.7])
    parts.append(Part("back_wall", v, f, p, c))
    v, f, p, c = _quad([-14, 1.2, -3.0], [0, 0, 12.0], [28, 0, 0], [0.6, 0.5, 0.4])
    parts.append(Part("floor", v, f, p, c))
    v, f, p, c = _quad([-4.5, -9, -3.0], [0, 11.5, 0], [0, 0, 12.0], [0.5, 0.65, 0.5])
    parts.append(Part("left_wall", v, f, p, c))
    for name, lo, hi, col in (
        ("crate_a", [-2.6, 0.2, 5.6], [-1.6, 1.2, 6.6], [0.8, 0.3, 0.3]),
        ("crate_b", [1.5, 0.45, 5.0], [2.3, 1.2, 5.8], [0.3, 0.3, 0.8]),
        ("pillar", [0.4, -2.0, 7.2], [1.2, 1.2, 8.0], [0.7, 0.7, 0.3]),
    ):
        v, f, p, c = _box(lo, hi, col)
        parts.append(Part(name, v, f, p, c))
    return parts


def _arm_parts(T: int) -> list[Part]:
    L, w = 0.8, 0.32
    base = np.array([-1.1, -0.1, 4.0])
    amp = [0.35, 0.55, 0.6]
    phase = [0.0, 1.0, 2.2]
    offset = [0.0, 0.1, 0.1]

    def angles(t):
        s = 2 * math.pi * t / T
        return [offset[k] + amp[k] * math.sin(s + phase[k]) for k in range(3)]

    def seg_motion(k):
        def motion(t):
            R = np.eye(3)
            p = base.copy()
            th = angles(t)
            for j in range(k + 1):
                if j > 0:
                    p = p + R @ np.array([L, 0.0, 0.0])
                R = R @ _rot([0, 0, 1], th[j]) @ (_rot([0, 1, 0], 0.25 * math.sin(2 * math.pi * t / T + j)) if j == 2 else np.eye(3))
            return R, p

        return motion

    parts = []
    cols = ([0.9, 0.5, 0.1], [0.2, 0.8, 0.3], [0.8, 0.2, 0.7])
    for k in range(3):
        v, f, p, c = _box([0.0, -w / 2, -w / 2], [L, w / 2, w / 2], cols[k])
        parts.append(Part(f"segment_{k}", v, f, p, c, dynamic=True, motion=seg_motion(k)))
    return parts


def _sheet_parts(T: int) -> list[Part]:
    nx, ny = 4, 3
    length, height = 2.0, 1.5
    xs = np.linspace(0.0, length, nx + 1)
    ys = np.linspace(-height / 2, height / 2, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    rest = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    faces, planes = [], []
    idx = lambda i, j: i * (ny + 1) + j
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            faces += [(a, b, c), (a, c, d)]
    faces = np.array(faces)
    planes = np.arange(len(faces))
    check = np.array([(0.9, 0.85, 0.3) if ((i // 2 + i // (2 * ny)) % 2) else (0.3, 0.6, 0.9) for i in range(len(faces))])
    origin = np.array([-1.0, -0.2, 4.0])

    def deform(t):
        s = rest[:, 0]
        y = rest[:, 1]
        k = 0.9 * math.sin(2 * math.pi * t / T) + 1e-9
        bend_x = np.sin(k * s) / k
        bend_z = (1 - np.cos(k * s)) / k
        twist = 0.25 * math.sin(2 * math.pi * t / T + 0.8) * s * y
        return np.column_stack([bend_x, y, -bend_z - twist]) + origin

    return [Part("sheet", rest, faces, planes, check, dynamic=True, deform=deform)]


def _two_body_parts(T: int) -> list[Part]:
    def motion_a(t):
        s = 2 * math.pi * t / T
        R = _rot([0, 0, 1], 0.6 * math.sin(s)) @ _rot([0, 1, 0], 0.2 * math.sin(s))
        return R, np.array([-1.1 + 0.35 * math.sin(s), 0.1 + 0.2 * math.cos(s), 4.2])

    def motion_b(t):
        s = 2 * math.pi * t / T
        R = _rot([0, 0, 1], 0.05 * t * 24 / T) @ _rot([1, 0, 0], 0.15 * math.sin(s))
        return R, np.array([1.1, -0.3 + 0.45 * math.sin(s + 1.0), 3.8])

    va, fa, pa, ca = _box([-0.35] * 3, [0.35] * 3, [0.9, 0.4, 0.2])
    vb, fb, pb, cb = _box([-0.28] * 3, [0.28] * 3, [0.2, 0.7, 0.9])
    return [
        Part("body_a", va, fa, pa, ca, dynamic=True, motion=motion_a),
        Part("body_b", vb, fb, pb, cb, dynamic=True, motion=motion_b),
    ]


@dataclass
class SceneModel:
    spec: SceneSpec
    parts: list[Part]
    camera: CameraModel

    def triangles(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """World triangles (F, 3, 3), global plane ids, colors and part ids at frame t."""
        tris, planes, cols, pid = [], [], [], []
        offset = 0
        for k, part in enumerate(self.parts):
            v = part.world_verts(t)
            tris.append(v[part.faces])
            planes.append(part.planes + offset)
            offset += int(part.planes.max()) + 1
            cols.append(part.colors)
            pid.append(np.full(len(part.faces), k))
        return np.concatenate(tris), np.concatenate(planes), np.concatenate(cols), np.concatenate(pid)


def camera_path(spec: SceneSpec) -> CameraModel:
    T = spec.frames
    arc = spec.orbit_degrees if spec.orbit_degrees is not None else (40.0 if spec.kind == "rigid-orbit" else 16.0)
    target = np.array([0.0, 0.0, 4.0])
    quats, trans = [], []
    for t in range(T):
        phi = math.radians(arc) * (t / (T - 1) - 0.5)
        c = target + spec.orbit_radius * np.array([math.sin(phi), 0.0, -math.cos(phi)])
        c[1] += -spec.height_wobble * math.sin(2 * math.pi * t / T)
        fwd = target - c
        fwd /= np.linalg.norm(fwd)
        x = np.cross([0.0, 1.0, 0.0], fwd)
        x /= np.linalg.norm(x)
        y = np.cross(fwd, x)
        quats.append(se3.matrix_to_quat(np.column_stack([x, y, fwd])))
        trans.append(c)
    return CameraModel(spec.intrinsics, np.array(quats), np.array(trans), spec.width, spec.height)


def build_scene(spec: SceneSpec) -> SceneModel:
    parts = _room()
    T = spec.frames
    if spec.kind == "rigid-orbit":
        for name, lo, hi, col in (
            ("block_a", [-1.3, -0.2, 3.7], [-0.3, 1.2, 4.7], [0.9, 0.6, 0.2]),
            ("block_b", [0.3, -0.7, 3.2], [1.1, 0.1, 4.0], [0.2, 0.8, 0.6]),
            ("block_c", [-0.2, 0.5, 4.9], [0.9, 1.2, 5.9], [0.6, 0.3, 0.8]),
        ):
            v, f, p, c = _box(lo, hi, col)
            parts.append(Part(name, v, f, p, c))
    elif spec.kind == "articulated-arm":
        parts += _arm_parts(T)
    elif spec.kind == "bending-sheet":
        parts += _sheet_parts(T)
    elif spec.kind == "two-body":
        parts += _two_body_parts(T)
    return SceneModel(spec, parts, camera_path(spec))


# ---------------------------------------------------------------------------
# ray casting


def raycast(tris_cam: np.ndarray, dirs: np.ndarray, near: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit depth (camera z) and face index for rays ``dirs`` (P, 3) with z = 1."""
    P = len(dirs)
    depth = np.full(P, np.inf)
    face = np.full(P, -1, dtype=np.int64)
    xy = dirs[:, :2]
    for k, tri in enumerate(tris_cam):
        if np.all(tri[:, 2] > near):
            nrm = tri[:, :2] / tri[:, 2:3]
            lo = nrm.min(0) - 1e-9
            hi = nrm.max(0) + 1e-9
            sel = np.flatnonzero((xy[:, 0] >= lo[0]) & (xy[:, 0] <= hi[0]) & (xy[:, 1] >= lo[1]) & (xy[:, 1] <= hi[1]))
        elif np.all(tri[:, 2] <= near):
            continue
        else:
            sel = np.arange(P)
        if len(sel) == 0:
            continue
        D = dirs[sel]
        v0, v1, v2 = tri
        e1, e2 = v1 - v0, v2 - v0
        pvec = np.cross(D, e2)
        det = pvec @ e1
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = -v0
        u = (pvec @ s) * inv
        q = np.cross(s, e1)
        v = (D @ q) * inv
        z = (e2 @ q) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (z > near)
        better = hit & (z < depth[sel])
        depth[sel[better]] = z[better]
        face[sel[better]] = k
    return depth, face


def _to_cam(points: np.ndarray, cam: CameraModel, t: int) -> np.ndarray:
    qi = se3.quat_conj(cam.quats[t])
    return se3.quat_rotate(qi, points - cam.trans[t])


def pixel_rays(cam: CameraModel) -> np.ndarray:
    fx, fy, cx, cy = cam.intrinsics
    vv, uu = np.mgrid[0 : cam.height, 0 : cam.width]
    return np.column_stack([((uu - cx) / fx).ravel(), ((vv - cy) / fy).ravel(), np.ones(uu.size)])


@dataclass
class Render:
    depth: np.ndarray   # (H, W)
    plane: np.ndarray   # (H, W) global plane id, -1 on miss
    part: np.ndarray    # (H, W) part index, -1 on miss
    rgb: np.ndarray     # (H, W, 3)


def render_frame(scene: SceneModel, t: int) -> Render:
    cam = scene.camera
    tris, planes, cols, pid = scene.triangles(t)
    tc = _to_cam(tris.reshape(-1, 3), cam, t).reshape(tris.shape)
    rays = pixel_rays(cam)
    depth, face = raycast(tc, rays)
    H, W = cam.height, cam.width
    hit = face >= 0
    plane = np.where(hit, planes[np.maximum(face, 0)], -1)
    part = np.where(hit, pid[np.maximum(face, 0)], -1)
    world = se3.quat_rotate(cam.quats[t], rays * np.where(hit, depth, 0.0)[:, None]) + cam.trans[t]
    checker = (np.floor(world * 2.5).astype(np.int64).sum(axis=1) % 2).astype(float)
    rgb = np.where(hit[:, None], cols[np.maximum(face, 0)] * (0.75 + 0.25 * checker[:, None]), 0.0)
    far = np.where(hit, depth, 50.0)
    return Render(far.reshape(H, W), plane.reshape(H, W), part.reshape(H, W), rgb.reshape(H, W, 3))


# ---------------------------------------------------------------------------
# tracks


@dataclass
class SyntheticScene:
    """In-memory dataset with ground truth."""

    spec: SceneSpec
    camera: CameraModel            # ground truth
    depth: np.ndarray              # (T, H, W) as written (noise and scales applied)
    depth_clean: np.ndarray        # (T, H, W)
    tracks: TrackSet               # as written (noise, occlusion)
    tracks_clean: np.ndarray       # (N, T, 2) exact projections
    points3d: np.ndarray           # (N, T, 3) world positions
    rotations: np.ndarray          # (N, T, 4) local frame of the carrying surface
    dynamic: np.ndarray            # (N,) bool
    part: np.ndarray               # (N,) part index
    part_names: list[str]
    geom_visible: np.ndarray       # (N, T) unoccluded and inside the image
    rgb: np.ndarray                # (T, H, W, 3)
    surface: np.ndarray            # (T, S, 3) dense samples of dynamic surfaces (may be S = 0)
    renders: list[Render] = field(default_factory=list, repr=False)


def _sample_surface(part: Part, rng: np.random.Generator, n: int):
    v = part.world_verts(0.0)[part.faces]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    face = rng.choice(len(part.faces), size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.column_stack([1 - s, s * (1 - r2), s * r2])
    return face, bary


def _positions(part: Part, face: np.ndarray, bary: np.ndarray, t: int) -> np.ndarray:
    v = part.world_verts(t)[part.faces[face]]
    return np.einsum("nk,nkd->nd", bary, v)


def _track_valid(scene: SceneModel, renders: list[Render], frames, gplane: np.ndarray, pts_w: np.ndarray, t: int):
    """Inside the image, not occluded, and 2x2 neighbourhood on the point's plane."""
    cam = scene.camera
    pc = _to_cam(pts_w, cam, t)
    z = pc[:, 2]
    fx, fy, cx, cy = cam.intrinsics
    zs = np.where(z > 1e-3, z, 1.0)
    u = fx * pc[:, 0] / zs + cx
    v = fy * pc[:, 1] / zs + cy
    W, H = cam.width, cam.height
    ok = (z > 1e-3) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, W - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, H - 2)
    pl = renders[t].plane
    for du in (0, 1):
        for dv in (0, 1):
            ok &= pl[np.clip(v0 + dv, 0, H - 1), np.clip(u0 + du, 0, W - 1)] == gplane
    idx = np.flatnonzero(ok)
    if len(idx):
        tc, planes = frames[t]
        d, f = raycast(tc, pc[idx] / pc[idx, 2:3])
        good = (f >= 0) & (np.abs(d - z[idx]) <= 1e-7 * z[idx])
        good &= planes[np.maximum(f, 0)] == gplane[idx]
        ok[idx[~good]] = False
    return ok, np.column_stack([u, v])


def make_scene(spec: SceneSpec) -> SyntheticScene:
    """Generate a dataset in memory."""
    rng = np.random.default_rng(spec.seed)
    scene = build_scene(spec)
    T = spec.frames
    renders = [render_frame(scene, t) for t in range(T)]
    frames = []
    for t in range(T):
        tris, planes, _, _ = scene.triangles(t)
        frames.append((_to_cam(tris.reshape(-1, 3), scene.camera, t).reshape(tris.shape), planes))

    plane_offset = np.cumsum([0] + [int(p.planes.max()) + 1 for p in scene.parts])
    static_parts = [k for k, p in enumerate(scene.parts) if not p.dynamic and p.trackable]
    dynamic_parts = [k for k, p in enumerate(scene.parts) if p.dynamic and p.trackable]
    groups = [(static_parts, spec.static_tracks, False)]
    if dynamic_parts:
        groups.append((dynamic_parts, spec.dynamic_tracks, True))

    pts_all, uv_all, rot_all, dyn_all, part_all, gvis_all = [], [], [], [], [], []
    for part_ids, want, is_dyn in groups:
        if want <= 0:
            continue
        # distribute candidates over parts by surface area
        areas = []
        for k in part_ids:
            v = scene.parts[k].world_verts(0)[scene.parts[k].faces]
            areas.append(0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1).sum())
        areas = np.array(areas)
        if is_dyn:
            areas = np.ones_like(areas)  # equal share per moving part
        got = 0
        fallback = []
        for _attempt in range(60):
            n_cand = max(4 * (want - got), 64)
            which = rng.choice(len(part_ids), size=n_cand, p=areas / areas.sum())
            for j, k in enumerate(part_ids):
                sel = which == j
                if not np.any(sel):
                    continue
                part = scene.parts[k]
                face, bary = _sample_surface(part, rng, int(sel.sum()))
                gplane = part.planes[face] + plane_offset[k]
                pw = np.stack([_positions(part, face, bary, t) for t in range(T)], axis=1)
                valid = np.ones((len(face), T), dtype=bool)
                uv = np.zeros((len(face), T, 2))
                for t in range(T):
                    valid[:, t], uv[:, t] = _track_valid(scene, renders, frames, gplane, pw[:, t], t)
                rots = np.stack([se3.matrix_to_quat(part.face_rotations(t)[face]) for t in range(T)], axis=1)
                full = valid.all(axis=1)
                for i in np.flatnonzero(full):
                    if got >= want:
                        break
                    pts_all.append(pw[i]); uv_all.append(uv[i]); rot_all.append(rots[i])
                    dyn_all.append(is_dyn); part_all.append(k); gvis_all.append(valid[i])
                    got += 1
                for i in np.flatnonzero(~full & (valid.sum(axis=1) >= T // 2)):
                    fallback.append((pw[i], uv[i], rots[i], k, valid[i]))
            if got >= want:
                break
        for pw_i, uv_i, r_i, k, v_i in fallback[: max(0, want - got)]:
            pts_all.append(pw_i); uv_all.append(uv_i); rot_all.append(r_i)
            dyn_all.append(is_dyn); part_all.append(k); gvis_all.append(v_i)

    points3d = np.array(pts_all).reshape(-1, T, 3)
    clean = np.array(uv_all).reshape(-1, T, 2)
    gvis = np.array(gvis_all, dtype=bool).reshape(-1, T)
    N = len(points3d)

    vis = gvis.copy()
    if spec.occlusion_rate > 0:
        vis &= rng.random((N, T)) >= spec.occlusion_rate
    for i in np.flatnonzero(~vis.any(axis=1)):
        cand = np.flatnonzero(gvis[i])
        vis[i, rng.choice(cand) if len(cand) else 0] = True
    noisy = clean + spec.track_noise * rng.standard_normal(clean.shape) if spec.track_noise > 0 else clean.copy()
    noisy[..., 0] = np.clip(noisy[..., 0], 0.0, spec.width - 1.0)
    noisy[..., 1] = np.clip(noisy[..., 1], 0.0, spec.height - 1.0)

    depth_clean = np.stack([r.depth for r in renders])
    depth = depth_clean.copy()
    if spec.depth_noise > 0:
        depth = depth * np.clip(1.0 + spec.depth_noise * rng.standard_normal(depth.shape), 0.5, 1.5)
    for t, s in spec.depth_scales.items():
        depth[t] *= s

    surf = []
    dyn_parts = [scene.parts[k] for k in dynamic_parts]
    if dyn_parts:
        srng = np.random.default_rng([spec.seed, 7])
        samples = [(p, *_sample_surface(p, srng, 1500)) for p in dyn_parts]
        for t in range(T):
            surf.append(np.concatenate([_positions(p, f, b, t) for p, f, b in samples]))
        surface = np.stack(surf)
    else:
        surface = np.zeros((T, 0, 3))

    return SyntheticScene(
        spec=spec,
        camera=scene.camera,
        depth=depth,
        depth_clean=depth_clean,
        tracks=TrackSet(noisy, vis),
        tracks_clean=clean,
        points3d=points3d,
        rotations=np.array(rot_all).reshape(-1, T, 4),
        dynamic=np.array(dyn_all, dtype=bool),
        part=np.array(part_all, dtype=np.int64),
        part_names=[p.name for p in scene.parts],
        geom_visible=gvis,
        rgb=np.stack([r.rgb for r in renders]),
        surface=surface,
        renders=renders,
    )


def write_scene(data: SyntheticScene, out: str | Path) -> Path:
    """Write the prior layout plus ``gt/``."""
    out = Path(out)
    spec = data.spec
    cam_out = None
    if spec.camera_json == "full":
        cam_out = data.camera
    elif spec.camera_json == "intrinsics":
        cam_out = data.camera
    write_priors(out, data.tracks, data.depth, None, data.rgb)
    if cam_out is not None:
        d = cam_out.to_dict()
        if spec.camera_json == "intrinsics":
            d.pop("poses")
        (out / "camera.json").write_text(json.dumps(d, indent=1), encoding="utf-8")
    gt = out / "gt"
    gt.mkdir(parents=True, exist_ok=True)
    data.camera.save(gt / "camera.json")
    np.save(gt / "tracks3d.npy", data.points3d)
    np.save(gt / "tracks2d.npy", data.tracks_clean)
    np.save(gt / "rotations.npy", data.rotations)
    np.save(gt / "dynamic.npy", data.dynamic)
    np.save(gt / "part.npy", data.part)
    np.save(gt / "geom_visible.npy", data.geom_visible)
    np.save(gt / "surface.npy", data.surface)
    (gt / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    return out


def generate(spec: SceneSpec, out: str | Path) -> SyntheticScene:
    data = make_scene(spec)
    write_scene(data, out)
    return data


@dataclass
class GroundTruth:
    camera: CameraModel
    tracks3d: np.ndarray
    tracks2d: np.ndarray
    rotations: np.ndarray
    dynamic: np.ndarray
    part: np.ndarray
    surface: np.ndarray
    spec: dict


def load_ground_truth(path: str | Path) -> GroundTruth:
    gt = Path(path)
    if (gt / "gt").is_dir():
        gt = gt / "gt"
    spec = json.loads((gt / "spec.json").read_text(encoding="utf-8"))
    return GroundTruth(
        CameraModel.load(gt / "camera.json"),
        np.load(gt / "tracks3d.npy"),
        np.load(gt / "tracks2d.npy"),
        np.load(gt / "rotations.npy"),
        np.load(gt / "dynamic.npy"),
        np.load(gt / "part.npy"),
        np.load(gt / "surface.npy"),
        spec,
    )
