"""Prior ingestion (tracks, depths, optional camera) and epipolar track classification.

Directory layout::

    camera.json          optional: fx, fy, cx, cy, width, height, poses (T x 3x4 world-from-camera)
    depth/00000.pfm ...  one little-endian PFM per frame, positive depths
    tracks.bin           "TRK1", u32 N, u32 T, then N*T records of (f32 u, f32 v, u8 flag)
    rgb/00000.png ...    optional colour frames
"""

from __future__ import annotations

import json
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraModel
from .errors import DegenerateGeometry, FormatError, InconsistentLength, NonPositiveDepth

logger = logging.getLogger(__name__)

TRACK_MAGIC = b"TRK1"
_TRACK_DTYPE = np.dtype([("u", "<f4"), ("v", "<f4"), ("flag", "u1")])


@dataclass(frozen=True)
class Tracklet2D:
    points: np.ndarray      # (T, 2) px
    visibility: np.ndarray  # (T,) bool

    def __post_init__(self):
        if len(self.points) != len(self.visibility):
            raise InconsistentLength("tracklet points and visibility differ in length")
        if not np.any(self.visibility):
            raise ValueError("tracklet has no visible frame")


@dataclass
class TrackSet:
    """N tracks over T frames: ``points`` (N, T, 2) and ``vis`` (N, T)."""

    points: np.ndarray
    vis: np.ndarray

    def __post_init__(self):
        self.vis = np.asarray(self.vis, dtype=bool)
        if self.vis.ndim != 2:
            raise ValueError("visibility must be (N, T)")
        self.points = np.asarray(self.points, dtype=float).reshape(self.vis.shape + (2,))

    @property
    def num_tracks(self) -> int:
        return self.points.shape[0]

    @property
    def num_frames(self) -> int:
        return self.points.shape[1]

    def __getitem__(self, i: int) -> Tracklet2D:
        return Tracklet2D(self.points[i], self.vis[i])

    def subset(self, idx) -> "TrackSet":
        idx = np.asarray(idx, dtype=np.int64)
        return TrackSet(self.points[idx], self.vis[idx])


@dataclass
class DepthStack:
    """Per-frame depth maps with a per-frame scale correction.

    Depth is sampled by bilinear interpolation of inverse depth, which is exact
    for planar surfaces. Per-pixel corrections live at tracked pixels only and are
    carried separately by the bundle adjustment result.
    """

    maps: np.ndarray
    scale: np.ndarray | None = None

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=float)
        if self.maps.ndim != 3:
            raise FormatError("depth stack must be (T, H, W)")
        if self.scale is None:
            self.scale = np.ones(self.maps.shape[0])
        self.scale = np.asarray(self.scale, dtype=float).reshape(self.maps.shape[0])

    @property
    def num_frames(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.maps) & (self.maps > 0)

    def sample_raw(self, t: int, uv: np.ndarray) -> np.ndarray:
        """Raw depth at sub-pixel locations ``uv`` (..., 2) of frame ``t``."""
        H, W = self.shape
        uv = np.asarray(uv, dtype=float)
        u = np.clip(uv[..., 0], 0.0, W - 1.0)
        v = np.clip(uv[..., 1], 0.0, H - 1.0)
        u0 = np.minimum(np.floor(u).astype(np.int64), W - 2) if W > 1 else np.zeros_like(u, dtype=np.int64)
        v0 = np.minimum(np.floor(v).astype(np.int64), H - 2) if H > 1 else np.zeros_like(v, dtype=np.int64)
        u1 = np.minimum(u0 + 1, W - 1)
        v1 = np.minimum(v0 + 1, H - 1)
        fu = u - u0
        fv = v - v0
        inv = 1.0 / self.maps[t]
        i = (
            inv[v0, u0] * (1 - fu) * (1 - fv)
            + inv[v0, u1] * fu * (1 - fv)
            + inv[v1, u0] * (1 - fu) * fv
            + inv[v1, u1] * fu * fv
        )
        return 1.0 / i

    def sample(self, t: int, uv: np.ndarray) -> np.ndarray:
        return self.scale[t] * self.sample_raw(t, uv)

    def sample_tracks(self, tracks: TrackSet) -> np.ndarray:
        """Raw depth at every visible track entry; NaN where invisible."""
        out = np.full(tracks.vis.shape, np.nan)
        for t in range(tracks.num_frames):
            m = tracks.vis[:, t]
            if np.any(m):
                out[m, t] = self.sample_raw(t, tracks.points[m, t])
        return out

    def copy(self) -> "DepthStack":
        return DepthStack(self.maps.copy(), self.scale.copy())


# ---------------------------------------------------------------------------
# file formats


def write_pfm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype="<f4")
    H, W = image.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(image).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"(P[fF])\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", data)
    if not m:
        raise FormatError(f"{path}: bad PFM header")
    kind, W, H, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    ch = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = W * H * ch
    body = data[m.end():]
    if len(body) != 4 * count:
        raise FormatError(f"{path}: expected {count} floats, found {len(body) // 4}")
    img = np.frombuffer(body, dtype=dtype, count=count).reshape(H, W, ch)[..., 0]
    return np.flipud(img).astype(np.float64)


def write_tracks(path: str | Path, tracks: TrackSet) -> None:
    N, T = tracks.vis.shape
    rec = np.empty((N, T), dtype=_TRACK_DTYPE)
    rec["u"] = tracks.points[..., 0]
    rec["v"] = tracks.points[..., 1]
    rec["flag"] = tracks.vis.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(TRACK_MAGIC + struct.pack("<2I", N, T))
        fh.write(rec.tobytes())


def read_tracks(path: str | Path) -> TrackSet:
    data = Path(path).read_bytes()
    if data[:4] != TRACK_MAGIC:
        raise FormatError(f"{path}: bad track magic {data[:4]!r}")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    N, T = struct.unpack_from("<2I", data, 4)
    need = N * T * _TRACK_DTYPE.itemsize
    if len(data) - 12 != need:
        raise FormatError(f"{path}: expected {need} payload bytes, found {len(data) - 12}")
    rec = np.frombuffer(data, dtype=_TRACK_DTYPE, count=N * T, offset=12).reshape(N, T)
    pts = np.stack([rec["u"], rec["v"]], axis=-1).astype(np.float64)
    return TrackSet(pts, rec["flag"] > 0)


@dataclass
class Priors:
    tracks: TrackSet
    depth: DepthStack
    camera: CameraModel | None = None
    rgb: np.ndarray | None = None  # (T, H, W, 3) float in [0, 1]
    root: Path | None = None
    warnings: list[str] = field(default_factory=list)
    camera_has_poses: bool = False  # False when camera.json held intrinsics only

    @property
    def num_frames(self) -> int:
        return self.depth.num_frames

    def manifest(self) -> dict:
        H, W = self.depth.shape
        return {
            "root": str(self.root) if self.root else None,
            "frames": self.num_frames,
            "width": W,
            "height": H,
            "tracks": self.tracks.num_tracks,
            "visible_fraction": float(self.tracks.vis.mean()) if self.tracks.vis.size else 0.0,
            "camera": None if self.camera is None else {
                "intrinsics": [float(v) for v in self.camera.intrinsics],
                "has_poses": self.camera_has_poses,
            },
            "rgb": self.rgb is not None,
            "warnings": list(self.warnings),
        }


def _frame_files(folder: Path, ext: str) -> list[Path]:
    files = sorted(folder.glob(f"*{ext}"))
    for i, f in enumerate(files):
        if f.stem != f"{i:05d}":
            raise FormatError(f"{folder}: expected {i:05d}{ext}, found {f.name}")
    return files


def load_priors(path: str | Path, load_rgb: bool = True) -> Priors:
    root = Path(path)
    if not root.is_dir():
        raise FormatError(f"{root}: not a directory")
    depth_files = _frame_files(root / "depth", ".pfm") if (root / "depth").is_dir() else []
    if not depth_files:
        raise FormatError(f"{root}: no depth/*.pfm frames")
    maps = []
    for t, f in enumerate(depth_files):
        d = read_pfm(f)
        if maps and d.shape != maps[0].shape:
            raise FormatError(f"{f.name}: shape {d.shape} differs from frame 0 {maps[0].shape}")
        bad = ~(np.isfinite(d) & (d > 0))
        if np.any(bad):
            r, c = np.argwhere(bad)[0]
            raise NonPositiveDepth(f"frame {t} pixel (u={c}, v={r}) has depth {d[r, c]}")
        maps.append(d)
    depth = DepthStack(np.stack(maps))
    T = depth.num_frames
    H, W = depth.shape

    if not (root / "tracks.bin").is_file():
        raise FormatError(f"{root}: missing tracks.bin")
    tracks = read_tracks(root / "tracks.bin")
    if tracks.num_frames != T:
        raise InconsistentLength(f"tracks have T={tracks.num_frames} but there are {T} depth frames")

    warnings = []
    pts = tracks.points
    outside = tracks.vis & ((pts[..., 0] < 0) | (pts[..., 0] > W - 1) | (pts[..., 1] < 0) | (pts[..., 1] > H - 1))
    if np.any(outside):
        warnings.append(f"{int(outside.sum())} visible track entries outside the image were marked invisible")
        tracks.vis = tracks.vis & ~outside
    empty = ~tracks.vis.any(axis=1)
    if np.any(empty):
        warnings.append(f"{int(empty.sum())} tracks without any visible frame were dropped")
        tracks = tracks.subset(np.flatnonzero(~empty))

    camera = None
    has_poses = False
    if (root / "camera.json").is_file():
        camera = CameraModel.load(root / "camera.json", T)
        has_poses = "poses" in json.loads((root / "camera.json").read_text(encoding="utf-8"))
        if camera.num_frames != T:
            raise InconsistentLength(f"camera.json has {camera.num_frames} poses for {T} frames")
        camera.width, camera.height = W, H

    rgb = None
    if load_rgb and (root / "rgb").is_dir():
        from PIL import Image

        files = _frame_files(root / "rgb", ".png")
        if files:
            if len(files) != T:
                raise InconsistentLength(f"{len(files)} rgb frames for {T} depth frames")
            rgb = np.stack([np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) / 255.0 for f in files])
    for w in warnings:
        logger.warning(w)
    return Priors(tracks, depth, camera, rgb, root, warnings, has_poses)


def write_priors(
    path: str | Path,
    tracks: TrackSet,
    depth_maps: np.ndarray,
    camera: CameraModel | None = None,
    rgb: np.ndarray | None = None,
) -> None:
    root = Path(path)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    for t, d in enumerate(depth_maps):
        write_pfm(root / "depth" / f"{t:05d}.pfm", d)
    write_tracks(root / "tracks.bin", tracks)
    if camera is not None:
        camera.save(root / "camera.json")
    if rgb is not None:
        from PIL import Image

        (root / "rgb").mkdir(exist_ok=True)
        for t, img in enumerate(rgb):
            arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(root / "rgb" / f"{t:05d}.png", optimize=False)


# ---------------------------------------------------------------------------
# epipolar geometry


def _hartley(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = p.mean(axis=0)
    d = np.sqrt(((p - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    Tm = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    ph = np.column_stack([p, np.ones(len(p))]) @ Tm.T
    return ph, Tm


def _solve_batch(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Batched 8-point on normalised homogeneous points (B, n, 3) -> F (B, 3, 3) rank 2."""
    A = np.einsum("bni,bnj->bnij", x2, x1).reshape(x1.shape[0], x1.shape[1], 9)
    _, _, vt = np.linalg.svd(A)
    F = vt[:, -1].reshape(-1, 3, 3)
    U, S, Vt = np.linalg.svd(F)
    S[:, 2] = 0.0
    return U @ (S[:, :, None] * Vt)


def eight_point(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Normalised 8-point fundamental matrix with x2^T F x1 = 0."""
    p1 = np.asarray(p1, float)
    p2 = np.asarray(p2, float)
    if len(p1) < 8:
        raise DegenerateGeometry("8-point solver needs at least 8 correspondences")
    h1, T1 = _hartley(p1)
    h2, T2 = _hartley(p2)
    F = _solve_batch(h1[None], h2[None])[0]
    F = T2.T @ F @ T1
    return F / np.linalg.norm(F)


def sampson_distance(F: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """First-order geometric error in px (square root of the Sampson distance).

    ``F`` may be (3, 3) or a batch (B, 3, 3); the result is (n,) or (B, n).
    """
    x1 = np.column_stack([p1, np.ones(len(p1))])
    x2 = np.column_stack([p2, np.ones(len(p2))])
    Fx1 = np.einsum("...ij,nj->...ni", F, x1)
    Ftx2 = np.einsum("...ji,nj->...ni", F, x2)
    num = np.einsum("ni,...ni->...n", x2, Fx1) ** 2
    den = Fx1[..., 0] ** 2 + Fx1[..., 1] ** 2 + Ftx2[..., 0] ** 2 + Ftx2[..., 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def ransac_fundamental(
    p1: np.ndarray,
    p2: np.ndarray,
    rng: np.random.Generator,
    iterations: int = 2000,
    inlier_px: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC over the normalised 8-point solver; returns (F, inlier mask)."""
    n = len(p1)
    if n < 8:
        raise DegenerateGeometry("RANSAC needs at least 8 correspondences")
    h1, T1 = _hartley(p1)
    h2, T2 = _hartley(p2)
    samples = np.argsort(rng.random((iterations, n)), axis=1)[:, :8]
    Fs = _solve_batch(h1[samples], h2[samples])
    Fs = np.einsum("ji,bjk,kl->bil", T2, Fs, T1)
    err = sampson_distance(Fs, p1, p2)
    err = np.where(np.isfinite(err), err, np.inf)
    counts = (err < inlier_px).sum(axis=1)
    best = int(np.argmax(counts))
    inliers = err[best] < inlier_px
    F = Fs[best] / np.linalg.norm(Fs[best])
    if inliers.sum() >= 8:
        F = eight_point(p1[inliers], p2[inliers])
        refit = sampson_distance(F, p1, p2) < inlier_px
        if refit.sum() >= inliers.sum():
            inliers = refit
        else:
            F = Fs[best] / np.linalg.norm(Fs[best])
    return F, inliers


@dataclass
class EpipolarStats:
    track_error: np.ndarray       # (N,) e(tau) in px; inf when never co-visible in a pair
    frame_error: np.ndarray       # (T-1,) mean inlier error per consecutive pair; nan if skipped
    inlier_ratio: np.ndarray      # (T-1,)


def default_threshold(height: int, base_px: float = 1.0) -> float:
    """Static threshold scaled linearly from ``base_px`` at 480 px image height."""
    return base_px * height / 480.0


def epipolar_errors(
    tracks: TrackSet, seed: int = 0, iterations: int = 2000, inlier_px: float = 1.0
) -> EpipolarStats:
    N, T = tracks.vis.shape
    if N < 8:
        raise DegenerateGeometry(f"need at least 8 tracklets, got {N}")
    e = np.full(N, -np.inf)
    frame_err = np.full(T - 1, np.nan)
    ratio = np.full(T - 1, np.nan)
    for t in range(T - 1):
        co = np.flatnonzero(tracks.vis[:, t] & tracks.vis[:, t + 1])
        if len(co) < 8:
            continue
        p1 = tracks.points[co, t]
        p2 = tracks.points[co, t + 1]
        rng = np.random.default_rng([seed, t])
        F, inl = ransac_fundamental(p1, p2, rng, iterations, inlier_px)
        err = sampson_distance(F, p1, p2)
        ratio[t] = inl.mean()
        frame_err[t] = err[inl].mean() if inl.any() else np.nan
        e[co] = np.maximum(e[co], err)
    evaluated = ~np.isnan(ratio)
    if not evaluated.any():
        raise DegenerateGeometry("no consecutive frame pair has 8 co-visible tracks")
    if np.all(ratio[evaluated] < 0.25):
        raise DegenerateGeometry("RANSAC inlier ratio below 25% on every frame pair")
    e[e == -np.inf] = np.inf
    return EpipolarStats(e, frame_err, ratio)


def epipolar_classify(
    tracks: TrackSet,
    threshold: float,
    seed: int = 0,
    iterations: int = 2000,
    inlier_px: float = 1.0,
    stats: EpipolarStats | None = None,
) -> tuple[np.ndarray, np.ndarray, EpipolarStats]:
    """Split tracks into (static ids, dynamic ids) by thresholding e(tau)."""
    if stats is None:
        stats = epipolar_errors(tracks, seed, iterations, inlier_px)
    if np.isposinf(threshold):
        static = np.ones(len(stats.track_error), dtype=bool)
    else:
        static = stats.track_error < threshold
    return np.flatnonzero(static), np.flatnonzero(~static), stats


def foreground_masks(tracks: TrackSet, dynamic: np.ndarray, shape: tuple[int, int], radius: float = 3.0) -> np.ndarray:
    """Per-frame pixel masks labelled by the nearest visible track being dynamic.

    A pixel is foreground when its nearest visible track lies within ``radius``
    px and belongs to the dynamic set.
    """
    from scipy.spatial import cKDTree

    H, W = shape
    is_dyn = np.zeros(tracks.num_tracks, dtype=bool)
    is_dyn[np.asarray(dynamic, dtype=np.int64)] = True
    vv, uu = np.mgrid[0:H, 0:W]
    grid = np.column_stack([uu.ravel(), vv.ravel()]).astype(float)
    masks = np.zeros((tracks.num_frames, H, W), dtype=bool)
    for t in range(tracks.num_frames):
        vis = np.flatnonzero(tracks.vis[:, t])
        if len(vis) == 0:
            continue
        d, j = cKDTree(tracks.points[vis, t]).query(grid)
        masks[t] = ((d <= radius) & is_dyn[vis[j]]).reshape(H, W)
    return masks
