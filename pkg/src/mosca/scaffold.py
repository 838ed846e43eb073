"""Trajectory graph of SE(3) nodes and the dense deformation field it encodes.

A scaffold holds ``M`` nodes, each a ``T``-frame sequence of rigid transforms
plus an RBF radius. Edges are K nearest neighbours under the curve distance
(max-over-time separation of translation curves). Points are deformed by
blending the relative motions of the nodes around their nearest node.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import se3
from .errors import FormatError, InsufficientNodes

logger = logging.getLogger(__name__)

MSCA_MAGIC = b"MSCA"
MSCA_VERSION = 1
WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class ScaffoldNode:
    transforms: list[se3.RigidTransform]
    radius: float

    def __post_init__(self):
        if len(self.transforms) < 2:
            raise ValueError("a node needs at least two frames")
        if not self.radius > 0:
            raise ValueError("node radius must be positive")


@dataclass
class PyramidLevel:
    subset: np.ndarray     # (S,) global node ids, sorted
    neighbors: np.ndarray  # (S, K_l) global node ids


@dataclass(frozen=True)
class SkinningWeights:
    anchor_node: int
    neighbor_ids: np.ndarray  # blend set: anchor followed by its topology neighbours
    weights: np.ndarray


@dataclass
class MotionScaffold:
    """Node trajectories stored as dense arrays.

    quats: (M, T, 4) unit quaternions, trans: (M, T, 3), radius: (M,).
    """

    quats: np.ndarray
    trans: np.ndarray
    radius: np.ndarray
    topology: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    pyramid: list[PyramidLevel] = field(default_factory=list)

    def __post_init__(self):
        self.quats = np.asarray(self.quats, dtype=float)
        self.trans = np.asarray(self.trans, dtype=float)
        self.radius = np.asarray(self.radius, dtype=float).reshape(-1)
        M, T = self.trans.shape[:2]
        if self.quats.shape != (M, T, 4) or self.radius.shape != (M,):
            raise ValueError("inconsistent scaffold array shapes")
        if T < 2:
            raise ValueError("scaffold needs at least two frames")
        if np.any(self.radius <= 0):
            raise ValueError("node radii must be positive")
        topo = np.asarray(self.topology, dtype=np.int64)
        self.topology = topo.reshape(M, -1) if topo.size else np.zeros((M, 0), dtype=np.int64)

    @property
    def num_nodes(self) -> int:
        return self.trans.shape[0]

    @property
    def num_frames(self) -> int:
        return self.trans.shape[1]

    @property
    def K(self) -> int:
        return self.topology.shape[1]

    @classmethod
    def from_nodes(cls, nodes: list[ScaffoldNode]) -> "MotionScaffold":
        quats = np.array([[T.rotation for T in n.transforms] for n in nodes])
        trans = np.array([[T.translation for T in n.transforms] for n in nodes])
        return cls(quats, trans, np.array([n.radius for n in nodes]))

    @classmethod
    def from_translations(cls, trans: np.ndarray, radius) -> "MotionScaffold":
        trans = np.asarray(trans, dtype=float)
        quats = np.zeros(trans.shape[:2] + (4,))
        quats[..., 0] = 1.0
        radius = np.broadcast_to(np.asarray(radius, dtype=float), trans.shape[:1]).copy()
        return cls(quats, trans.copy(), radius)

    def node(self, m: int) -> ScaffoldNode:
        return ScaffoldNode(
            [se3.RigidTransform(self.quats[m, t], self.trans[m, t]) for t in range(self.num_frames)],
            float(self.radius[m]),
        )

    def transform(self, m: int, t: int) -> se3.RigidTransform:
        return se3.RigidTransform(self.quats[m, t], self.trans[m, t])

    def blend_set(self, anchor: int) -> np.ndarray:
        return np.concatenate([[anchor], self.topology[anchor]]).astype(np.int64)

    def copy(self) -> "MotionScaffold":
        return MotionScaffold(
            self.quats.copy(),
            self.trans.copy(),
            self.radius.copy(),
            self.topology.copy(),
            [PyramidLevel(l.subset.copy(), l.neighbors.copy()) for l in self.pyramid],
        )

    def with_structure(self, K: int, levels: int = 3, factor: float = 0.5, K_coarse: int = 4) -> "MotionScaffold":
        """Copy with topology and pyramid rebuilt."""
        out = MotionScaffold(self.quats.copy(), self.trans.copy(), self.radius.copy())
        out.topology = build_topology(out, K)
        out.pyramid = build_pyramid(out, levels, factor, K_coarse)
        return out

    def pyramid_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed (src, dst) edge arrays over all pyramid levels."""
        levels = self.pyramid or [PyramidLevel(np.arange(self.num_nodes), self.topology)]
        src, dst = [], []
        for lvl in levels:
            k = lvl.neighbors.shape[1]
            src.append(np.repeat(lvl.subset, k))
            dst.append(lvl.neighbors.reshape(-1))
        return np.concatenate(src).astype(np.int64), np.concatenate(dst).astype(np.int64)


# ---------------------------------------------------------------------------
# curve distance and topology


def _curve_dist_rows(trans: np.ndarray, rows: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    """Curve distances between ``rows`` and ``cols`` (all nodes if None)."""
    a = trans[rows][:, None]
    b = trans if cols is None else trans[cols]
    d = a - b[None]
    sq = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
    return np.sqrt(sq.max(axis=-1))


def curve_distance(a: int, b: int, scaffold: MotionScaffold) -> float:
    return float(_curve_dist_rows(scaffold.trans, np.array([a]), np.array([b]))[0, 0])


def curve_distance_matrix(trans: np.ndarray, chunk: int = 64) -> np.ndarray:
    trans = np.asarray(trans, dtype=float)
    M = trans.shape[0]
    out = np.empty((M, M))
    for s in range(0, M, chunk):
        out[s : s + chunk] = _curve_dist_rows(trans, np.arange(s, min(M, s + chunk)))
    return out


def _knn_rows(d: np.ndarray, K: int) -> np.ndarray:
    """K smallest per row, ties broken by lower column index."""
    if K == 0:
        return np.zeros((d.shape[0], 0), dtype=np.int64)
    kth = np.partition(d, K - 1, axis=1)[:, K - 1]
    out = np.empty((d.shape[0], K), dtype=np.int64)
    for i in range(d.shape[0]):
        cand = np.flatnonzero(d[i] <= kth[i])
        order = np.argsort(d[i, cand], kind="stable")
        out[i] = cand[order[:K]]
    return out


def build_topology(scaffold: MotionScaffold | np.ndarray, K: int, chunk: int = 64) -> np.ndarray:
    """K nearest neighbours of every node under the curve distance, self excluded."""
    trans = scaffold.trans if isinstance(scaffold, MotionScaffold) else np.asarray(scaffold, dtype=float)
    M = trans.shape[0]
    if K < 0:
        raise ValueError("K must be non-negative")
    if M <= K:
        raise InsufficientNodes(f"{M} nodes cannot have {K} neighbours each")
    out = np.empty((M, K), dtype=np.int64)
    for s in range(0, M, chunk):
        rows = np.arange(s, min(M, s + chunk))
        d = _curve_dist_rows(trans, rows)
        d[np.arange(len(rows)), rows] = np.inf
        out[rows] = _knn_rows(d, K)
    return out


def farthest_point_sampling(trans: np.ndarray, candidates: np.ndarray, n: int) -> np.ndarray:
    """Greedy FPS under the curve distance, seeded with the lowest candidate id."""
    candidates = np.sort(np.asarray(candidates, dtype=np.int64))
    n = min(n, len(candidates))
    chosen = [0]
    mind = _curve_dist_rows(trans, candidates[:1], candidates)[0]
    for _ in range(1, n):
        i = int(np.argmax(mind))  # first max -> lower id on ties
        chosen.append(i)
        mind = np.minimum(mind, _curve_dist_rows(trans, candidates[i : i + 1], candidates)[0])
    return np.sort(candidates[chosen])


def build_pyramid(
    scaffold: MotionScaffold, levels: int = 3, factor: float = 0.5, K_coarse: int = 4
) -> list[PyramidLevel]:
    """Nested node subsets with per-level KNN; level 0 is the full topology."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    M = scaffold.num_nodes
    topo = scaffold.topology if scaffold.topology.shape[0] == M else build_topology(scaffold, 0)
    pyramid = [PyramidLevel(np.arange(M), topo)]
    for lvl in range(1, levels):
        prev = pyramid[-1].subset
        k = K_coarse
        size = int(round(M * factor**lvl))
        size = min(len(prev), max(size, k + 1))
        if size <= 1 or size == len(prev):
            break  # a level that does not shrink would only duplicate edges
        k = min(k, size - 1)
        subset = farthest_point_sampling(scaffold.trans, prev, size)
        local = build_topology(scaffold.trans[subset], k)
        pyramid.append(PyramidLevel(subset, subset[local]))
    return pyramid


def resample_nodes(candidate_trajectories: np.ndarray, spacing: float) -> np.ndarray:
    """Greedy curve-distance thinning; returns kept indices in input order."""
    traj = np.asarray(candidate_trajectories, dtype=float)
    if spacing < 0:
        raise ValueError("spacing must be non-negative")
    kept: list[int] = []
    for i in range(traj.shape[0]):
        if kept and spacing > 0:
            d = _curve_dist_rows(traj, np.array([i]), np.array(kept))[0]
            if np.any(d < spacing):
                continue
        kept.append(i)
    return np.asarray(kept, dtype=np.int64)


# ---------------------------------------------------------------------------
# skinning and warping


def skinning_weight(x: np.ndarray, node: int, t_src: int, scaffold: MotionScaffold) -> float:
    """RBF influence ``exp(-|x - t|^2 / (2 r))`` (radius acts as a squared length)."""
    d = np.asarray(x, dtype=float) - scaffold.trans[node, t_src]
    return float(np.exp(-np.dot(d, d) / (2.0 * scaffold.radius[node])))


class NodeLocator:
    """Exact nearest-node queries at one frame (lower id wins ties)."""

    def __init__(self, scaffold: MotionScaffold, t: int):
        self._pts = scaffold.trans[:, t]
        self._tree = cKDTree(self._pts)

    def query(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        M = self._pts.shape[0]
        k = min(4, M)
        _, idx = self._tree.query(x, k=k)
        idx = np.asarray(idx).reshape(len(x), k)
        d = self._pts[idx] - x[:, None]
        sq = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        out = np.empty(len(x), dtype=np.int64)
        for i in range(len(x)):
            best = sq[i].min()
            out[i] = idx[i][sq[i] == best].min()
            if k < M and np.sum(sq[i] == best) == k:
                out[i] = nearest_node_bruteforce(x[i], self._pts)
        return out


def nearest_node_bruteforce(x: np.ndarray, pts: np.ndarray) -> int:
    d = pts - np.asarray(x, dtype=float)
    sq = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    return int(np.argmin(sq))


def nearest_node(x: np.ndarray, t: int, scaffold: MotionScaffold) -> int:
    return int(NodeLocator(scaffold, t).query(x)[0])


def skinning_weights(
    x: np.ndarray, t_src: int, scaffold: MotionScaffold, anchor: int | None = None
) -> SkinningWeights:
    if anchor is None:
        anchor = nearest_node(x, t_src, scaffold)
    ids = scaffold.blend_set(anchor)
    w = np.array([skinning_weight(x, i, t_src, scaffold) for i in ids])
    return SkinningWeights(int(anchor), ids, w)


def warp(
    x: np.ndarray, weights: SkinningWeights, t_src: int, t_dst: int, scaffold: MotionScaffold
) -> se3.RigidTransform:
    """Blended rigid motion carrying ``x`` from ``t_src`` to ``t_dst``."""
    pairs = []
    for i, w in zip(weights.neighbor_ids, weights.weights):
        delta = scaffold.transform(i, t_dst) @ scaffold.transform(i, t_src).inverse()
        pairs.append((max(float(w), WEIGHT_FLOOR), delta))
    return se3.dqb(pairs)


# ---------------------------------------------------------------------------
# serialisation


def write_msca(scaffold: MotionScaffold, dest: str | Path | io.BufferedIOBase) -> None:
    buf = io.BytesIO()
    M, T = scaffold.num_nodes, scaffold.num_frames
    levels = scaffold.pyramid
    buf.write(MSCA_MAGIC)
    buf.write(struct.pack("<5I", MSCA_VERSION, M, T, scaffold.K, len(levels)))
    block = np.concatenate(
        [scaffold.quats.reshape(M, T * 4), scaffold.trans.reshape(M, T * 3), scaffold.radius[:, None]], axis=1
    )
    buf.write(block.astype("<f8").tobytes())
    buf.write(scaffold.topology.astype("<i4").tobytes())
    for lvl in levels:
        buf.write(struct.pack("<2I", len(lvl.subset), lvl.neighbors.shape[1]))
        buf.write(lvl.subset.astype("<i4").tobytes())
        buf.write(lvl.neighbors.astype("<i4").tobytes())
    data = buf.getvalue()
    if isinstance(dest, (str, Path)):
        Path(dest).write_bytes(data)
    else:
        dest.write(data)


def read_msca(src: str | Path | bytes) -> MotionScaffold:
    data = Path(src).read_bytes() if isinstance(src, (str, Path)) else bytes(src)
    if data[:4] != MSCA_MAGIC:
        raise FormatError("not a scaffold file (bad magic)")
    try:
        version, M, T, K, L = struct.unpack_from("<5I", data, 4)
        if version != MSCA_VERSION:
            raise FormatError(f"unsupported scaffold version {version}")
        off = 24
        n = M * (7 * T + 1)
        block = np.frombuffer(data, "<f8", n, off).reshape(M, 7 * T + 1)
        off += 8 * n
        topo = np.frombuffer(data, "<i4", M * K, off).reshape(M, K).astype(np.int64)
        off += 4 * M * K
        pyramid = []
        for _ in range(L):
            S, k = struct.unpack_from("<2I", data, off)
            off += 8
            subset = np.frombuffer(data, "<i4", S, off).astype(np.int64)
            off += 4 * S
            nb = np.frombuffer(data, "<i4", S * k, off).reshape(S, k).astype(np.int64)
            off += 4 * S * k
            pyramid.append(PyramidLevel(subset, nb))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated scaffold file: {exc}") from exc
    if off != len(data):
        raise FormatError("trailing bytes in scaffold file")
    out = MotionScaffold(
        block[:, : 4 * T].reshape(M, T, 4).copy(),
        block[:, 4 * T : 7 * T].reshape(M, T, 3).copy(),
        block[:, -1].copy(),
    )
    out.topology = topo
    out.pyramid = pyramid
    return out


def scaffold_to_text(scaffold: MotionScaffold) -> str:
    """Lossless JSON export (floats round-trip through ``repr``)."""
    payload = {
        "format": "msca-text",
        "version": MSCA_VERSION,
        "quats": scaffold.quats.tolist(),
        "trans": scaffold.trans.tolist(),
        "radius": scaffold.radius.tolist(),
        "topology": scaffold.topology.tolist(),
        "pyramid": [{"subset": l.subset.tolist(), "neighbors": l.neighbors.tolist()} for l in scaffold.pyramid],
    }
    return json.dumps(payload, indent=1)


def scaffold_from_text(text: str) -> MotionScaffold:
    p = json.loads(text)
    if p.get("format") != "msca-text":
        raise FormatError("not a scaffold text export")
    out = MotionScaffold(np.array(p["quats"]), np.array(p["trans"]), np.array(p["radius"]))
    M = out.num_nodes
    out.topology = np.array(p["topology"], dtype=np.int64).reshape(M, -1)
    out.pyramid = [
        PyramidLevel(np.array(l["subset"], dtype=np.int64), np.array(l["neighbors"], dtype=np.int64).reshape(len(l["subset"]), -1))
        for l in p["pyramid"]
    ]
    return out
