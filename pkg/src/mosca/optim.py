"""Adaptive-moment first-order minimiser shared by every optimisation stage."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import NonFiniteObjective

Objective = Callable[[Mapping[str, np.ndarray]], tuple]


@dataclass
class ParamBlock:
    """A named array of free variables.

    ``manifold='quaternion'`` treats the trailing axis as unit quaternions and
    re-normalises them after every step. Entries where ``frozen`` is True never
    change.
    """

    name: str
    values: np.ndarray
    manifold: str = "euclidean"
    frozen: np.ndarray | None = None
    lr_scale: float = 1.0

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if self.manifold not in ("euclidean", "quaternion"):
            raise ValueError(f"unknown manifold {self.manifold!r}")
        if self.manifold == "quaternion" and self.values.shape[-1] != 4:
            raise ValueError("quaternion blocks need a trailing axis of 4")
        if self.frozen is not None:
            self.frozen = np.broadcast_to(np.asarray(self.frozen, dtype=bool), self.values.shape).copy()

    def retract(self) -> None:
        if self.manifold == "quaternion":
            n = np.linalg.norm(self.values, axis=-1, keepdims=True)
            normed = self.values / n
            if self.frozen is None:
                self.values = normed
            else:
                self.values = np.where(self.frozen, self.values, normed)


@dataclass
class Schedule:
    iterations: int = 2000
    lr: float = 1e-3
    decay: str = "cosine"
    final_lr_ratio: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-12
    window: int = 50

    def lr_at(self, it: int) -> float:
        if self.decay == "none" or self.iterations <= 1:
            return self.lr
        frac = min(it / (self.iterations - 1), 1.0)
        lo = self.lr * self.final_lr_ratio
        if self.decay == "cosine":
            return lo + 0.5 * (self.lr - lo) * (1.0 + math.cos(math.pi * frac))
        if self.decay == "exp":
            return self.lr * self.final_lr_ratio**frac
        raise ValueError(f"unknown decay {self.decay!r}")


class ConvergenceLog:
    """Line-delimited JSON records of an optimisation run."""

    def __init__(self, path: str | Path | None = None, every: int = 1):
        self.records: list[dict] = []
        self.every = max(1, every)
        self._fh = open(path, "w", encoding="utf-8") if path is not None else None

    def add(self, record: dict) -> None:
        if record["iteration"] % self.every:
            return
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class MinimizeResult:
    value: float
    iterations: int
    initial_value: float
    history: list[float] = field(default_factory=list)


def _unpack(out) -> tuple[float, dict, dict]:
    if len(out) == 3:
        return float(out[0]), out[1], dict(out[2])
    return float(out[0]), out[1], {}


def _check_finite(value: float, grads: Mapping[str, np.ndarray], blocks: list[ParamBlock]) -> None:
    for b in blocks:
        g = np.asarray(grads.get(b.name, 0.0))
        bad = ~np.isfinite(g)
        if np.any(bad):
            idx = int(np.flatnonzero(bad.reshape(-1))[0])
            raise NonFiniteObjective(f"non-finite gradient in block {b.name!r} at flat index {idx}")
    if not math.isfinite(value):
        raise NonFiniteObjective(f"objective value is {value}")


def _remap_rows(moment: np.ndarray, rows, shape) -> np.ndarray:
    if rows is None:
        return moment if moment.shape == shape else np.zeros(shape)
    rows = np.asarray(rows)
    out = np.zeros(shape)
    ok = rows >= 0
    out[ok] = moment[rows[ok]]
    return out


def minimize(
    objective: Objective,
    params: list[ParamBlock],
    schedule: Schedule | None = None,
    log: ConvergenceLog | None = None,
    callback: Callable[[int, list[ParamBlock]], bool | None] | None = None,
) -> MinimizeResult:
    """Adam with cosine-decayed step, frozen masks and quaternion retraction.

    ``objective`` maps ``{name: values}`` to ``(value, {name: grad})`` or
    ``(value, grads, terms)``. Blocks are updated in place and left at the best
    iterate seen, so the returned value never exceeds the initial one.
    ``callback(it, params)`` may return True to signal that the objective changed
    shape (e.g. node insertion); the moment estimates are then reset. It may
    instead return ``{name: rows}`` where ``rows[i]`` is the old row of new row
    ``i`` (-1 for fresh rows); moments are then carried over row by row and
    blocks missing from the mapping keep theirs.
    """
    sched = schedule or Schedule()
    b1, b2 = sched.betas
    m = {p.name: np.zeros_like(p.values) for p in params}
    v = {p.name: np.zeros_like(p.values) for p in params}
    step_count = 0

    def evaluate():
        out = _unpack(objective({p.name: p.values for p in params}))
        _check_finite(out[0], out[1], params)
        return out

    value, grads, terms = evaluate()
    initial = value
    best = value
    best_vals = {p.name: p.values.copy() for p in params}
    history = [value]
    it = 0
    for it in range(sched.iterations):
        lr = sched.lr_at(it)
        step_count += 1
        sq_step = 0.0
        for p in params:
            g = np.asarray(grads.get(p.name, 0.0), dtype=float)
            g = np.broadcast_to(g, p.values.shape)
            m[p.name] = b1 * m[p.name] + (1 - b1) * g
            v[p.name] = b2 * v[p.name] + (1 - b2) * g * g
            mh = m[p.name] / (1 - b1**step_count)
            vh = v[p.name] / (1 - b2**step_count)
            step = lr * p.lr_scale * mh / (np.sqrt(vh) + sched.eps)
            if p.frozen is not None:
                step = np.where(p.frozen, 0.0, step)
            p.values = p.values - step
            p.retract()
            sq_step += float(np.sum(step * step))
        if log is not None:
            rec = {"iteration": it, "loss": value, "step_norm": math.sqrt(sq_step), "lr": lr}
            rec.update({k: float(x) for k, x in terms.items()})
            log.add(rec)
        changed = callback(it, params) if callback is not None else None
        if changed:
            if isinstance(changed, Mapping):
                m = {p.name: _remap_rows(m[p.name], changed.get(p.name), p.values.shape) for p in params}
                v = {p.name: _remap_rows(v[p.name], changed.get(p.name), p.values.shape) for p in params}
            else:
                m = {p.name: np.zeros_like(p.values) for p in params}
                v = {p.name: np.zeros_like(p.values) for p in params}
                step_count = 0
            value, grads, terms = evaluate()
            best = value
            best_vals = {p.name: p.values.copy() for p in params}
            history.append(value)
            continue
        value, grads, terms = evaluate()
        history.append(value)
        if value <= best:
            best = value
            best_vals = {p.name: p.values.copy() for p in params}
    for p in params:
        p.values = best_vals[p.name]
    return MinimizeResult(best, it + 1 if sched.iterations else 0, initial, history)


def check_gradient(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point: np.ndarray,
    epsilon: float = 1e-5,
) -> float:
    """Max over coordinates of |g_fd - g| / (|g_fd| + |g| + floor), central differences.

    ``floor`` is 1e-6 times the largest analytic gradient entry (at least 1e-8),
    so components that vanish analytically are judged against round-off at the
    gradient's own scale.
    """
    x = np.array(point, dtype=float).reshape(-1)
    _, g = objective(x.copy())
    g = np.asarray(g, dtype=float).reshape(-1)
    floor = max(1e-8, 1e-6 * float(np.max(np.abs(g))) if g.size else 0.0)
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += epsilon
        xm[i] -= epsilon
        fd = (float(objective(xp)[0]) - float(objective(xm)[0])) / (2 * epsilon)
        err = abs(fd - g[i]) / (abs(fd) + abs(g[i]) + floor)
        worst = max(worst, err)
    return worst


def flatten_objective(objective: Objective, template: Mapping[str, np.ndarray]):
    """Adapt a block-dict objective to a flat-vector one (for gradient checks)."""
    names = list(template)
    shapes = [np.shape(template[n]) for n in names]
    sizes = [int(np.prod(s)) for s in shapes]

    def unflatten(x):
        out, off = {}, 0
        for n, s, k in zip(names, shapes, sizes):
            out[n] = x[off : off + k].reshape(s)
            off += k
        return out

    def flat(x):
        out = _unpack(objective(unflatten(np.asarray(x, dtype=float))))
        g = np.concatenate([np.broadcast_to(np.asarray(out[1].get(n, 0.0), float), s).reshape(-1) for n, s in zip(names, shapes)])
        return out[0], g

    x0 = np.concatenate([np.asarray(template[n], float).reshape(-1) for n in names])
    return flat, x0
