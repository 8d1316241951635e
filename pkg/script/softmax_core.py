#!/usr/bin/env python3
"""
Tiled (online) softmax fused with the attention accumulation.

Every kernel variant drives the same three steps: `online_update` per key
tile, then either `finalize` (one program instance saw every tile) or
`merge_segments` (tiles were split over several instances).
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from core import EmptyAttentionRow, MatrixF, ShapeError

logger = logging.getLogger(__name__)

NEG_INF = np.float32(-np.inf)

ArrayLike = Union[np.ndarray, MatrixF]


def _as_f32(x: ArrayLike) -> np.ndarray:
    if isinstance(x, MatrixF):
        return x.data
    return np.asarray(x, dtype=np.float32)


@dataclass(frozen=True, eq=False)
class SoftmaxState:
    """Running max m, running sum of exponentials l and output accumulator acc"""
    m: np.ndarray
    l: np.ndarray
    acc: np.ndarray

    @classmethod
    def initial(cls, rows: int, head_size: int) -> "SoftmaxState":
        return cls(
            m=np.full(rows, NEG_INF, dtype=np.float32),
            l=np.zeros(rows, dtype=np.float32),
            acc=np.zeros((rows, head_size), dtype=np.float32),
        )

    @property
    def rows(self) -> int:
        return self.m.shape[0]

    def select(self, rows: np.ndarray) -> "SoftmaxState":
        return SoftmaxState(m=self.m[rows], l=self.l[rows], acc=self.acc[rows])


@dataclass(frozen=True, eq=False)
class SegmentResult:
    """Partial accumulator of one segment, awaiting the reduction"""
    acc: np.ndarray
    m: np.ndarray
    l: np.ndarray
    segment_index: int

    @classmethod
    def from_state(cls, state: SoftmaxState, segment_index: int) -> "SegmentResult":
        return cls(acc=state.acc, m=state.m, l=state.l, segment_index=segment_index)

    @property
    def is_empty(self) -> bool:
        return not np.any(self.l > 0)


def scores(q_rows: ArrayLike, k_tile: ArrayLike, scale: float) -> np.ndarray:
    """Scaled dot products, r x t."""
    q = _as_f32(q_rows)
    k = _as_f32(k_tile)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ShapeError(f"cannot score q {q.shape} against k {k.shape}")
    return np.float32(scale) * (q @ k.T)


def online_update(state: SoftmaxState, s_tile: np.ndarray, v_tile: ArrayLike,
                  mask: np.ndarray) -> SoftmaxState:
    """
    Fold one tile of scores into the running state.

    mask has shape (t,) or (r, t). Masked lanes contribute exp := 0 and never
    enter the max, so a fully masked row keeps its state unchanged.
    """
    s_tile = np.asarray(s_tile, dtype=np.float32)
    v = _as_f32(v_tile)
    r, t = s_tile.shape
    if r != state.rows or v.shape[0] != t or v.shape[1] != state.acc.shape[1]:
        raise ShapeError(f"tile {s_tile.shape} / v {v.shape} do not fit state {state.acc.shape}")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), (r, t))

    live = mask.any(axis=1)
    if not live.any():
        return state
    every_row = bool(live.all())
    rows = slice(None) if every_row else np.flatnonzero(live)

    s = s_tile[rows]
    mk = mask[rows]
    m_old = state.m[rows]
    tile_max = np.where(mk, s, NEG_INF).max(axis=1)
    m_new = np.maximum(m_old, tile_max)
    alpha = np.exp(m_old - m_new)

    p = np.zeros_like(s)
    np.exp(s - m_new[:, None], out=p, where=mk)

    l_new = alpha * state.l[rows] + p.sum(axis=1)
    acc_new = alpha[:, None] * state.acc[rows] + p @ v

    if every_row:
        return SoftmaxState(m=m_new, l=l_new, acc=acc_new)

    m, l, acc = state.m.copy(), state.l.copy(), state.acc.copy()
    m[rows], l[rows], acc[rows] = m_new, l_new, acc_new
    return SoftmaxState(m=m, l=l, acc=acc)


def finalize(state: SoftmaxState) -> np.ndarray:
    """Deferred division by the sum of exponentials."""
    if np.any(state.l <= 0):
        empty = np.flatnonzero(state.l <= 0).tolist()
        raise EmptyAttentionRow(f"rows {empty} saw no visible key")
    return state.acc / state.l[:, None]


def merge_segments(parts: Sequence[SegmentResult]) -> np.ndarray:
    """Rescale and combine per-segment partials; empty segments are skipped."""
    if not parts:
        raise EmptyAttentionRow("no segments to merge")
    # Fixed reduction order independent of completion order
    parts = sorted(parts, key=lambda p: p.segment_index)

    m = np.stack([p.m for p in parts])
    l = np.stack([p.l for p in parts])
    acc = np.stack([p.acc for p in parts])

    live = l > 0
    if not live.any(axis=0).all():
        empty = np.flatnonzero(~live.any(axis=0)).tolist()
        raise EmptyAttentionRow(f"rows {empty} are empty in every segment")

    m_star = np.where(live, m, NEG_INF).max(axis=0)
    w = np.zeros_like(m)
    np.exp(m - m_star, out=w, where=live)

    num = (w[:, :, None] * acc).sum(axis=0)
    den = (w * l).sum(axis=0)
    return num / den[:, None]


def naive_attention_oracle(q: ArrayLike, k: ArrayLike, v: ArrayLike, scale: float,
                           visible: Sequence[int]) -> np.ndarray:
    """
    Direct materialization of softmax(scale * q K^T) V, row i restricted to the
    first visible[i] keys.
    """
    q, k, v = _as_f32(q), _as_f32(k), _as_f32(v)
    visible = np.asarray(visible, dtype=np.int64)
    if visible.shape != (q.shape[0],) or np.any(visible < 1) or np.any(visible > k.shape[0]):
        raise ShapeError("visible must give 1..m keys for every query row")

    s = np.float32(scale) * (q @ k.T)
    cols = np.arange(k.shape[0])
    keep = cols[None, :] < visible[:, None]
    row_max = np.where(keep, s, NEG_INF).max(axis=1)
    e = np.zeros_like(s)
    np.exp(s - row_max[:, None], out=e, where=keep)
    p = e / e.sum(axis=1, keepdims=True)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-4), "softmax rows must sum to 1"
    return p @ v


def two_pass_reference(q: ArrayLike, k: ArrayLike, v: ArrayLike, scale: float,
                       visible: Sequence[int]) -> np.ndarray:
    """Independent float64 two-pass implementation, used to check the oracle."""
    q = _as_f32(q).astype(np.float64)
    k = _as_f32(k).astype(np.float64)
    v = _as_f32(v).astype(np.float64)
    out = np.zeros((q.shape[0], v.shape[1]))
    for i, n in enumerate(visible):
        row = np.array([scale * np.dot(q[i], k[j]) for j in range(n)])
        # pass 1: max and normalizer
        mx = row.max()
        denom = np.exp(row - mx).sum()
        # pass 2: weighted sum
        for j in range(n):
            out[i] += np.exp(row[j] - mx) / denom * v[j]
    return out.astype(np.float32)


def max_relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """Normwise relative error max|a - e| / max|e|."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeError(f"shape mismatch {actual.shape} vs {expected.shape}")
    if actual.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(expected))), 1e-30)
    return float(np.max(np.abs(actual - expected))) / scale


def states_equal(a: SoftmaxState, b: SoftmaxState) -> bool:
    return (np.array_equal(a.m, b.m) and np.array_equal(a.l, b.l)
            and np.array_equal(a.acc, b.acc))
