#!/usr/bin/env python3
"""
Paged attention kernels on an explicit program-instance execution model.

Each variant is a "program" called once per point of its launch grid. A
program reads Q and the paged KV cache, runs the tiled softmax for the rows
it owns and writes them through an OutputBuffer. Programs of one launch are
independent and write disjoint rows, so the worker pool may run them in
any order with unchanged (bitwise) results.

Q-Block rows are ordered token-major, head-minor: block row m holds query
token q_token_start + m // G and query head kv_head * G + m % G, where G is
the number of query heads per KV head.
"""

import dataclasses
import logging
import mmap
import multiprocessing
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core import (
    AttentionConfig,
    BatchMeta,
    IndexOutOfRange,
    InvalidConfig,
    ShapeError,
    WorkerFailed,
    build_batch_meta,
    cdiv,
    kv_head_for_query_head,
    seq_index_lookup,
)
from kvcache import BlockTable, PagedKvCache
from softmax_core import (
    SegmentResult,
    SoftmaxState,
    finalize,
    merge_segments,
    naive_attention_oracle,
    online_update,
    scores,
)

logger = logging.getLogger(__name__)


# =============================================================================
# TYPES
# =============================================================================

class Variant(Enum):
    BASELINE = "Baseline"
    QBLOCK = "QBlock"
    PARALLEL_TILED = "ParallelTiled"

    @property
    def ordinal(self) -> int:
        return list(Variant).index(self)

    @classmethod
    def parse(cls, name: str) -> "Variant":
        """Accepts 'QBlock', 'qblock', 'parallel_tiled', ..."""
        key = name.replace("_", "").replace("-", "").lower()
        for variant in cls:
            if variant.value.lower() == key:
                return variant
        raise InvalidConfig(f"unknown kernel variant: {name}")


class GridKind(Enum):
    PREFILL_BASELINE = "prefill_baseline"
    DECODE_BASELINE = "decode_baseline"
    QBLOCK = "qblock"
    PARALLEL_TILED = "parallel_tiled"
    STATIC = "static"


@dataclass(frozen=True)
class LaunchGrid:
    dims: Tuple[int, ...]
    kind: GridKind

    def __post_init__(self):
        if not 1 <= len(self.dims) <= 3:
            raise InvalidConfig(f"launch grids have 1-3 dimensions, got {self.dims}")

    @property
    def num_instances(self) -> int:
        return int(np.prod(self.dims))


@dataclass(frozen=True)
class QBlockDescriptor:
    """One flattened BLOCK_M x HEAD_SIZE unit of work"""
    seq_index: int
    q_block_in_seq: int
    q_token_start: int
    # (query token within the sequence's query, query head) of each valid row
    rows: Tuple[Tuple[int, int], ...]
    kv_head: int


@dataclass
class LaunchTrace:
    """Which instance visited which work unit, and which instance stored rows"""
    visits: List[Tuple[int, int]] = field(default_factory=list)
    writes: Dict[int, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record_visit(self, instance: int, unit: int) -> None:
        with self._lock:
            self.visits.append((instance, unit))

    def record_write(self, instance: int, rows: int) -> None:
        with self._lock:
            self.writes[instance] = self.writes.get(instance, 0) + rows

    @property
    def writers(self) -> set:
        return set(self.writes)


class OutputBuffer:
    """The only store path of every kernel"""

    def __init__(self, shape: Tuple[int, ...], trace: Optional[LaunchTrace] = None, shared: bool = False):
        if trace is not None and shared:
            raise InvalidConfig("launch traces are not collected across worker processes")
        self.data = shared_zeros(shape, shared=shared)
        self.trace = trace

    def store(self, instance: int, tokens: np.ndarray, heads: np.ndarray, rows: np.ndarray) -> None:
        self.data[tokens, heads] = rows
        if self.trace is not None:
            self.trace.record_write(instance, len(tokens))


# =============================================================================
# WORKER POOL
# =============================================================================

BACKENDS = ("thread", "process")


def check_backend(backend: str) -> str:
    if backend not in BACKENDS:
        raise InvalidConfig(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    if backend == "process" and "fork" not in multiprocessing.get_all_start_methods():
        raise InvalidConfig("the process backend needs the fork start method")
    return backend


def shared_zeros(shape: Tuple[int, ...], dtype=np.float32, shared: bool = False) -> np.ndarray:
    """
    Zero-filled array. With shared=True it lives in an anonymous shared
    mapping, so writes from forked workers are visible to the parent.
    """
    if not shared:
        return np.zeros(shape, dtype=dtype)
    count = int(np.prod(shape))
    buf = mmap.mmap(-1, max(count * np.dtype(dtype).itemsize, 1))
    return np.frombuffer(buf, dtype=dtype, count=count).reshape(shape)


def launch(dims: Sequence[int], program: Callable[..., None], workers: int = 1,
           backend: str = "thread") -> None:
    """
    Run program(*index) for every point of the grid; returns after all
    instances finished (fork-join). Instances are dealt round-robin to
    the workers.

    backend="thread" shares everything but holds the GIL between numpy
    calls. backend="process" forks one worker per slice; programs must then
    write only into shared_zeros(..., shared=True) buffers.
    """
    check_backend(backend)
    dims = tuple(int(d) for d in dims)
    total = int(np.prod(dims)) if dims else 0
    if total == 0:
        return

    def run_slice(first: int, stride: int) -> None:
        for flat in range(first, total, stride):
            program(*(int(i) for i in np.unravel_index(flat, dims)))

    pool_size = min(max(1, workers), total)
    if pool_size == 1:
        run_slice(0, 1)
        return
    if backend == "process":
        _fork_join(run_slice, pool_size)
        return
    with ThreadPoolExecutor(max_workers=pool_size) as pool:
        futures = [pool.submit(run_slice, w, pool_size) for w in range(pool_size)]
        for future in futures:
            future.result()


def _fork_join(run_slice: Callable[[int, int], None], pool_size: int) -> None:
    ctx = multiprocessing.get_context("fork")
    procs = [ctx.Process(target=run_slice, args=(w, pool_size), daemon=True) for w in range(pool_size)]
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    failed = [(w, p.exitcode) for w, p in enumerate(procs) if p.exitcode != 0]
    if failed:
        raise WorkerFailed(f"launch workers failed (worker, exit code): {failed}")


# =============================================================================
# SHARED PROGRAM PIECES
# =============================================================================

def _check_inputs(batch: BatchMeta, cache: PagedKvCache, tables: Sequence[BlockTable],
                  q: np.ndarray, cfg: AttentionConfig) -> None:
    expected = (batch.tot_query_len, cfg.num_query_heads, cfg.head_size)
    if q.shape != expected:
        raise ShapeError(f"q must have shape {expected}, got {q.shape}")
    if len(tables) != batch.num_seqs:
        raise ShapeError(f"{len(tables)} block tables for {batch.num_seqs} sequences")
    if cache.block_size != cfg.kv_block_size:
        raise InvalidConfig(f"cache block size {cache.block_size} != kv_block_size {cfg.kv_block_size}")
    if cache.num_kv_heads != cfg.num_kv_heads or cache.head_size != cfg.head_size:
        raise InvalidConfig("cache head layout does not match the attention config")
    for i, (seq, table) in enumerate(zip(batch.seqs, tables)):
        if table.capacity < seq.seq_len:
            raise IndexOutOfRange(f"block table of sequence {i} holds {table.capacity} < {seq.seq_len} tokens")


def attend_tiles(q_rows: np.ndarray, row_visible: np.ndarray, cache: PagedKvCache,
                 table: BlockTable, kv_head: int, scale: float, tile_size: int,
                 tiles: range) -> SoftmaxState:
    """
    Tiled softmax of q_rows against the given tiles of one KV head. Row i
    sees keys [0, row_visible[i]); rows with 0 visible keys stay empty.
    """
    state = SoftmaxState.initial(q_rows.shape[0], q_rows.shape[1])
    max_visible = int(row_visible.max())
    offsets = np.arange(tile_size)
    for tile in tiles:
        start = tile * tile_size
        k_tile, v_tile, mask = cache.read_kv_tile(table, kv_head, start, tile_size, max_visible)
        causal = (start + offsets)[None, :] < row_visible[:, None]
        s = scores(q_rows, k_tile, scale)
        state = online_update(state, s, v_tile, causal & mask[None, :])
    return state


@dataclass(frozen=True, eq=False)
class _QBlockRows:
    desc: QBlockDescriptor
    q_rows: np.ndarray
    row_visible: np.ndarray
    valid: np.ndarray
    tokens: np.ndarray
    heads: np.ndarray
    tile_size: int

    @property
    def num_tiles(self) -> int:
        return cdiv(int(self.row_visible.max()), self.tile_size)


def describe_q_block(batch: BatchMeta, cfg: AttentionConfig, q_block: int, kv_head: int) -> QBlockDescriptor:
    seq_index = seq_index_lookup(batch.cu_q_blocks, q_block)
    seq = batch.seqs[seq_index]
    local = q_block - int(batch.cu_q_blocks[seq_index])
    start = local * batch.block_q
    group = cfg.queries_per_kv
    rows = tuple(
        (start + m // group, kv_head * group + m % group)
        for m in range(batch.block_q * group)
        if start + m // group < seq.query_len
    )
    return QBlockDescriptor(seq_index=seq_index, q_block_in_seq=local,
                            q_token_start=start, rows=rows, kv_head=kv_head)


def _load_q_block(batch: BatchMeta, cfg: AttentionConfig, q: np.ndarray,
                  q_block: int, kv_head: int) -> _QBlockRows:
    desc = describe_q_block(batch, cfg, q_block, kv_head)
    seq = batch.seqs[desc.seq_index]
    group = cfg.queries_per_kv
    block_m = batch.block_q * group

    m = np.arange(block_m)
    token = desc.q_token_start + m // group
    head = kv_head * group + m % group
    valid = token < seq.query_len
    global_token = int(batch.cu_query_lens[desc.seq_index]) + token

    q_rows = np.zeros((block_m, cfg.head_size), dtype=np.float32)
    q_rows[valid] = q[global_token[valid], head[valid]]
    row_visible = np.where(valid, seq.context_len + token + 1, 0)
    return _QBlockRows(desc=desc, q_rows=q_rows, row_visible=row_visible, valid=valid,
                       tokens=global_token[valid], heads=head[valid],
                       tile_size=cfg.tile_size_for(seq))


# =============================================================================
# LAUNCH GRIDS
# =============================================================================

def baseline_grid(batch: BatchMeta, cfg: AttentionConfig) -> LaunchGrid:
    if batch.is_decode_only:
        return LaunchGrid((batch.num_seqs, cfg.num_query_heads), GridKind.DECODE_BASELINE)
    return LaunchGrid((batch.tot_query_len, cfg.num_query_heads), GridKind.PREFILL_BASELINE)


def qblock_grid(batch: BatchMeta, cfg: AttentionConfig) -> LaunchGrid:
    return LaunchGrid((batch.total_q_blocks, cfg.num_kv_heads), GridKind.QBLOCK)


def parallel_tiled_grid(batch: BatchMeta, cfg: AttentionConfig, num_segments: int) -> LaunchGrid:
    return LaunchGrid((batch.total_q_blocks, cfg.num_kv_heads, num_segments), GridKind.PARALLEL_TILED)


# =============================================================================
# BASELINE
# =============================================================================

def _baseline_token(batch: BatchMeta, cache: PagedKvCache, tables: Sequence[BlockTable],
                    q: np.ndarray, cfg: AttentionConfig, out: OutputBuffer,
                    instance: int, token: int, seq_index: int, head: int) -> None:
    seq = batch.seqs[seq_index]
    visible = seq.context_len + token - int(batch.cu_query_lens[seq_index]) + 1
    kv_head = kv_head_for_query_head(head, cfg)
    # The baseline tile is one KV-cache block
    state = attend_tiles(q[token, head][None, :], np.array([visible]), cache,
                         tables[seq_index], kv_head, cfg.scale, cfg.kv_block_size,
                         range(cdiv(visible, cfg.kv_block_size)))
    out.store(instance, np.array([token]), np.array([head]), finalize(state))


def baseline_attention(batch: BatchMeta, cache: PagedKvCache, tables: Sequence[BlockTable],
                       q: np.ndarray, cfg: AttentionConfig, workers: int = 1,
                       backend: str = "thread") -> np.ndarray:
    """One program instance per (query token, query head) pair."""
    _check_inputs(batch, cache, tables, q, cfg)
    grid = baseline_grid(batch, cfg)
    out = OutputBuffer(q.shape, shared=check_backend(backend) == "process")

    if grid.kind is GridKind.DECODE_BASELINE:
        def program(seq_index: int, head: int) -> None:
            token = int(batch.cu_query_lens[seq_index])
            _baseline_token(batch, cache, tables, q, cfg, out,
                            seq_index * cfg.num_query_heads + head, token, seq_index, head)
    else:
        def program(token: int, head: int) -> None:
            seq_index = seq_index_lookup(batch.cu_query_lens, token)
            _baseline_token(batch, cache, tables, q, cfg, out,
                            token * cfg.num_query_heads + head, token, seq_index, head)

    logger.debug("baseline launch %s %s", grid.kind.value, grid.dims)
    launch(grid.dims, program, workers, backend)
    return out.data


# =============================================================================
# Q-BLOCK
# =============================================================================

def _qblock_program(batch: BatchMeta, cache: PagedKvCache, tables: Sequence[BlockTable],
                    q: np.ndarray, cfg: AttentionConfig, out: OutputBuffer,
                    instance: int, q_block: int, kv_head: int) -> None:
    blk = _load_q_block(batch, cfg, q, q_block, kv_head)
    # Tiles run up to the longest prefix in the block; shorter rows are masked per row
    state = attend_tiles(blk.q_rows, blk.row_visible, cache, tables[blk.desc.seq_index],
                         kv_head, cfg.scale, blk.tile_size, range(blk.num_tiles))
    out.store(instance, blk.tokens, blk.heads, finalize(state.select(blk.valid)))


def qblock_attention(batch: BatchMeta, cache: PagedKvCache, tables: Sequence[BlockTable],
                     q: np.ndarray, cfg: AttentionConfig, workers: int = 1,
                     backend: str = "thread") -> np.ndarray:
    """One program instance per (Q-Block, KV head) pair."""
    _check_inputs(batch, cache, tables, q, cfg)
    if batch.block_q != cfg.block_q:
        batch = build_batch_meta(batch.seqs, cfg)
    grid = qblock_grid(batch, cfg)
    out = OutputBuffer(q.shape, shared=check_backend(backend) == "process")

    def program(q_block: int, kv_head: int) -> None:
        _qblock_program(batch, cache, tables, q, cfg, out,
                        q_block * cfg.num_kv_heads + kv_head, q_block, kv_head)

    logger.debug("qblock launch %s", grid.dims)
    launch(grid.dims, program, workers, backend)
    return out.data


# =============================================================================
# PARALLEL TILED SOFTMAX
# =============================================================================

def assign_tiles_to_segments(num_tiles: int, num_segments: int) -> List[Tuple[int, int]]:
    """Balanced contiguous split: per segment (start_tile, tile_count)."""
    if num_segments < 1:
        raise InvalidConfig("num_segments must be >= 1")
    base, extra = divmod(num_tiles, num_segments)
    ranges = []
    start = 0
    for seg in range(num_segments):
        count = base + (1 if seg < extra else 0)
        ranges.append((start, count))
        start += count
    return ranges


def _decode_style(batch: BatchMeta, cfg: AttentionConfig) -> Tuple[BatchMeta, AttentionConfig]:
    if cfg.block_q != 1:
        cfg = dataclasses.replace(cfg, block_q=1)
    if batch.block_q != 1:
        batch = build_batch_meta(batch.seqs, cfg)
    return batch, cfg


class _SegmentStore:
    """
    Disjoint preallocated slots, one per (Q-Block, KV head, segment). Rows
    per slot are BLOCK_M of a decode-style Q-Block, which are all valid.
    """

    def __init__(self, num_q_blocks: int, num_kv_heads: int, num_segments: int,
                 rows: int, head_size: int, shared: bool = False):
        self.num_kv_heads = num_kv_heads
        self.num_segments = num_segments
        slots = num_q_blocks * num_kv_heads * num_segments
        self.m = shared_zeros((slots, rows), shared=shared)
        self.l = shared_zeros((slots, rows), shared=shared)
        self.acc = shared_zeros((slots, rows, head_size), shared=shared)

    def _index(self, q_block: int, kv_head: int, segment: int) -> int:
        return (q_block * self.num_kv_heads + kv_head) * self.num_segments + segment

    def put(self, q_block: int, kv_head: int, result: SegmentResult) -> None:
        slot = self._index(q_block, kv_head, result.segment_index)
        self.m[slot] = result.m
        self.l[slot] = result.l
        self.acc[slot] = result.acc

    def parts(self, q_block: int, kv_head: int) -> List[SegmentResult]:
        first = self._index(q_block, kv_head, 0)
        return [SegmentResult(acc=self.acc[first + s], m=self.m[first + s], l=self.l[first + s],
                              segment_index=s)
                for s in range(self.num_segments)]


def _segment_program(batch: BatchMeta, cache: PagedKvCache, tables: Sequence[BlockTable],
                     q: np.ndarray, cfg: AttentionConfig, store: _SegmentStore,
                     q_block: int, kv_head: int, segment: int) -> None:
    blk = _load_q_block(batch, cfg, q, q_block, kv_head)
    start, count = assign_tiles_to_segments(blk.num_tiles, store.num_segments)[segment]
    state = attend_tiles(blk.q_rows, blk.row_visible, cache, tables[blk.desc.seq_index],
                         kv_head, cfg.scale, blk.tile_size, range(start, start + count))
    store.put(q_block, kv_head, SegmentResult.from_state(state.select(blk.valid), segment))


def _reduce_program(batch: BatchMeta, cfg: AttentionConfig, q: np.ndarray,
                    store: _SegmentStore, out: OutputBuffer,
                    instance: int, q_block: int, kv_head: int) -> None:
    blk = _load_q_block(batch, cfg, q, q_block, kv_head)
    out.store(instance, blk.tokens, blk.heads, merge_segments(store.parts(q_block, kv_head)))


def parallel_tiled_attention(batch: BatchMeta, cache: PagedKvCache, tables: Sequence[BlockTable],
                             q: np.ndarray, cfg: AttentionConfig, num_segments: int,
                             workers: int = 1, backend: str = "thread") -> np.ndarray:
    """
    Phase 1: one instance per (Q-Block, KV head, segment) stores a partial
    result. Phase 2, after the barrier: one instance per (Q-Block, KV head)
    merges its segments.
    """
    if num_segments < 1:
        raise InvalidConfig("num_segments must be >= 1")
    _check_inputs(batch, cache, tables, q, cfg)
    shared = check_backend(backend) == "process"
    batch, cfg = _decode_style(batch, cfg)
    grid = parallel_tiled_grid(batch, cfg, num_segments)
    store = _SegmentStore(batch.total_q_blocks, cfg.num_kv_heads, num_segments,
                          cfg.block_m, cfg.head_size, shared=shared)
    out = OutputBuffer(q.shape, shared=shared)

    def segment_program(q_block: int, kv_head: int, segment: int) -> None:
        _segment_program(batch, cache, tables, q, cfg, store, q_block, kv_head, segment)

    def reduce_program(q_block: int, kv_head: int) -> None:
        _reduce_program(batch, cfg, q, store, out,
                        q_block * cfg.num_kv_heads + kv_head, q_block, kv_head)

    logger.debug("parallel tiled launch %s", grid.dims)
    launch(grid.dims, segment_program, workers, backend)
    launch(grid.dims[:2], reduce_program, workers, backend)
    return out.data


# =============================================================================
# STATIC LAUNCH GRID
# =============================================================================

def static_grid_run(variant: Variant, batch: BatchMeta, cache: PagedKvCache,
                    tables: Sequence[BlockTable], q: np.ndarray, cfg: AttentionConfig,
                    num_instances: int, num_segments: int = 1, workers: int = 1,
                    trace: Optional[LaunchTrace] = None, backend: str = "thread") -> np.ndarray:
    """
    Launch exactly num_instances programs whatever the batch. Instance w
    takes work units w, w + num_instances, ...; an instance with no unit
    returns before touching any memory.

    Work units are query tokens (Baseline) or Q-Blocks (QBlock, ParallelTiled).
    """
    if num_instances < 1:
        raise InvalidConfig("num_instances must be >= 1")
    variant = Variant(variant)
    _check_inputs(batch, cache, tables, q, cfg)
    shared = check_backend(backend) == "process"
    out = OutputBuffer(q.shape, trace, shared=shared)

    if variant is Variant.BASELINE:
        total = batch.tot_query_len
    elif variant is Variant.QBLOCK:
        if batch.block_q != cfg.block_q:
            batch = build_batch_meta(batch.seqs, cfg)
        total = batch.total_q_blocks
    else:
        if num_segments < 1:
            raise InvalidConfig("num_segments must be >= 1")
        batch, cfg = _decode_style(batch, cfg)
        total = batch.total_q_blocks

    def units(instance: int) -> range:
        return range(instance, total, num_instances)

    def baseline_instance(instance: int) -> None:
        for token in units(instance):
            if trace is not None:
                trace.record_visit(instance, token)
            seq_index = seq_index_lookup(batch.cu_query_lens, token)
            for head in range(cfg.num_query_heads):
                _baseline_token(batch, cache, tables, q, cfg, out, instance, token, seq_index, head)

    def qblock_instance(instance: int) -> None:
        for q_block in units(instance):
            if trace is not None:
                trace.record_visit(instance, q_block)
            for kv_head in range(cfg.num_kv_heads):
                _qblock_program(batch, cache, tables, q, cfg, out, instance, q_block, kv_head)

    def segment_instance(instance: int) -> None:
        for q_block in units(instance):
            if trace is not None:
                trace.record_visit(instance, q_block)
            for kv_head in range(cfg.num_kv_heads):
                for segment in range(num_segments):
                    _segment_program(batch, cache, tables, q, cfg, store, q_block, kv_head, segment)

    def reduce_instance(instance: int) -> None:
        for q_block in units(instance):
            for kv_head in range(cfg.num_kv_heads):
                _reduce_program(batch, cfg, q, store, out, instance, q_block, kv_head)

    logger.debug("static grid: %d instances over %d %s units", num_instances, total, variant.value)
    if variant is Variant.BASELINE:
        launch((num_instances,), baseline_instance, workers, backend)
    elif variant is Variant.QBLOCK:
        launch((num_instances,), qblock_instance, workers, backend)
    else:
        store = _SegmentStore(total, cfg.num_kv_heads, num_segments, cfg.block_m, cfg.head_size,
                              shared=shared)
        launch((num_instances,), segment_instance, workers, backend)
        launch((num_instances,), reduce_instance, workers, backend)
    return out.data


# =============================================================================
# DISPATCH AND REFERENCE
# =============================================================================

def run_variant(variant: Variant, batch: BatchMeta, cache: PagedKvCache,
                tables: Sequence[BlockTable], q: np.ndarray, cfg: AttentionConfig,
                num_segments: int = 1, num_instances: int = 0, workers: int = 1,
                backend: str = "thread") -> np.ndarray:
    """num_instances == 0 launches the dynamic grid, otherwise the static grid."""
    variant = Variant(variant)
    if num_instances > 0:
        return static_grid_run(variant, batch, cache, tables, q, cfg, num_instances,
                               num_segments=num_segments, workers=workers, backend=backend)
    if variant is Variant.BASELINE:
        return baseline_attention(batch, cache, tables, q, cfg, workers, backend)
    if variant is Variant.QBLOCK:
        return qblock_attention(batch, cache, tables, q, cfg, workers, backend)
    return parallel_tiled_attention(batch, cache, tables, q, cfg, num_segments, workers, backend)


def reference_attention(batch: BatchMeta, q: np.ndarray, keys: Sequence[np.ndarray],
                        values: Sequence[np.ndarray], cfg: AttentionConfig) -> np.ndarray:
    """
    Un-paged oracle. keys[i] / values[i]: (seq_len, num_kv_heads, head_size)
    for sequence i; query token t of a sequence sees keys [0, context_len + t].
    """
    out = np.zeros_like(q, dtype=np.float32)
    for i, seq in enumerate(batch.seqs):
        first = int(batch.cu_query_lens[i])
        tokens = slice(first, first + seq.query_len)
        visible = seq.context_len + np.arange(seq.query_len) + 1
        for head in range(cfg.num_query_heads):
            kv_head = kv_head_for_query_head(head, cfg)
            out[tokens, head] = naive_attention_oracle(
                q[tokens, head], keys[i][:seq.seq_len, kv_head],
                values[i][:seq.seq_len, kv_head], cfg.scale, visible)
    return out
