#!/usr/bin/env python3
"""
Core types shared by every attention kernel: matrices, attention
configuration, per-sequence and per-batch metadata, and the error kinds
raised across the engine.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np


# =============================================================================
# ERRORS
# =============================================================================

class AttentionEngineError(Exception):
    """Base class for every error raised by the engine"""


class EmptyBatch(AttentionEngineError, ValueError):
    pass


class InvalidSequence(AttentionEngineError, ValueError):
    pass


class InvalidConfig(AttentionEngineError, ValueError):
    pass


class ShapeError(AttentionEngineError, ValueError):
    pass


class NoData(AttentionEngineError, ValueError):
    pass


class SlotAlreadyWritten(AttentionEngineError, ValueError):
    pass


class BlockNotAllocated(AttentionEngineError, ValueError):
    """Freeing a block that is not currently allocated"""


class IndexOutOfRange(AttentionEngineError, IndexError):
    pass


class OutOfCacheMemory(AttentionEngineError, MemoryError):
    pass


class EmptyAttentionRow(AttentionEngineError, ArithmeticError):
    """A query row saw no visible key, so its softmax is undefined"""


class VerificationError(AttentionEngineError, AssertionError):
    pass


class WorkerFailed(AttentionEngineError, RuntimeError):
    """A worker process of a launch exited abnormally"""


# =============================================================================
# NUMERIC TYPES
# =============================================================================

@dataclass(frozen=True, eq=False)
class MatrixF:
    """Row-major float32 matrix"""
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ShapeError(f"MatrixF needs 2 dimensions, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("MatrixF elements must be finite")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "MatrixF":
        return cls(np.zeros((rows, cols), dtype=np.float32))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AttentionConfig:
    """Head layout plus the tiling parameters of one kernel launch"""
    num_query_heads: int
    num_kv_heads: int
    head_size: int
    kv_block_size: int = 16
    tile_size: int = 16
    block_q: int = 16
    scale: Optional[float] = None
    # Tile size for Q-Blocks of decode sequences; None means tile_size
    decode_tile_size: Optional[int] = None

    def __post_init__(self):
        if self.num_query_heads < 1 or self.num_kv_heads < 1 or self.head_size < 1:
            raise InvalidConfig("head counts and head_size must be >= 1")
        if self.num_query_heads % self.num_kv_heads != 0:
            raise InvalidConfig(
                f"num_query_heads={self.num_query_heads} is not a multiple of "
                f"num_kv_heads={self.num_kv_heads}"
            )
        for name in ("kv_block_size", "tile_size", "block_q"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.decode_tile_size is not None and self.decode_tile_size < 1:
            raise InvalidConfig("decode_tile_size must be >= 1")

        expected = 1.0 / math.sqrt(self.head_size)
        if self.scale is None:
            object.__setattr__(self, "scale", expected)
        elif abs(self.scale - expected) > 1e-7:
            raise InvalidConfig(f"scale must be 1/sqrt(head_size)={expected}, got {self.scale}")

    @property
    def queries_per_kv(self) -> int:
        return self.num_query_heads // self.num_kv_heads

    @property
    def block_m(self) -> int:
        return self.block_q * self.queries_per_kv

    def tile_size_for(self, seq: "SequenceMeta") -> int:
        if seq.is_decode and self.decode_tile_size is not None:
            return self.decode_tile_size
        return self.tile_size


@dataclass(frozen=True)
class SequenceMeta:
    context_len: int
    query_len: int

    def __post_init__(self):
        if self.context_len < 0 or self.query_len < 0:
            raise InvalidSequence(f"negative lengths in {self}")

    @property
    def seq_len(self) -> int:
        return self.context_len + self.query_len

    @property
    def is_decode(self) -> bool:
        return self.query_len == 1 and self.context_len > 0

    @property
    def is_prefill(self) -> bool:
        return self.context_len == 0


@dataclass(frozen=True, eq=False)
class BatchMeta:
    """
    Metadata of one batch. The cumulative arrays carry a leading 0 so the
    binary search needs no special case for the first sequence.
    """
    seqs: tuple
    cu_query_lens: np.ndarray
    cu_q_blocks: np.ndarray
    num_decodes: int
    block_q: int = field(default=1)

    @property
    def num_seqs(self) -> int:
        return len(self.seqs)

    @property
    def tot_query_len(self) -> int:
        return int(self.cu_query_lens[-1])

    @property
    def total_q_blocks(self) -> int:
        return int(self.cu_q_blocks[-1])

    @property
    def is_decode_only(self) -> bool:
        return self.num_decodes == self.num_seqs

    @property
    def decode_share(self) -> float:
        return self.num_decodes / self.num_seqs

    @property
    def max_seq_len(self) -> int:
        return max(s.seq_len for s in self.seqs)

    @property
    def total_tokens(self) -> int:
        return sum(s.seq_len for s in self.seqs)


# =============================================================================
# OPERATIONS
# =============================================================================

def cdiv(x: int, y: int) -> int:
    return (x + y - 1) // y


def _frozen(values: List[int]) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64)
    arr.flags.writeable = False
    return arr


def build_batch_meta(seqs: Sequence[SequenceMeta], cfg: AttentionConfig) -> BatchMeta:
    """Build cumulative query lengths and Q-Block counts for a batch."""
    if not seqs:
        raise EmptyBatch("a batch needs at least one sequence")

    cu_query_lens = [0]
    cu_q_blocks = [0]
    num_decodes = 0
    for i, seq in enumerate(seqs):
        if seq.query_len < 1:
            raise InvalidSequence(f"sequence {i} has query_len {seq.query_len}")
        cu_query_lens.append(cu_query_lens[-1] + seq.query_len)
        cu_q_blocks.append(cu_q_blocks[-1] + cdiv(seq.query_len, cfg.block_q))
        if seq.is_decode:
            num_decodes += 1

    return BatchMeta(
        seqs=tuple(seqs),
        cu_query_lens=_frozen(cu_query_lens),
        cu_q_blocks=_frozen(cu_q_blocks),
        num_decodes=num_decodes,
        block_q=cfg.block_q,
    )


def seq_index_lookup(cu: np.ndarray, global_idx: int) -> int:
    """Binary search for the i with cu[i] <= global_idx < cu[i+1]."""
    if global_idx < 0 or global_idx >= cu[-1]:
        raise IndexOutOfRange(f"index {global_idx} outside [0, {int(cu[-1])})")
    return int(np.searchsorted(cu, global_idx, side="right")) - 1


def kv_head_for_query_head(qh: int, cfg: AttentionConfig) -> int:
    if qh < 0 or qh >= cfg.num_query_heads:
        raise IndexOutOfRange(f"query head {qh} outside [0, {cfg.num_query_heads})")
    return qh // cfg.queries_per_kv
