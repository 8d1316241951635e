#!/usr/bin/env python3
"""
Paged KV cache with block-table indirection.

K and V live in two dense arrays laid out [block][kv_head][slot][dim], so a
tile read for one KV head is a gather of contiguous rows. Physical blocks
are handed out from a LIFO free list.
"""

import logging
import threading
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from core import (
    BlockNotAllocated,
    IndexOutOfRange,
    InvalidConfig,
    OutOfCacheMemory,
    ShapeError,
    SlotAlreadyWritten,
    cdiv,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BlockTable:
    """Physical block ids of one sequence, in logical order"""
    block_ids: np.ndarray
    seq_len: int
    block_size: int

    @property
    def capacity(self) -> int:
        return len(self.block_ids) * self.block_size

    def locate(self, token_pos: int) -> Tuple[int, int]:
        """Physical (block, slot) of a logical token."""
        if token_pos < 0 or token_pos >= self.capacity:
            raise IndexOutOfRange(f"token {token_pos} outside table capacity {self.capacity}")
        return int(self.block_ids[token_pos // self.block_size]), token_pos % self.block_size


class PagedKvCache:
    """Block-granular K/V storage shared by all sequences of a batch"""

    def __init__(self, num_blocks: int, block_size: int, num_kv_heads: int, head_size: int):
        if num_blocks < 0 or block_size < 1 or num_kv_heads < 1 or head_size < 1:
            raise InvalidConfig("cache dimensions must be positive")
        self.num_blocks = num_blocks
        self.block_size = block_size
        self.num_kv_heads = num_kv_heads
        self.head_size = head_size

        shape = (num_blocks, num_kv_heads, block_size, head_size)
        self.k_store = np.zeros(shape, dtype=np.float32)
        self.v_store = np.zeros(shape, dtype=np.float32)
        self._written = np.zeros(shape[:3], dtype=bool)

        # Pop from the end: the first allocation gets block 0
        self.free_list: List[int] = list(range(num_blocks - 1, -1, -1))
        self._allocated = set()
        self._lock = threading.Lock()

    # -------------------------------------------------------------------------
    # allocation
    # -------------------------------------------------------------------------

    def allocate_sequence(self, seq_len: int) -> BlockTable:
        needed = cdiv(seq_len, self.block_size)
        with self._lock:
            if needed > len(self.free_list):
                raise OutOfCacheMemory(
                    f"sequence of {seq_len} tokens needs {needed} blocks, "
                    f"{len(self.free_list)} free"
                )
            blocks = [self.free_list.pop() for _ in range(needed)]
            self._allocated.update(blocks)
        logger.debug("allocated blocks %s for %d tokens", blocks, seq_len)
        ids = np.asarray(blocks, dtype=np.int64)
        ids.flags.writeable = False
        return BlockTable(block_ids=ids, seq_len=seq_len, block_size=self.block_size)

    def free_sequence(self, table: BlockTable) -> None:
        blocks = [int(b) for b in table.block_ids]
        with self._lock:
            unknown = [b for b in blocks if b not in self._allocated]
            if unknown:
                raise BlockNotAllocated(f"blocks {unknown} are not allocated")
            for b in reversed(blocks):
                self._allocated.discard(b)
                self._written[b] = False
                self.free_list.append(b)
        logger.debug("freed blocks %s", blocks)

    @property
    def num_free_blocks(self) -> int:
        return len(self.free_list)

    # -------------------------------------------------------------------------
    # writes
    # -------------------------------------------------------------------------

    def _check_vec(self, vec: np.ndarray, name: str) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (self.head_size,):
            raise ShapeError(f"{name} must have shape ({self.head_size},), got {vec.shape}")
        return vec

    def _check_head(self, kv_head: int) -> None:
        if kv_head < 0 or kv_head >= self.num_kv_heads:
            raise IndexOutOfRange(f"kv head {kv_head} outside [0, {self.num_kv_heads})")

    def write_kv(self, table: BlockTable, token_pos: int, kv_head: int,
                 k_vec: np.ndarray, v_vec: np.ndarray) -> None:
        """Store one token's K and V rows for one KV head."""
        self._check_head(kv_head)
        block, slot = table.locate(token_pos)
        k_vec = self._check_vec(k_vec, "k_vec")
        v_vec = self._check_vec(v_vec, "v_vec")
        if self._written[block, kv_head, slot]:
            raise SlotAlreadyWritten(f"block {block} slot {slot} head {kv_head} already written")
        self.k_store[block, kv_head, slot] = k_vec
        self.v_store[block, kv_head, slot] = v_vec
        self._written[block, kv_head, slot] = True

    def write_sequence(self, table: BlockTable, keys: np.ndarray, values: np.ndarray) -> None:
        """Bulk write of tokens 0..n-1, all KV heads. keys/values: (n, num_kv_heads, head_size)."""
        expected = (keys.shape[0], self.num_kv_heads, self.head_size)
        if keys.shape != expected or values.shape != expected:
            raise ShapeError(f"keys/values must have shape {expected}")
        n = keys.shape[0]
        if n > table.capacity:
            raise IndexOutOfRange(f"{n} tokens exceed table capacity {table.capacity}")
        pos = np.arange(n)
        blocks = table.block_ids[pos // self.block_size]
        slots = pos % self.block_size
        if self._written[blocks, :, slots].any():
            raise SlotAlreadyWritten("sequence overlaps already written slots")
        self.k_store[blocks, :, slots] = keys
        self.v_store[blocks, :, slots] = values
        self._written[blocks, :, slots] = True

    # -------------------------------------------------------------------------
    # reads
    # -------------------------------------------------------------------------

    def read_kv(self, table: BlockTable, token_pos: int, kv_head: int) -> Tuple[np.ndarray, np.ndarray]:
        self._check_head(kv_head)
        block, slot = table.locate(token_pos)
        return self.k_store[block, kv_head, slot].copy(), self.v_store[block, kv_head, slot].copy()

    def read_kv_tile(self, table: BlockTable, kv_head: int, tile_start: int,
                     tile_len: int, valid_len: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Gather a tile of K and V rows. The tile may straddle blocks; rows at or
        beyond valid_len are zero-filled and masked out.
        Returns: (k_tile, v_tile, mask)
        """
        self._check_head(kv_head)
        if valid_len > table.capacity:
            raise IndexOutOfRange(f"valid_len {valid_len} exceeds table capacity {table.capacity}")
        pos = tile_start + np.arange(tile_len)
        mask = pos < valid_len
        k_tile = np.zeros((tile_len, self.head_size), dtype=np.float32)
        v_tile = np.zeros((tile_len, self.head_size), dtype=np.float32)
        live = pos[mask]
        if live.size:
            blocks = table.block_ids[live // self.block_size]
            slots = live % self.block_size
            k_tile[mask] = self.k_store[blocks, kv_head, slots]
            v_tile[mask] = self.v_store[blocks, kv_head, slots]
        return k_tile, v_tile, mask
