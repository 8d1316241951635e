"""
Shared fixtures for the paged attention tests
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pytest

from core import AttentionConfig, SequenceMeta
from kernels import reference_attention
from scenario_gen import PreparedBatch, prepare_batch, sample_payload


@dataclass
class AttentionCase:
    prepared: PreparedBatch
    reference: np.ndarray

    @property
    def cfg(self) -> AttentionConfig:
        return self.prepared.cfg

    def args(self, cfg: Optional[AttentionConfig] = None):
        """Positional kernel arguments: batch, cache, tables, q, cfg."""
        p = self.prepared
        return p.batch, p.cache, p.tables, p.q, cfg or p.cfg


def _make_case(seqs: Sequence[SequenceMeta], num_query_heads: int = 4, num_kv_heads: int = 2,
               head_size: int = 8, kv_block_size: int = 4, tile_size: int = 4, block_q: int = 2,
               decode_tile_size: Optional[int] = None, seed: int = 0) -> AttentionCase:
    cfg = AttentionConfig(num_query_heads=num_query_heads, num_kv_heads=num_kv_heads,
                          head_size=head_size, kv_block_size=kv_block_size, tile_size=tile_size,
                          block_q=block_q, decode_tile_size=decode_tile_size)
    gen = sample_payload(seqs, num_query_heads, num_kv_heads, head_size, np.random.default_rng(seed))
    prepared = prepare_batch(cfg, gen)
    reference = reference_attention(prepared.batch, gen.q, gen.keys, gen.values, cfg)
    return AttentionCase(prepared=prepared, reference=reference)


@pytest.fixture
def make_case():
    """Factory: paged batch with uniform random payload plus its oracle output."""
    return _make_case


@pytest.fixture
def mixed_case():
    # two decodes first, then two ragged prefills
    seqs = [SequenceMeta(13, 1), SequenceMeta(5, 1), SequenceMeta(0, 7), SequenceMeta(0, 3)]
    return _make_case(seqs, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
