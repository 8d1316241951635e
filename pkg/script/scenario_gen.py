#!/usr/bin/env python3
"""
Deterministic benchmark batches: sequence lengths, decode/prefill mix and
uniform [-1, 1] Q/K/V payloads, all drawn from one seeded generator.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

import config
from core import (
    AttentionConfig,
    BatchMeta,
    InvalidConfig,
    SequenceMeta,
    build_batch_meta,
    cdiv,
)
from kvcache import BlockTable, PagedKvCache

logger = logging.getLogger(__name__)


class LengthDistribution(Enum):
    UNIFORM = "uniform"
    FIXED = "fixed"


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int = 0
    num_seqs: int = 1
    max_seq_len: int = 128
    decode_share: float = 0.0
    length_distribution: LengthDistribution = LengthDistribution.UNIFORM
    num_query_heads: int = config.NUM_QUERY_HEADS
    num_kv_heads: int = config.NUM_KV_HEADS
    head_size: int = config.HEAD_SIZE
    kv_block_size: int = config.KV_BLOCK_SIZE
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "length_distribution", LengthDistribution(self.length_distribution))
        if self.num_seqs < 1:
            raise InvalidConfig("num_seqs must be >= 1")
        if self.max_seq_len < 1:
            raise InvalidConfig("max_seq_len must be >= 1")
        if not 0.0 <= self.decode_share <= 1.0:
            raise InvalidConfig(f"decode_share {self.decode_share} outside [0, 1]")
        # a decode needs at least one context token plus itself
        if self.num_decodes > 0 and self.max_seq_len < 2:
            raise InvalidConfig("decodes need max_seq_len >= 2")
        if not self.label:
            object.__setattr__(
                self, "label",
                f"n{self.num_seqs}_len{self.max_seq_len}_dec{int(round(self.decode_share * 100))}_s{self.seed}",
            )

    @property
    def num_decodes(self) -> int:
        # round half up
        return int(math.floor(self.decode_share * self.num_seqs + 0.5))

    def attention_config(self, **tiling) -> AttentionConfig:
        return AttentionConfig(
            num_query_heads=self.num_query_heads,
            num_kv_heads=self.num_kv_heads,
            head_size=self.head_size,
            kv_block_size=self.kv_block_size,
            **tiling,
        )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["length_distribution"] = self.length_distribution.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**data)


def load_scenarios(path: Union[str, Path]) -> List[ScenarioSpec]:
    """A JSON object (one spec) or a list of objects."""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise InvalidConfig(f"{path}: expected a scenario object or list")
    return [ScenarioSpec.from_dict(item) for item in data]


def default_scenarios(num_seqs: int = 4, seed: int = config.SEED,
                      max_seq_lens: Sequence[int] = (128, 512, 2048),
                      decode_shares: Sequence[float] = (0.0, 0.5, 1.0)) -> List[ScenarioSpec]:
    """Decode share x maximum sequence length grid."""
    return [
        ScenarioSpec(seed=seed, num_seqs=num_seqs, max_seq_len=max_len, decode_share=share)
        for share in decode_shares
        for max_len in max_seq_lens
    ]


# =============================================================================
# GENERATION
# =============================================================================

@dataclass(frozen=True, eq=False)
class GeneratedBatch:
    seqs: Tuple[SequenceMeta, ...]
    q: np.ndarray
    # per sequence: (seq_len, num_kv_heads, head_size)
    keys: List[np.ndarray] = field(repr=False)
    values: List[np.ndarray] = field(repr=False)


def sample_sequences(spec: ScenarioSpec, rng: np.random.Generator) -> List[SequenceMeta]:
    seqs = []
    fixed = spec.length_distribution is LengthDistribution.FIXED
    for _ in range(spec.num_decodes):
        ctx = spec.max_seq_len - 1 if fixed else int(rng.integers(1, spec.max_seq_len))
        seqs.append(SequenceMeta(context_len=ctx, query_len=1))
    for _ in range(spec.num_seqs - spec.num_decodes):
        q_len = spec.max_seq_len if fixed else int(rng.integers(1, spec.max_seq_len + 1))
        seqs.append(SequenceMeta(context_len=0, query_len=q_len))
    return seqs


def sample_payload(seqs: Sequence[SequenceMeta], num_query_heads: int, num_kv_heads: int,
                   head_size: int, rng: np.random.Generator) -> GeneratedBatch:
    tot_query_len = sum(s.query_len for s in seqs)
    q = rng.uniform(-1.0, 1.0, (tot_query_len, num_query_heads, head_size)).astype(np.float32)
    keys, values = [], []
    for seq in seqs:
        keys.append(rng.uniform(-1.0, 1.0, (seq.seq_len, num_kv_heads, head_size)).astype(np.float32))
        values.append(rng.uniform(-1.0, 1.0, (seq.seq_len, num_kv_heads, head_size)).astype(np.float32))
    return GeneratedBatch(seqs=tuple(seqs), q=q, keys=keys, values=values)


def generate(spec: ScenarioSpec) -> GeneratedBatch:
    rng = np.random.default_rng(spec.seed)
    seqs = sample_sequences(spec, rng)
    generated = sample_payload(seqs, spec.num_query_heads, spec.num_kv_heads, spec.head_size, rng)
    logger.debug("generated %s: %d seqs, %d query tokens", spec.label, len(seqs), generated.q.shape[0])
    return generated


# =============================================================================
# PAGED CACHE
# =============================================================================

def populate_cache(cfg: AttentionConfig, generated: GeneratedBatch,
                   spare_blocks: int = 0) -> Tuple[PagedKvCache, List[BlockTable]]:
    """Allocate a block table per sequence and write every K/V row."""
    num_blocks = sum(cdiv(s.seq_len, cfg.kv_block_size) for s in generated.seqs) + spare_blocks
    cache = PagedKvCache(num_blocks, cfg.kv_block_size, cfg.num_kv_heads, cfg.head_size)
    tables = []
    for seq, keys, values in zip(generated.seqs, generated.keys, generated.values):
        table = cache.allocate_sequence(seq.seq_len)
        cache.write_sequence(table, keys, values)
        tables.append(table)
    return cache, tables


@dataclass(frozen=True, eq=False)
class PreparedBatch:
    """Everything a kernel launch needs"""
    cfg: AttentionConfig
    batch: BatchMeta
    cache: PagedKvCache
    tables: List[BlockTable]
    generated: GeneratedBatch

    @property
    def q(self) -> np.ndarray:
        return self.generated.q


def prepare_batch(cfg: AttentionConfig, generated: GeneratedBatch,
                  spare_blocks: int = 0) -> PreparedBatch:
    cache, tables = populate_cache(cfg, generated, spare_blocks)
    return PreparedBatch(cfg=cfg, batch=build_batch_meta(generated.seqs, cfg),
                         cache=cache, tables=tables, generated=generated)
