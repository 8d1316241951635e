#!/usr/bin/env python3
"""
Offline kernel tuning: microbenchmark sweeps over scenario x configuration
pairs, and if-else decision trees exported from the results.

Flow:
1. sweep() times every valid (scenario, config) pair and appends one
   TuningRecord per pair to a newline-delimited JSON file.
2. fit_decision_tree() turns the records into a HeuristicTree mapping batch
   features to the configuration with the lowest latency regret.
3. select_kernel() consults the tree for a live batch.
"""

import hashlib
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import config
from core import (
    AttentionConfig,
    BatchMeta,
    InvalidConfig,
    NoData,
    SequenceMeta,
    ShapeError,
    VerificationError,
    build_batch_meta,
)
from kernels import Variant, reference_attention, run_variant
from scenario_gen import (
    GeneratedBatch,
    PreparedBatch,
    ScenarioSpec,
    generate,
    prepare_batch,
)
from softmax_core import max_relative_error

logger = logging.getLogger(__name__)

FEATURES = ("num_seqs", "total_tokens", "max_seq_len", "decode_share")
RECORD_VERSION = 1
# Splits must beat the parent's regret by more than this
MIN_GAIN = 1e-12


def batch_features(batch: BatchMeta) -> Dict[str, float]:
    return {
        "num_seqs": float(batch.num_seqs),
        "total_tokens": float(batch.total_tokens),
        "max_seq_len": float(batch.max_seq_len),
        "decode_share": float(batch.decode_share),
    }


# =============================================================================
# SCENARIOS AND CONFIGURATIONS
# =============================================================================

@dataclass(frozen=True)
class Scenario:
    label: str
    seqs: Tuple[SequenceMeta, ...]
    decode_share: float
    num_query_heads: int
    num_kv_heads: int
    head_size: int
    kv_block_size: int
    spec: Optional[ScenarioSpec] = field(default=None, compare=False, repr=False)
    payload: Optional[GeneratedBatch] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.seqs:
            raise InvalidConfig(f"scenario {self.label} has no sequences")
        num_decodes = sum(1 for s in self.seqs if s.is_decode)
        if abs(self.decode_share - num_decodes / len(self.seqs)) > 1.0 / len(self.seqs):
            raise InvalidConfig(
                f"scenario {self.label}: decode_share {self.decode_share} does not match "
                f"{num_decodes} decodes in {len(self.seqs)} sequences"
            )

    @classmethod
    def from_spec(cls, spec: ScenarioSpec) -> "Scenario":
        payload = generate(spec)
        return cls(
            label=spec.label,
            seqs=payload.seqs,
            decode_share=spec.decode_share,
            num_query_heads=spec.num_query_heads,
            num_kv_heads=spec.num_kv_heads,
            head_size=spec.head_size,
            kv_block_size=spec.kv_block_size,
            spec=spec,
            payload=payload,
        )

    def digest(self) -> str:
        """Identity of the generated batch; records measured on another batch never match."""
        if self.spec is not None:
            ident = self.spec.to_dict()
        else:
            ident = {
                "seqs": [[s.context_len, s.query_len] for s in self.seqs],
                "heads": [self.num_query_heads, self.num_kv_heads, self.head_size],
                "kv_block_size": self.kv_block_size,
            }
        return hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:16]

    def features(self) -> Dict[str, float]:
        return batch_features(build_batch_meta(self.seqs, self.attention_config(block_q=1)))

    def attention_config(self, tile_size: Optional[int] = None, block_q: int = 1) -> AttentionConfig:
        return AttentionConfig(
            num_query_heads=self.num_query_heads,
            num_kv_heads=self.num_kv_heads,
            head_size=self.head_size,
            kv_block_size=self.kv_block_size,
            tile_size=tile_size or self.kv_block_size,
            block_q=block_q,
        )

    def prepare(self) -> PreparedBatch:
        if self.payload is None:
            raise InvalidConfig(f"scenario {self.label} carries no payload; build it with Scenario.from_spec")
        return prepare_batch(self.attention_config(), self.payload)


@dataclass(frozen=True)
class KernelConfigPoint:
    variant: Variant
    tile_size: int
    block_q: int = 1
    num_segments: int = 1
    # 0 launches the dynamic grid
    num_instances: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.tile_size < 1 or self.block_q < 1 or self.num_segments < 1:
            raise InvalidConfig(f"{self}: sizes must be >= 1")
        if self.num_instances < 0:
            raise InvalidConfig(f"{self}: num_instances must be >= 0")
        if self.variant is Variant.PARALLEL_TILED:
            if self.num_segments < 2:
                raise InvalidConfig("ParallelTiled needs num_segments >= 2; use QBlock for one segment")
            if self.block_q != 1:
                raise InvalidConfig("ParallelTiled runs decode-style Q-Blocks (block_q == 1)")
        elif self.num_segments != 1:
            raise InvalidConfig(f"{self.variant.value} has exactly one segment")

    def check_for(self, scenario: Scenario) -> None:
        if self.variant is Variant.BASELINE and self.tile_size != scenario.kv_block_size:
            raise InvalidConfig(
                f"Baseline tiles at the KV block size {scenario.kv_block_size}, not {self.tile_size}"
            )

    def key(self) -> Tuple:
        return (self.variant.value, self.tile_size, self.block_q, self.num_segments, self.num_instances)

    def sort_key(self) -> Tuple:
        return (self.tile_size, self.variant.ordinal, self.block_q, self.num_segments, self.num_instances)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "tile_size": self.tile_size,
            "block_q": self.block_q,
            "num_segments": self.num_segments,
            "num_instances": self.num_instances,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KernelConfigPoint":
        missing = {"variant", "tile_size", "block_q", "num_segments", "num_instances"} - set(data)
        if missing:
            raise InvalidConfig(f"kernel config lacks {sorted(missing)}")
        return cls(
            variant=Variant.parse(data["variant"]),
            tile_size=int(data["tile_size"]),
            block_q=int(data["block_q"]),
            num_segments=int(data["num_segments"]),
            num_instances=int(data["num_instances"]),
        )


def load_grid(path: Union[str, Path]) -> List[KernelConfigPoint]:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise InvalidConfig(f"{path}: expected a list of kernel configs")
    return [KernelConfigPoint.from_dict(item) for item in data]


def default_grid(kv_block_size: int = config.KV_BLOCK_SIZE,
                 num_instances: int = 0) -> List[KernelConfigPoint]:
    grid = [KernelConfigPoint(Variant.BASELINE, tile_size=kv_block_size)]
    for tile in (16, 32, 64):
        grid.append(KernelConfigPoint(Variant.QBLOCK, tile_size=tile, block_q=config.BLOCK_Q,
                                      num_instances=num_instances))
        for segments in (2, 4, 8):
            grid.append(KernelConfigPoint(Variant.PARALLEL_TILED, tile_size=tile,
                                          num_segments=segments, num_instances=num_instances))
    return grid


# =============================================================================
# RECORDS
# =============================================================================

@dataclass(frozen=True)
class TuningRecord:
    scenario_label: str
    features: Dict[str, float]
    config: KernelConfigPoint
    mean_us: float
    p50_us: float
    p95_us: float
    iterations: int
    checksum: str = ""
    scenario_digest: str = ""

    def __post_init__(self):
        if not self.mean_us > 0:
            raise InvalidConfig(f"record {self.scenario_label}: mean latency must be > 0")
        if self.iterations < 1:
            raise InvalidConfig(f"record {self.scenario_label}: iterations must be >= 1")

    def pair_key(self) -> Tuple:
        return (self.scenario_label, self.scenario_digest, self.config.key())

    def to_dict(self) -> dict:
        return {
            "v": RECORD_VERSION,
            "scenario": self.scenario_label,
            "features": {name: self.features[name] for name in FEATURES},
            "config": self.config.to_dict(),
            "latency_us": {"mean": self.mean_us, "p50": self.p50_us, "p95": self.p95_us},
            "iterations": self.iterations,
            "checksum": self.checksum,
            "scenario_digest": self.scenario_digest,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TuningRecord":
        if data.get("v") != RECORD_VERSION:
            raise InvalidConfig(f"unsupported record version {data.get('v')}")
        latency = data["latency_us"]
        return cls(
            scenario_label=data["scenario"],
            features={name: float(data["features"][name]) for name in FEATURES},
            config=KernelConfigPoint.from_dict(data["config"]),
            mean_us=float(latency["mean"]),
            p50_us=float(latency["p50"]),
            p95_us=float(latency["p95"]),
            iterations=int(data["iterations"]),
            checksum=data.get("checksum", ""),
            scenario_digest=data.get("scenario_digest", ""),
        )


def load_records(path: Union[str, Path]) -> List[TuningRecord]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(TuningRecord.from_dict(json.loads(line)))
    return records


def append_records(path: Union[str, Path], records: Iterable[TuningRecord]) -> None:
    with open(path, "a", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


# =============================================================================
# MICROBENCHMARKS
# =============================================================================

def output_checksum(out: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(out, dtype=np.float32).tobytes()).hexdigest()


def tolerance_checksum(out: np.ndarray, reference: np.ndarray, rtol: float = config.ORACLE_RTOL) -> str:
    """
    SHA-256 of a kernel output after snapping every element that lies within
    rtol (relative to max |reference|) onto the reference. Outputs inside the
    oracle tolerance hash to output_checksum(reference); any element outside
    it keeps its own bits and changes the hash.
    """
    out = np.asarray(out, dtype=np.float32)
    reference = np.asarray(reference, dtype=np.float32)
    if out.shape != reference.shape:
        raise ShapeError(f"output {out.shape} and reference {reference.shape} differ in shape")
    scale = max(float(np.abs(reference).max(initial=0.0)), float(np.finfo(np.float32).tiny))
    snapped = np.where(np.abs(out - reference) <= rtol * scale, reference, out)
    return output_checksum(snapped)


def _reference(prepared: PreparedBatch) -> np.ndarray:
    gen = prepared.generated
    return reference_attention(prepared.batch, gen.q, gen.keys, gen.values, prepared.cfg)


def run_microbenchmark(scenario: Scenario, point: KernelConfigPoint,
                       warmup: int = config.WARMUP_ITERS, iters: int = config.BENCH_ITERS,
                       workers: int = config.WORKERS, prepared: Optional[PreparedBatch] = None,
                       reference: Optional[np.ndarray] = None,
                       backend: str = config.BACKEND) -> TuningRecord:
    """
    Validate the configuration against the oracle once, then time warmup +
    iters executions and keep the statistics of the last iters. The
    checksum is taken from the output of the last timed execution.
    """
    if warmup < 0 or iters < 1:
        raise InvalidConfig(f"warmup must be >= 0 and iters >= 1, got {warmup}/{iters}")
    point.check_for(scenario)
    if prepared is None:
        prepared = scenario.prepare()
    if reference is None:
        reference = _reference(prepared)
    cfg = scenario.attention_config(tile_size=point.tile_size, block_q=point.block_q)

    def run() -> np.ndarray:
        return run_variant(point.variant, prepared.batch, prepared.cache, prepared.tables,
                           prepared.q, cfg, num_segments=point.num_segments,
                           num_instances=point.num_instances, workers=workers, backend=backend)

    err = max_relative_error(run(), reference)
    if err > config.ORACLE_RTOL:
        raise VerificationError(
            f"{point.variant.value} {point.key()} on {scenario.label}: relative error {err:.3e}"
        )

    for _ in range(warmup):
        run()
    times = np.empty(iters)
    out = reference
    for i in range(iters):
        start = time.perf_counter()
        out = run()
        times[i] = time.perf_counter() - start
    times_us = times * 1e6

    record = TuningRecord(
        scenario_label=scenario.label,
        features=scenario.features(),
        config=point,
        mean_us=float(times_us.mean()),
        p50_us=float(np.percentile(times_us, 50)),
        p95_us=float(np.percentile(times_us, 95)),
        iterations=iters,
        checksum=tolerance_checksum(out, reference),
        scenario_digest=scenario.digest(),
    )
    if record.checksum != output_checksum(reference):
        logger.warning("%s %s: timed output drifted from the oracle", scenario.label, point.key())
    logger.info("%s %s: mean %.1f us", scenario.label, point.key(), record.mean_us)
    return record


def sweep(scenarios: Sequence[Scenario], grid: Sequence[KernelConfigPoint],
          records_path: Optional[Union[str, Path]] = None,
          warmup: int = config.WARMUP_ITERS, iters: int = config.BENCH_ITERS,
          workers: int = config.WORKERS, backend: str = config.BACKEND) -> List[TuningRecord]:
    """
    One record per valid (scenario, config) pair. Pairs already in the
    records file, measured on the same generated batch, are reused instead
    of re-timed; new records are appended as soon as they are measured.
    """
    if not scenarios or not grid:
        raise NoData("sweep needs at least one scenario and one kernel config")

    persisted = {r.pair_key(): r for r in load_records(records_path)} if records_path else {}
    records = []
    # Scenarios run one after another for timing isolation
    for scenario in scenarios:
        prepared = reference = None
        digest = scenario.digest()
        for point in grid:
            pair = (scenario.label, digest, point.key())
            if pair in persisted:
                records.append(persisted[pair])
                continue
            try:
                point.check_for(scenario)
            except InvalidConfig as e:
                logger.warning("skipping %s on %s: %s", point.key(), scenario.label, e)
                continue
            if prepared is None:
                prepared = scenario.prepare()
                reference = _reference(prepared)
            record = run_microbenchmark(scenario, point, warmup, iters, workers,
                                        prepared=prepared, reference=reference, backend=backend)
            if records_path:
                append_records(records_path, [record])
            records.append(record)
    logger.info("sweep: %d records (%d reused)", len(records),
                sum(1 for r in records if r.pair_key() in persisted))
    return records


def best_per_scenario(records: Sequence[TuningRecord]) -> Dict[str, TuningRecord]:
    """Lowest mean latency; ties go to the smaller tile, then the lower variant ordinal."""
    best: Dict[str, TuningRecord] = {}
    for record in records:
        current = best.get(record.scenario_label)
        if current is None or _rank(record) < _rank(current):
            best[record.scenario_label] = record
    return best


def _rank(record: TuningRecord) -> Tuple:
    return (record.mean_us,) + record.config.sort_key()


# =============================================================================
# DECISION TREE
# =============================================================================

@dataclass(frozen=True)
class TreeNode:
    feature: str
    threshold: float
    lt: "TreeElement"
    ge: "TreeElement"

    def __post_init__(self):
        if self.feature not in FEATURES:
            raise InvalidConfig(f"unknown tree feature {self.feature!r}")


TreeElement = Union[TreeNode, KernelConfigPoint]


@dataclass(frozen=True)
class HeuristicTree:
    root: TreeElement

    def lookup(self, features: Dict[str, float]) -> KernelConfigPoint:
        node = self.root
        while isinstance(node, TreeNode):
            node = node.lt if features[node.feature] < node.threshold else node.ge
        return node

    @property
    def depth(self) -> int:
        def walk(node: TreeElement) -> int:
            if isinstance(node, TreeNode):
                return 1 + max(walk(node.lt), walk(node.ge))
            return 0
        return walk(self.root)

    def leaves(self) -> List[KernelConfigPoint]:
        out = []

        def walk(node: TreeElement) -> None:
            if isinstance(node, TreeNode):
                walk(node.lt)
                walk(node.ge)
            else:
                out.append(node)
        walk(self.root)
        return out

    def to_dict(self) -> dict:
        def encode(node: TreeElement) -> dict:
            if isinstance(node, TreeNode):
                return {"feature": node.feature, "threshold": node.threshold,
                        "lt": encode(node.lt), "ge": encode(node.ge)}
            return node.to_dict()
        return encode(self.root)

    @classmethod
    def from_dict(cls, data: dict) -> "HeuristicTree":
        def decode(item: dict) -> TreeElement:
            if not isinstance(item, dict):
                raise InvalidConfig(f"tree element must be an object, got {item!r}")
            if "feature" in item:
                return TreeNode(feature=item["feature"], threshold=float(item["threshold"]),
                                lt=decode(item["lt"]), ge=decode(item["ge"]))
            return KernelConfigPoint.from_dict(item)
        return cls(decode(data))


def save_tree(tree: HeuristicTree, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(tree.to_dict(), f, indent=2)
        f.write("\n")


def load_tree(path: Union[str, Path]) -> HeuristicTree:
    with open(path, "r", encoding="utf-8") as f:
        return HeuristicTree.from_dict(json.load(f))


def render_tree(tree: HeuristicTree) -> str:
    """The tree as nested if-else pseudocode."""
    lines = []

    def walk(node: TreeElement, indent: str) -> None:
        if isinstance(node, TreeNode):
            lines.append(f"{indent}if {node.feature} < {node.threshold:g}:")
            walk(node.lt, indent + "    ")
            lines.append(f"{indent}else:")
            walk(node.ge, indent + "    ")
        else:
            lines.append(
                f"{indent}return {node.variant.value}(tile_size={node.tile_size}, "
                f"block_q={node.block_q}, num_segments={node.num_segments}, "
                f"num_instances={node.num_instances})"
            )
    walk(tree.root, "")
    return "\n".join(lines)


class _RegretTable:
    """
    Per-scenario latencies pivoted to scenarios x configs, turned into
    relative regret latency / best - 1. Configs missing for a scenario
    count as infinite regret.
    """

    def __init__(self, records: Sequence[TuningRecord]):
        if not records:
            raise NoData("no tuning records")
        configs = {r.config.key(): r.config for r in records}
        self.configs = sorted(configs.values(), key=lambda c: c.sort_key())
        columns = [c.key() for c in self.configs]

        frame = pd.DataFrame({
            "scenario": [r.scenario_label for r in records],
            "config": [columns.index(r.config.key()) for r in records],
            "mean_us": [r.mean_us for r in records],
        })
        latency = frame.pivot_table(index="scenario", columns="config", values="mean_us", aggfunc="min")
        latency = latency.reindex(columns=range(len(columns)))
        self.labels = list(latency.index)
        lat = latency.to_numpy(dtype=float)
        best = np.nanmin(lat, axis=1, keepdims=True)
        self.regret = np.where(np.isnan(lat), np.inf, lat / best - 1.0)

        features = {}
        for r in records:
            features.setdefault(r.scenario_label, r.features)
        self.X = np.array([[features[label][f] for f in FEATURES] for label in self.labels])

        winners = best_per_scenario(records)
        self.best_col = np.array([columns.index(winners[label].config.key()) for label in self.labels])

    def leaf_for(self, rows: np.ndarray) -> Tuple[int, float]:
        """(config column, summed regret): majority winner unless a config regrets less."""
        sums = self.regret[rows].sum(axis=0)
        votes = Counter(self.best_col[rows].tolist())
        top = max(votes.values())
        majority = min(col for col, n in votes.items() if n == top)
        best = int(np.argmin(sums))
        if sums[majority] > sums[best] + MIN_GAIN:
            return best, float(sums[best])
        return majority, float(sums[majority])


def _global_best(table: _RegretTable) -> KernelConfigPoint:
    col, _ = table.leaf_for(np.arange(len(table.labels)))
    return table.configs[col]


def _fit_regret(table: _RegretTable, max_depth: int) -> TreeElement:
    def grow(rows: np.ndarray, depth: int) -> TreeElement:
        col, cost = table.leaf_for(rows)
        leaf = table.configs[col]
        if depth >= max_depth or len(rows) < 2:
            return leaf

        best_split = None
        best_cost = cost - MIN_GAIN
        for f, name in enumerate(FEATURES):
            values = np.unique(table.X[rows, f])
            for threshold in (values[:-1] + values[1:]) / 2.0:
                below = table.X[rows, f] < threshold
                split_cost = table.leaf_for(rows[below])[1] + table.leaf_for(rows[~below])[1]
                if split_cost < best_cost:
                    best_cost = split_cost
                    best_split = (name, float(threshold), rows[below], rows[~below])

        if best_split is None:
            return leaf
        name, threshold, lt_rows, ge_rows = best_split
        return TreeNode(name, threshold, grow(lt_rows, depth + 1), grow(ge_rows, depth + 1))

    return grow(np.arange(len(table.labels)), 0)


def _fit_cart(table: _RegretTable, max_depth: int) -> TreeElement:
    from sklearn.tree import DecisionTreeClassifier

    all_rows = np.arange(len(table.labels))
    if max_depth < 1 or len(np.unique(table.best_col)) < 2:
        return table.configs[table.leaf_for(all_rows)[0]]

    clf = DecisionTreeClassifier(max_depth=max_depth, random_state=0)
    clf.fit(table.X, table.best_col)
    t = clf.tree_

    def convert(node: int, rows: np.ndarray) -> TreeElement:
        if t.children_left[node] == -1 or len(rows) == 0:
            return table.configs[table.leaf_for(rows if len(rows) else all_rows)[0]]
        f = int(t.feature[node])
        # x <= t  <=>  x < nextafter(t)
        threshold = float(np.nextafter(t.threshold[node], np.inf))
        below = table.X[rows, f] < threshold
        return TreeNode(FEATURES[f], threshold,
                        convert(t.children_left[node], rows[below]),
                        convert(t.children_right[node], rows[~below]))

    return convert(0, all_rows)


def training_regret(model: Union[HeuristicTree, KernelConfigPoint],
                    records: Sequence[TuningRecord]) -> float:
    """Mean relative regret over the scenarios in records."""
    table = _RegretTable(records)
    columns = [c.key() for c in table.configs]
    total = 0.0
    for i, label in enumerate(table.labels):
        if isinstance(model, HeuristicTree):
            chosen = model.lookup(dict(zip(FEATURES, table.X[i])))
        else:
            chosen = model
        key = chosen.key()
        total += table.regret[i, columns.index(key)] if key in columns else np.inf
    return total / len(table.labels)


def fit_decision_tree(records: Sequence[TuningRecord], max_depth: int = 3,
                      method: str = "regret") -> HeuristicTree:
    """
    Greedy top-down splits on the scenario features ("regret"), or a
    scikit-learn CART classifier on per-scenario winners ("cart"). Never
    returns a tree that regrets more than the best single configuration.
    """
    if max_depth < 0:
        raise InvalidConfig("max_depth must be >= 0")
    table = _RegretTable(records)
    if method == "regret":
        tree = HeuristicTree(_fit_regret(table, max_depth))
    elif method == "cart":
        tree = HeuristicTree(_fit_cart(table, max_depth))
    else:
        raise InvalidConfig(f"unknown tree fitting method {method!r}")

    fallback = _global_best(table)
    if training_regret(tree, records) > training_regret(fallback, records) + MIN_GAIN:
        logger.warning("%s tree regrets more than the global best config; using a single leaf", method)
        tree = HeuristicTree(fallback)
    logger.info("fitted %s tree of depth %d over %d scenarios", method, tree.depth, len(table.labels))
    return tree


def select_kernel(tree: HeuristicTree, batch: BatchMeta) -> KernelConfigPoint:
    """Leaf lookup; the parallel tiled kernel is reserved for decode-only batches."""
    point = tree.lookup(batch_features(batch))
    if point.variant is Variant.PARALLEL_TILED and not batch.is_decode_only:
        return KernelConfigPoint(Variant.QBLOCK, tile_size=point.tile_size, block_q=config.BLOCK_Q,
                                 num_segments=1, num_instances=point.num_instances)
    return point
