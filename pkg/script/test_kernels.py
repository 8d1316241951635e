#!/usr/bin/env python3
"""
Tests for the attention kernel variants, their launch grids and the static grid
"""

from collections import Counter

import numpy as np
import pytest

from core import AttentionConfig, InvalidConfig, SequenceMeta, ShapeError, WorkerFailed
from kernels import (
    GridKind,
    LaunchTrace,
    Variant,
    assign_tiles_to_segments,
    baseline_attention,
    baseline_grid,
    describe_q_block,
    launch,
    parallel_tiled_attention,
    parallel_tiled_grid,
    qblock_attention,
    qblock_grid,
    run_variant,
    shared_zeros,
    static_grid_run,
)
from scenario_gen import GeneratedBatch, prepare_batch
from softmax_core import max_relative_error

ORACLE_RTOL = 1e-4
VARIANT_RTOL = 1e-5


def with_block_q(cfg: AttentionConfig, block_q: int) -> AttentionConfig:
    return AttentionConfig(cfg.num_query_heads, cfg.num_kv_heads, cfg.head_size, cfg.kv_block_size,
                           cfg.tile_size, block_q, decode_tile_size=cfg.decode_tile_size)


# ===== BASELINE =====

def test_baseline_decode_matches_oracle(make_case):
    case = make_case([SequenceMeta(31, 1)], kv_block_size=16, tile_size=16)
    out = baseline_attention(*case.args())
    assert out.shape == case.reference.shape
    assert max_relative_error(out, case.reference) <= ORACLE_RTOL


def test_baseline_single_token_prefill_returns_value(make_case):
    case = make_case([SequenceMeta(0, 1)])
    out = baseline_attention(*case.args())
    values = case.prepared.generated.values[0]
    for head in range(case.cfg.num_query_heads):
        np.testing.assert_array_equal(out[0, head], values[0, head // case.cfg.queries_per_kv])


def test_batched_sequences_are_independent(make_case):
    case = make_case([SequenceMeta(0, 6), SequenceMeta(9, 1)])
    gen = case.prepared.generated
    out = baseline_attention(*case.args())
    first = GeneratedBatch(seqs=gen.seqs[:1], q=gen.q[:6], keys=gen.keys[:1], values=gen.values[:1])
    second = GeneratedBatch(seqs=gen.seqs[1:], q=gen.q[6:], keys=gen.keys[1:], values=gen.values[1:])
    for part, rows in ((first, slice(0, 6)), (second, slice(6, 7))):
        p = prepare_batch(case.cfg, part)
        alone = baseline_attention(p.batch, p.cache, p.tables, p.q, p.cfg)
        np.testing.assert_array_equal(out[rows], alone)


def test_baseline_grids(make_case, mixed_case):
    decode = make_case([SequenceMeta(5, 1), SequenceMeta(8, 1)])
    grid = baseline_grid(decode.prepared.batch, decode.cfg)
    assert grid.kind is GridKind.DECODE_BASELINE
    assert grid.dims == (2, 4)

    grid = baseline_grid(mixed_case.prepared.batch, mixed_case.cfg)
    assert grid.kind is GridKind.PREFILL_BASELINE
    assert grid.dims == (12, 4)
    assert grid.num_instances == 48


def test_baseline_decode_grid_matches_oracle(make_case):
    case = make_case([SequenceMeta(5, 1), SequenceMeta(22, 1), SequenceMeta(1, 1)])
    assert max_relative_error(baseline_attention(*case.args()), case.reference) <= ORACLE_RTOL


def test_wrong_q_shape(mixed_case):
    batch, cache, tables, q, cfg = mixed_case.args()
    with pytest.raises(ShapeError):
        baseline_attention(batch, cache, tables, q[:-1], cfg)


def test_cache_block_size_must_match(mixed_case):
    batch, cache, tables, q, cfg = mixed_case.args()
    other = AttentionConfig(cfg.num_query_heads, cfg.num_kv_heads, cfg.head_size, kv_block_size=8)
    with pytest.raises(InvalidConfig):
        qblock_attention(batch, cache, tables, q, other)


# ===== Q-BLOCK =====

def test_qblock_matches_baseline_and_oracle(mixed_case):
    baseline = baseline_attention(*mixed_case.args())
    out = qblock_attention(*mixed_case.args())
    assert max_relative_error(out, baseline) <= VARIANT_RTOL
    assert max_relative_error(out, mixed_case.reference) <= ORACLE_RTOL


def test_qblock_of_one_row_degenerates_to_baseline(make_case):
    case = make_case([SequenceMeta(0, 9), SequenceMeta(6, 1)], num_query_heads=4, num_kv_heads=4,
                     kv_block_size=4, tile_size=4, block_q=1)
    out = qblock_attention(*case.args())
    baseline = baseline_attention(*case.args())
    np.testing.assert_allclose(out, baseline, atol=1e-6)


def test_partial_last_q_block(make_case):
    case = make_case([SequenceMeta(0, 5)], block_q=2)
    batch, cfg = case.prepared.batch, case.cfg
    assert batch.total_q_blocks == 3
    assert qblock_grid(batch, cfg).dims == (3, 2)
    last = describe_q_block(batch, cfg, 2, kv_head=1)
    assert last.q_token_start == 4
    # one valid token, all query heads of KV head 1
    assert last.rows == ((4, 2), (4, 3))
    full = describe_q_block(batch, cfg, 0, kv_head=0)
    assert full.rows == ((0, 0), (0, 1), (1, 0), (1, 1))
    assert max_relative_error(qblock_attention(*case.args()), case.reference) <= ORACLE_RTOL


def test_gqa_matches_oracle_per_head(make_case):
    case = make_case([SequenceMeta(0, 11), SequenceMeta(20, 1), SequenceMeta(7, 4)],
                     num_query_heads=32, num_kv_heads=8, kv_block_size=16, tile_size=8, block_q=4)
    out = qblock_attention(*case.args())
    for head in range(32):
        assert max_relative_error(out[:, head], case.reference[:, head]) <= ORACLE_RTOL


def test_chunked_prefill_with_context(make_case):
    case = make_case([SequenceMeta(10, 6), SequenceMeta(3, 3)], block_q=4, tile_size=8)
    assert max_relative_error(qblock_attention(*case.args()), case.reference) <= ORACLE_RTOL


def test_separate_decode_tile_size(make_case):
    case = make_case([SequenceMeta(40, 1), SequenceMeta(0, 12)], tile_size=4, decode_tile_size=16)
    assert max_relative_error(qblock_attention(*case.args()), case.reference) <= ORACLE_RTOL


@pytest.mark.parametrize("tile_size", [1, 3, 4, 16, 64])
def test_tile_size_independent_of_block_size(make_case, tile_size):
    case = make_case([SequenceMeta(0, 13), SequenceMeta(17, 1)], kv_block_size=4, tile_size=tile_size)
    assert max_relative_error(qblock_attention(*case.args()), case.reference) <= ORACLE_RTOL


# ===== PARALLEL TILED =====

@pytest.mark.parametrize("tiles, segments, expected", [
    (32, 4, [(0, 8), (8, 8), (16, 8), (24, 8)]),
    (7, 3, [(0, 3), (3, 2), (5, 2)]),
    (3, 8, [(0, 1), (1, 1), (2, 1), (3, 0), (3, 0), (3, 0), (3, 0), (3, 0)]),
])
def test_assign_tiles_to_segments(tiles, segments, expected):
    assert assign_tiles_to_segments(tiles, segments) == expected


def test_assign_tiles_rejects_zero_segments():
    with pytest.raises(InvalidConfig):
        assign_tiles_to_segments(4, 0)


def test_one_segment_equals_qblock_exactly(mixed_case):
    single = parallel_tiled_attention(*mixed_case.args(), num_segments=1)
    qblock = qblock_attention(*mixed_case.args(with_block_q(mixed_case.cfg, 1)))
    np.testing.assert_array_equal(single, qblock)


def test_four_segments_of_eight_tiles(make_case):
    # 128 keys in tiles of 4: 32 tiles
    case = make_case([SequenceMeta(127, 1)], kv_block_size=16, tile_size=4, block_q=1)
    iterative = qblock_attention(*case.args())
    out = parallel_tiled_attention(*case.args(), num_segments=4)
    assert max_relative_error(out, iterative) <= VARIANT_RTOL
    assert max_relative_error(out, case.reference) <= ORACLE_RTOL


def test_more_segments_than_tiles(make_case):
    case = make_case([SequenceMeta(10, 1)], tile_size=4)
    out = parallel_tiled_attention(*case.args(), num_segments=8)
    assert max_relative_error(out, case.reference) <= ORACLE_RTOL


@pytest.mark.parametrize("segments", [1, 2, 4, 8])
def test_segment_count_invariance(mixed_case, segments):
    qblock = qblock_attention(*mixed_case.args())
    out = parallel_tiled_attention(*mixed_case.args(), num_segments=segments)
    assert max_relative_error(out, qblock) <= VARIANT_RTOL


def test_parallel_grid_is_decode_style(mixed_case):
    out = parallel_tiled_attention(*mixed_case.args(), num_segments=2)
    assert max_relative_error(out, mixed_case.reference) <= ORACLE_RTOL
    grid = parallel_tiled_grid(mixed_case.prepared.batch, mixed_case.cfg, 3)
    assert grid.kind is GridKind.PARALLEL_TILED
    assert len(grid.dims) == 3


def test_zero_segments_rejected(mixed_case):
    with pytest.raises(InvalidConfig):
        parallel_tiled_attention(*mixed_case.args(), num_segments=0)


# ===== STATIC GRID =====

@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("num_instances", [1, 3, 64, 1024])
def test_static_grid_is_bitwise_dynamic(mixed_case, variant, num_instances):
    dynamic = run_variant(variant, *mixed_case.args(), num_segments=2)
    static = static_grid_run(variant, *mixed_case.args(), num_instances=num_instances, num_segments=2)
    np.testing.assert_array_equal(static, dynamic)


@pytest.mark.parametrize("variant, units", [(Variant.QBLOCK, 3), (Variant.PARALLEL_TILED, 4)])
def test_excess_instances_touch_nothing(make_case, variant, units):
    # the parallel variant splits the 2-token prefill into single-token Q-Blocks
    case = make_case([SequenceMeta(0, 2), SequenceMeta(4, 1), SequenceMeta(6, 1)], block_q=2)
    trace = LaunchTrace()
    static_grid_run(variant, *case.args(), num_instances=64, num_segments=2, trace=trace)
    visits = Counter(unit for _, unit in trace.visits)
    assert sorted(visits) == list(range(units))
    assert set(visits.values()) == {1}
    assert trace.writers <= set(range(units))
    assert all(instance == unit for instance, unit in trace.visits)


@pytest.mark.parametrize("num_instances", [1, 3, 5])
def test_grid_stride_covers_every_unit_once(mixed_case, num_instances):
    trace = LaunchTrace()
    static_grid_run(Variant.QBLOCK, *mixed_case.args(), num_instances=num_instances, trace=trace)
    total = mixed_case.prepared.batch.total_q_blocks
    assert sorted(unit for _, unit in trace.visits) == list(range(total))
    assert all(unit % num_instances == instance for instance, unit in trace.visits)
    assert sum(trace.writes.values()) == mixed_case.cfg.num_query_heads * mixed_case.prepared.batch.tot_query_len


def test_static_grid_rejects_zero_instances(mixed_case):
    with pytest.raises(InvalidConfig):
        static_grid_run(Variant.QBLOCK, *mixed_case.args(), num_instances=0)


# ===== PROPERTIES =====

@pytest.mark.parametrize("num_query_heads, num_kv_heads", [(8, 8), (32, 8), (16, 1)])
@pytest.mark.parametrize("kv_block_size", [16, 80])
@pytest.mark.parametrize("tile_size", [16, 32, 64])
def test_variants_agree(make_case, num_query_heads, num_kv_heads, kv_block_size, tile_size):
    seqs = [SequenceMeta(23, 1), SequenceMeta(0, 19), SequenceMeta(90, 1), SequenceMeta(4, 5)]
    case = make_case(seqs, num_query_heads=num_query_heads, num_kv_heads=num_kv_heads,
                     kv_block_size=kv_block_size, tile_size=tile_size, block_q=4,
                     seed=num_query_heads + kv_block_size + tile_size)
    baseline = baseline_attention(*case.args())
    assert max_relative_error(baseline, case.reference) <= ORACLE_RTOL
    for out in (qblock_attention(*case.args()), parallel_tiled_attention(*case.args(), num_segments=4)):
        assert max_relative_error(out, case.reference) <= ORACLE_RTOL
        assert max_relative_error(out, baseline) <= VARIANT_RTOL


@pytest.mark.parametrize("variant", list(Variant))
def test_causality(make_case, variant):
    seqs = [SequenceMeta(0, 12), SequenceMeta(5, 4)]
    case = make_case(seqs, block_q=4, tile_size=8, seed=11)
    before = run_variant(variant, *case.args(), num_segments=2)
    gen = case.prepared.generated
    for seq_index, position in ((0, 7), (1, 6)):
        keys = [k.copy() for k in gen.keys]
        values = [v.copy() for v in gen.values]
        keys[seq_index][position] += 5.0
        values[seq_index][position] -= 3.0
        p = prepare_batch(case.cfg, GeneratedBatch(seqs=gen.seqs, q=gen.q, keys=keys, values=values))
        after = run_variant(variant, p.batch, p.cache, p.tables, p.q, p.cfg, num_segments=2)

        first = int(p.batch.cu_query_lens[seq_index])
        seq = seqs[seq_index]
        changed = np.zeros(len(gen.q), dtype=bool)
        for t in range(seq.query_len):
            if seq.context_len + t >= position:
                changed[first + t] = True
        np.testing.assert_array_equal(after[~changed], before[~changed])
        assert not np.array_equal(after[changed], before[changed])


def test_causality_random_batches(make_case):
    rng = np.random.default_rng(2024)
    for _ in range(50):
        num_kv_heads = int(rng.choice([1, 2]))
        num_query_heads = num_kv_heads * int(rng.choice([1, 2, 4]))
        seqs = []
        for _ in range(int(rng.integers(1, 4))):
            if rng.random() < 0.5:
                seqs.append(SequenceMeta(int(rng.integers(1, 40)), 1))
            else:
                seqs.append(SequenceMeta(int(rng.integers(0, 8)), int(rng.integers(1, 24))))
        case = make_case(seqs, num_query_heads=num_query_heads, num_kv_heads=num_kv_heads,
                         kv_block_size=int(rng.choice([4, 5, 8])), tile_size=int(rng.choice([4, 8, 16])),
                         block_q=int(rng.choice([1, 2, 4])), seed=int(rng.integers(2 ** 31)))
        num_segments = int(rng.choice([1, 2, 3]))
        gen = case.prepared.generated
        seq_index = int(rng.integers(len(seqs)))
        position = int(rng.integers(seqs[seq_index].seq_len))

        keys = [k.copy() for k in gen.keys]
        values = [v.copy() for v in gen.values]
        keys[seq_index][position] += 5.0
        values[seq_index][position] -= 3.0
        p = prepare_batch(case.cfg, GeneratedBatch(seqs=gen.seqs, q=gen.q, keys=keys, values=values))

        first = int(p.batch.cu_query_lens[seq_index])
        seq = seqs[seq_index]
        changed = np.zeros(len(gen.q), dtype=bool)
        for t in range(seq.query_len):
            changed[first + t] = seq.context_len + t >= position
        for variant in Variant:
            before = run_variant(variant, *case.args(), num_segments=num_segments)
            after = run_variant(variant, p.batch, p.cache, p.tables, p.q, p.cfg, num_segments=num_segments)
            np.testing.assert_array_equal(after[~changed], before[~changed])
            assert not np.array_equal(after[changed], before[changed])


@pytest.mark.parametrize("variant", list(Variant))
def test_worker_count_does_not_change_output(mixed_case, variant):
    serial = run_variant(variant, *mixed_case.args(), num_segments=4, workers=1)
    for workers in (2, 4):
        np.testing.assert_array_equal(run_variant(variant, *mixed_case.args(), num_segments=4, workers=workers),
                                      serial)
    np.testing.assert_array_equal(run_variant(variant, *mixed_case.args(), num_segments=4, workers=4),
                                  run_variant(variant, *mixed_case.args(), num_segments=4, workers=4))


def test_launch_visits_every_index_once():
    seen = []
    launch((3, 2, 2), lambda a, b, c: seen.append((a, b, c)), workers=3)
    assert sorted(seen) == [(a, b, c) for a in range(3) for b in range(2) for c in range(2)]


def test_launch_propagates_errors():
    def program(i):
        if i == 5:
            raise ValueError("boom")
    with pytest.raises(ValueError):
        launch((8,), program, workers=4)


@pytest.mark.parametrize("variant", list(Variant))
def test_process_backend_matches_threads(mixed_case, variant):
    threads = run_variant(variant, *mixed_case.args(), num_segments=3, workers=3)
    processes = run_variant(variant, *mixed_case.args(), num_segments=3, workers=3, backend="process")
    np.testing.assert_array_equal(processes, threads)
    static = static_grid_run(variant, *mixed_case.args(), 5, num_segments=3, workers=3, backend="process")
    np.testing.assert_array_equal(static, threads)


def test_process_launch_writes_shared_memory():
    out = shared_zeros((4, 3), shared=True)

    def program(i, j):
        out[i, j] = i * 3 + j + 1
    launch((4, 3), program, workers=3, backend="process")
    np.testing.assert_array_equal(out, np.arange(1, 13, dtype=np.float32).reshape(4, 3))


def test_process_launch_reports_failed_worker():
    def program(i):
        if i == 5:
            raise ValueError("boom")
    with pytest.raises(WorkerFailed):
        launch((8,), program, workers=4, backend="process")


def test_unknown_backend(mixed_case):
    with pytest.raises(InvalidConfig):
        launch((2,), lambda i: None, workers=2, backend="gpu")
    with pytest.raises(InvalidConfig):
        run_variant(Variant.QBLOCK, *mixed_case.args(), backend="gpu")


def test_variant_names():
    assert Variant.parse("qblock") is Variant.QBLOCK
    assert Variant.parse("parallel_tiled") is Variant.PARALLEL_TILED
    assert [v.ordinal for v in Variant] == [0, 1, 2]
    with pytest.raises(InvalidConfig):
        Variant.parse("flash")
