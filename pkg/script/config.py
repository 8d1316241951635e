#!/usr/bin/env python3
"""
Configuration for the paged attention reference engine
"""

import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# General Configuration
SEED = int(os.getenv("ATTN_SEED", "0"))
WORKERS = int(os.getenv("ATTN_WORKERS", str(os.cpu_count() or 1)))
LOG_LEVEL = os.getenv("ATTN_LOG_LEVEL", "INFO")
# "thread" or "process" (fork-based, needs a platform with fork)
BACKEND = os.getenv("ATTN_BACKEND", "thread")

# Model Shape (Llama3-8B: 32 query heads, 8 KV heads, head size 128)
NUM_QUERY_HEADS = int(os.getenv("ATTN_NUM_QUERY_HEADS", "32"))
NUM_KV_HEADS = int(os.getenv("ATTN_NUM_KV_HEADS", "8"))
HEAD_SIZE = int(os.getenv("ATTN_HEAD_SIZE", "128"))

# Kernel Defaults
KV_BLOCK_SIZE = int(os.getenv("ATTN_KV_BLOCK_SIZE", "16"))
TILE_SIZE = int(os.getenv("ATTN_TILE_SIZE", "32"))
DECODE_TILE_SIZE = int(os.getenv("ATTN_DECODE_TILE_SIZE", "32"))
BLOCK_Q = int(os.getenv("ATTN_BLOCK_Q", "16"))
NUM_SEGMENTS = int(os.getenv("ATTN_NUM_SEGMENTS", "4"))

# Benchmark Configuration
WARMUP_ITERS = int(os.getenv("ATTN_WARMUP_ITERS", "20"))
BENCH_ITERS = int(os.getenv("ATTN_BENCH_ITERS", "100"))

# Verify Suite
VERIFY_DEFAULTS = {
    "num_batches": int(os.getenv("ATTN_VERIFY_BATCHES", "200")),
    "head_configs": [[8, 8], [32, 8], [16, 1]],
    "head_size": int(os.getenv("ATTN_VERIFY_HEAD_SIZE", "64")),
    "block_sizes": [16, 80],
    "tile_sizes": [16, 32, 64],
    "block_qs": [1, 4, 16],
    "decode_shares": [0.0, 0.5, 1.0],
    "max_seq_len": int(os.getenv("ATTN_VERIFY_MAX_SEQ_LEN", "512")),
    "max_num_seqs": int(os.getenv("ATTN_VERIFY_MAX_NUM_SEQS", "4")),
    "segment_counts": [1, 2, 4, 8],
    "static_instances": [1, 3, 64, 1024],
}

# (block_size, tile_size) pairs every paging round trip covers, on top of the
# verify settings' block x tile product
PAGING_PAIRS = [(16, 16), (16, 32), (32, 16), (80, 64)]
CAUSALITY_BATCHES = int(os.getenv("ATTN_CAUSALITY_BATCHES", "50"))

# Segment speedup check: one long decode on a single KV head
SPEEDUP_CONTEXT_LEN = int(os.getenv("ATTN_SPEEDUP_CONTEXT_LEN", "65536"))
SPEEDUP_HEADS = (16, 1)
SPEEDUP_WORKERS = 8
SPEEDUP_MIN_RATIO = 1.5

# Artifact Paths
RECORDS_PATH = os.getenv("ATTN_RECORDS_PATH", "tuning_records.ndjson")
TREE_PATH = os.getenv("ATTN_TREE_PATH", "heuristic_tree.json")
BENCH_CSV_PATH = os.getenv("ATTN_BENCH_CSV", "bench.csv")
REPRO_PATH = os.getenv("ATTN_REPRO_PATH", "verify_repro.json")
PLOT_PATH = os.getenv("ATTN_PLOT_PATH", "bench.html")

# Tolerances
ORACLE_RTOL = 1e-4
VARIANT_RTOL = 1e-5


def default_num_instances(workers: int = WORKERS) -> int:
    """Static grid size: close to, but smaller than, the worker pool."""
    return max(1, workers - 1)
