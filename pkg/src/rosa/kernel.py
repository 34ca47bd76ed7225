"""Sparse GEMV over column-major weights, with a fused Top-K path and a micro-benchmark.

``W`` is stored column-contiguous so that a sparse activation only pulls the
columns it needs. All paths accumulate the selected columns in ascending index
order, so the fused and two-step paths agree bitwise.
"""

from dataclasses import dataclass, field
import statistics
import threading
import time

import numpy as np
from threadpoolctl import threadpool_limits

from rosa import _kernels
from rosa.errors import InputError
from rosa.numeric import as_matrix, as_vector, gemv_dense
from rosa.sparsify import SparseVec, compute_k, top_k_sparsify

WARMUP_REPS = 5
MIN_REPS = 30
BENCH_MODES = ("dense", "ordered", "sparse", "fused")

_timing_lock = threading.Lock()


class ColMajorWeight:
    """A ``(rows, cols)`` weight matrix whose column ``j`` is one contiguous block."""

    def __init__(self, w):
        w = as_matrix(w, "W")
        self.data = np.asfortranarray(w)
        self.rows, self.cols = self.data.shape

    @property
    def shape(self):
        return self.data.shape

    def column(self, j):
        return self.data[:, j]


class ColumnCounter:
    """Counts weight-column reads made by the instrumented sparse path."""

    def __init__(self):
        self.reads = 0


def _as_colmajor(w):
    return w if isinstance(w, ColMajorWeight) else ColMajorWeight(w)


def sparse_gemv(w, sx, counter=None):
    """``y = sum_j sx[j] * W[:, j]`` over the stored indices of ``sx``.

    With a ``counter`` the product runs through a Python loop that records each
    column read; the result is bitwise the same as the compiled path.
    """
    w = _as_colmajor(w)
    if not isinstance(sx, SparseVec):
        raise InputError("sx must be a SparseVec")
    if sx.dim != w.cols:
        raise InputError(f"W has {w.cols} columns but sx has dimension {sx.dim}")
    if counter is not None:
        out = np.zeros(w.rows)
        for j, v in zip(sx.indices, sx.values):
            out = out + w.column(j) * v
            counter.reads += 1
        return out
    out = np.empty(w.rows)
    return _kernels.gather_columns(w.data, sx.indices, sx.values, out)


def topk_indices(x, k):
    """Ascending indices of the ``k`` largest ``|x|``, found by partial selection.

    Ties at the cutoff go to the lower index. Exact zeros are then dropped.
    """
    d = x.shape[0]
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if k == d:
        return np.flatnonzero(x != 0.0)
    a = np.abs(x)
    cutoff = np.partition(a, d - k)[d - k]
    keep = a > cutoff
    short = k - int(np.count_nonzero(keep))
    keep[np.flatnonzero(a == cutoff)[:short]] = True
    return np.flatnonzero(keep & (x != 0.0))


def fused_topk_gemv(w, x, k):
    """Top-K selection and sparse GEMV in one call, without sorting ``x``."""
    w = _as_colmajor(w)
    x = as_vector(x, "x")
    if x.shape[0] != w.cols:
        raise InputError(f"W has {w.cols} columns but x has dimension {x.shape[0]}")
    k = int(k)
    if not 0 <= k <= x.shape[0]:
        raise InputError(f"k={k} outside [0, {x.shape[0]}]")
    idx = topk_indices(x, k)
    out = np.empty(w.rows)
    return _kernels.gather_columns(w.data, idx, x[idx], out)


@dataclass
class BenchReport:
    """Median timings per (sparsity, mode) and speedups over the dense BLAS GEMV."""

    d_in: int
    d_out: int
    sparsity_levels: tuple
    reps: int
    seed: int
    median_ns: dict = field(default_factory=dict)

    def speedup(self, sparsity, mode):
        return self.median_ns[(sparsity, "dense")] / self.median_ns[(sparsity, mode)]

    def rows(self):
        out = []
        for s in self.sparsity_levels:
            for mode in BENCH_MODES:
                out.append({
                    "d_in": self.d_in, "d_out": self.d_out, "sparsity": s, "mode": mode,
                    "median_ns": self.median_ns[(s, mode)], "speedup": self.speedup(s, mode),
                })
        return out

    def to_csv(self):
        lines = ["d_in,d_out,sparsity,mode,median_ns,speedup"]
        for r in self.rows():
            lines.append(
                f"{r['d_in']},{r['d_out']},{r['sparsity']},{r['mode']},"
                f"{r['median_ns']:.0f},{r['speedup']:.4f}"
            )
        return "\n".join(lines) + "\n"


def bench_inputs(d_in, d_out, sparsity_levels, seed):
    """Deterministic weight, activation and Top-K vector for each sparsity level."""
    rng = np.random.default_rng(seed)
    w = ColMajorWeight(rng.standard_normal((d_out, d_in)) / np.sqrt(d_in))
    x = rng.standard_normal(d_in)
    sparse = {s: top_k_sparsify(x, compute_k(1.0, s, d_in)) for s in sparsity_levels}
    return w, x, sparse


def bench(d_in, d_out, sparsity_levels=(0.0, 0.25, 0.5, 0.75), reps=MIN_REPS, seed=0):
    """Time dense and sparse GEMV on one thread.

    Modes: ``dense`` is the BLAS product ``W @ x``; ``ordered`` is the compiled
    ascending-order dense loop; ``sparse`` is :func:`sparse_gemv` on a
    precomputed Top-K vector; ``fused`` includes the selection. Modes are
    interleaved within each repetition so drift affects them alike.
    """
    if reps < MIN_REPS:
        raise InputError(f"need at least {MIN_REPS} repetitions, got {reps}")
    sparsity_levels = tuple(float(s) for s in sparsity_levels)
    w, x, sparse = bench_inputs(d_in, d_out, sparsity_levels, seed)
    _kernels.warmup()
    ks = {s: compute_k(1.0, s, d_in) for s in sparsity_levels}
    runs = {
        "dense": lambda s: w.data @ x,
        "ordered": lambda s: gemv_dense(w.data, x),
        "sparse": lambda s: sparse_gemv(w, sparse[s]),
        "fused": lambda s: fused_topk_gemv(w, x, ks[s]),
    }
    samples = {(s, m): [] for s in sparsity_levels for m in BENCH_MODES}
    clock = time.perf_counter_ns
    with _timing_lock, threadpool_limits(limits=1):
        for rep in range(WARMUP_REPS + reps):
            for s in sparsity_levels:
                for mode in BENCH_MODES:
                    fn = runs[mode]
                    t0 = clock()
                    fn(s)
                    elapsed = clock() - t0
                    if rep >= WARMUP_REPS:
                        samples[(s, mode)].append(elapsed)
    report = BenchReport(d_in, d_out, sparsity_levels, reps, seed)
    report.median_ns = {key: float(statistics.median(v)) for key, v in samples.items()}
    return report
