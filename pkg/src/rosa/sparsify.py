"""Top-K and magnitude-threshold activation sparsification.

Sites are the four per-layer projection inputs:

* ``h1`` - input of the query/key/value projections
* ``h2`` - input of the attention output projection
* ``h3`` - input of the up/gate projections
* ``h4`` - input of the down projection
"""

from dataclasses import dataclass, field
import math

import numpy as np

from rosa.errors import InfeasibleCoefficientsError, InputError

SITES = ("h1", "h2", "h3", "h4")
CONSTRAINT_TOL = 1e-9


@dataclass(frozen=True)
class SparseVec:
    """Retained entries of one activation vector.

    ``budget`` is the number of positions the selector kept, which can exceed
    ``len(indices)`` when exact zeros were selected (zeros are never stored).
    """

    dim: int
    indices: np.ndarray
    values: np.ndarray
    budget: int = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        if self.budget is None:
            object.__setattr__(self, "budget", len(idx))
        if idx.ndim != 1 or idx.shape != vals.shape:
            raise InputError("indices and values must be 1-D of equal length")
        if len(idx) > self.dim:
            raise InputError("more stored entries than dimensions")
        if len(idx) and (idx[0] < 0 or idx[-1] >= self.dim or np.any(np.diff(idx) <= 0)):
            raise InputError("indices must be strictly increasing and within [0, dim)")
        if np.any(vals == 0.0):
            raise InputError("SparseVec must not store zeros")

    @property
    def nnz(self):
        return len(self.indices)

    def densify(self):
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


def _from_mask(x, keep, budget):
    idx = np.flatnonzero(keep & (x != 0.0))
    return SparseVec(x.shape[0], idx, x[idx], budget=budget)


def top_k_sparsify(x, k):
    """Keep the ``k`` largest-magnitude entries of ``x``.

    Ties at the cutoff go to the lower index.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("x must be 1-D")
    k = int(k)
    if not 0 <= k <= x.shape[0]:
        raise InputError(f"k={k} outside [0, {x.shape[0]}]")
    order = np.argsort(-np.abs(x), kind="stable")[:k]
    keep = np.zeros(x.shape[0], dtype=bool)
    keep[order] = True
    return _from_mask(x, keep, k)


def topk_rows(x, k):
    """Row-wise Top-K on a token batch; returns a dense array with dropped entries zeroed.

    Same selection rule as :func:`top_k_sparsify`, applied independently per row.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    k = int(k)
    if not 0 <= k <= d:
        raise InputError(f"k={k} outside [0, {d}]")
    if k == d:
        return x.copy()
    out = np.zeros_like(x)
    if k == 0:
        return out
    order = np.argsort(-np.abs(x), axis=-1, kind="stable")[..., :k]
    np.put_along_axis(out, order, np.take_along_axis(x, order, axis=-1), axis=-1)
    return out


def round_half_away(v):
    return math.floor(v + 0.5) if v >= 0 else -math.floor(-v + 0.5)


def compute_k(alpha, p, d_in):
    """Number of entries to keep: ``alpha * (1 - p) * d_in`` rounded, clamped to ``[0, d_in]``."""
    if not 0.0 <= p <= 1.0:
        raise InputError(f"sparsity must be in [0, 1], got {p}")
    if alpha <= 0:
        raise InputError(f"alpha must be positive, got {alpha}")
    k = round_half_away(alpha * (1.0 - p) * d_in)
    return int(min(max(k, 0), d_in))


def solve_alpha_constraints(alpha1, alpha3, m):
    """Derive (alpha2, alpha4) so attention and MLP blocks keep the model-level budget.

    ``3*alpha1 + alpha2 = 4`` and ``2*alpha3 + m*alpha4 = 2 + m``.
    """
    if m <= 0:
        raise InputError(f"MLP ratio must be positive, got {m}")
    alpha2 = 4.0 - 3.0 * alpha1
    alpha4 = (2.0 + m - 2.0 * alpha3) / m
    if alpha1 <= 0 or alpha3 <= 0 or alpha2 <= 0 or alpha4 <= 0:
        raise InfeasibleCoefficientsError(
            f"infeasible coefficients: alpha=({alpha1}, {alpha2}, {alpha3}, {alpha4})"
        )
    return alpha2, alpha4


@dataclass(frozen=True)
class SparsityPlan:
    """Target model-level sparsity and per-site keep coefficients."""

    p: float
    alpha: tuple = (1.0, 1.0, 1.0, 1.0)
    m: float = 2.6875

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise InputError(f"sparsity must be in [0, 1], got {self.p}")
        a1, a2, a3, a4 = (float(a) for a in self.alpha)
        object.__setattr__(self, "alpha", (a1, a2, a3, a4))
        if min(a1, a2, a3, a4) <= 0:
            raise InfeasibleCoefficientsError(f"coefficients must be positive: {self.alpha}")
        if abs(3 * a1 + a2 - 4) > CONSTRAINT_TOL:
            raise InfeasibleCoefficientsError(f"3*a1 + a2 != 4 for {self.alpha}")
        if abs(2 * a3 + self.m * a4 - (2 + self.m)) > CONSTRAINT_TOL:
            raise InfeasibleCoefficientsError(f"2*a3 + M*a4 != 2 + M for {self.alpha}")

    @classmethod
    def from_free(cls, p, alpha1, alpha3, m):
        """Build a plan from the two free coefficients."""
        alpha2, alpha4 = solve_alpha_constraints(alpha1, alpha3, m)
        return cls(p=p, alpha=(alpha1, alpha2, alpha3, alpha4), m=m)

    def alpha_for(self, site):
        return self.alpha[SITES.index(site)]

    def k_for(self, site, d_in):
        return compute_k(self.alpha_for(site), self.p, d_in)

    def k_per_site(self, dims):
        """``dims`` maps site name to its input dimension."""
        return {site: self.k_for(site, dims[site]) for site in SITES}


@dataclass
class ThresholdTable:
    """Per-(layer, site) magnitude cutoffs calibrated offline."""

    p: float
    eps: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, value in self.eps.items():
            if value < 0:
                raise InputError(f"negative threshold for {key}")

    def get(self, layer, site):
        return self.eps.get((layer, site))


def calibrate_magnitude_threshold(samples, p):
    """Cutoff for magnitude pruning: lower empirical ``p``-quantile of pooled ``|x|``.

    ``p = 0`` returns 0 so that only exact zeros are dropped.
    """
    if not 0.0 <= p <= 1.0:
        raise InputError(f"sparsity must be in [0, 1], got {p}")
    arrays = [np.abs(np.asarray(s, dtype=np.float64)).ravel() for s in samples]
    if not arrays or sum(a.size for a in arrays) == 0:
        raise InputError("no calibration samples")
    if p == 0.0:
        return 0.0
    pooled = np.concatenate(arrays)
    return float(np.quantile(pooled, p, method="lower"))


def magnitude_sparsify(x, eps):
    """Zero entries with ``|x_i| <= eps`` (inclusive) and return the rest."""
    if eps < 0:
        raise InputError(f"threshold must be non-negative, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    keep = np.abs(x) > eps
    return _from_mask(x, keep, int(np.count_nonzero(keep)))


def magnitude_rows(x, eps):
    """Batched form of :func:`magnitude_sparsify` returning a dense array."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) <= eps, 0.0, x)


def actual_sparsity(x):
    """Fraction of zero entries in a dense vector, a batch of rows, or a SparseVec.

    For 2-D input, returns one value per row.
    """
    if isinstance(x, SparseVec):
        return (x.dim - x.nnz) / x.dim
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise InputError("empty activation")
    frac = np.mean(x == 0.0, axis=-1)
    return float(frac) if np.ndim(frac) == 0 else frac
