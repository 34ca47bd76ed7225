"""Exhaustive grid search over the free keep coefficients (alpha1, alpha3)."""

from dataclasses import dataclass
import logging
import math

import numpy as np

from rosa.errors import InfeasibleCoefficientsError, InputError
from rosa.model import Mode, forward_batch, model_output_error
from rosa.sparsify import SparsityPlan

log = logging.getLogger(__name__)

GRID_SLACK = 1e-9


@dataclass(frozen=True)
class SearchSpace:
    alpha1_range: tuple = (0.7, 1.2)
    alpha3_range: tuple = (0.7, 1.2)
    step: float = 0.05
    objective: str = "relative_logit_error"

    def __post_init__(self):
        if self.step <= 0:
            raise InputError("step must be positive")
        for lo, hi in (self.alpha1_range, self.alpha3_range):
            if hi < lo:
                raise InputError(f"empty range [{lo}, {hi}]")
        if self.objective != "relative_logit_error":
            raise InputError(f"unknown objective {self.objective!r}")

    def axis(self, bounds):
        """Grid values ``lo + i*step`` for integer ``i``, upper bound inclusive."""
        lo, hi = bounds
        n = int(math.floor((hi - lo) / self.step + GRID_SLACK))
        return [round(lo + i * self.step, 12) for i in range(n + 1)]

    def points(self):
        return [(a1, a3) for a1 in self.axis(self.alpha1_range) for a3 in self.axis(self.alpha3_range)]


@dataclass
class SearchResult:
    alpha: tuple
    objective: float
    trace: list

    def trace_csv(self):
        lines = ["alpha1,alpha2,alpha3,alpha4,objective"]
        for row in self.trace:
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def _same_sequences(a, b):
    return any(len(x) == len(y) and np.array_equal(x, y) for x in a for y in b)


def evaluate_plan(rotated, eval_seqs, plan, dense_logits):
    sparse = forward_batch(rotated, eval_seqs, Mode.LAROSA, plan)
    return model_output_error(sparse, dense_logits).mean


def grid_search(model, rotated, eval_seqs, p, space=None, calib_seqs=None):
    """Minimize the mean relative logit error of rotated Top-K against the dense model.

    Every ``(alpha1, alpha3)`` grid point is evaluated, with ``alpha2`` and
    ``alpha4`` taken from the block-budget constraints; infeasible points are
    logged and skipped. Ties keep the first point in (alpha1, alpha3) order.
    """
    space = space or SearchSpace()
    if not 0.0 < p < 1.0:
        raise InputError(f"search needs sparsity in (0, 1), got {p}")
    if not eval_seqs:
        raise InputError("empty evaluation set")
    if calib_seqs is not None and _same_sequences(eval_seqs, calib_seqs):
        raise InputError("evaluation sequences overlap the calibration set")
    m = model.config.mlp_ratio
    dense_logits = forward_batch(model, eval_seqs, Mode.DENSE)

    trace = []
    best = None
    for a1, a3 in space.points():
        try:
            plan = SparsityPlan.from_free(p, a1, a3, m)
        except InfeasibleCoefficientsError as exc:
            log.warning("skipping grid point (%s, %s): %s", a1, a3, exc)
            continue
        obj = evaluate_plan(rotated, eval_seqs, plan, dense_logits)
        trace.append((*plan.alpha, obj))
        if best is None or obj < best[1]:
            best = (plan.alpha, obj)
    if best is None:
        raise InputError("no feasible grid point")
    return SearchResult(alpha=best[0], objective=best[1], trace=trace)
