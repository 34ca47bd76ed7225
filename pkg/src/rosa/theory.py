"""Closed-form Top-K output error under Gaussian assumptions, with Monte-Carlo check.

For ``x ~ N(0, s_x^2 I)`` and ``W`` with i.i.d. ``N(0, s_w^2)`` entries, keeping
the ``k`` largest-magnitude entries of ``x`` gives

    E||y - y_S|| / E||y|| = sqrt(1 - k/D - 2 t phi(t)),  t = Phi^-1(1 - k/(2D))

which depends on ``k / D`` only.
"""

from dataclasses import dataclass
import math

import numpy as np

from rosa.errors import InputError
from rosa.model import Mode, forward_batch, model_output_error
from rosa.numeric import std_normal_inv_cdf, std_normal_pdf
from rosa.sparsify import calibrate_magnitude_threshold, compute_k, magnitude_rows, topk_rows


def theoretical_relative_error(k, d_in):
    if d_in < 1 or not 0 <= k <= d_in:
        raise InputError(f"need 0 <= k <= d_in, got k={k}, d_in={d_in}")
    if k == 0:
        return 1.0
    if k == d_in:
        return 0.0
    frac = k / d_in
    t = std_normal_inv_cdf(1.0 - frac / 2.0)
    return math.sqrt(max(1.0 - frac - 2.0 * t * std_normal_pdf(t), 0.0))


@dataclass(frozen=True)
class MonteCarloSpec:
    d_in: int
    d_out: int
    k: int
    sigma_x: float = 1.0
    sigma_w: float = 1.0
    samples: int = 2000
    seed: int = 0
    # samples that share one weight draw; 1 redraws W for every sample
    weight_block: int = 64

    def __post_init__(self):
        if self.samples < 1000:
            raise InputError(f"need at least 1000 samples, got {self.samples}")
        if not 0 <= self.k <= self.d_in:
            raise InputError(f"k={self.k} outside [0, {self.d_in}]")
        if self.sigma_x <= 0 or self.sigma_w <= 0:
            raise InputError("standard deviations must be positive")
        if self.weight_block < 1:
            raise InputError("weight_block must be positive")


@dataclass(frozen=True)
class MonteCarloResult:
    ratio: float
    stderr: float
    samples: int


def monte_carlo_stats(spec):
    """Ratio-of-means estimate of ``E||y - y_S|| / E||y||`` and its delta-method standard error."""
    rng = np.random.default_rng(spec.seed)
    err_norms = np.empty(spec.samples)
    out_norms = np.empty(spec.samples)
    for start in range(0, spec.samples, spec.weight_block):
        b = min(spec.weight_block, spec.samples - start)
        w = rng.standard_normal((spec.d_out, spec.d_in)) * spec.sigma_w
        x = rng.standard_normal((b, spec.d_in)) * spec.sigma_x
        dropped = x - topk_rows(x, spec.k)
        out_norms[start:start + b] = np.linalg.norm(x @ w.T, axis=1)
        err_norms[start:start + b] = np.linalg.norm(dropped @ w.T, axis=1)
    num, den = err_norms.mean(), out_norms.mean()
    ratio = num / den
    resid = err_norms - ratio * out_norms
    stderr = float(resid.std(ddof=1) / (den * math.sqrt(spec.samples)))
    return MonteCarloResult(float(ratio), stderr, spec.samples)


def monte_carlo_relative_error(spec):
    return monte_carlo_stats(spec).ratio


def theory_table(d_in=4096, d_out=1024, keep_fractions=(0.25, 0.5, 0.75), samples=2000, seed=0):
    rows = []
    for frac in keep_fractions:
        k = int(round(frac * d_in))
        mc = monte_carlo_stats(MonteCarloSpec(d_in, d_out, k, samples=samples, seed=seed))
        theory = theoretical_relative_error(k, d_in)
        rows.append({
            "keep_fraction": k / d_in, "k": k, "d_in": d_in, "d_out": d_out,
            "theory": theory, "monte_carlo": mc.ratio, "stderr": mc.stderr,
            "rel_diff": abs(theory - mc.ratio) / theory if theory else abs(mc.ratio),
        })
    return rows


SITE_WEIGHTS = {"h1": ("wq", "wk", "wv"), "h2": ("wo",), "h3": ("w_up", "w_gate"), "h4": ("w_down",)}


def site_projection(lw, site):
    """Stacked weights reading ``site``, shape ``(sum d_out, d_in)``."""
    return np.concatenate([getattr(lw, name) for name in SITE_WEIGHTS[site]], axis=0)


def dense_site_inputs(model, seqs):
    """Dense activations at every ``(layer, site)``, tokens of all sequences stacked."""
    record = {}
    forward_batch(model, seqs, Mode.DENSE, record=record)
    return {key: np.concatenate([h for h, _ in pairs]) for key, pairs in record.items()}


def block_errors(model, rotated, seqs, sparsity, layer, site, inputs=None):
    """Per-block relative output error of rotated Top-K and of magnitude pruning.

    Both methods see the dense activations of their own model at ``(layer,
    site)``. The magnitude cutoff is the pooled quantile over those same
    activations, so its mean actual sparsity matches the Top-K budget.
    ``inputs`` may carry precomputed ``(dense_site_inputs(model),
    dense_site_inputs(rotated))``.

    Returns:
        dict with ``rotated_topk``, ``magnitude`` (mean per-token errors) and the
        realized mean sparsities ``topk_sparsity``, ``magnitude_sparsity``.
    """
    if inputs is None:
        inputs = (dense_site_inputs(model, seqs), dense_site_inputs(rotated, seqs))
    h_plain = inputs[0][(layer, site)]
    h_rot = inputs[1][(layer, site)]
    w_plain = site_projection(model.layers[layer], site)
    w_rot = site_projection(rotated.layers[layer], site)
    d = h_plain.shape[1]

    k = compute_k(1.0, sparsity, d)
    s_rot = topk_rows(h_rot, k)
    eps = calibrate_magnitude_threshold([h_plain], sparsity)
    s_mag = magnitude_rows(h_plain, eps)
    return {
        "rotated_topk": model_output_error(s_rot @ w_rot.T, h_rot @ w_rot.T).mean,
        "magnitude": model_output_error(s_mag @ w_plain.T, h_plain @ w_plain.T).mean,
        "topk_sparsity": float(np.mean(s_rot == 0.0)),
        "magnitude_sparsity": float(np.mean(s_mag == 0.0)),
    }


def empirical_error_table(model, rotated, seqs, sparsity_levels, layer=None, site="h4"):
    """Rows of (sparsity, theory, rotated_topk, magnitude) at one probe block.

    Defaults to the middle layer's down-projection input.
    """
    if layer is None:
        layer = model.config.layers // 2
    d = model.config.site_dims()[site]
    inputs = (dense_site_inputs(model, seqs), dense_site_inputs(rotated, seqs))
    rows = []
    for s in sparsity_levels:
        e = block_errors(model, rotated, seqs, s, layer, site, inputs=inputs)
        rows.append({
            "sparsity": s,
            "theory": theoretical_relative_error(compute_k(1.0, s, d), d),
            "rotated_topk": e["rotated_topk"],
            "magnitude": e["magnitude"],
        })
    return rows
