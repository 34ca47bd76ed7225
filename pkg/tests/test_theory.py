import math

import numpy as np
import pytest

from rosa.errors import InputError
from rosa.model import ModelConfig, synth_model, synth_tokens
from rosa.numeric import std_normal_inv_cdf, std_normal_pdf
from rosa.rotation import rotate_model
from rosa.sparsify import compute_k
from rosa.theory import (
    MonteCarloSpec, block_errors, empirical_error_table, monte_carlo_relative_error, monte_carlo_stats,
    theoretical_relative_error, theory_table,
)


def test_endpoints():
    assert theoretical_relative_error(4096, 4096) == 0.0
    assert theoretical_relative_error(0, 4096) == 1.0


def test_hand_values():
    # keep half: t = inv_cdf(0.75)
    t = 0.6744897501960817
    assert theoretical_relative_error(2048, 4096) == pytest.approx(math.sqrt(0.5 - 2 * t * std_normal_pdf(t)))
    assert theoretical_relative_error(2048, 4096) == pytest.approx(0.2671, abs=1e-4)
    assert theoretical_relative_error(1024, 4096) == pytest.approx(0.5258, abs=1e-4)
    assert std_normal_inv_cdf(0.75) == pytest.approx(0.67449, abs=1e-5)


def test_monotone_in_k():
    d = 1000
    ks = np.linspace(0, d, 101).round().astype(int)
    vals = [theoretical_relative_error(k, d) for k in ks]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_rejects_bad_k():
    with pytest.raises(InputError):
        theoretical_relative_error(5, 4)


def test_monte_carlo_rejects_few_samples():
    with pytest.raises(InputError):
        MonteCarloSpec(64, 16, 8, samples=500)


def test_mc_full_k_is_zero():
    assert monte_carlo_relative_error(MonteCarloSpec(64, 16, 64, samples=1000)) == 0.0


def test_mc_deterministic():
    spec = MonteCarloSpec(128, 32, 40, samples=1000, seed=4)
    assert monte_carlo_relative_error(spec) == monte_carlo_relative_error(spec)


def test_mc_scale_invariant():
    base = monte_carlo_stats(MonteCarloSpec(256, 64, 128, samples=2000, seed=1))
    other = monte_carlo_stats(MonteCarloSpec(256, 64, 128, sigma_x=3.0, sigma_w=0.2, samples=2000, seed=2))
    se = math.hypot(base.stderr, other.stderr)
    assert abs(base.ratio - other.ratio) <= 3 * se


def test_mc_spread_shrinks_with_samples():
    def spread(n):
        return np.std([monte_carlo_relative_error(MonteCarloSpec(128, 32, 64, samples=n, seed=s))
                       for s in range(24)], ddof=1)

    ratio = spread(1000) / spread(2000)
    # standard error scales as 1/sqrt(n)
    assert math.sqrt(2) / 1.5 <= ratio <= math.sqrt(2) * 1.5


def test_mc_stderr_matches_seed_spread():
    estimates = [monte_carlo_stats(MonteCarloSpec(128, 32, 64, samples=1000, seed=s)) for s in range(24)]
    spread = np.std([e.ratio for e in estimates], ddof=1)
    mean_se = np.mean([e.stderr for e in estimates])
    assert 0.5 <= spread / mean_se <= 2.0


@pytest.mark.parametrize("frac", [0.25, 0.5, 0.75])
def test_theory_matches_mc_at_4096(frac):
    d = 4096
    k = int(frac * d)
    mc = monte_carlo_relative_error(MonteCarloSpec(d, 1024, k, samples=2000, seed=0))
    theory = theoretical_relative_error(k, d)
    assert abs(mc - theory) / theory <= 0.02


def test_theory_table_rows():
    rows = theory_table(256, 32, keep_fractions=(0.5,), samples=1000)
    assert rows[0]["k"] == 128 and rows[0]["theory"] == theoretical_relative_error(128, 256)
    assert set(rows[0]) >= {"keep_fraction", "theory", "monte_carlo", "stderr", "rel_diff"}


def test_block_errors_zero_sparsity(tiny_model, tiny_calib, tiny_eval):
    rotated = rotate_model(tiny_model, tiny_calib)
    for site in ("h1", "h4"):
        e = block_errors(tiny_model, rotated, tiny_eval, 0.0, 0, site)
        assert e["rotated_topk"] == 0.0 and e["magnitude"] == 0.0


def test_block_errors_matched_sparsity(tiny_model, tiny_calib, tiny_eval):
    rotated = rotate_model(tiny_model, tiny_calib)
    e = block_errors(tiny_model, rotated, tiny_eval, 0.5, 1, "h3")
    assert e["topk_sparsity"] == 0.5
    assert abs(e["magnitude_sparsity"] - 0.5) <= 0.01


def test_empirical_table_columns():
    cfg = ModelConfig(hidden=32, layers=2, heads=4, kv_groups=2, vocab=64, seed=3)
    model = synth_model(cfg)
    calib = synth_tokens(4, 32, cfg.vocab, seed=1)
    held = synth_tokens(2, 32, cfg.vocab, seed=2, exponent=1.3, shuffle_seed=4)
    rows = empirical_error_table(model, rotate_model(model, calib), held, (0.0, 0.25, 0.5))
    assert [r["sparsity"] for r in rows] == [0.0, 0.25, 0.5]
    assert rows[0]["theory"] == rows[0]["rotated_topk"] == rows[0]["magnitude"] == 0.0
    d = cfg.site_dims()["h4"]
    assert rows[2]["theory"] == theoretical_relative_error(compute_k(1.0, 0.5, d), d)
