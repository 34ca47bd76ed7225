"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, shown in the pytest terminal summary
(and printed directly when this file is run as a script).
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from rosa.kernel import ColMajorWeight, bench, fused_topk_gemv, sparse_gemv
from rosa.model import (
    Mode, ModelConfig, SiteSparsifier, calibrate_thresholds, forward_batch, model_output_error,
    synth_model, synth_tokens,
)
from rosa.numeric import random_orthogonal
from rosa.rotation import RotationMatrix, merge_rotations, rotate_model
from rosa.search import SearchSpace, grid_search
from rosa.sparsify import SITES, SparsityPlan, actual_sparsity, solve_alpha_constraints, top_k_sparsify
from rosa.theory import (
    block_errors, dense_site_inputs, monte_carlo_relative_error, MonteCarloSpec, theoretical_relative_error,
)

DESK = ModelConfig()
SEEDS = range(5)


def record(label, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def desk_sets(seed, n_calib=16, n_eval=4, length=128):
    calib = synth_tokens(n_calib, length, DESK.vocab, seed=1000 + seed)
    held = synth_tokens(n_eval, length, DESK.vocab, seed=2000 + seed, exponent=1.3, shuffle_seed=50 + seed)
    return calib, held


def test_c1_computational_invariance():
    configs = [
        ModelConfig(hidden=d, layers=l, heads=h, kv_groups=g, vocab=v, seed=s)
        for s, (d, l, h, g, v) in enumerate([
            (16, 1, 2, 1, 32), (16, 2, 4, 4, 32), (32, 1, 4, 2, 64), (32, 3, 4, 1, 64),
            (48, 2, 6, 3, 64), (64, 4, 4, 2, 256), (64, 2, 8, 4, 128), (96, 3, 6, 2, 128),
            (128, 2, 8, 2, 128), (128, 4, 4, 4, 256),
        ])
    ]
    worst = 0.0
    for cfg in configs:
        model = synth_model(cfg)
        rng = np.random.default_rng(cfg.seed)
        qs = [RotationMatrix(random_orthogonal(cfg.hidden, rng)) for _ in range(cfg.layers)]
        rotated = merge_rotations(model, qs)
        seqs = [rng.integers(0, cfg.vocab, size=16) for _ in range(32)]
        dense = forward_batch(model, seqs, Mode.DENSE)
        plan = SparsityPlan(p=0.0)
        out = forward_batch(rotated, seqs, Mode.LAROSA, plan)
        worst = max(worst, model_output_error(out, dense).max)
    ok = worst <= 1e-6
    record("C1 invariance", ok, f"max relative error {worst:.2e} over {len(configs)} configurations (<= 1e-6)")
    assert ok


def test_c2_topk_exact_sparsity():
    model = synth_model(DESK)
    calib, _ = desk_sets(0)
    rotated = rotate_model(model, calib)
    seqs = synth_tokens(32, 128, DESK.vocab, seed=77, exponent=1.3, shuffle_seed=3)
    dims = DESK.site_dims()
    failures = []
    for plan in (SparsityPlan(p=0.5), SparsityPlan.from_free(0.5, 0.9, 0.8, DESK.mlp_ratio)):
        rec = {}
        forward_batch(rotated, seqs, Mode.LAROSA, plan, record=rec)
        for (layer, site), pairs in rec.items():
            # integer zero counts per token keep the spread exact
            kept = dims[site] - plan.k_for(site, dims[site])
            zeros = np.concatenate([np.count_nonzero(s == 0.0, axis=1) for _, s in pairs])
            first = np.array([np.count_nonzero(s[0] == 0.0) for _, s in pairs])
            if zeros.std() != 0.0 or np.any(zeros != kept) or np.any(first != kept):
                failures.append((plan.alpha, layer, site))
    ok = not failures
    record("C2 Top-K exact sparsity", ok,
           f"{32} sequences, every token incl. index 0 at 1 - k/D, std 0; mismatches {failures}")
    assert ok


def test_c3_magnitude_sparsity_fluctuates():
    t0 = time.perf_counter()
    model = synth_model(DESK)
    calib, held = desk_sets(0)
    p = 0.5
    table = calibrate_thresholds(model, calib, p)
    rec = {}
    forward_batch(model, held, SiteSparsifier(Mode.TEAL, table, DESK), record=rec)
    stats = {}
    for site in SITES:
        per_tok = np.concatenate([
            np.concatenate([actual_sparsity(s) for _, s in rec[(l, site)]]) for l in range(DESK.layers)
        ])
        stats[site] = (per_tok.mean(), per_tok.std())
    elapsed = time.perf_counter() - t0
    ok = all(std > 0 and abs(mean - p) > 0 for mean, std in stats.values()) and elapsed < 10
    detail = ", ".join(f"{s} {m:.3f}+-{sd:.3f}" for s, (m, sd) in stats.items())
    record("C3 magnitude fluctuation", ok, f"held-out per-token sparsity {detail} (target {p}); {elapsed:.1f}s")
    assert ok


def test_c4_theorem_matches_monte_carlo():
    t0 = time.perf_counter()
    d_in, d_out = 4096, 1024
    diffs = []
    for frac in (0.25, 0.5, 0.75):
        k = int(frac * d_in)
        theory = theoretical_relative_error(k, d_in)
        mc = monte_carlo_relative_error(MonteCarloSpec(d_in, d_out, k, samples=2000, seed=0))
        diffs.append(abs(theory - mc) / theory)
    endpoints = theoretical_relative_error(d_in, d_in) == 0.0 and theoretical_relative_error(0, d_in) == 1.0
    elapsed = time.perf_counter() - t0
    ok = max(diffs) <= 0.02 and endpoints and elapsed < 60
    record("C4 theorem vs Monte-Carlo", ok,
           f"relative gaps {[f'{d:.2e}' for d in diffs]} (<= 2%), endpoints exact {endpoints}; {elapsed:.1f}s")
    assert ok


def test_c5_rotated_topk_dominates_magnitude():
    t0 = time.perf_counter()
    wins, total = 0, 0
    by_site = {s: [0, 0] for s in SITES}
    for seed in SEEDS:
        model = synth_model(DESK, seed=seed)
        calib, held = desk_sets(seed)
        rotated = rotate_model(model, calib)
        inputs = (dense_site_inputs(model, held), dense_site_inputs(rotated, held))
        for sparsity in (0.25, 0.5):
            for layer in range(DESK.layers):
                for site in SITES:
                    e = block_errors(model, rotated, held, sparsity, layer, site, inputs=inputs)
                    assert e["topk_sparsity"] == pytest.approx(e["magnitude_sparsity"], abs=1e-2)
                    win = e["rotated_topk"] <= e["magnitude"]
                    wins += win
                    total += 1
                    by_site[site][0] += win
                    by_site[site][1] += 1
    elapsed = time.perf_counter() - t0
    rate = wins / total
    ok = rate >= 0.9 and elapsed < 120
    per_site = ", ".join(f"{s} {w}/{n}" for s, (w, n) in by_site.items())
    record("C5 error dominance", ok, f"{wins}/{total} = {rate:.1%} (need >= 90%); by site {per_site}; {elapsed:.1f}s")
    assert ok


def test_c6_constraint_system():
    a2, a4 = solve_alpha_constraints(0.90, 0.80, 2.6875)
    b2, b4 = solve_alpha_constraints(0.80, 0.80, 3.5)
    ok = a2 == 4 - 3 * 0.90 and b2 == 4 - 3 * 0.80 and abs(a4 - 1.15) <= 0.01 and abs(b4 - 1.12) <= 0.01
    ok = ok and abs(a2 - 1.30) < 1e-12 and abs(b2 - 1.60) < 1e-12
    record("C6 constraint system", ok,
           f"(0.90, 2.6875) -> a2={a2:.4f}, a4={a4:.4f}; (0.80, 3.5) -> a2={b2:.4f}, a4={b4:.4f}")
    assert ok


def test_c7_grid_search():
    t0 = time.perf_counter()
    model = synth_model(DESK)
    calib, held = desk_sets(0)
    rotated = rotate_model(model, calib)
    result = grid_search(model, rotated, held, 0.5, SearchSpace(), calib_seqs=calib)
    m = DESK.mlp_ratio
    pairs = {(round(r[0], 9), round(r[2], 9)) for r in result.trace}
    feasible = all(
        abs(3 * r[0] + r[1] - 4) <= 1e-9 and abs(2 * r[2] + m * r[3] - (2 + m)) <= 1e-9 for r in result.trace
    )
    a = result.alpha
    best_ok = abs(3 * a[0] + a[1] - 4) <= 1e-9 and abs(2 * a[2] + m * a[3] - (2 + m)) <= 1e-9
    uniform = [r[4] for r in result.trace if r[0] == 1.0 and r[2] == 1.0]
    elapsed = time.perf_counter() - t0
    ok = (len(result.trace) == 121 and len(pairs) == 121 and feasible and best_ok
          and len(uniform) == 1 and result.objective <= uniform[0] and elapsed < 300)
    record("C7 grid search", ok,
           f"{len(result.trace)} points, best {tuple(round(x, 4) for x in a)} objective {result.objective:.4f} "
           f"<= uniform {uniform[0]:.4f}; {elapsed:.1f}s")
    assert ok


def test_c8_fused_kernel_bitwise():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    mismatches = 0
    for d_out, d_in in ((128, 512), (2048, 2048), (8192, 2048)):
        w = ColMajorWeight(rng.standard_normal((d_out, d_in)))
        for case in range(100):
            x = rng.standard_normal(d_in)
            if case % 4 == 0:
                # coarse values force ties at the cutoff
                x = np.round(x, 1)
            if case % 7 == 0:
                x[rng.random(d_in) < 0.2] = 0.0
            k = int(rng.integers(0, d_in + 1))
            if not np.array_equal(fused_topk_gemv(w, x, k), sparse_gemv(w, top_k_sparsify(x, k))):
                mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30
    record("C8 fused kernel bitwise", ok, f"{mismatches} mismatches over 300 cases; {elapsed:.1f}s")
    assert ok


def test_c9_kernel_speedup_trend():
    t0 = time.perf_counter()
    rep = bench(8192, 8192, (0.0, 0.25, 0.5, 0.75), reps=30, seed=0)
    s = [rep.speedup(lvl, "sparse") for lvl in (0.25, 0.5, 0.75)]
    fused0 = rep.speedup(0.0, "fused")
    elapsed = time.perf_counter() - t0
    ok = s[0] < s[1] < s[2] and s[2] >= 1.3 and fused0 <= 1.0 and elapsed < 120
    record("C9 kernel speedup trend", ok,
           f"sparse speedups 25/50/75% = {s[0]:.2f}x/{s[1]:.2f}x/{s[2]:.2f}x, fused at 0% = {fused0:.2f}x; "
           f"{elapsed:.1f}s")
    assert ok


def test_c10_monotone_degradation():
    t0 = time.perf_counter()
    levels = (0.0, 0.25, 0.5, 0.75)
    violations = []
    curves = []
    for seed in SEEDS:
        model = synth_model(DESK, seed=seed)
        calib, held = desk_sets(seed, n_calib=8, n_eval=2, length=64)
        rotated = rotate_model(model, calib)
        dense = forward_batch(model, held, Mode.DENSE)
        errs = [model_output_error(forward_batch(rotated, held, Mode.LAROSA, SparsityPlan(p=p)), dense).mean
                for p in levels]
        curves.append(errs)
        if any(b < a for a, b in zip(errs, errs[1:])):
            violations.append(seed)
    elapsed = time.perf_counter() - t0
    ok = not violations and elapsed < 60
    record("C10 monotone degradation", ok,
           f"violating seeds {violations}; seed 0 curve {[f'{e:.3f}' for e in curves[0]]}; {elapsed:.1f}s")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
