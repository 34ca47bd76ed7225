"""Command-line entry point: ``rosa <command> [options]``.

Every command prints a JSON report on stdout that embeds the resolved run
configuration, so rerunning with the same settings reproduces the numbers.
Exit codes: 0 success, 1 usage, 2 input or schema error, 3 numeric failure.
"""

import argparse
import json
import logging
import sys

import numpy as np

from rosa.errors import InputError, RosaError
from rosa.kernel import bench
from rosa.model import (
    Mode, ModelConfig, SiteSparsifier, calibrate_thresholds, forward_batch,
    model_output_error, synth_model, synth_tokens,
)
from rosa.rotation import layer_rotations, merge_rotations
from rosa.search import SearchSpace, grid_search
from rosa.sparsify import SITES, SparsityPlan
from rosa.theory import empirical_error_table, theory_table
from rosa.weights_io import load_rotations, load_weights, read_tokens, save_rotations, save_weights

EVAL_MODES = ("dense", "larosa", "topk", "teal", "cats")
# held-out evaluation text comes from a different token distribution
EVAL_EXPONENT = 1.3


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text, n, what):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated numbers") from None
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated numbers")
    return vals


def parse_synth(text):
    d, l, h, g, m, v = _floats(text, 6, "--synth")
    ints = (d, l, h, g, v)
    if any(x != int(x) for x in ints):
        raise argparse.ArgumentTypeError("--synth dimensions D,L,H,G,V must be integers")
    return {"hidden": int(d), "layers": int(l), "heads": int(h), "kv_groups": int(g),
            "mlp_ratio": m, "vocab": int(v)}


def parse_alpha(text):
    return tuple(_floats(text, 2, "--alpha"))


def parse_levels(text):
    return tuple(float(v) for v in text.split(","))


def build_parser():
    common = Parser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--model", metavar="PATH", help="weight file to load")
    src.add_argument("--synth", type=parse_synth, metavar="D,L,H,G,M,V",
                     help="synthesize a Gaussian model (default 64,4,4,2,2.6875,256)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--p", type=float, default=0.5, help="target model-level sparsity")
    common.add_argument("--calib-seqs", type=int, default=16)
    common.add_argument("--calib-len", type=int, default=128)
    common.add_argument("--eval-seqs", type=int, default=4)
    common.add_argument("--tokens", metavar="PATH", help="calibration token ids (raw uint32 LE)")
    common.add_argument("--eval-tokens", metavar="PATH", help="evaluation token ids (raw uint32 LE)")
    common.add_argument("--out", metavar="PATH", help="artifact output path")
    common.add_argument("--report", metavar="PATH", help="also write the JSON report here")

    parser = Parser(prog="rosa", description="Rotated Top-K activation sparsity toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    sub.add_parser("calibrate", parents=[common], help="compute per-layer rotations")

    p = sub.add_parser("merge", parents=[common], help="write a rotated model")
    p.add_argument("--rotations", metavar="PATH", help="precomputed rotation file")

    p = sub.add_parser("eval", parents=[common], help="sparsity and error metrics for one mode")
    p.add_argument("--mode", choices=EVAL_MODES, default="larosa")
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--alpha", type=parse_alpha, metavar="A1,A3")
    grp.add_argument("--search", action="store_true", help="pick alpha by grid search first")

    sub.add_parser("search", parents=[common], help="grid search over alpha1, alpha3")

    p = sub.add_parser("theory", parents=[common], help="closed-form vs Monte-Carlo error tables")
    p.add_argument("--d-in", type=int, default=4096)
    p.add_argument("--d-out", type=int, default=1024)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--levels", type=parse_levels, default=(0.0, 0.25, 0.5, 0.75))

    p = sub.add_parser("bench", parents=[common], help="sparse GEMV micro-benchmark")
    p.add_argument("--d-in", type=int, default=8192)
    p.add_argument("--d-out", type=int, default=8192)
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--levels", type=parse_levels, default=(0.0, 0.25, 0.5, 0.75))
    return parser


def load_model(args):
    if args.model:
        return load_weights(args.model)
    dims = args.synth or {}
    return synth_model(ModelConfig(seed=args.seed, **dims))


def _chunks(ids, length, count=None):
    n = len(ids) // length
    if count is not None:
        n = min(n, count)
    if n < 1:
        raise InputError(f"token file holds {len(ids)} ids, fewer than one sequence of {length}")
    return [ids[i * length:(i + 1) * length] for i in range(n)]


def token_sets(args, vocab):
    """Calibration and held-out evaluation sequences plus a description of their source."""
    if args.calib_seqs < 1 or args.calib_len < 1 or args.eval_seqs < 1:
        raise InputError("sequence counts and lengths must be positive")
    if args.tokens:
        calib = _chunks(read_tokens(args.tokens, vocab), args.calib_len, args.calib_seqs)
        calib_src = {"file": args.tokens}
    else:
        calib = synth_tokens(args.calib_seqs, args.calib_len, vocab, seed=args.seed + 1)
        calib_src = {"synthetic_seed": args.seed + 1, "shuffle_seed": 0, "exponent": 1.1}
    if args.eval_tokens:
        held = _chunks(read_tokens(args.eval_tokens, vocab), args.calib_len, args.eval_seqs)
        eval_src = {"file": args.eval_tokens}
    else:
        held = synth_tokens(args.eval_seqs, args.calib_len, vocab, seed=args.seed + 2,
                            exponent=EVAL_EXPONENT, shuffle_seed=args.seed + 3)
        eval_src = {"synthetic_seed": args.seed + 2, "shuffle_seed": args.seed + 3,
                    "exponent": EVAL_EXPONENT}
    return calib, held, {"calibration": calib_src, "evaluation": eval_src}


def run_config(args, model):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    cfg["model_config"] = model.config.to_dict() if model is not None else None
    return cfg


def _summary(values, scale=1.0):
    values = np.asarray(values)
    return {"mean": float(values.mean() / scale), "std": float(values.std() / scale),
            "min": float(values.min() / scale), "max": float(values.max() / scale)}


def sparsity_report(record):
    """Per-token actual sparsity per site (pooled over layers) and per (layer, site).

    Statistics are taken over integer zero counts and then scaled by the site
    width, so a constant sparsity reports a standard deviation of exactly 0.
    """
    by_site = {}
    by_layer = {}
    first_token = {}
    for (layer, site), pairs in sorted(record.items()):
        width = pairs[0][1].shape[-1]
        zeros = np.concatenate([np.count_nonzero(s == 0.0, axis=-1) for _, s in pairs])
        by_site.setdefault(site, []).append((zeros, width))
        by_layer[f"{layer}.{site}"] = _summary(zeros, width)
        first_token.setdefault(site, []).extend(np.count_nonzero(s[0] == 0.0) / width for _, s in pairs)
    sites = {}
    for site in SITES:
        if site in by_site:
            width = by_site[site][0][1]
            sites[site] = _summary(np.concatenate([z for z, _ in by_site[site]]), width)
            sites[site]["first_token_mean"] = float(np.mean(first_token[site]))
    return {"per_site": sites, "per_layer_site": by_layer}


def threshold_report(table, record, p):
    """Calibrated cutoffs against the per-token cutoffs that would hit ``p`` exactly."""
    rows = {}
    for (layer, site), pairs in sorted(record.items()):
        eps = table.get(layer, site)
        if eps is None:
            continue
        h = np.concatenate([x for x, _ in pairs])
        needed = np.quantile(np.abs(h), p, axis=1, method="lower") if p > 0 else np.zeros(len(h))
        rows[f"{layer}.{site}"] = {"calibrated": eps, "needed": _summary(needed),
                                   "tokens_above_calibrated": float(np.mean(needed > eps))}
    return rows


def _plan(args, model, alpha):
    a1, a3 = alpha
    return SparsityPlan.from_free(args.p, a1, a3, model.config.mlp_ratio)


def cmd_calibrate(args):
    model = load_model(args)
    calib, _, sources = token_sets(args, model.config.vocab)
    rotations = layer_rotations(model, calib)
    if args.out:
        save_rotations(rotations, args.out, model.config)
    return {
        "command": "calibrate", "config": run_config(args, model), "tokens": sources,
        "eigenvalues": [r.eigvals.tolist() for r in rotations], "output": args.out,
    }


def cmd_merge(args):
    model = load_model(args)
    calib, _, sources = token_sets(args, model.config.vocab)
    rotations = load_rotations(args.rotations) if args.rotations else layer_rotations(model, calib)
    rotated = merge_rotations(model, rotations)
    if args.out:
        save_weights(rotated, args.out)
    return {"command": "merge", "config": run_config(args, model), "tokens": sources,
            "adapters": len(rotated.residual_adapters), "output": args.out}


def cmd_eval(args):
    if not 0.0 <= args.p <= 1.0:
        raise InputError(f"--p must be in [0, 1], got {args.p}")
    model = load_model(args)
    calib, held, sources = token_sets(args, model.config.vocab)
    dense = forward_batch(model, held, Mode.DENSE)
    mode = args.mode
    alpha = args.alpha or (1.0, 1.0)
    report = {"command": "eval", "config": run_config(args, model), "tokens": sources, "mode": mode}
    record = {}
    if mode == "dense":
        out = forward_batch(model, held, Mode.DENSE, record=record)
    elif mode in ("larosa", "topk"):
        target = model
        if mode == "larosa":
            target = merge_rotations(model, layer_rotations(model, calib))
        if args.search:
            if not 0.0 < args.p < 1.0:
                raise InputError("--search needs --p strictly between 0 and 1")
            result = grid_search(model, target, held, args.p, SearchSpace(), calib_seqs=calib)
            alpha = (result.alpha[0], result.alpha[2])
        plan = _plan(args, model, alpha)
        report["alpha"] = list(plan.alpha)
        report["k_per_site"] = plan.k_per_site(model.config.site_dims())
        out = forward_batch(target, held, SiteSparsifier(Mode.LAROSA, plan, model.config), record=record)
    else:
        sites = ("h4",) if mode == "cats" else SITES
        table = calibrate_thresholds(model, calib, args.p, sites=sites)
        out = forward_batch(model, held, SiteSparsifier(Mode(mode), table, model.config), record=record)
        report["thresholds"] = threshold_report(table, record, args.p)
    err = model_output_error(out, dense)
    report["relative_logit_error"] = err.to_dict()
    report["sparsity"] = sparsity_report(record)
    return report


def cmd_search(args):
    model = load_model(args)
    calib, held, sources = token_sets(args, model.config.vocab)
    rotated = merge_rotations(model, layer_rotations(model, calib))
    result = grid_search(model, rotated, held, args.p, SearchSpace(), calib_seqs=calib)
    if args.out:
        with open(args.out, "w") as f:
            f.write(result.trace_csv())
    return {"command": "search", "config": run_config(args, model), "tokens": sources,
            "alpha": list(result.alpha), "objective": result.objective,
            "grid_points": len(result.trace), "trace_output": args.out}


def cmd_theory(args):
    keep = tuple(1.0 - s for s in args.levels if 0.0 < s < 1.0)
    mc = theory_table(args.d_in, args.d_out, keep_fractions=keep, samples=args.samples, seed=args.seed)
    model = load_model(args)
    calib, held, sources = token_sets(args, model.config.vocab)
    rotated = merge_rotations(model, layer_rotations(model, calib))
    emp = empirical_error_table(model, rotated, held, args.levels)
    if args.out:
        with open(args.out, "w") as f:
            f.write("sparsity,theory,rotated_topk,magnitude\n")
            for r in emp:
                f.write(f"{r['sparsity']},{r['theory']!r},{r['rotated_topk']!r},{r['magnitude']!r}\n")
    return {"command": "theory", "config": run_config(args, model), "tokens": sources,
            "monte_carlo": mc, "empirical": emp, "table_output": args.out}


def cmd_bench(args):
    rep = bench(args.d_in, args.d_out, args.levels, reps=args.reps, seed=args.seed)
    if args.out:
        with open(args.out, "w") as f:
            f.write(rep.to_csv())
    return {"command": "bench", "config": run_config(args, None), "rows": rep.rows(), "csv_output": args.out}


COMMANDS = {
    "calibrate": cmd_calibrate, "merge": cmd_merge, "eval": cmd_eval,
    "search": cmd_search, "theory": cmd_theory, "bench": cmd_bench,
}


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        report = COMMANDS[args.command](args)
    except RosaError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    text = json.dumps(report, indent=2, default=float)
    if args.report:
        with open(args.report, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
