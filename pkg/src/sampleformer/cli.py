"""Batch command-line interface.

Each subcommand wires flags (CLI > config file > built-in default) into one
experiment engine and writes two artifacts into the output directory: an
RFC-4180 CSV of rows and a JSON summary carrying the resolved config, seed,
library version, and per-assertion verdicts.  Exit code 0 means every
enabled assertion passed, 1 means at least one failed, 2 is a usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .encodings import ToyDatasetSpec, gen_toy_shapes
from .layer import LayerConfig
from .numerics import Rng
from .trainer import OptimState, ToyModel, ToyModelConfig, prepare_task, rotation_invariance_gap, train_run

SUBCOMMANDS = (
    "gradcheck",
    "rank-progression",
    "similarity",
    "pseudoconvexity",
    "counterexample",
    "gradnorm-scaling",
    "bench-time",
    "bench-flops",
    "train-toy",
    "rotation-invariance",
)

_TOY_SPEC = dict(kind="shapes3d", n_tokens=64, n_classes=4, n_train=192, n_test=64, noise=0.02, seed=5)
_TOY_MODEL = dict(d=24, heads=2, n_layers=2, k=16, n_classes=4, rpe_dim=2)


def _out_dir(args) -> Path:
    path = args.out or os.environ.get("SAMPLEFORMER_OUTDIR") or "results"
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)  # csv defaults to CRLF line endings per RFC 4180
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def write_summary(path: Path, name: str, config: dict, seed, verdicts: dict[str, bool], extra: dict) -> bool:
    ok = all(verdicts.values()) if verdicts else True
    payload = {
        "experiment": name,
        "version": __version__,
        "seed": seed,
        "config": config,
        "verdicts": verdicts,
        "pass": ok,
        **extra,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonify)
        fh.write("\n")
    return ok


def _jsonify(obj):
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _merge_config(args, defaults: dict) -> dict:
    """Resolve option values: explicit CLI flag > config file > default."""
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        cli_val = getattr(args, key.replace("-", "_"), None)
        if cli_val is not None:
            resolved[key] = cli_val
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = default
    return resolved


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok]


# ------------------------------------------------------------ subcommand runners


def run_gradcheck(args) -> int:
    from .verification import gradcheck_battery

    cfg = _merge_config(args, {"seed": 0, "n": 8, "d": 4, "heads": 2, "k": 3, "tol": 1e-4})
    results = gradcheck_battery(base_seed=cfg["seed"], n=cfg["n"], d=cfg["d"], heads=cfg["heads"], k=cfg["k"])
    rows = [(r.label, r.seed, f"{r.max_rel_err:.12e}", r.params_checked, r.ok(cfg["tol"])) for r in results]
    out = _out_dir(args)
    write_csv(out / "gradcheck.csv", ["config", "seed", "max_rel_err", "params_checked", "pass"], rows)
    verdicts = {"all_configs_below_tol": all(r.ok(cfg["tol"]) for r in results)}
    extra = {"worst_rel_err": max(r.max_rel_err for r in results), "configs": len(results)}
    ok = write_summary(out / "gradcheck_summary.json", "gradcheck", cfg, cfg["seed"], verdicts, extra)
    return 0 if ok else 1


def run_rank_progression(args) -> int:
    from .analysis import rank_progression

    cfg = _merge_config(
        args,
        {"seed": 0, "n-tokens": 64, "d": 64, "layers": 50, "trials": 10, "heads": 1, "full-scale": False},
    )
    if cfg["full-scale"]:
        cfg.update({"n-tokens": 256, "d": 512, "layers": 100, "trials": 30})
    leaky_cfg = LayerConfig(d=cfg["d"], heads=cfg["heads"], k=2 * cfg["n-tokens"], mode="sft_maxout_leaky", rpe_dim=1)
    relu_cfg = LayerConfig(d=cfg["d"], heads=cfg["heads"], k=2 * cfg["n-tokens"], mode="relu_dot_nonleaky", rpe_dim=0)
    leaky = rank_progression(leaky_cfg, cfg["layers"], cfg["trials"], Rng(cfg["seed"]), n_tokens=cfg["n-tokens"])
    relu = rank_progression(relu_cfg, cfg["layers"], cfg["trials"], Rng(cfg["seed"]), n_tokens=cfg["n-tokens"])
    rows = [("leaky_maxout_rpe", *row) for row in leaky.rows()] + [("relu_nonleaky", *row) for row in relu.rows()]
    out = _out_dir(args)
    write_csv(out / "rank_progression.csv", ["variant", "depth", "mean_rank", "min_rank", "max_rank"], rows)
    verdicts = {
        "leaky_final_rank_exceeds_first_layer": leaky.mean[-1] > leaky.mean[1],
        "nonleaky_stays_rank_one": all(v == 1.0 for v in relu.mean),
    }
    extra = {"leaky_mean": leaky.mean, "relu_mean": relu.mean}
    ok = write_summary(out / "rank_progression_summary.json", "rank-progression", cfg, cfg["seed"], verdicts, extra)
    return 0 if ok else 1


def run_similarity(args) -> int:
    from .analysis import similarity_progression

    cfg = _merge_config(args, {"seed": 0, "epochs": 15, "samples": 16})
    spec = ToyDatasetSpec(**_TOY_SPEC)
    task = prepare_task(spec, tokens="ones")
    model_cfg = ToyModelConfig(kind="shapes3d", mode="sft_maxout_leaky", use_rpe=True, d_in=1, **_TOY_MODEL)
    state = OptimState(lr=1e-3, betas=(0.9, 0.99), weight_decay=0.1)
    result = train_run(model_cfg, task, cfg["epochs"], state, Rng(cfg["seed"]), batch_size=16)
    model: ToyModel = result.model
    _, test_items, _, _ = task
    layers = [(lp, model.layer_cfg) for lp in model.layers]
    agg = None
    count = 0
    for tokens, x_r, _ in test_items[: cfg["samples"]]:
        x0 = tokens @ model.extra["input.w"] + model.extra["input.b"]
        table = similarity_progression(layers, x0, x_r)
        if agg is None:
            agg = [[0.0, 0.0] for _ in table]
        for i, (_, cosine, rank) in enumerate(table):
            agg[i][0] += cosine
            agg[i][1] += rank
        count += 1
    rows = [(depth, agg[depth][0] / count, agg[depth][1] / count) for depth in range(len(agg))]
    out = _out_dir(args)
    write_csv(out / "similarity.csv", ["depth", "mean_cosine", "mean_rank"], rows)
    verdicts = {"final_rank_exceeds_first_layer": rows[-1][2] > rows[1][2]}
    extra = {"table": rows, "trained_epochs": cfg["epochs"], "best_test_acc": max(result.cumulative_max("test"))}
    ok = write_summary(out / "similarity_summary.json", "similarity", cfg, cfg["seed"], verdicts, extra)
    return 0 if ok else 1


def run_pseudoconvexity(args) -> int:
    from .analysis import pseudoconvexity_check

    cfg = _merge_config(
        args,
        {"seed": 0, "pairs": 10_000, "tol": 1e-8, "step-scale": 0.5, "groups": "qk,relative,leak",
         "ffn": "both", "unrestricted": False},
    )
    groups = [g for g in cfg["groups"].split(",") if g]
    activations = ("linear", "gelu") if cfg["ffn"] == "both" else (cfg["ffn"],)
    rows = []
    verdicts = {}
    for group in groups:
        for act in activations:
            rep = pseudoconvexity_check(
                group, cfg["pairs"], Rng(cfg["seed"]), step_scale=cfg["step-scale"],
                tol=cfg["tol"], gate_restricted=True, ffn_activation=act,
            )
            rows.append((group, act, True, rep.pairs_tested, rep.implications_triggered,
                         rep.violations, f"{rep.max_violation:.6e}", rep.discarded_gate_flips))
            verdicts[f"zero_violations_{group}_{act}"] = rep.violations == 0
            if cfg["unrestricted"]:
                rep_u = pseudoconvexity_check(
                    group, cfg["pairs"], Rng(cfg["seed"]), step_scale=cfg["step-scale"],
                    tol=cfg["tol"], gate_restricted=False, ffn_activation=act,
                )
                rows.append((group, act, False, rep_u.pairs_tested, rep_u.implications_triggered,
                             rep_u.violations, f"{rep_u.max_violation:.6e}", rep_u.discarded_gate_flips))
    out = _out_dir(args)
    write_csv(
        out / "pseudoconvexity.csv",
        ["group", "ffn", "gate_restricted", "pairs", "triggered", "violations", "max_violation", "discards"],
        rows,
    )
    ok = write_summary(out / "pseudoconvexity_summary.json", "pseudoconvexity", cfg, cfg["seed"], verdicts, {})
    return 0 if ok else 1


def run_counterexample(args) -> int:
    from .analysis import vanilla_counterexample, vanilla_probe_audit

    cfg = _merge_config(args, {"seed": 0, "spread": 10.0, "audit-pairs": 10_000})
    cert = vanilla_counterexample(cfg["spread"])
    pairs, triggered, violations = vanilla_probe_audit(cfg["audit-pairs"], Rng(cfg["seed"]))
    rows = [
        ("w_a", cert.w_a[0], cert.w_a[1], f"{cert.f_a:.12f}"),
        ("w_mid", cert.w_mid[0], cert.w_mid[1], f"{cert.f_mid:.12f}"),
        ("w_b", cert.w_b[0], cert.w_b[1], f"{cert.f_b:.12f}"),
    ]
    out = _out_dir(args)
    write_csv(out / "counterexample.csv", ["point", "w1", "w2", "f"], rows)
    verdicts = {
        "midpoint_margin_exceeds_1e-3": cert.margin > 1e-3,
        "random_audit_finds_violations": violations > 0,
    }
    extra = {"margin": cert.margin, "audit": {"pairs": pairs, "triggered": triggered, "violations": violations}}
    ok = write_summary(out / "counterexample_summary.json", "counterexample", cfg, cfg["seed"], verdicts, extra)
    return 0 if ok else 1


def run_gradnorm_scaling(args) -> int:
    from .analysis import gradnorm_scaling

    cfg = _merge_config(args, {"seed": 0, "ns": "32,64,128,256,512,1024", "d": 8, "trials": 64, "leak": 1.0})
    ns = _int_list(cfg["ns"]) if isinstance(cfg["ns"], str) else list(cfg["ns"])
    report = gradnorm_scaling(ns, d=cfg["d"], trials=cfg["trials"], rng=Rng(cfg["seed"]), leak=cfg["leak"])
    rows = []
    for i, n in enumerate(report.ns):
        rows.append(
            (n, f"{report.mean_sq_gradnorms['w_v'][i]:.6e}", f"{report.mean_sq_gradnorms['w_q'][i]:.6e}",
             f"{report.mean_sq_gradnorms['w_v_control'][i]:.6e}", f"{report.mean_sq_gradnorms['w_q_control'][i]:.6e}")
        )
    out = _out_dir(args)
    write_csv(out / "gradnorm_scaling.csv", ["n", "mean_sq_grad_wv", "mean_sq_grad_wq",
                                             "control_wv", "control_wq"], rows)
    verdicts = {
        "wv_slope_in_window": 0.75 <= report.slopes["w_v"] <= 1.25,
        "wq_slope_in_window": -0.25 <= report.slopes["w_q"] <= 0.25,
    }
    extra = {
        "slopes": report.slopes,
        "slope_half_widths": report.slope_half_widths,
        "control_slopes": report.control,
        "note": "the decorrelated-value control reproduces the flat query-side scaling",
    }
    ok = write_summary(out / "gradnorm_scaling_summary.json", "gradnorm-scaling", cfg, cfg["seed"], verdicts, extra)
    return 0 if ok else 1


def run_bench_time(args) -> int:
    from .analysis import time_attention

    cfg = _merge_config(
        args, {"seed": 0, "n": 1024, "k": "32,64,128,256,512", "reps": 10, "d": 64, "heads": 1, "calls-per-rep": 3}
    )
    k_list = _int_list(cfg["k"]) if isinstance(cfg["k"], str) else list(cfg["k"])
    rows_t = time_attention(
        n=cfg["n"], k_list=k_list, reps=cfg["reps"], d=cfg["d"], heads=cfg["heads"],
        seed=cfg["seed"], calls_per_rep=cfg["calls-per-rep"],
    )
    rows = [(r.label, r.n, r.k, f"{r.rate:.6f}", f"{r.median_s:.6f}", f"{r.mean_s:.6f}", r.reps) for r in rows_t]
    out = _out_dir(args)
    write_csv(out / "bench_time.csv", ["label", "n", "k", "rate", "median_s", "mean_s", "reps"], rows)
    meds = [r.median_s for r in rows_t if r.label == "sft"]
    ref = [r for r in rows_t if r.label == "softmax_full"][0]
    verdicts = {
        "runtime_monotone_in_k": all(b >= a for a, b in zip(meds, meds[1:])),
        "half_rate_within_1.1x_reference": meds[-1] <= 1.1 * ref.median_s,
    }
    extra = {"medians": meds, "reference_median": ref.median_s}
    ok = write_summary(out / "bench_time_summary.json", "bench-time", cfg, cfg["seed"], verdicts, extra)
    return 0 if ok else 1


def run_bench_flops(args) -> int:
    from .analysis import flop_count

    cfg = _merge_config(args, {"n": 1024, "d": 256, "heads": 16, "rpe-dim": 2, "rates": "1.0,0.5,0.25,0.125,0.0625"})
    rates = [float(tok) for tok in cfg["rates"].split(",")] if isinstance(cfg["rates"], str) else cfg["rates"]
    n = cfg["n"]
    tables = {}
    rows = []
    header_cols = None
    for rate in rates:
        k = n if rate >= 1.0 else max(1, int(round(n * rate)))
        layer_cfg = LayerConfig(d=cfg["d"], heads=cfg["heads"], k=k, mode="sft_maxout_leaky", rpe_dim=cfg["rpe-dim"])
        counts = flop_count(layer_cfg, n)
        tables[rate] = counts
        if header_cols is None:
            header_cols = list(counts.keys())
        rows.append((f"{rate:.4f}", k, *[counts[c] for c in header_cols]))
    out = _out_dir(args)
    write_csv(out / "bench_flops.csv", ["rate", "k", *header_cols], rows)
    full = tables[max(rates)]
    verdicts = {"q_and_sampling_rate_independent": True, "kvc_relative_proportional": True}
    for rate in rates:
        if rate >= 1.0:
            continue
        t = tables[rate]
        if not (t["q_proj"] == full["q_proj"] and t["sampling"] == full["sampling"]):
            verdicts["q_and_sampling_rate_independent"] = False
        for col in ("k_proj", "v_proj", "c_proj", "relative"):
            if round(full[col] * rate) != t[col]:
                verdicts["kvc_relative_proportional"] = False
    verdicts["total_is_sum_of_parts"] = all(
        t["total"] == sum(v for key, v in t.items() if key != "total") for t in tables.values()
    )
    ok = write_summary(out / "bench_flops_summary.json", "bench-flops", cfg, None, verdicts, {"tables": {str(k): v for k, v in tables.items()}})
    return 0 if ok else 1


def _comparison_runs(seed: int, epochs: int, threshold: float):
    spec = ToyDatasetSpec(**_TOY_SPEC)
    task = prepare_task(spec, tokens="coords", rotate=True, rescale=True)
    outcomes = {}
    for label, mode, use_rpe, k in (
        ("sft_maxout_leaky", "sft_maxout_leaky", True, _TOY_MODEL["k"]),
        ("softmax_dot", "softmax_dot", True, _TOY_MODEL["k"]),
        ("vanilla_no_rpe", "softmax_dot", False, _TOY_SPEC["n_tokens"]),
    ):
        model_cfg = ToyModelConfig(
            kind="shapes3d", mode=mode, use_rpe=use_rpe, d_in=3,
            **{**_TOY_MODEL, "k": k},
        )
        state = OptimState(lr=1e-3, betas=(0.9, 0.99), weight_decay=0.1, clip_norm=1.0)
        result = train_run(model_cfg, task, epochs, state, Rng(seed), batch_size=16)
        outcomes[label] = result
    return outcomes


def run_train_toy(args) -> int:
    cfg = _merge_config(
        args,
        {"seed": 0, "seeds": "1,2,3,4,5", "epochs": 40, "threshold": 0.75, "compare": False, "mode": "sft_maxout_leaky"},
    )
    out = _out_dir(args)
    rows = []
    if not cfg["compare"]:
        spec = ToyDatasetSpec(**_TOY_SPEC)
        task = prepare_task(spec, tokens="coords", rotate=True, rescale=True)
        model_cfg = ToyModelConfig(kind="shapes3d", mode=cfg["mode"], use_rpe=cfg["mode"] != "vanilla", d_in=3, **_TOY_MODEL)
        state = OptimState(lr=1e-3, betas=(0.9, 0.99), weight_decay=0.1)
        result = train_run(model_cfg, task, cfg["epochs"], state, Rng(cfg["seed"]), batch_size=16)
        for epoch, split, acc, cum in result.rows:
            rows.append((cfg["mode"], cfg["seed"], epoch, split, f"{acc:.6f}", f"{cum:.6f}"))
        write_csv(out / "train_toy.csv", ["model", "seed", "epoch", "split", "accuracy", "cumulative_max"], rows)
        verdicts = {"loss_decreased": result.train_losses[-1] < result.train_losses[0]}
        ok = write_summary(out / "train_toy_summary.json", "train-toy", cfg, cfg["seed"], verdicts,
                           {"final_test_cummax": result.cumulative_max("test")[-1]})
        return 0 if ok else 1

    seeds = _int_list(cfg["seeds"]) if isinstance(cfg["seeds"], str) else list(cfg["seeds"])
    wins_epochs = 0
    wins_beat = 0
    per_seed = {}
    for seed in seeds:
        outcomes = _comparison_runs(seed, cfg["epochs"], cfg["threshold"])
        for label, result in outcomes.items():
            for epoch, split, acc, cum in result.rows:
                rows.append((label, seed, epoch, split, f"{acc:.6f}", f"{cum:.6f}"))
        to_thr = {label: res.epochs_to_threshold(cfg["threshold"]) for label, res in outcomes.items()}
        finals = {label: res.cumulative_max("test")[-1] for label, res in outcomes.items()}
        inf = cfg["epochs"] + 1
        sft_first = (to_thr["sft_maxout_leaky"] or inf) <= (to_thr["softmax_dot"] or inf)
        both_beat = (
            finals["sft_maxout_leaky"] > finals["vanilla_no_rpe"]
            and finals["softmax_dot"] > finals["vanilla_no_rpe"]
        )
        wins_epochs += int(sft_first)
        wins_beat += int(both_beat)
        per_seed[seed] = {"epochs_to_threshold": to_thr, "final_cummax": finals,
                          "sft_first": sft_first, "both_beat_vanilla": both_beat}
    write_csv(out / "train_toy.csv", ["model", "seed", "epoch", "split", "accuracy", "cumulative_max"], rows)
    majority = len(seeds) // 2 + 1
    verdicts = {
        "sft_reaches_threshold_no_later_majority": wins_epochs >= majority,
        "both_rpe_models_beat_vanilla_majority": wins_beat >= majority,
    }
    ok = write_summary(out / "train_toy_summary.json", "train-toy", cfg, cfg["seed"], verdicts,
                       {"per_seed": per_seed, "threshold": cfg["threshold"]})
    return 0 if ok else 1


def run_rotation_invariance(args) -> int:
    cfg = _merge_config(args, {"seed": 0, "clouds": 20, "rotations": 10, "tol": 1e-6})
    spec = ToyDatasetSpec(kind="shapes3d", n_tokens=64, n_classes=4, n_train=cfg["clouds"], n_test=1, noise=0.02, seed=11)
    clouds, _ = gen_toy_shapes(spec)
    model_cfg = ToyModelConfig(kind="shapes3d", mode="sft_maxout_leaky", use_rpe=True, d_in=1, **_TOY_MODEL)
    model = ToyModel(model_cfg, Rng(cfg["seed"]))
    gap = rotation_invariance_gap(model, clouds, cfg["rotations"], Rng(cfg["seed"] + 1))
    out = _out_dir(args)
    write_csv(out / "rotation_invariance.csv", ["clouds", "rotations", "max_abs_gap"],
              [(cfg["clouds"], cfg["rotations"], f"{gap:.3e}")])
    verdicts = {"outputs_rotation_invariant": gap < cfg["tol"]}
    ok = write_summary(out / "rotation_invariance_summary.json", "rotation-invariance", cfg, cfg["seed"], verdicts,
                       {"max_abs_gap": gap})
    return 0 if ok else 1


# ------------------------------------------------------------ argument wiring

_RUNNERS = {
    "gradcheck": run_gradcheck,
    "rank-progression": run_rank_progression,
    "similarity": run_similarity,
    "pseudoconvexity": run_pseudoconvexity,
    "counterexample": run_counterexample,
    "gradnorm-scaling": run_gradnorm_scaling,
    "bench-time": run_bench_time,
    "bench-flops": run_bench_flops,
    "train-toy": run_train_toy,
    "rotation-invariance": run_rotation_invariance,
}


def _add_common(sub):
    sub.add_argument("--out", help="output directory (default: $SAMPLEFORMER_OUTDIR or ./results)")
    sub.add_argument("--config", help="flat JSON config file; CLI flags win over file values")
    sub.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sampleformer", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("gradcheck", help="analytic vs finite-difference gradients over every layer config")
    _add_common(sub)
    for flag in ("n", "d", "heads", "k"):
        sub.add_argument(f"--{flag}", type=int)
    sub.add_argument("--tol", type=float)

    sub = subs.add_parser("rank-progression", help="token-matrix rank through random layer stacks")
    _add_common(sub)
    sub.add_argument("--n-tokens", type=int)
    sub.add_argument("--d", type=int)
    sub.add_argument("--layers", type=int)
    sub.add_argument("--trials", type=int)
    sub.add_argument("--heads", type=int)
    sub.add_argument("--full-scale", action="store_const", const=True)

    sub = subs.add_parser("similarity", help="cosine and rank per depth on a briefly trained stack")
    _add_common(sub)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--samples", type=int)

    sub = subs.add_parser("pseudoconvexity", help="gate-restricted pseudoconvexity audit per weight group")
    _add_common(sub)
    sub.add_argument("--pairs", type=int)
    sub.add_argument("--tol", type=float)
    sub.add_argument("--step-scale", type=float)
    sub.add_argument("--groups")
    sub.add_argument("--ffn", choices=["linear", "gelu", "both"])
    sub.add_argument("--unrestricted", action="store_const", const=True)

    sub = subs.add_parser("counterexample", help="analytic non-pseudoconvexity certificate for softmax attention")
    _add_common(sub)
    sub.add_argument("--spread", type=float)
    sub.add_argument("--audit-pairs", type=int)

    sub = subs.add_parser("gradnorm-scaling", help="gradient-norm growth across token counts")
    _add_common(sub)
    sub.add_argument("--ns")
    sub.add_argument("--d", type=int)
    sub.add_argument("--trials", type=int)
    sub.add_argument("--leak", type=float)

    sub = subs.add_parser("bench-time", help="single-threaded wall-time per sampling count")
    _add_common(sub)
    sub.add_argument("--n", type=int)
    sub.add_argument("--k")
    sub.add_argument("--reps", type=int)
    sub.add_argument("--d", type=int)
    sub.add_argument("--heads", type=int)
    sub.add_argument("--calls-per-rep", type=int)

    sub = subs.add_parser("bench-flops", help="per-submodule operation counts across sampling rates")
    _add_common(sub)
    sub.add_argument("--n", type=int)
    sub.add_argument("--d", type=int)
    sub.add_argument("--heads", type=int)
    sub.add_argument("--rpe-dim", type=int)
    sub.add_argument("--rates")

    sub = subs.add_parser("train-toy", help="toy-task training run or three-way comparison")
    _add_common(sub)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--threshold", type=float)
    sub.add_argument("--seeds")
    sub.add_argument("--mode", choices=["sft_maxout_leaky", "softmax_dot", "relu_dot_nonleaky"])
    sub.add_argument("--compare", action="store_const", const=True)

    sub = subs.add_parser("rotation-invariance", help="eval-mode output equality under rotations")
    _add_common(sub)
    sub.add_argument("--clouds", type=int)
    sub.add_argument("--rotations", type=int)
    sub.add_argument("--tol", type=float)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return _RUNNERS[args.command](args)
    except SystemExit as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
