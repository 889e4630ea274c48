"""Command-line pipeline: pretrain, teacher generation, block removal,
evaluation, analysis, and report rendering.

Every subcommand takes --seed (falling back to the HOPSCOTCH_SEED
environment variable, then 0) and is reproducible end to end: the same
invocation writes byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import analysis, charts, persist, selection
from .data import (
    TASK_KINDS,
    VOCAB,
    DataError,
    TaskSpec,
    build_teacher_set,
    gen_task,
    load_samples,
    save_samples,
)
from .model import ModelConfig, ScaleSet
from .selection import HopscotchConfig, full_greedy, run_hopscotch, run_random
from .train import TrainConfig, derive_seed, evaluate, pretrain


def _add_task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=TASK_KINDS, default="arith-chain")
    p.add_argument("--chain-len", type=int, default=3, help="max operands in a chain")
    p.add_argument("--modulus", type=int, default=100)
    p.add_argument("--str-len", type=int, default=6, help="string length for copy/reverse/parity")


def _task_spec(args, seed: int) -> TaskSpec:
    return TaskSpec(
        kind=args.task,
        chain_len=args.chain_len,
        modulus=args.modulus,
        str_len=args.str_len,
        seed=seed,
    )


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("HOPSCOTCH_SEED", "0"))


def _parse_layers(text: str, n_layers: int) -> list[int]:
    """Layer selections like '2,5,7' or '0..7' (inclusive range)."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        layers = list(range(int(lo), int(hi) + 1))
    else:
        layers = [int(t) for t in text.split(",") if t]
    for l in layers:
        if not 0 <= l < n_layers:
            raise ValueError(f"layer {l} outside [0, {n_layers})")
    return layers


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hopscotch",
        description="Learn which attention blocks to skip and how to rescale the rest.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a base model on a synthetic task")
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn", type=int, default=512)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--steps", type=int, default=6000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--target-accuracy", type=float, default=0.9)
    _add_task_flags(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("teacher", help="generate teacher targets with the base model")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--max-new", type=int, default=None)
    _add_task_flags(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_teacher)

    p = sub.add_parser("run", help="remove attention blocks and rescale")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="teacher JSONL")
    stop = p.add_mutually_exclusive_group(required=True)
    stop.add_argument("--remove", type=int, default=None, help="number of blocks to remove")
    stop.add_argument("--loss-threshold", type=float, default=None)
    p.add_argument("--strategy", choices=selection.STRATEGIES, default="iterative")
    p.add_argument("--no-rescale", action="store_true", help="random strategy only")
    p.add_argument("--probe-lr", type=float, default=1e-2)
    p.add_argument("--rescale-lr", type=float, default=3e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--eval-n", type=int, default=0, help="teacher rows held for per-step eval")
    p.add_argument("--probe-parallel", type=int, default=1, metavar="N")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on fresh task samples")
    p.add_argument("--model", required=True)
    p.add_argument("--metric", choices=("strict", "flexible"), default="flexible")
    p.add_argument("--n", type=int, default=200)
    _add_task_flags(p)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    pa = sub.add_parser("analyze", help="diagnostics")
    asub = pa.add_subparsers(dest="analysis", required=True)

    p = asub.add_parser("mmd", help="hidden-state shift vs the original model")
    p.add_argument("--base", required=True)
    p.add_argument("--variant", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layers", default=None, help="e.g. 0..7 or 2,5,6")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze_mmd)

    p = asub.add_parser("svd", help="largest singular value per weight matrix")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze_svd)

    p = asub.add_parser("efficiency", help="savings arithmetic for removed blocks")
    p.add_argument("--params", type=float, required=True)
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--attn-frac", type=float, default=0.66)
    p.add_argument("--bytes-per-param", type=int, default=2)
    p.add_argument("--removed", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze_efficiency)

    p = asub.add_parser("spearman", help="rank correlation of two numeric lists")
    p.add_argument("--xs", required=True, help="comma-separated")
    p.add_argument("--ys", required=True, help="comma-separated")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_analyze_spearman)

    p = sub.add_parser("report", help="render CSVs and SVG charts from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_report)

    return parser


def cmd_pretrain(args, parser) -> int:
    seed = _resolve_seed(args)
    config = ModelConfig(
        n_layers=args.layers,
        d_model=args.dim,
        n_heads=args.heads,
        d_ff=args.ffn,
        vocab_size=len(VOCAB),
        max_seq_len=args.max_len,
    )
    result = pretrain(
        config,
        _task_spec(args, seed),
        steps=args.steps,
        lr=args.lr,
        seed=seed,
        batch_size=args.batch,
        target_accuracy=args.target_accuracy,
    )
    ckpt = persist.Checkpoint.of(
        result.weights,
        ScaleSet.ones(config.n_layers),
        provenance={
            "seed": seed,
            "command": "pretrain",
            "parent_hash": None,
            "steps_run": result.steps_run,
            "final_accuracy": result.final_accuracy,
        },
    )
    persist.save_checkpoint(args.out, ckpt)
    print(f"pretrained {result.steps_run} steps, flexible accuracy {result.final_accuracy:.3f}")
    print(f"wrote {args.out}")
    return 0


def cmd_teacher(args, parser) -> int:
    seed = _resolve_seed(args)
    ckpt = persist.load_checkpoint(args.model)
    spec = _task_spec(args, derive_seed(seed, "teacher-prompts"))
    prompts = [s.prompt for s in gen_task(spec, args.n)]
    samples = build_teacher_set(ckpt.weights, prompts, max_new=args.max_new)
    save_samples(args.out, samples)
    print(f"wrote {len(samples)} teacher rows to {args.out}")
    return 0


def cmd_run(args, parser) -> int:
    seed = _resolve_seed(args)
    if args.no_rescale and args.strategy != "random":
        parser.error("--no-rescale requires --strategy random")
    if args.strategy != "iterative" and args.remove is None:
        parser.error(f"--strategy {args.strategy} requires --remove")
    ckpt = persist.load_checkpoint(args.model)
    data = load_samples(args.data)
    eval_set = data[: args.eval_n] if args.eval_n else None
    cfg = HopscotchConfig(
        remove_count=args.remove,
        loss_threshold=args.loss_threshold,
        probe_lr=args.probe_lr,
        rescale=TrainConfig(
            learning_rate=args.rescale_lr, batch_size=args.batch, epochs=args.epochs
        ),
    )
    if args.strategy == "iterative":
        scales, mask, trace = run_hopscotch(
            ckpt.weights, data, cfg, seed, eval_set, workers=args.probe_parallel
        )
    elif args.strategy == "full-greedy":
        scales, mask, trace = full_greedy(
            ckpt.weights, data, args.remove, cfg, seed, eval_set, workers=args.probe_parallel
        )
    else:
        scales, mask, trace = run_random(
            ckpt.weights, data, args.remove, cfg, seed, rescale=not args.no_rescale,
            eval_set=eval_set,
        )
    provenance = {
        "seed": seed,
        "command": f"run --strategy {args.strategy}",
        "parent_hash": persist.file_hash(args.model),
    }
    persist.save_checkpoint(args.out, persist.Checkpoint.of(ckpt.weights, scales, provenance))
    print(f"removed layers {mask.sorted()}; wrote {args.out}")
    if args.trace:
        eval_results = {}
        if trace.baseline_accuracy:
            eval_results["baseline"] = trace.baseline_accuracy
        for i, st in enumerate(trace.steps):
            if st.eval_accuracy:
                eval_results[f"step{i + 1}"] = st.eval_accuracy
        report = persist.RunReport(
            trace=trace, eval_results=eval_results, provenance=provenance
        )
        persist.save_trace(args.trace, report)
        print(f"wrote {args.trace}")
    return 0


def cmd_eval(args, parser) -> int:
    seed = _resolve_seed(args)
    ckpt = persist.load_checkpoint(args.model)
    samples = gen_task(_task_spec(args, derive_seed(seed, "eval")), args.n)
    acc = evaluate(ckpt.weights, ckpt.scales, samples, args.metric)
    print(f"{args.metric} accuracy: {acc:.4f} ({args.n} samples)")
    return 0


def cmd_analyze_mmd(args, parser) -> int:
    base = persist.load_checkpoint(args.base)
    variant = persist.load_checkpoint(args.variant)
    data = load_samples(args.data)
    n_layers = base.weights.config.n_layers
    layers = (
        list(range(n_layers)) if args.layers is None else _parse_layers(args.layers, n_layers)
    )
    rows = analysis.mmd_report(
        base.weights, data, variant.scales, variant.mask, layers, batch_size=args.batch
    )
    print("layer  mmd2(noscale)  mmd2(hopscotch)")
    for l in layers:
        print(f"{l:5d}  {rows[l]['noscale']:13.6f}  {rows[l]['hopscotch']:15.6f}")
    if args.out:
        persist.write_csv(
            args.out,
            ["layer", "mmd2_noscale", "mmd2_hopscotch"],
            [[l, rows[l]["noscale"], rows[l]["hopscotch"]] for l in layers],
        )
        print(f"wrote {args.out}")
    return 0


def cmd_analyze_svd(args, parser) -> int:
    ckpt = persist.load_checkpoint(args.model)
    report = analysis.max_singular_values(ckpt.weights)
    print("matrix  sigma_max")
    for name, sv in report.sigma_max.items():
        print(f"{name}  {sv:.6f}")
    if args.out:
        persist.write_csv(
            args.out, ["matrix", "sigma_max"], [[n, v] for n, v in report.sigma_max.items()]
        )
        print(f"wrote {args.out}")
    return 0


def cmd_analyze_efficiency(args, parser) -> int:
    rep = analysis.efficiency_report(
        analysis.EfficiencyInput(
            total_params=args.params,
            n_layers=args.layers,
            removed=args.removed,
            attn_time_fraction=args.attn_frac,
            bytes_per_param=args.bytes_per_param,
        )
    )
    print(f"time reduction: {rep['time_reduction_pct']:.2f}%")
    print(f"param reduction: {rep['param_reduction_pct']:.2f}%")
    print(f"memory saved: {rep['memory_reduction_bytes'] / 1e9:.2f} GB")
    if args.out:
        persist.write_csv(
            args.out,
            ["removed", "time_reduction_pct", "param_reduction_pct", "memory_reduction_bytes"],
            [
                [
                    args.removed,
                    rep["time_reduction_pct"],
                    rep["param_reduction_pct"],
                    rep["memory_reduction_bytes"],
                ]
            ],
        )
        print(f"wrote {args.out}")
    return 0


def cmd_analyze_spearman(args, parser) -> int:
    xs = [float(t) for t in args.xs.split(",") if t]
    ys = [float(t) for t in args.ys.split(",") if t]
    print(f"spearman: {analysis.spearman(xs, ys):.6f}")
    return 0


def cmd_report(args, parser) -> int:
    report = persist.load_trace(args.trace)
    trace = report.trace
    os.makedirs(args.out_dir, exist_ok=True)
    written = []

    scores_csv = os.path.join(args.out_dir, "probe_scores.csv")
    persist.trace_scores_csv(scores_csv, trace)
    written.append(scores_csv)

    evals_csv = os.path.join(args.out_dir, "eval_accuracy.csv")
    persist.trace_eval_csv(evals_csv, trace)
    written.append(evals_csv)

    curve = trace.loss_curve()
    if curve:
        start = 0 if trace.baseline_loss is not None else 1
        pts = [(float(start + i), v) for i, v in enumerate(curve)]
        svg = charts.line_chart(
            {"post-rescale loss": pts},
            title="Loss per removed block",
            xlabel="blocks removed",
            ylabel="loss",
        )
        loss_svg = os.path.join(args.out_dir, "loss_curve.svg")
        charts.save_chart(loss_svg, svg)
        written.append(loss_svg)

    stages = []
    series: dict[str, list[float]] = {}
    if trace.baseline_accuracy:
        stages.append("baseline")
    stages.extend(
        f"step{i + 1}" for i, st in enumerate(trace.steps) if st.eval_accuracy
    )
    if stages:
        metrics = sorted(
            (trace.baseline_accuracy or next(st.eval_accuracy for st in trace.steps if st.eval_accuracy)).keys()
        )
        for m in metrics:
            vals = []
            if trace.baseline_accuracy:
                vals.append(trace.baseline_accuracy[m])
            vals.extend(
                st.eval_accuracy[m] for st in trace.steps if st.eval_accuracy
            )
            series[m] = vals
        svg = charts.bar_chart(
            stages, series, title="Eval accuracy per stage", ylabel="accuracy"
        )
        bars_svg = os.path.join(args.out_dir, "eval_accuracy.svg")
        charts.save_chart(bars_svg, svg)
        written.append(bars_svg)

    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (persist.PersistError, DataError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
