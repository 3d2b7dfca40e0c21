"""Command line entry point: ``ultrahstu <command> --config PATH --seed N --out DIR``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import plotting
from .attention import MaskSpec
from .checkpoint import load_checkpoint
from .dataset import chronological_split, read_jsonl, write_jsonl
from .errors import ConfigError, HstuError
from .metrics_scaling import (
    efficiency_ratio,
    exponent_ratio,
    fit_linear_scaling,
    fit_power_law,
    flops_model,
    relative_metric,
)
from .numerics import write_int4_tables
from .sequence_input import LbslParams, balance_ratio, pareto_lengths, simulate_lbsl
from .topology import ModelConfig, StageConfig

log = logging.getLogger("ultrahstu")


def _raw_config(args) -> dict:
    if args.config is None:
        return {}
    from .harness.config import read_toml

    return read_toml(args.config)


def _out(args, default: str) -> Path:
    out = Path(args.out or f"runs/{default}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    from .harness.config import write_toml
    from .harness.synthetic import SyntheticSpec, analytic_base_rates, bayes_ne, generate_synthetic, observed_base_rates

    raw = _raw_config(args)
    spec = SyntheticSpec.from_dict(raw.get("data", {}).get("synthetic", {}))
    seed = args.seed if args.seed is not None else raw.get("run", {}).get("seed", 0)
    out = _out(args, "gen-data")
    records = generate_synthetic(spec, seed)
    write_jsonl(out / "data.jsonl", records)
    labels = np.asarray([row for r in records for row in r.labels], float)
    summary = {
        "n_records": len(records),
        "analytic_base_rate": analytic_base_rates(spec).tolist(),
        "expected_base_rate": observed_base_rates(spec).tolist(),
        "generated_base_rate": labels.mean(axis=0).tolist(),
        "bayes_ne": bayes_ne(spec).tolist(),
    }
    _write_json(summary, out / "summary.json")
    write_toml({"run": {"seed": seed}, "data": {"synthetic": spec.to_dict()}}, out / "config.resolved.toml")
    plotting.plot_histogram([len(r.items) for r in records], out / "history_lengths.png", "history length")
    print(json.dumps(summary))


def _train_config(args):
    from .harness.config import TrainConfig

    raw = _raw_config(args)
    if not raw:
        raise ConfigError("train needs --config")
    cfg = TrainConfig.from_dict(raw)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args):
    from .harness.train import train

    cfg = _train_config(args)
    out = _out(args, "train")
    res = train(cfg, out, log_every=args.log_every)
    plotting.plot_training(res.metrics, out / "training_curves.png")
    print(json.dumps({"eval_ne": res.eval_ne, "out": str(out)}))


def cmd_eval(args):
    from .harness.config import TrainConfig
    from .harness.train import evaluate, load_records

    if args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint")
    _, meta = load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(meta["config"])
    if args.data:
        records = read_jsonl(args.data)
    else:
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        records, _ = load_records(cfg)
        records = chronological_split(records, cfg.eval.split)[1]
    out = _out(args, "eval")
    result = evaluate(args.checkpoint, records, cfg.eval.tasks, cfg.eval.batch_size)
    probs = result.pop("probs")
    _write_json(result, out / "eval.json")
    plotting.plot_histogram(probs.ravel(), out / "predictions.png", "predicted probability")
    print(json.dumps({"ne": result["ne"], "n_examples": result["n_examples"]}))


def cmd_bench_flops(args):
    raw = _raw_config(args)
    bench = raw.get("bench", {})
    lengths = bench.get("lengths", [256, 512, 1024, 2048, 4096, 8192, 16384])
    d = bench.get("d", 512)
    heads = bench.get("num_heads", 4)
    masks = [MaskSpec.from_dict(m) for m in bench.get("masks", [{"kind": "causal"},
                                                                 {"kind": "semi_local", "k1": 64, "k2": 64}])]
    out = _out(args, "bench-flops")
    rows = []
    for spec in masks:
        name = "causal" if spec.kind == "causal" else f"semi_local(k1={spec.k1},k2={spec.k2})"
        cfg = ModelConfig(d=d, num_heads=heads, stages=(StageConfig(1, spec),))
        for L in lengths:
            rep = flops_model(cfg, L)
            rows.append({"mask": name, "L": L, "gemm": rep.gemm, "attention": rep.attention,
                         "pointwise": rep.pointwise, "inference": rep.inference, "train": rep.train})
    if "model" in raw:
        model = ModelConfig.from_dict(raw["model"])
        for L in lengths:
            rep = flops_model(model, L)
            rows.append({"mask": "model", "L": L, "gemm": rep.gemm, "attention": rep.attention,
                         "pointwise": rep.pointwise, "inference": rep.inference, "train": rep.train})
    with open(out / "flops.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _write_json(rows, out / "flops.json")
    plotting.plot_flops(rows, out / "flops.png")
    plotting.plot_mask(masks[-1], min(64, max(lengths)), out / "mask.png")
    print(f"wrote {len(rows)} rows to {out / 'flops.csv'}")


def read_fit_csv(path) -> dict:
    """``{group: {label: [(compute, metric), ...]}}`` from label,compute,metric[,group] rows."""
    groups: dict = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), 2):
            try:
                point = (float(row["compute"]), float(row["metric"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad row {row}") from exc
            groups.setdefault(row.get("group") or "all", {}).setdefault(row["label"], []).append(point)
    return groups


def default_fit_csv() -> Path:
    return Path(str(resources.files("ultrahstu") / "data" / "scaling_table.csv"))


def cmd_fit_scaling(args):
    raw = _raw_config(args).get("fit", {})
    path = args.csv or raw.get("csv") or default_fit_csv()
    kind = raw.get("metric_kind", "delta_percent")
    groups = read_fit_csv(path)
    out = _out(args, "fit-scaling")
    result = {}
    for group, series in groups.items():
        labels = list(series)
        baseline = raw.get("baseline", labels[0])
        if baseline not in series:
            raise ConfigError(f"baseline {baseline!r} not among labels {labels}")
        lin = {k: fit_linear_scaling(v) for k, v in series.items()}
        to_loss = (lambda pts: [(c, float(relative_metric(m))) for c, m in pts]) if kind == "delta_percent" else list
        pw = {k: fit_power_law(to_loss(v)) for k, v in series.items()}
        result[group] = {
            "baseline": baseline,
            "linear": {k: f.to_dict() for k, f in lin.items()},
            "power_law": {k: f.to_dict() for k, f in pw.items()},
            "linear_efficiency_ratio": {k: efficiency_ratio(lin[k], lin[baseline]) for k in labels if k != baseline},
            "exponent_ratio": {k: exponent_ratio(pw[k], pw[baseline]) for k in labels if k != baseline},
        }
        plotting.plot_linear_fits(lin, out / f"linear_{group}.png", xlabel=f"{group} TFLOP")
        plotting.plot_power_fits(pw, out / f"power_{group}.png", xlabel=f"{group} TFLOP")
    _write_json(result, out / "fits.json")
    print(json.dumps({g: {"linear": r["linear_efficiency_ratio"], "power": r["exponent_ratio"]}
                      for g, r in result.items()}))


def parse_lengths(text: str):
    """``pareto:shape,min,cap`` or ``uniform:lo,hi`` into a sampler ``f(rng, size)``."""
    kind, _, rest = text.partition(":")
    vals = [float(v) for v in rest.split(",")] if rest else []
    if kind == "pareto":
        shape, lo, cap = (vals + [1.5, 64, 16384][len(vals):])[:3]
        return lambda rng, size: pareto_lengths(rng, size, shape, int(lo), int(cap)), int(cap)
    if kind == "uniform" and len(vals) == 2:
        lo, hi = int(vals[0]), int(vals[1])
        return lambda rng, size: rng.integers(lo, hi + 1, size), hi
    raise ConfigError(f"cannot parse length distribution {text!r}")


def cmd_simulate_lbsl(args):
    cfg = dict(_raw_config(args).get("lbsl", {}))
    for key in ("world_size", "batch_size", "gamma", "alpha", "l_sl", "warmup_steps", "recal_interval", "steps",
                "lengths", "workers"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    sampler, l_max = parse_lengths(cfg.get("lengths", "pareto:1.5,64,16384"))
    alpha = float(cfg.get("alpha", 1.6))
    l_sl = cfg.get("l_sl") or int(round(l_max ** (alpha / 2.0)))
    params = LbslParams(int(cfg.get("world_size", 8)), int(cfg.get("warmup_steps", 50)),
                        int(cfg.get("recal_interval", 10)), float(cfg.get("gamma", 1.7)), alpha, int(l_sl),
                        int(cfg.get("batch_size", 32)), seed)
    steps = int(cfg.get("steps", 500))
    rows = simulate_lbsl(params, steps, sampler, seed=seed, workers=int(cfg.get("workers", 1)))
    out = _out(args, "simulate-lbsl")
    with open(out / "lbsl.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "rank", "policy", "raw_load", "realized_load", "balance_ratio"])
        for row in rows:
            for policy in ("sl", "lbsl"):
                ratio = balance_ratio(row[policy])
                for r in range(params.world_size):
                    w.writerow([row["step"], r, policy, row["raw"][r], row[policy][r], ratio])
    steady = [r for r in rows if r["phase"] == "steady"]
    summary = {"params": {k: getattr(params, k) for k in params.__dataclass_fields__}, "steps": steps}
    if steady:
        for policy in ("sl", "lbsl"):
            summary[f"{policy}_mean_balance_ratio"] = float(np.mean([balance_ratio(r[policy]) for r in steady]))
            summary[f"{policy}_mean_load"] = float(np.mean([r[policy].mean() for r in steady]))
    _write_json(summary, out / "summary.json")
    plotting.plot_lbsl(rows, out / "lbsl.png")
    print(json.dumps({k: v for k, v in summary.items() if k != "params"}))


def cmd_quantize(args):
    raw = _raw_config(args).get("quantize", {})
    if args.checkpoint is None:
        raise ConfigError("quantize needs --checkpoint")
    g = args.group_size or raw.get("group_size", 32)
    tensors, _ = load_checkpoint(args.checkpoint)
    tables = {k: v for k, v in tensors.items() if k.startswith("emb/") and v.ndim == 2}
    if not tables:
        raise ConfigError(f"{args.checkpoint} holds no embedding tables")
    out = _out(args, "quantize")
    report = write_int4_tables(out / "embeddings.int4", tables, int(g))
    with open(out / "quant_errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["table", "rows", "cols", "max_abs_error", "max_half_scale"])
        for name, r in report.items():
            w.writerow([name, r["rows"], r["cols"], r["max_abs_error"], r["max_half_scale"]])
    plotting.plot_quant_errors(report, out / "quant_errors.png")
    print(json.dumps(report))


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-flops": cmd_bench_flops,
    "fit-scaling": cmd_fit_scaling,
    "simulate-lbsl": cmd_simulate_lbsl,
    "quantize": cmd_quantize,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ultrahstu", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")
        if name == "train":
            p.add_argument("--log-every", type=int, default=0)
        if name in ("eval", "quantize"):
            p.add_argument("--checkpoint", type=Path)
        if name == "eval":
            p.add_argument("--data", type=Path, help="JSONL records; default: eval split of the training data")
        if name == "quantize":
            p.add_argument("--group-size", type=int)
        if name == "fit-scaling":
            p.add_argument("--csv", type=Path, help="label,compute,metric[,group] rows")
        if name == "simulate-lbsl":
            p.add_argument("--world-size", type=int)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--gamma", type=float)
            p.add_argument("--alpha", type=float)
            p.add_argument("--l-sl", type=int)
            p.add_argument("--warmup-steps", type=int)
            p.add_argument("--recal-interval", type=int)
            p.add_argument("--steps", type=int)
            p.add_argument("--lengths", help="pareto:shape,min,cap or uniform:lo,hi")
            p.add_argument("--workers", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except HstuError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
