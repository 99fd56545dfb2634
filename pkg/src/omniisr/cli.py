"""Command-line entry point: ``omniisr <subcommand> --config c.toml``.

Exit codes: 0 success, 1 configuration error, 2 training aborted on a
non-finite loss, 3 failed gradient check or protocol error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import data as datamod
from .config import RunConfig, parse_config, parse_text
from .diffcore import ConfigurationError, ContractViolation, ParamSet, grad_check
from .fedsim import FedConfig, ProtocolError, diagnostics_csv, partition, train_fl
from .hybrid import HybridSchedule, alignment_csv, train_hybrid
from .isr import ISRObjective
from .model import NetworkSpec, TapPlan, plan_taps
from .seeding import derive_rng
from .theory import (TheoryInputs, bound_cl, bound_fl, bound_hybrid, bounds_csv, complexity, default_grids,
                     default_escape_inputs, escape_sweep, mode_table, saddle_sim, sweep_csv)
from .trainer import OptimizerConfig, TrainingAborted, fmt, train_cl

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_CHECK = 0, 1, 2, 3

SUBCOMMANDS = {
    "train-cl": "cl", "train-fl": "fl", "train-hybrid": "hybrid", "bounds": "bounds",
    "escape-sweep": "escape", "saddle-sim": "saddle", "ablate": "ablate", "grad-check": "grad-check",
}


# -- parameter files -----------------------------------------------------------

def save_params(params: ParamSet, path) -> None:
    tags = {k: [kind, tap] for k, (kind, tap) in params.tags.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __tags__=np.array(json.dumps(tags, sort_keys=True)), **dict(params.items()))


def load_params(path) -> ParamSet:
    with np.load(path, allow_pickle=False) as z:
        tags = {k: (v[0], v[1]) for k, v in json.loads(str(z["__tags__"])).items()}
        arrays = {k: z[k].astype(np.float64) for k in z.files if k != "__tags__"}
    return ParamSet(arrays, tags)


# -- builders ------------------------------------------------------------------

def resolve_seed(cli_seed, cfg: RunConfig | None, env=None):
    env = os.environ if env is None else env
    if cli_seed is not None:
        return int(cli_seed), "flag"
    if cfg is not None and cfg.seed is not None:
        return int(cfg.seed), "config"
    if env.get("OMNIISR_SEED"):
        try:
            return int(env["OMNIISR_SEED"]), "env"
        except ValueError:
            raise ConfigurationError(f"OMNIISR_SEED={env['OMNIISR_SEED']!r} is not an integer") from None
    return 0, "default"


def build_data(cfg: RunConfig, seed: int):
    d = cfg["data"]
    if d["path"]:
        full = datamod.load(d["path"])
    elif d["task"] == "classification":
        full = datamod.gen_classification(d["num_classes"], d["dims"], d["n"], d["separation"], seed=seed)
    else:
        full = datamod.gen_gridseg(d["num_classes"], d["width"], d["height"], d["n"], seed=seed,
                                   channels=d["dims"], separation=d["separation"], noise=d["noise"])
    return datamod.train_test_split(full, d["test_fraction"], seed=seed)


def build_plan(cfg: RunConfig, depth: int, count=None, spacing=None, placement=None) -> TapPlan:
    t = cfg["taps"]
    if t["indices"] and count is None and spacing is None and placement is None:
        M = len(t["indices"])
        plan = TapPlan(tuple(t["indices"]), (t["alpha"],) * M, (t["lam"],) * M, "explicit", 1)
    else:
        M = t["count"] if count is None else count
        idx = plan_taps(depth, M, t["placement"] if placement is None else placement,
                        t["spacing"] if spacing is None else spacing)
        plan = TapPlan(idx, (t["alpha"],) * M, (t["lam"],) * M,
                       t["placement"] if placement is None else placement, t["spacing"] if spacing is None else spacing)
    plan.validate(depth)
    return plan


def build_spec(cfg: RunConfig, data) -> NetworkSpec:
    n = cfg["network"]
    return NetworkSpec(data.channels, tuple(n["widths"]), data.num_classes, data.grid, tuple(n["downsample_at"]))


def build_objective(cfg: RunConfig, data, **plan_kw) -> ISRObjective:
    spec = build_spec(cfg, data)
    return ISRObjective(spec, build_plan(cfg, spec.depth, **plan_kw), cfg["network"]["upsample"])


def build_optimizer(cfg: RunConfig, T=None) -> OptimizerConfig:
    o = cfg["optimizer"]
    return OptimizerConfig(kind=o["kind"], base_eta=o["eta"], schedule=o["schedule"],
                           T=T or o["iterations"], batch_size=o["batch_size"] or None,
                           weight_decay=o["weight_decay"])


def build_fed(cfg: RunConfig) -> FedConfig:
    f = cfg["fed"]
    return FedConfig(num_clients=f["num_clients"], local_epochs=f["local_epochs"], participation=f["participation"],
                     rounds=f["rounds"], partition=f["partition"], concentration=f["concentration"],
                     classes_per_client=f["classes_per_client"], batch_size=f["batch_size"] or None,
                     parallel=f["parallel"], scope=f["scope"])


def build_schedule(cfg: RunConfig) -> HybridSchedule:
    h = cfg["hybrid"]
    return HybridSchedule(h["regime"], h["alpha"], h["beta"], h["alpha_min"])


def build_theory(cfg: RunConfig) -> TheoryInputs:
    th = {k: v for k, v in cfg["theory"].items() if k not in ("eps", "kappa")}
    return TheoryInputs(**th)


# -- output helpers --------------------------------------------------------------

def write_text(out: Path, name: str, text: str, files: list) -> Path:
    p = out / name
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    files.append(p)
    return p


def metrics_text(metrics: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in metrics.items():
        w.writerow([k, fmt(v)])
    return buf.getvalue()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: RunConfig, seed, seed_source, started, files, status, command):
    manifest = {
        "command": command,
        "config_hash": cfg.hash,
        "seed": seed,
        "seed_source": seed_source,
        "versions": {"omniisr": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "exit_status": status,
        "files": [{"path": str(p.relative_to(out)), "sha256": _sha256(p)} for p in files if p.exists()],
    }
    p = out / "manifest.json"
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


# -- runners -------------------------------------------------------------------
# Each runner writes its artifacts into ``out`` and returns a summary dict.

def _eval_metrics(obj: ISRObjective, params, train, test) -> dict:
    br = obj.evaluate(params, train.x, train.y)
    te = obj.evaluate(params, test.x, test.y)
    return {"train_total": br.total, "train_ce": br.ce, "test_ce": te.ce,
            "train_accuracy": obj.accuracy(params, train.x, train.y),
            "test_accuracy": obj.accuracy(params, test.x, test.y)}


def run_cl(cfg, seed, out, files, **plan_kw):
    train, test = build_data(cfg, seed)
    obj = build_objective(cfg, train, **plan_kw)
    opt = build_optimizer(cfg)
    params, trace = train_cl(obj, train, opt, seed=seed)
    write_text(out, "trace.csv", trace.to_csv(), files)
    save_params(params, out / "params.npz")
    files.append(out / "params.npz")
    metrics = _eval_metrics(obj, params, train, test)
    write_text(out, "metrics.csv", metrics_text(metrics), files)
    return metrics


def run_fl(cfg, seed, out, files, **plan_kw):
    train, test = build_data(cfg, seed)
    obj = build_objective(cfg, train, **plan_kw)
    fed = build_fed(cfg)
    shards = partition(train, fed, seed=seed)
    opt = build_optimizer(cfg, T=fed.rounds)
    params, diags = train_fl(obj, shards, fed, opt, seed=seed)
    write_text(out, "diagnostics.csv", diagnostics_csv(diags), files)
    save_params(params, out / "params.npz")
    files.append(out / "params.npz")
    metrics = _eval_metrics(obj, params, train, test)
    metrics["mean_H"] = float(np.mean([d.H for d in diags]))
    metrics["mean_drift"] = float(np.mean([d.drift for d in diags]))
    write_text(out, "metrics.csv", metrics_text(metrics), files)
    return metrics


def split_cloud(train, fraction, seed):
    n = len(train)
    k = max(1, int(round(fraction * n)))
    if k >= n:
        raise ConfigurationError("cloud_fraction leaves no client data")
    perm = derive_rng(seed, "split", 1).permutation(n)
    return train.subset(np.sort(perm[:k])), train.subset(np.sort(perm[k:]))


def run_hybrid(cfg, seed, out, files, **plan_kw):
    train, test = build_data(cfg, seed)
    obj = build_objective(cfg, train, **plan_kw)
    fed = build_fed(cfg)
    cloud, device = split_cloud(train, cfg["data"]["cloud_fraction"], seed)
    shards = partition(device, fed, seed=seed)
    opt = build_optimizer(cfg, T=fed.rounds)
    params, trace = train_hybrid(obj, cloud, shards, fed, build_schedule(cfg), opt, seed=seed)
    write_text(out, "alignment.csv", alignment_csv(trace.alignment), files)
    write_text(out, "diagnostics.csv", diagnostics_csv(trace.fl_diagnostics), files)
    save_params(params, out / "params.npz")
    files.append(out / "params.npz")
    metrics = _eval_metrics(obj, params, train, test)
    metrics["final_alpha"] = trace.alphas[-1]
    write_text(out, "metrics.csv", metrics_text(metrics), files)
    return metrics


COMPLEXITY_HEADER = ["mode", "eps", "kappa", "T", "rounds", "feasible", "reason"]


def run_bounds(cfg, seed, out, files):
    p = build_theory(cfg)
    reports = [bound_cl(p), bound_fl(p), bound_hybrid(p)]
    write_text(out, "bounds.csv", bounds_csv(reports), files)
    print(mode_table(reports))
    kappa = cfg["theory"]["kappa"]
    if cfg["theory"]["eps"]:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPLEXITY_HEADER)
        for eps in cfg["theory"]["eps"]:
            for mode in ("cl", "fl", "hybrid"):
                c = complexity(mode, p, float(eps), kappa=kappa)
                w.writerow([mode, fmt(float(eps)), fmt(kappa), fmt(c.T), "" if c.rounds is None else c.rounds,
                            int(c.feasible), c.reason])
        write_text(out, "complexity.csv", buf.getvalue(), files)
    return {r.mode: r.total for r in reports}


def run_escape(cfg, seed, out, files):
    base = build_theory(cfg) if "theory" in cfg.present else default_escape_inputs()
    s = cfg["sweep"]
    grids = default_grids()
    for axis in ("curvature", "eta", "radius", "delta"):
        if s[f"{axis}_grid"]:
            grids[axis] = np.asarray(s[f"{axis}_grid"], float)
    rows = escape_sweep(base, grids, s["curvatures"])
    write_text(out, "escape_sweep.csv", sweep_csv(rows), files)
    return {"rows": len(rows), "defined": sum(r.defined for r in rows)}


def run_saddle(cfg, seed, out, files):
    s = cfg["saddle"]
    res = saddle_sim(s["curvature"], s["eta"], y0=s["y0"], radius=s["radius"], sigma_cl=s["sigma_cl"],
                     sigma_fl=s["sigma_fl"], alpha=s["alpha"], bias=s["bias"], trials=s["trials"], seed=seed,
                     cap=s["cap"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "escape_time", "censored"])
    for i, t in enumerate(res.times):
        w.writerow([i, int(t) if t >= 0 else "", int(t < 0)])
    write_text(out, "saddle.csv", buf.getvalue(), files)
    summary = {"median": res.median, "q90": res.quantile(0.9), "censored": res.censored}
    write_text(out, "saddle_summary.csv", metrics_text(summary), files)
    return summary


def run_grad_check(cfg, seed, out, files):
    train, _ = build_data(cfg, seed)
    obj = build_objective(cfg, train)
    params = obj.init_params(seed)
    idx = np.arange(min(8, len(train)))
    inputs = {"x": train.x[idx], "y": obj._onehot(train.y[idx])}
    rep = grad_check(obj.graph, params, inputs, obj.total, tolerance=1e-4, seed=seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["param", "max_rel_error"])
    for k, v in rep.per_param.items():
        w.writerow([k, fmt(v)])
    write_text(out, "gradcheck.csv", buf.getvalue(), files)
    print(rep)
    return {"max_error": rep.max_error, "passed": rep.passed, "checked": rep.n_checked}


RUNNERS = {"cl": run_cl, "fl": run_fl, "hybrid": run_hybrid}

ABLATE_HEADER = ["axis", "value", "taps", "status", "runs", "seeds",
                 "acc_mean", "acc_min", "acc_max", "loss_mean", "loss_min", "loss_max"]


def parse_values(text: str | None, axis: str):
    """'1..5', '1,3,5' or 'input,middle'."""
    if text is None:
        return None
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    items = [v.strip() for v in text.split(",") if v.strip()]
    return items if axis == "placement" else [int(v) for v in items]


def ablate(cfg: RunConfig, out: Path, files: list, axis=None, values=None, seeds=None):
    """One run per (value, seed); the same seeds are reused in every arm."""
    a = cfg["ablate"]
    axis = axis or a["axis"]
    values = a["values"] if values is None else values
    seeds = a["seeds"] if seeds is None else seeds
    runner = RUNNERS[a["mode"]]
    depth = len(cfg["network"]["widths"]) + 1
    rows = []
    for v in values:
        kw = {{"count": "count", "spacing": "spacing", "placement": "placement"}[axis]: v}
        try:
            plan = build_plan(cfg, depth, **kw)
        except ConfigurationError as exc:
            rows.append([axis, v, "", "skipped", 0, "", "", "", "", "", "", ""])
            print(f"ablate: {axis}={v} skipped ({exc})")
            continue
        accs, losses = [], []
        for s in seeds:
            sub = out / "runs" / f"{axis}-{v}" / f"seed-{s}"
            sub.mkdir(parents=True, exist_ok=True)
            m = runner(cfg, int(s), sub, files, **kw)
            accs.append(m["test_accuracy"])
            losses.append(m["train_total"])
        taps = " ".join(str(i) for i in plan.indices)
        rows.append([axis, v, taps, "ok", len(seeds), " ".join(str(s) for s in seeds),
                     *map(fmt, (np.mean(accs), np.min(accs), np.max(accs))),
                     *map(fmt, (np.mean(losses), np.min(losses), np.max(losses)))])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATE_HEADER)
    w.writerows(rows)
    write_text(out, "summary.csv", buf.getvalue(), files)
    return rows


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="omniisr", description="ISR training modes, bounds and escape-time tools")
    ap.add_argument("--version", action="version", version=f"omniisr {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML run configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides config and OMNIISR_SEED)")
        p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
        if name == "ablate":
            p.add_argument("--axis", choices=["count", "spacing", "placement"])
            p.add_argument("--values", help="e.g. 1..5, 1,2,4 or input,middle,output")
            p.add_argument("--seeds", help="comma-separated seed list")
    return ap


def load_config(path, mode) -> RunConfig:
    if path is None:
        return parse_text("", mode)
    return parse_config(path, mode)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    mode = SUBCOMMANDS[args.command]
    started = datetime.now(timezone.utc).isoformat()
    try:
        cfg = load_config(args.config, mode)
        if args.seed is not None and args.seed < 0:
            raise ConfigurationError("--seed must be nonnegative")
        seed, source = resolve_seed(args.seed, cfg)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    files: list = []
    status = EXIT_OK
    try:
        if mode in RUNNERS:
            summary = RUNNERS[mode](cfg, seed, out, files)
        elif mode == "bounds":
            summary = run_bounds(cfg, seed, out, files)
        elif mode == "escape":
            summary = run_escape(cfg, seed, out, files)
        elif mode == "saddle":
            summary = run_saddle(cfg, seed, out, files)
        elif mode == "grad-check":
            summary = run_grad_check(cfg, seed, out, files)
            status = EXIT_OK if summary["passed"] else EXIT_CHECK
        else:
            seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
            axis = args.axis
            rows = ablate(cfg, out, files, axis, parse_values(args.values, axis or cfg["ablate"]["axis"]), seeds)
            summary = {"entries": len(rows)}
        print(json.dumps({"command": args.command, "seed": seed, **{k: v for k, v in summary.items()
                                                                     if isinstance(v, (int, float, str))}}))
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        status = EXIT_ABORT
    except (ProtocolError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_CHECK
    if args.config is not None:
        write_text(out, "config.toml", cfg.text, files)
    write_manifest(out, cfg, seed, source, started, files, status, args.command)
    return status


if __name__ == "__main__":
    sys.exit(main())
