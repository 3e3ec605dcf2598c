"""Command line entry point: gen, train, eval, sweep, check.

Exit codes: 0 ok, 1 validation error, 2 runtime error, 3 check failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import make_benchmark
from .config import Config, dump_config, load_config
from .evaluation import (dense_grid_bps, history_sweep, robustness_sweep, run_benchmark,
                         write_summary)
from .numerics import ConfigurationError
from .scene import write_scenario
from .tracker import CoopTrackModel, StepOptions, write_outputs
from .training import merge_results, stage1_train, stage2_train, write_loss_csv

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
MODES = ("coop", "no_fusion", "late_fusion")
SWEEP_KINDS = ("latency", "rotation_noise", "rotation_noise_global", "no_infra", "history")
METRIC_COLUMNS = ("mode", "amota", "amota_raw", "amotp", "ids", "mt", "ml", "map", "ate", "ase", "aoe", "ave", "bps")


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# shared plumbing


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_repro(out: Path, cfg: Config, command: str):
    stanza = {"command": command, "argv": sys.argv[1:], "config_digest": cfg.digest(), "seed": cfg.seed,
              "code_version": code_version(), "python": platform.python_version(), "numpy": np.__version__}
    (out / "repro.json").write_text(json.dumps(stanza, indent=2, sort_keys=True) + "\n")
    (out / "config.txt").write_text(dump_config(cfg))


def resolve_config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg.validate()


def out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def checkpoint_meta_path(ckpt) -> Path:
    return Path(str(ckpt) + ".json")


def read_checkpoint_meta(ckpt) -> dict:
    ckpt = Path(ckpt)
    missing = [str(p) for p in (ckpt, checkpoint_meta_path(ckpt)) if not p.exists()]
    if missing:
        raise UsageError("missing checkpoint file(s): " + ", ".join(missing))
    return json.loads(checkpoint_meta_path(ckpt).read_text())


def save_checkpoint(model: CoopTrackModel, path: Path, stage: int, cfg: Config):
    model.save(path)
    meta = {"stage": stage, "steps": model.store.step, "config_digest": cfg.digest(), "seed": cfg.seed}
    checkpoint_meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(ckpt, cfg: Config) -> tuple[CoopTrackModel, dict]:
    meta = read_checkpoint_meta(ckpt)
    model = CoopTrackModel(cfg)
    model.load(ckpt)
    return model, meta


def parse_levels(text: str) -> list[float]:
    if text is None or not text.strip():
        raise UsageError("--levels needs at least one value")
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--levels must be comma-separated numbers, got {text!r}") from None


# --------------------------------------------------------------------------
# plots


def _pyplot():
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "cooptrack"
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_metric_bars(rows, path):
    plt = _pyplot()
    names = ["amota", "map"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(rows), 1)
    for k, row in enumerate(rows):
        xs = np.arange(len(names)) + k * width
        ax.bar(xs, [float(row[n]) for n in names], width, label=row["mode"])
    ax.set_xticks(np.arange(len(names)) + width * (len(rows) - 1) / 2)
    ax.set_xticklabels(["AMOTA", "mAP"])
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_bps_bubble(rows, path, d: int, rate_hz: float):
    """AMOTA against transmission cost on a log axis; bubble area follows mAP."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    floor = 1.0
    for row in rows:
        bps = max(float(row["bps"]), floor)
        ax.scatter([bps], [float(row["amota"])], s=50 + 1500 * float(row["map"]), alpha=0.6)
        label = row["mode"] + (" (0 B/s)" if float(row["bps"]) == 0 else "")
        ax.annotate(label, (bps, float(row["amota"])), textcoords="offset points", xytext=(6, 6))
    dense = dense_grid_bps(d, rate_hz)
    ax.axvline(dense, ls="--", lw=1, color="grey")
    ax.annotate("dense BEV grid", (dense, 0.02), rotation=90, ha="right", color="grey")
    ax.set_xscale("log")
    ax.set_xlim(floor / 2, dense * 4)
    ax.set_ylim(0, 1)
    ax.set_xlabel("bytes per second")
    ax.set_ylabel("AMOTA")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_sweep(kind: str, curve, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [lv for lv, _ in curve]
    ax.plot(xs, [r.amota for _, r in curve], "o-", label="AMOTA")
    ax.plot(xs, [r.map for _, r in curve], "s--", label="mAP")
    ax.set_xlabel({"latency": "delay (ms)", "history": "history length"}.get(kind, kind))
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    out = out_dir(args)
    train, evals = make_benchmark(cfg)
    sdir = out / "scenarios"
    sdir.mkdir(exist_ok=True)
    files = []
    for split, scenarios in (("train", train), ("eval", evals)):
        for i, sc in enumerate(scenarios):
            path = sdir / f"{split}_{i:03d}.jsonl"
            write_scenario(sc, path, seed=0)
            files.append({"path": str(path.relative_to(out)), "size": path.stat().st_size,
                          "sha256": sha256_file(path), "frames": sc.n_frames, "split": split})
    manifest = {"config_digest": cfg.digest(), "seed": cfg.seed, "rate_hz": cfg.rate_hz,
                "n_frames": cfg.n_frames, "files": files}
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (out / "manifest.json").write_text(text)
    write_repro(out, cfg, "gen")
    print(f"wrote {len(files)} scenarios ({cfg.n_frames} frames each) to {sdir}")
    print(f"manifest sha256 {hashlib.sha256(text.encode()).hexdigest()}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.stage not in (1, 2):
        raise UsageError("--stage must be 1 or 2")
    out = out_dir(args)
    train, _ = make_benchmark(cfg)
    model = CoopTrackModel(cfg)
    if args.resume:
        meta = read_checkpoint_meta(args.resume)
        if meta["stage"] != args.stage:
            raise UsageError(f"--resume checkpoint is stage {meta['stage']}, not stage {args.stage}")
        model.load(args.resume)
    elif args.stage == 2:
        init = Path(args.init) if args.init else out / "stage1.ckpt"
        meta = read_checkpoint_meta(init)
        if meta["stage"] != 1:
            raise UsageError(f"stage 2 needs a stage-1 checkpoint; {init} is stage {meta['stage']}")
        model.load(init)
    start = model.store.step
    if args.stage == 1:
        results = [stage1_train(model, kind, train, args.epochs, cfg.seed, cfg) for kind in ("vehicle", "infra")]
    else:
        results = [stage2_train(model, train, args.epochs, cfg.seed, cfg)]
    res = merge_results(results)
    ckpt = out / f"stage{args.stage}.ckpt"
    save_checkpoint(model, ckpt, args.stage, cfg)
    write_loss_csv(res, out / f"loss_stage{args.stage}.csv")
    write_repro(out, cfg, f"train --stage {args.stage}")
    print(f"stage {args.stage}: steps {start} -> {model.store.step}, final total loss {res.losses[-1].total:.4f}")
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def _read_metric_rows(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_metric_rows(rows, path: Path):
    keys = list(METRIC_COLUMNS) + sorted({k for r in rows for k in r} - set(METRIC_COLUMNS))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in sorted(rows, key=lambda r: MODES.index(r["mode"]) if r["mode"] in MODES else 99):
            w.writerow(r)


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    modes = [m.strip() for m in args.mode.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if not modes or bad:
        raise UsageError(f"--mode must be one or more of {', '.join(MODES)}")
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    model, meta = load_model(args.checkpoint, cfg)
    for m in modes:
        need = 2 if m == "coop" else 1
        if meta["stage"] != need:
            raise UsageError(f"mode {m} needs a stage-{need} checkpoint; {args.checkpoint} is stage {meta['stage']}")
    if args.benchmark:
        man = json.loads((Path(args.benchmark) / "manifest.json").read_text())
        if man["config_digest"] != cfg.digest():
            raise UsageError(f"benchmark {args.benchmark} was generated from a different config "
                             f"({man['config_digest']} != {cfg.digest()})")
    out = out_dir(args)
    _, evals = make_benchmark(cfg)
    reports = []
    for m in modes:
        opts = StepOptions(mode=m, compensate=cfg.latency_compensation)
        rep, outs = run_benchmark(model, evals, opts)
        write_outputs([o for s in outs for o in s], out / f"outputs_{m}.jsonl")
        reports.append(rep)
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in rep.row().items()))
    csv_path = out / "metrics.csv"
    rows = {r["mode"]: r for r in _read_metric_rows(csv_path)}
    for rep in reports:
        rows[rep.mode] = {k: str(v) for k, v in rep.row().items()}
    rows = list(rows.values())
    _write_metric_rows(rows, csv_path)
    write_summary(reports, out / f"summary_{'_'.join(modes)}.json", {"checkpoint": str(args.checkpoint)})
    plot_metric_bars(rows, out / "metric_bars.svg")
    plot_bps_bubble(rows, out / "bps_bubble.svg", cfg.d, cfg.rate_hz)
    write_repro(out, cfg, "eval --mode " + ",".join(modes))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    if args.kind not in SWEEP_KINDS:
        raise UsageError(f"--kind must be one of {', '.join(SWEEP_KINDS)}")
    levels = parse_levels(args.levels)
    out = out_dir(args)
    train, evals = make_benchmark(cfg)
    if args.kind == "history":
        curve = history_sweep(cfg, levels, train, evals, cfg.seed, epochs_stage1=args.epochs,
                              epochs_stage2=args.epochs)
    else:
        if not args.checkpoint:
            raise UsageError(f"sweep --kind {args.kind} needs --checkpoint")
        model, meta = load_model(args.checkpoint, cfg)
        if meta["stage"] != 2:
            raise UsageError(f"sweep --kind {args.kind} needs a stage-2 checkpoint")
        base = StepOptions(mode="coop", compensate=cfg.latency_compensation and not args.no_compensation)
        curve = robustness_sweep(args.kind, levels, model, evals, base)
    with open(out / f"sweep_{args.kind}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level"] + [c for c in METRIC_COLUMNS if c != "mode"])
        for lv, rep in curve:
            row = rep.row()
            w.writerow([lv] + [row[c] for c in METRIC_COLUMNS if c != "mode"])
            print(f"{args.kind}={lv:g} amota={rep.amota:.4f} map={rep.map:.4f} bps={rep.bps:.1f}")
    plot_sweep(args.kind, curve, out / f"sweep_{args.kind}.svg")
    write_repro(out, cfg, f"sweep --kind {args.kind}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import format_report, registered, run_checks
    names = None
    if args.only:
        names = [n.strip() for n in args.only.split(",") if n.strip()]
        unknown = sorted(set(names) - set(registered()))
        if unknown:
            raise UsageError(f"unknown check(s): {', '.join(unknown)}")
    results = run_checks(names=names, group=args.group)
    report = format_report(results)
    print(report)
    if args.out:
        out = out_dir(args)
        (out / "check_report.txt").write_text(report + "\n")
        write_repro(out, resolve_config(args), "check")
    return EXIT_OK if all(r.ok for r in results) else EXIT_CHECK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cooptrack", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("gen", help="generate the scenario corpus and manifest")
    common(sp)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("train", help="train stage 1 (both agents) or stage 2 (cooperative)")
    common(sp)
    sp.add_argument("--stage", type=int, required=True, choices=(1, 2))
    sp.add_argument("--init", help="stage-1 checkpoint for stage 2 (default OUT/stage1.ckpt)")
    sp.add_argument("--resume", help="continue from a checkpoint of the same stage")
    sp.add_argument("--epochs", type=int, help="overrides epochs_stage1/epochs_stage2")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="run the tracker over the evaluation scenarios")
    common(sp)
    sp.add_argument("--mode", default="coop", help="comma-separated: coop, no_fusion, late_fusion")
    sp.add_argument("--checkpoint", help="stage-2 checkpoint for coop, stage-1 for the baselines")
    sp.add_argument("--benchmark", help="directory written by gen; its manifest must match the config")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("sweep", help="robustness or history-length sweep")
    common(sp)
    sp.add_argument("--kind", required=True, choices=SWEEP_KINDS)
    sp.add_argument("--levels", required=True, help="comma-separated levels (ms for latency, rad for rotation)")
    sp.add_argument("--checkpoint", help="stage-2 checkpoint (not used by --kind history)")
    sp.add_argument("--no-compensation", action="store_true", help="disable latency compensation")
    sp.add_argument("--epochs", type=int, help="training epochs per level for --kind history")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("check", help="gradient, oracle and invariant checks")
    common(sp, out_required=False)
    sp.add_argument("--only", help="comma-separated check names")
    sp.add_argument("--group", choices=("gradient", "oracle", "invariant"))
    sp.set_defaults(fn=cmd_check)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
