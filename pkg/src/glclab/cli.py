"""Command line entry point: ``glclab {pretrain-gvm,pretrain-glc,run,suite,report}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .glc import GlcConfig
from .gvm import GvmConfig, GvmNet
from .harness import (CONTROLLERS, SuiteConfig, output_dir, report, run_episode, run_suite,
                      train_glc_checkpoint, train_gvm_checkpoint)
from .metrics import write_trace_csv
from .plant import get_profile

PERTS = ("none", "d1", "d1+", "d1-", "d2")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_pretrain_gvm(a) -> int:
    params = get_profile(a.profile, a.profiles)
    cfg = GvmConfig(lr=a.lr) if a.lr is not None else None
    track = None if a.track == "straight" else a.track
    _, curve = train_gvm_checkpoint(params, a.out, a.epochs, a.steps, a.seed, cfg, _log, track)
    print(json.dumps({"checkpoint": a.out, "loss_curve": curve}))
    return 0


def cmd_pretrain_glc(a) -> int:
    params = get_profile(a.profile, a.profiles)
    gvm = GvmNet.load(a.gvm_ckpt, params)
    cfg = GlcConfig(lr=a.lr) if a.lr is not None else None
    _, curve = train_glc_checkpoint(params, gvm, a.track, a.out, a.epochs, a.steps, a.seed,
                                    a.v_ref, cfg, _log)
    print(json.dumps({"checkpoint": a.out, "loss_curve": curve}))
    return 0


def cmd_run(a) -> int:
    params = get_profile(a.profile, a.profiles)
    if a.controller == "glc" and not a.gvm_ckpt:
        _log("error: --gvm-ckpt is required for the glc controller")
        return 2
    res = run_episode(a.controller, a.track, params, a.pert, laps=a.laps, v_ref=a.v_ref,
                      steps=a.steps, gvm_ckpt=a.gvm_ckpt, glc_ckpt=a.glc_ckpt, learn=not a.frozen)
    out = output_dir(a.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / f"{a.controller}-trace.csv"
    write_trace_csv(res.trace, trace_path)
    summary = {"trace": str(trace_path), "failed": res.trace.failed, "steps": len(res.trace)}
    if res.report is not None:
        summary.update(res.report.as_row())
        summary["lap_mean_signed"] = res.report.lap_mean_signed
    if a.controller == "glc":
        summary["gvm_rmse"] = res.gvm_rmse
    print(json.dumps(summary, indent=2))
    return 0


def cmd_suite(a) -> int:
    cfg = SuiteConfig.load(a.config) if a.config else SuiteConfig()
    if a.seed is not None:
        cfg.seed = a.seed
    if a.workers is not None:
        cfg.workers = a.workers
    rows, summary = run_suite(cfg, out=a.out, log=_log)
    failed = sum(int(r["failed"]) for r in rows)
    print(f"{len(rows)} episodes, {failed} failed; summary at {summary}")
    return 0


def cmd_report(a) -> int:
    path = Path(a.summary)
    if path.is_dir():
        path = path / "summary.csv"
    text, problems = report(path, verify=not a.no_verify)
    sys.stdout.write(text)
    for p in problems:
        _log(f"mismatch: {p}")
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glclab", description="Online graph-based lateral control lab")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--profile", default="profile-A")
        p.add_argument("--profiles", default=None, help="alternative vehicle profile INI file")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain-gvm", help="pre-train the graph vehicle model on excitation data")
    common(p)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--steps", type=int, default=1200, help="excitation steps per epoch")
    p.add_argument("--track", default="straight",
                   help="path the excitation is projected onto; 'straight' is the built-in long line")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_gvm)

    p = sub.add_parser("pretrain-glc", help="pre-train the controller inside the frozen model")
    common(p)
    p.add_argument("--gvm-ckpt", required=True)
    p.add_argument("--track", nargs="+", default=["oval", "figure_eight", "chicane"])
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--v-ref", type=float, default=10.0)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_glc)

    p = sub.add_parser("run", help="run one closed-loop episode and write its trace")
    common(p)
    p.add_argument("--controller", choices=CONTROLLERS, default="glc")
    p.add_argument("--track", default="oval", help="generator spec (oval:r=30) or waypoint CSV")
    p.add_argument("--pert", choices=PERTS, default="none")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--laps", type=float, default=2.0)
    p.add_argument("--v-ref", type=float, default=10.0)
    p.add_argument("--gvm-ckpt", default=None)
    p.add_argument("--glc-ckpt", default=None, help="omit to start from an untrained controller")
    p.add_argument("--frozen", action="store_true", help="disable online learning")
    p.add_argument("--out", default="runs/single")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help="run the experiment matrix from a JSON config")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("report", help="print tables from a summary CSV and verify it against traces")
    p.add_argument("summary", help="summary.csv or the suite output directory")
    p.add_argument("--no-verify", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
