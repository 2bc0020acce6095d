"""Experiment orchestration: checkpoints, single episodes, the suite matrix and reports."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import MpcConfig, MpcController, stanley_steer
from .episode import Policy, StepContext, simulate
from .glc import GlcConfig, GlcNet, GlcPolicy, pretrain_glc
from .gvm import GvmConfig, GvmNet, excitation_schedule, pretrain_gvm
from .metrics import TraceLog, compute_metrics, gvm_accuracy_report, read_trace_csv, write_trace_csv
from .plant import Perturbation, PlantParams, get_profile
from .track import ReferencePath, load_track

OUT_ENV = "GLCLAB_OUT"
CONTROLLERS = ("glc", "mpc", "stanley")

SUMMARY_COLUMNS = (
    "controller", "track", "profile", "pert", "seed", "laps", "v_ref", "steps", "failed",
    "mle_straight", "rmse_straight", "mle_turn", "rmse_turn", "mle_overall", "rmse_overall",
    "steer_rate_max", "lap_rmse", "lap_mean_signed", "gvm_rmse", "mpc_flagged", "trace",
)


# ------------------------------------------------------------------ policies

class StanleyPolicy(Policy):
    name = "stanley"

    def __init__(self, params: PlantParams, k: float = 1.0):
        self.params, self.k = params, k
        self._s_front = None

    def reset(self, path):
        self._s_front = None

    def act(self, ctx: StepContext) -> float:
        delta, self._s_front = stanley_steer(ctx.X, ctx.path, self.params, self.k,
                                             s_hint=self._s_front)
        return delta


class MpcPolicy(Policy):
    name = "mpc"

    def __init__(self, params: PlantParams, cfg: MpcConfig | None = None):
        self.ctrl = MpcController(params, cfg or MpcConfig())

    def reset(self, path):
        self.ctrl.reset()

    def act(self, ctx: StepContext) -> float:
        delta, _, _ = self.ctrl.steer(ctx.X, ctx.path, ctx.delta_prev, ctx.throttle, s_hint=ctx.s_k)
        return delta


# -------------------------------------------------------------------- config

@dataclass
class SuiteConfig:
    seed: int = 42
    controllers: tuple = CONTROLLERS
    tracks: tuple = ("oval", "figure_eight", "chicane")
    perts: tuple = ("none", "d1", "d2")
    profiles: tuple = ("profile-A",)
    laps: float = 2.0
    v_ref: float = 10.0
    out_dir: str = "runs"
    workers: int = 1
    # pre-training (used when no checkpoint is given for a profile)
    gvm_epochs: int = 5
    gvm_steps: int = 1200
    glc_epochs: int = 3
    glc_steps: int = 1500
    pretrain_tracks: tuple = ("oval", "figure_eight", "chicane")
    gvm_ckpt: dict = field(default_factory=dict)  # profile -> path
    glc_ckpt: dict = field(default_factory=dict)
    gvm: dict = field(default_factory=dict)  # GvmConfig overrides
    glc: dict = field(default_factory=dict)
    mpc: dict = field(default_factory=dict)
    profile_file: str | None = None

    def __post_init__(self):
        for name in ("controllers", "tracks", "perts", "profiles", "pretrain_tracks"):
            setattr(self, name, tuple(getattr(self, name)))
        bad = set(self.controllers) - set(CONTROLLERS)
        if bad:
            raise ValueError(f"unknown controllers {sorted(bad)}")
        for p in self.perts:
            Perturbation.named(p)
        if self.laps <= 0 or self.v_ref <= 0:
            raise ValueError("laps and v_ref must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SuiteConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def output_dir(default) -> Path:
    """``$GLCLAB_OUT`` wins over the configured directory."""
    return Path(os.environ.get(OUT_ENV) or default)


def _dataclass_from(cls, overrides: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()})


# --------------------------------------------------------------- checkpoints

def train_gvm_checkpoint(params: PlantParams, out, epochs: int = 5, steps: int = 1200, seed: int = 0,
                         config: GvmConfig | None = None, log=None, track=None) -> tuple[GvmNet, list]:
    """``track`` None streams the excitation along the long straight pretraining path."""
    net = GvmNet(params, config, seed=seed)
    schedule = excitation_schedule(params, steps=steps, seed=seed, t_s=net.config.t_s)
    path = None if track is None else track if isinstance(track, ReferencePath) else load_track(track)
    curve = pretrain_gvm(net, params, schedule, epochs=epochs, path=path, log=log)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        net.save(out, {"epochs": epochs, "steps": steps, "seed": seed, "loss_curve": curve})
    return net, curve


def train_glc_checkpoint(params: PlantParams, gvm: GvmNet, tracks, out, epochs: int = 3,
                         steps: int = 1500, seed: int = 0, v_ref: float = 10.0,
                         config: GlcConfig | None = None, log=None) -> tuple[GlcNet, list]:
    net = GlcNet(params, config, seed=seed)
    paths = [t if isinstance(t, ReferencePath) else load_track(t) for t in tracks]
    curve = pretrain_glc(net, gvm, paths, epochs=epochs, steps_per_epoch=steps, v_ref=v_ref,
                         seed=seed, log=log)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        net.save(out, {"epochs": epochs, "steps": steps, "seed": seed, "loss_curve": curve,
                       "tracks": [p.name for p in paths]})
    return net, curve


def ensure_checkpoints(cfg: SuiteConfig, profile: str, ckpt_dir: Path, log=None) -> tuple[str, str]:
    """Return (gvm, glc) checkpoint paths for ``profile``, training any that are missing."""
    params = get_profile(profile, cfg.profile_file)
    gvm_path = cfg.gvm_ckpt.get(profile) or str(ckpt_dir / f"gvm-{profile}-s{cfg.seed}.ckpt")
    glc_path = cfg.glc_ckpt.get(profile) or str(ckpt_dir / f"glc-{profile}-s{cfg.seed}.ckpt")
    if Path(gvm_path).exists():
        gvm = GvmNet.load(gvm_path, params)
    else:
        gvm, _ = train_gvm_checkpoint(params, gvm_path, cfg.gvm_epochs, cfg.gvm_steps, cfg.seed,
                                      _dataclass_from(GvmConfig, cfg.gvm), log)
    if not Path(glc_path).exists():
        train_glc_checkpoint(params, gvm, cfg.pretrain_tracks, glc_path, cfg.glc_epochs,
                             cfg.glc_steps, cfg.seed, cfg.v_ref, _dataclass_from(GlcConfig, cfg.glc), log)
    return gvm_path, glc_path


# ------------------------------------------------------------------ episodes

@dataclass
class EpisodeResult:
    trace: TraceLog
    report: object
    gvm_rmse: float = math.nan
    mpc_flagged: int = 0


def run_episode(controller: str, track, params: PlantParams, pert: str = "none", laps: float = 2.0,
                v_ref: float = 10.0, steps: int | None = None, gvm_ckpt=None, glc_ckpt=None,
                learn: bool = True, mpc: MpcConfig | None = None) -> EpisodeResult:
    path = track if isinstance(track, ReferencePath) else load_track(track)
    perturbation = Perturbation.named(pert)
    if controller == "glc":
        if gvm_ckpt is None:
            raise FileNotFoundError("GLC runs need a GVM checkpoint")
        gvm = gvm_ckpt if isinstance(gvm_ckpt, GvmNet) else GvmNet.load(gvm_ckpt, params)
        if isinstance(glc_ckpt, GlcNet):
            net = glc_ckpt
        elif glc_ckpt is None:
            net = GlcNet(params)
        else:
            net = GlcNet.load(glc_ckpt, params)
        policy = GlcPolicy(net, gvm, learn_glc=learn, learn_gvm=learn)
    elif controller == "mpc":
        policy = MpcPolicy(params, mpc)
    elif controller == "stanley":
        policy = StanleyPolicy(params)
    else:
        raise ValueError(f"unknown controller {controller!r}")
    trace = simulate(policy, params, path, perturbation, v_ref=v_ref, laps=laps, max_steps=steps)
    trace.info.update(pert=pert)
    report = compute_metrics(trace) if len(trace) else None
    flagged = policy.ctrl.flagged_steps if isinstance(policy, MpcPolicy) else 0
    gvm_rmse = gvm_accuracy_report(trace) if controller == "glc" and len(trace) else math.nan
    return EpisodeResult(trace, report, gvm_rmse, flagged)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 9))
    return str(v)


def _cell_name(controller, track, profile, pert) -> str:
    safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in track)
    return f"{controller}__{safe}__{profile}__{pert}"


def _run_cell(job: dict) -> dict:
    cfg = SuiteConfig.from_dict(job["cfg"])
    params = get_profile(job["profile"], cfg.profile_file)
    mpc = _dataclass_from(MpcConfig, cfg.mpc)
    name = _cell_name(job["controller"], job["track"], job["profile"], job["pert"])
    row = {"controller": job["controller"], "track": job["track"], "profile": job["profile"],
           "pert": job["pert"], "seed": cfg.seed, "laps": cfg.laps, "v_ref": cfg.v_ref}
    try:
        res = run_episode(job["controller"], job["track"], params, job["pert"], cfg.laps, cfg.v_ref,
                          gvm_ckpt=job.get("gvm"), glc_ckpt=job.get("glc"), mpc=mpc)
    except Exception as exc:  # recorded, not fatal to the suite
        row.update(failed=1, error=f"{type(exc).__name__}: {exc}")
        return row
    trace_path = Path(job["trace_dir"]) / f"{name}.csv"
    write_trace_csv(res.trace, trace_path)
    m = res.report
    row.update(steps=len(res.trace), failed=int(res.trace.failed), gvm_rmse=res.gvm_rmse,
               mpc_flagged=res.mpc_flagged, trace=f"traces/{trace_path.name}")
    if m is not None:
        row.update({k: v for k, v in m.as_row().items() if k not in ("failed", "steps")})
        row["lap_mean_signed"] = ";".join(_fmt(v) for v in m.lap_mean_signed)
    return row


def run_suite(cfg: SuiteConfig, out=None, log=None) -> tuple[list[dict], Path]:
    """Run the controller x track x profile x perturbation matrix.

    Writes ``traces/*.csv``, ``summary.csv`` and ``config.json`` under the output
    directory and returns (rows, summary path). Failed cells are recorded in the
    summary rather than raised.
    """
    out = output_dir(out or cfg.out_dir)
    trace_dir = out / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    ckpts = {}
    if "glc" in cfg.controllers:
        for profile in cfg.profiles:
            ckpts[profile] = ensure_checkpoints(cfg, profile, out / "checkpoints", log)
    jobs = []
    for profile in cfg.profiles:
        for controller in cfg.controllers:
            for track in cfg.tracks:
                for pert in cfg.perts:
                    job = {"cfg": cfg.to_dict(), "controller": controller, "track": track,
                           "profile": profile, "pert": pert, "trace_dir": str(trace_dir)}
                    if controller == "glc":
                        job["gvm"], job["glc"] = ckpts[profile]
                    jobs.append(job)
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(_run_cell(job))
            if log:
                r = rows[-1]
                log(f"{r['controller']:8s} {r['track']:14s} {r['pert']:5s} "
                    f"rmse {r.get('rmse_overall', math.nan):.4f} failed {r['failed']}")
    summary = out / "summary.csv"
    write_summary_csv(rows, summary)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return rows, summary


def write_summary_csv(rows: list[dict], path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS + ("error",))
    for r in rows:
        w.writerow([_fmt(r.get(c, math.nan if c not in ("trace",) else "")) for c in SUMMARY_COLUMNS]
                   + [r.get("error", "")])
    Path(path).write_text(buf.getvalue())


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------- reports

def naive_metrics(trace_csv) -> dict:
    """Recompute the headline metrics straight from a trace file with plain Python."""
    e, labels, delta, t = [], [], [], []
    with open(trace_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            t.append(float(row["t"]))
            e.append(float(row["d_err"]))
            labels.append(row["kappa_class"])
            delta.append(float(row["delta"]))
    out = {}
    for cls, key in (("Straight", "straight"), ("Turn", "turn"), (None, "overall")):
        sel = [v for v, c in zip(e, labels) if cls is None or c == cls]
        out[f"mle_{key}"] = max((abs(v) for v in sel), default=math.nan)
        out[f"rmse_{key}"] = math.sqrt(sum(v * v for v in sel) / len(sel)) if sel else math.nan
    t_s = t[1] - t[0] if len(t) > 1 else 1.0
    rates = [abs(b - a) / t_s for a, b in zip(delta, delta[1:])]
    out["steer_rate_max"] = max(rates, default=0.0)
    return out


def verify_summary(summary_path, rel: float = 1e-6) -> list[str]:
    """Compare every summary row with a naive recomputation from its trace; return mismatches."""
    base = Path(summary_path).parent
    problems = []
    for row in read_summary_csv(summary_path):
        if not row.get("trace"):
            continue
        ref = naive_metrics(base / row["trace"])
        for key, want in ref.items():
            got = float(row[key])
            if math.isnan(want) and math.isnan(got):
                continue
            if not abs(got - want) <= rel * max(1.0, abs(want)):
                problems.append(f"{row['trace']}: {key} summary {got} vs trace {want}")
    return problems


def format_report(rows: list[dict]) -> str:
    """Tables grouped like the tracking / comfort / model-accuracy / perturbation views."""
    def num(r, k):
        try:
            return float(r.get(k, "nan"))
        except (TypeError, ValueError):
            return math.nan

    lines = []
    head = ("controller", "track", "profile", "pert")
    lines.append("## Lateral error (m)")
    lines.append("| " + " | ".join(head + ("MLE str", "RMSE str", "MLE turn", "RMSE turn",
                                            "MLE all", "RMSE all", "failed")) + " |")
    lines.append("|" + "---|" * (len(head) + 7))
    for r in rows:
        vals = [f"{num(r, k):.3f}" for k in ("mle_straight", "rmse_straight", "mle_turn",
                                              "rmse_turn", "mle_overall", "rmse_overall")]
        lines.append("| " + " | ".join([str(r[h]) for h in head] + vals + [str(r["failed"])]) + " |")
    lines.append("")
    lines.append("## Steering velocity (rad/s)")
    lines.append("| controller | track | profile | pert | max steering velocity |")
    lines.append("|---|---|---|---|---|")
    for r in rows:
        lines.append(f"| {r['controller']} | {r['track']} | {r['profile']} | {r['pert']} | "
                     f"{num(r, 'steer_rate_max'):.3f} |")
    glc = [r for r in rows if r["controller"] == "glc"]
    if glc:
        lines.append("")
        lines.append("## GVM one-step position RMSE (m)")
        lines.append("| track | profile | pert | RMSE |")
        lines.append("|---|---|---|---|")
        for r in glc:
            lines.append(f"| {r['track']} | {r['profile']} | {r['pert']} | {num(r, 'gvm_rmse'):.4f} |")
    lines.append("")
    lines.append("## Per-lap mean signed lateral error (m)")
    lines.append("| controller | track | profile | pert | per lap |")
    lines.append("|---|---|---|---|---|")
    for r in rows:
        laps = r.get("lap_mean_signed") or ""
        pretty = ", ".join(f"{float(v):+.3f}" for v in str(laps).split(";") if v and v != "nan")
        lines.append(f"| {r['controller']} | {r['track']} | {r['profile']} | {r['pert']} | {pretty} |")
    return "\n".join(lines) + "\n"


def report(summary_path, verify: bool = True) -> tuple[str, list[str]]:
    rows = read_summary_csv(summary_path)
    problems = verify_summary(summary_path) if verify else []
    return format_report(rows), problems


def load_trace(path) -> TraceLog:
    return read_trace_csv(path)


class GvmObserver(Policy):
    """Drive with ``base`` while a GVM predicts every next state (optionally learning)."""

    def __init__(self, base: Policy, gvm: GvmNet, learn: bool = False):
        self.base, self.gvm, self.learn_gvm = base, gvm, learn
        self.name = f"{base.name}+gvm"
        self.opt = gvm.make_optimizer(online=True) if learn else None

    def reset(self, path):
        self.base.reset(path)

    def act(self, ctx: StepContext) -> float:
        return self.base.act(ctx)

    def learn(self, ctx: StepContext, delta: float, X_next):
        from .gvm import PredictionError, gvm_loss, gvm_update
        try:
            X_hat, _, _ = self.gvm.predict(ctx.X, delta, ctx.throttle, ctx.delta_prev, ctx.path, ctx.s_k)
        except PredictionError:
            return None, math.nan, math.nan
        if self.learn_gvm:
            loss = gvm_update(self.gvm, X_next, X_hat, self.opt)
        else:
            loss = float(gvm_loss(X_next, X_hat).data)
        return X_hat.data.copy(), loss, math.nan


def gvm_holdout_rmse(gvm: GvmNet, params: PlantParams, track="oval", laps: float = 1.0,
                     v_ref: float = 10.0, pert: str = "none") -> float:
    """One-step position RMSE of a frozen GVM while MPC drives ``track``."""
    path = track if isinstance(track, ReferencePath) else load_track(track)
    policy = GvmObserver(MpcPolicy(params), gvm, learn=False)
    trace = simulate(policy, params, path, Perturbation.named(pert), v_ref=v_ref, laps=laps)
    return gvm_accuracy_report(trace)
