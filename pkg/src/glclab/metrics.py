"""Episode traces, lateral-error metrics and the trace CSV format."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRACE_COLUMNS = ("t", "x", "y", "theta", "v", "x_hat", "y_hat", "theta_hat", "v_hat", "delta",
                 "delta_eff", "throttle", "yd_x", "yd_y", "d_err", "kappa_class", "loss_m", "loss_c")


class EmptyTraceError(ValueError):
    pass


@dataclass
class TraceLog:
    t_s: float = 0.1
    rows: list = field(default_factory=list)
    laps: list = field(default_factory=list)  # lap index per row
    failed: bool = False
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def append(self, lap: int = 0, **values):
        missing = set(TRACE_COLUMNS) - set(values)
        if missing:
            raise KeyError(f"trace row missing {sorted(missing)}")
        self.rows.append(tuple(values[c] for c in TRACE_COLUMNS))
        self.laps.append(lap)

    def column(self, name: str) -> np.ndarray:
        i = TRACE_COLUMNS.index(name)
        if name == "kappa_class":
            return np.array([r[i] for r in self.rows], dtype=object)
        return np.array([r[i] for r in self.rows], dtype=float)

    def to_csv(self, path):
        write_trace_csv(self, path)


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(round(v, 9))


def write_trace_csv(trace: TraceLog, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace.rows:
            w.writerow([_fmt(v) for v in row])


def read_trace_csv(path, t_s: float = 0.1) -> TraceLog:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected trace header")
        trace = TraceLog(t_s=t_s)
        ci = TRACE_COLUMNS.index("kappa_class")
        for row in reader:
            trace.rows.append(tuple(v if i == ci else float(v) for i, v in enumerate(row)))
            trace.laps.append(0)
    return trace


# ------------------------------------------------------------------- metrics

def mle(e) -> float:
    e = np.asarray(e, dtype=float)
    return float(np.max(np.abs(e))) if e.size else float("nan")


def rmse(e) -> float:
    e = np.asarray(e, dtype=float)
    return float(np.sqrt(np.mean(e * e))) if e.size else float("nan")


def steering_velocity_max(delta, t_s: float) -> float:
    delta = np.asarray(delta, dtype=float)
    if delta.size < 2:
        return 0.0
    return float(np.max(np.abs(np.diff(delta))) / t_s)


@dataclass
class MetricsReport:
    mle_straight: float
    rmse_straight: float
    mle_turn: float
    rmse_turn: float
    mle_overall: float
    rmse_overall: float
    steer_rate_max: float
    failed: bool
    lap_rmse: list
    lap_mean_signed: list = field(default_factory=list)
    lap_mean_abs: list = field(default_factory=list)
    steps: int = 0

    def as_row(self) -> dict:
        return {
            "mle_straight": self.mle_straight, "rmse_straight": self.rmse_straight,
            "mle_turn": self.mle_turn, "rmse_turn": self.rmse_turn,
            "mle_overall": self.mle_overall, "rmse_overall": self.rmse_overall,
            "steer_rate_max": self.steer_rate_max, "failed": int(self.failed),
            "steps": self.steps,
            "lap_rmse": ";".join(_fmt(v) for v in self.lap_rmse),
        }


def compute_metrics(trace: TraceLog, labels=None, laps=None, lap: int | None = None) -> MetricsReport:
    """MLE / RMSE per curvature class and overall, max steering rate, per-lap series.

    ``lap`` restricts the class and overall figures to one lap.
    """
    if len(trace) == 0:
        raise EmptyTraceError("cannot compute metrics of an empty trace")
    e = trace.column("d_err")
    labels = trace.column("kappa_class") if labels is None else np.asarray(labels, dtype=object)
    laps = np.asarray(trace.laps if laps is None else laps)
    delta = trace.column("delta")
    sel = np.ones(len(e), dtype=bool) if lap is None else laps == lap
    if not sel.any():
        raise EmptyTraceError(f"trace has no rows for lap {lap}")
    es, ls = e[sel], labels[sel]
    straight = es[ls == "Straight"]
    turn = es[ls == "Turn"]
    lap_ids = sorted(set(laps.tolist()))
    return MetricsReport(
        mle_straight=mle(straight), rmse_straight=rmse(straight),
        mle_turn=mle(turn), rmse_turn=rmse(turn),
        mle_overall=mle(es), rmse_overall=rmse(es),
        steer_rate_max=steering_velocity_max(delta[sel], trace.t_s),
        failed=trace.failed,
        lap_rmse=[rmse(e[laps == i]) for i in lap_ids],
        lap_mean_signed=[float(np.mean(e[laps == i])) for i in lap_ids],
        lap_mean_abs=[float(np.abs(np.mean(e[laps == i]))) for i in lap_ids],
        steps=int(sel.sum()),
    )


def gvm_accuracy_report(trace: TraceLog) -> float:
    """RMSE of the 2-D one-step position prediction error (rows with a prediction)."""
    x, y = trace.column("x"), trace.column("y")
    xh, yh = trace.column("x_hat"), trace.column("y_hat")
    ok = np.isfinite(xh) & np.isfinite(yh)
    if not ok.any():
        return float("nan")
    return float(np.sqrt(np.mean((x[ok] - xh[ok]) ** 2 + (y[ok] - yh[ok]) ** 2)))
