import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glclab.gvm import pretraining_track
from glclab.harness import (SUMMARY_COLUMNS, SuiteConfig, format_report, naive_metrics,
                            read_summary_csv, report, run_episode, run_suite, verify_summary)
from glclab.metrics import (TRACE_COLUMNS, EmptyTraceError, TraceLog, compute_metrics,
                            gvm_accuracy_report, mle, read_trace_csv, rmse, steering_velocity_max,
                            write_trace_csv)
from glclab.plant import get_profile
from glclab.track import classify_segments, load_track


def make_trace(errors, labels=None, delta=None, offset=(0.0, 0.0), laps=None):
    tr = TraceLog(t_s=0.1)
    n = len(errors)
    labels = labels or ["Straight"] * n
    delta = [0.0] * n if delta is None else delta
    laps = laps or [0] * n
    for k in range(n):
        x, y = float(k), 0.0
        tr.append(lap=laps[k], t=0.1 * k, x=x, y=y, theta=0.0, v=10.0, x_hat=x + offset[0],
                  y_hat=y + offset[1], theta_hat=0.0, v_hat=10.0, delta=delta[k], delta_eff=delta[k],
                  throttle=0.3, yd_x=x + 1, yd_y=0.0, d_err=errors[k], kappa_class=labels[k],
                  loss_m=0.0, loss_c=0.0)
    return tr


# ------------------------------------------------------------------- metrics

def test_mle_rmse_example():
    r = compute_metrics(make_trace([1.0, -2.0, 3.0]))
    assert abs(r.mle_overall - 3.0) <= 1e-12
    assert abs(r.rmse_overall - math.sqrt(14 / 3)) <= 1e-12
    assert math.sqrt(14 / 3) == pytest.approx(2.1602, abs=1e-4)


def test_all_zero_errors():
    r = compute_metrics(make_trace([0.0] * 5))
    assert r.mle_overall == 0.0 and r.rmse_overall == 0.0


def test_steering_velocity_example():
    assert steering_velocity_max([0.0, 0.05], 0.1) == pytest.approx(0.5, abs=1e-12)
    r = compute_metrics(make_trace([0.0, 0.0], delta=[0.0, 0.05]))
    assert r.steer_rate_max == pytest.approx(0.5, abs=1e-12)


def test_empty_trace_raises():
    with pytest.raises(EmptyTraceError):
        compute_metrics(TraceLog())
    assert math.isnan(mle([])) and math.isnan(rmse([]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.booleans()), min_size=1, max_size=60))
def test_class_split_invariants(rows):
    e = [r[0] for r in rows]
    labels = ["Straight" if r[1] else "Turn" for r in rows]
    rep = compute_metrics(make_trace(e, labels))
    classes = [v for v in (rep.mle_straight, rep.mle_turn) if not math.isnan(v)]
    assert rep.mle_overall == max(classes)
    assert rep.rmse_overall >= 0
    n_s, n_t = labels.count("Straight"), labels.count("Turn")
    assert n_s + n_t == len(e)
    # class RMSEs recombine into the overall one
    ms = 0.0 if n_s == 0 else rep.rmse_straight ** 2 * n_s
    mt = 0.0 if n_t == 0 else rep.rmse_turn ** 2 * n_t
    assert math.sqrt((ms + mt) / len(e)) == pytest.approx(rep.rmse_overall, rel=1e-9, abs=1e-12)


def test_per_lap_series():
    rep = compute_metrics(make_trace([0.1, -0.1, 0.2, 0.2], laps=[0, 0, 1, 1]))
    assert rep.lap_rmse == pytest.approx([0.1, 0.2])
    assert rep.lap_mean_signed == pytest.approx([0.0, 0.2])
    one = compute_metrics(make_trace([0.1, -0.1, 0.2, 0.2], laps=[0, 0, 1, 1]), lap=1)
    assert one.rmse_overall == pytest.approx(0.2) and one.steps == 2


def test_every_waypoint_has_one_class():
    for name in ("oval", "figure_eight", "chicane"):
        labels = classify_segments(load_track(name))
        assert set(labels.tolist()) <= {"Straight", "Turn"}


def test_gvm_accuracy_examples():
    assert gvm_accuracy_report(make_trace([0.0] * 4)) == 0.0
    assert gvm_accuracy_report(make_trace([0.0] * 4, offset=(0.01, 0.0))) == pytest.approx(0.01, abs=1e-12)


def test_trace_csv_round_trip(tmp_path):
    tr = make_trace([0.1, -0.25, 0.3], labels=["Straight", "Turn", "Turn"], delta=[0.0, 0.01, 0.02])
    f = tmp_path / "t.csv"
    write_trace_csv(tr, f)
    assert f.read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)
    back = read_trace_csv(f)
    assert back.rows == tr.rows
    a, b = compute_metrics(tr), compute_metrics(back)
    assert a.rmse_overall == b.rmse_overall and a.mle_turn == b.mle_turn
    naive = naive_metrics(f)
    assert naive["rmse_overall"] == pytest.approx(a.rmse_overall, rel=1e-12)
    assert naive["steer_rate_max"] == pytest.approx(a.steer_rate_max, rel=1e-9)


def test_trace_row_needs_every_column():
    with pytest.raises(KeyError):
        TraceLog().append(t=0.0)


# --------------------------------------------------------------------- suite

def small_config(tmp_path, **kw):
    base = dict(controllers=("stanley", "mpc"), tracks=("oval",), perts=("none", "d1"), laps=0.3,
                out_dir=str(tmp_path))
    base.update(kw)
    return SuiteConfig(**base)


def test_single_cell_suite_has_one_row(tmp_path):
    rows, summary = run_suite(small_config(tmp_path, controllers=("stanley",), perts=("none",)))
    assert len(rows) == 1 and len(read_summary_csv(summary)) == 1
    header = summary.read_text().splitlines()[0].split(",")
    assert tuple(header[:len(SUMMARY_COLUMNS)]) == SUMMARY_COLUMNS
    assert (tmp_path / "traces").is_dir() and (tmp_path / "config.json").exists()


def test_suite_is_deterministic_and_verified(tmp_path):
    _, a = run_suite(small_config(tmp_path / "a"))
    _, b = run_suite(small_config(tmp_path / "b"))
    assert a.read_bytes() == b.read_bytes()
    assert len(read_summary_csv(a)) == 4
    assert verify_summary(a) == []
    text, problems = report(a)
    assert problems == [] and "## Steering velocity" in text


def test_verify_summary_catches_tampering(tmp_path):
    _, summary = run_suite(small_config(tmp_path, controllers=("stanley",), perts=("none",)))
    lines = summary.read_text().splitlines()
    cols = lines[0].split(",")
    row = lines[1].split(",")
    i = cols.index("rmse_overall")
    row[i] = repr(float(row[i]) + 0.01)
    summary.write_text("\n".join([lines[0], ",".join(row)]) + "\n")
    assert any("rmse_overall" in p for p in verify_summary(summary))


def test_output_directory_env_override(tmp_path, monkeypatch):
    target = tmp_path / "elsewhere"
    monkeypatch.setenv("GLCLAB_OUT", str(target))
    _, summary = run_suite(small_config(tmp_path / "configured", controllers=("stanley",),
                                        perts=("none",)))
    assert summary == target / "summary.csv" and summary.exists()
    assert not (tmp_path / "configured").exists()


def test_failed_cell_is_recorded_not_raised(tmp_path):
    cfg = small_config(tmp_path, controllers=("stanley",), perts=("none",),
                       tracks=("oval", str(tmp_path / "missing.csv")))
    rows, summary = run_suite(cfg)
    by_track = {r["track"]: r for r in read_summary_csv(summary)}
    assert by_track["oval"]["failed"] == "0"
    bad = by_track[str(tmp_path / "missing.csv")]
    assert bad["failed"] == "1" and bad["error"]


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        SuiteConfig.from_dict({"seeds": 3})
    with pytest.raises(ValueError):
        SuiteConfig(controllers=("pure_pursuit",))
    with pytest.raises(ValueError):
        SuiteConfig(perts=("d3",))


def test_stanley_d1_sign_variants_mirror_on_straight():
    params = get_profile("profile-A")
    path = pretraining_track(length=400.0)
    plus = run_episode("stanley", path, params, "d1+", steps=300).report
    minus = run_episode("stanley", path, params, "d1-", steps=300).report
    assert plus.lap_mean_signed[0] > 0.05
    assert plus.lap_mean_signed[0] == pytest.approx(-minus.lap_mean_signed[0], abs=1e-9)
    assert plus.mle_overall == pytest.approx(minus.mle_overall, abs=1e-9)


def test_glc_run_needs_gvm_checkpoint():
    with pytest.raises(FileNotFoundError):
        run_episode("glc", "oval", get_profile("profile-A"), steps=5)


def test_format_report_tables():
    rows = [{"controller": "mpc", "track": "oval", "profile": "profile-A", "pert": "none",
             "failed": "0", "rmse_overall": "0.1", "lap_mean_signed": "0.01;-0.02"}]
    text = format_report(rows)
    assert "## Lateral error (m)" in text and "+0.010, -0.020" in text
    assert "GVM one-step" not in text
