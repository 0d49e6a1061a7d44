import csv
import hashlib
import json
import math
import os
import subprocess
import sys

import pytest

from qladder.cli import EXIT_CONFIG, EXIT_DATA, main

TINY = {
    "segments": 6,
    "predictor": {t: {"n_trees": 6, "max_depth": 8} for t in ("dec_time", "quality", "bitrate")},
    "dqn": {"episodes": 3, "batch_size": 16, "hidden": [16, 8]},
    "seeds": [0, 1],
}


def digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def same(a, b):
    a, b = float(a), float(b)
    return a == b or (math.isnan(a) and math.isnan(b))


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "run.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", str(cfg)]
    assert main(["synth", *c, "--seed", "7", "--out", str(d / "corpus")]) == 0
    assert main(["train-predictors", *c, "--corpus", str(d / "corpus"), "--out", str(d / "pred")]) == 0
    assert main(["train-agent", *c, "--corpus", str(d / "corpus"), "--out", str(d / "agent")]) == 0
    return d, c


def test_synth_is_deterministic(work, tmp_path):
    d, c = work
    assert main(["synth", *c, "--seed", "7", "--out", str(tmp_path)]) == 0
    for name in ("features.csv", "measurements.csv", "config.resolved.json"):
        assert digest(tmp_path / name) == digest(d / "corpus" / name)


def test_synth_row_count(tmp_path):
    assert main(["synth", "--segments", "20", "--seed", "7", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "measurements.csv") as fh:
        assert sum(1 for _ in fh) == 20 * 246 + 1


def test_malformed_out_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--segments", "2", "--out", str(blocker)]) == EXIT_CONFIG
    assert main(["synth", "--segments", "2", "--out", str(blocker / "sub")]) == EXIT_CONFIG
    assert sorted(os.listdir(tmp_path)) == ["file"]


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    bad.write_text(json.dumps({"dqn": {"gamma": 1.5}}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["synth", "--weights", "1,-1,0", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_predictor_metrics(work):
    d, _ = work
    r = rows(d / "pred" / "predictor_metrics.csv")
    assert [x["target"] for x in r] == ["dec_time", "quality", "bitrate"]
    manifest = json.loads((d / "pred" / "predictors.json").read_text())
    assert manifest["metric"] == "xpsnr"
    assert not set(manifest["train"]) & set(manifest["test"])


def test_vmaf_quality_model(work, tmp_path):
    d, c = work
    assert main(["train-predictors", *c, "--metric", "vmaf", "--corpus", str(d / "corpus"),
                 "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "predictors.json").read_text())["metric"] == "vmaf"
    q = {x["target"]: float(x["rmse"]) for x in rows(tmp_path / "predictor_metrics.csv")}
    q0 = {x["target"]: float(x["rmse"]) for x in rows(d / "pred" / "predictor_metrics.csv")}
    assert q["quality"] != q0["quality"] and q["bitrate"] == q0["bitrate"]
    # an xpsnr agent cannot drive vmaf predictors
    assert main(["build", *c, "--corpus", str(d / "corpus"), "--predictors", str(tmp_path),
                 "--agent", str(d / "agent" / "agent.json"), "--out", str(tmp_path / "b")]) == EXIT_DATA


def test_agent_outputs(work, tmp_path):
    d, c = work
    trace = rows(d / "agent" / "trace.csv")
    assert len(trace) == TINY["dqn"]["episodes"]
    assert main(["train-agent", *c, "--corpus", str(d / "corpus"), "--out", str(tmp_path)]) == 0
    assert digest(tmp_path / "agent.json") == digest(d / "agent" / "agent.json")
    doc = json.loads((d / "agent" / "agent.json").read_text())
    assert set(doc["normalizer"]) == {"lo", "hi", "log_dims"}
    assert doc["network"]["sizes"] == [4, 16, 8, 246]


def test_episodes_override(work, tmp_path):
    d, c = work
    assert main(["train-agent", *c, "--episodes", "2", "--corpus", str(d / "corpus"), "--out", str(tmp_path)]) == 0
    assert len(rows(tmp_path / "trace.csv")) == 2
    assert json.loads((tmp_path / "config.resolved.json").read_text())["dqn"]["episodes"] == 2


def test_build(work, tmp_path):
    d, c = work
    args = ["build", *c, "--corpus", str(d / "corpus"), "--predictors", str(d / "pred"),
            "--agent", str(d / "agent" / "agent.json")]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    files = sorted(os.listdir(tmp_path / "a" / "ladders"))
    assert len(files) == 2
    for f in files:
        doc = json.loads((tmp_path / "a" / "ladders" / f).read_text())
        assert len(doc["rungs"]) == 12
        assert doc["meta"]["weights"] == [0.8, 0.6, 0.1]
        assert digest(tmp_path / "a" / "ladders" / f) == digest(tmp_path / "b" / "ladders" / f)
    timing = rows(tmp_path / "a" / "build_timing.csv")
    assert set(timing[0]) == {"segment_id", "feature_load_ms", "prediction_ms", "decision_ms_per_rung",
                              "decision_ms_total"}


def test_evaluate_and_robustness(work, tmp_path):
    d, c = work
    common = [*c, "--corpus", str(d / "corpus"), "--predictors", str(d / "pred"),
              "--agent", str(d / "agent" / "agent.json")]
    assert main(["evaluate", *common, "--out", str(tmp_path / "ev")]) == 0
    ev = {r["method"]: r for r in rows(tmp_path / "ev" / "evaluation.csv")}
    assert set(ev) == {"hls", "cdbl", "rqtpf", "vexus", "dq"}
    assert float(ev["hls"]["bd_rate_pct"]) == 0 and float(ev["hls"]["bd_metric"]) == 0
    assert all(r["switch"] for r in ev.values())

    assert main(["robustness", *common, "--noise", "0,0.2", "--out", str(tmp_path / "rb")]) == 0
    rb = rows(tmp_path / "rb" / "robustness.csv")
    assert len(rb) == 2 * 2
    zero = {r["method"]: r for r in rb if float(r["noise_pct"]) == 0}
    for m in ("dq", "cdbl"):
        # an undertrained agent may yield too few distinct anchors; nan must then match nan
        assert same(zero[m]["bd_rate_pct_mean"], ev[m]["bd_rate_pct"])
        assert same(zero[m]["bd_metric_mean"], ev[m]["bd_metric"])
        assert same(zero[m]["bd_metric_std"], 0.0 if not math.isnan(float(ev[m]["bd_metric"])) else "nan")

    assert main(["robustness", *common, "--noise", "0,0.2", "--out", str(tmp_path / "rb2")]) == 0
    assert digest(tmp_path / "rb" / "robustness.csv") == digest(tmp_path / "rb2" / "robustness.csv")


def test_bd_command(tmp_path):
    ref = tmp_path / "ref.csv"
    test = tmp_path / "test.csv"
    ref.write_text("rate,metric,dec_time\n200,30,1\n500,33,2\n1200,36,3\n3000,38.5,4\n")
    test.write_text("rate,metric,dec_time\n220,30,2\n550,33,3\n1320,36,4\n3300,38.5,5\n")
    assert main(["bd", "--reference", str(ref), "--test", str(test), "--out", str(tmp_path / "o")]) == 0
    r = rows(tmp_path / "o" / "bd.csv")[0]
    assert float(r["bd_rate_pct"]) == pytest.approx(10.0, abs=0.01)
    assert float(r["bd_detime_s"]) > 0
    assert main(["bd", "--reference", str(ref), "--test", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_ingest_round_trip(work, tmp_path):
    d, c = work
    assert main(["ingest", "--log", str(d / "corpus" / "measurements.csv"), "--features",
                 str(d / "corpus" / "features.csv"), "--out", str(tmp_path)]) == 0
    assert digest(tmp_path / "measurements.csv") == digest(d / "corpus" / "measurements.csv")
    broken = tmp_path / "broken.csv"
    lines = (d / "corpus" / "measurements.csv").read_text().splitlines()
    broken.write_text("\n".join(lines[:-3]) + "\n")
    assert main(["ingest", "--log", str(broken), "--features", str(d / "corpus" / "features.csv"),
                 "--out", str(tmp_path / "x")]) == EXIT_DATA
    assert main(["train-predictors", "--corpus", str(tmp_path / "nowhere"), "--out", str(tmp_path / "y")]) == EXIT_DATA


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "qladder.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "ingest", "train-predictors", "train-agent", "build", "evaluate", "robustness", "bd"):
        assert cmd in out.stdout
