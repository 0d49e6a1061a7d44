"""End-to-end pipeline steps behind the command-line tool.

Each step returns its outputs as ``{file name: str | bytes}`` so callers can
write them atomically, compare them, or keep them in memory.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from typing import Optional, Sequence

import numpy as np

from . import bdmetrics, ladder as lad, predictors as pred
from .config import RunConfig
from .domain import ConfigSpace, validate_ladder
from .environment import DataError, MeasurementLog, fmt, generate_synthetic_corpus, perturb_grid
from .qnet import Agent, InvariantError, train, trace_csv

log = logging.getLogger(__name__)

FEATURES_FILE = "features.csv"
LOG_FILE = "measurements.csv"
MANIFEST_FILE = "predictors.json"
AGENT_FILE = "agent.json"
METHODS = ("hls", "cdbl", "rqtpf", "vexus", "dq")
ROBUST_METHODS = ("dq", "cdbl")


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


# -- corpus ---------------------------------------------------------------------

def synth(cfg: RunConfig) -> dict:
    _, mlog = generate_synthetic_corpus(cfg.segments, cfg.seed)
    return {FEATURES_FILE: mlog.features_csv(), LOG_FILE: mlog.log_csv()}


def ingest(cfg: RunConfig, log_text: str, features_text: str) -> dict:
    """Validate an external CSV pair and rewrite it in canonical units."""
    mlog = MeasurementLog.from_csv(log_text, features_text, ConfigSpace(),
                                   cfg.bitrate_scale, cfg.time_scale)
    return {FEATURES_FILE: mlog.features_csv(), LOG_FILE: mlog.log_csv()}


def load_corpus(directory: str) -> MeasurementLog:
    try:
        with open(f"{directory}/{LOG_FILE}") as fh:
            log_text = fh.read()
        with open(f"{directory}/{FEATURES_FILE}") as fh:
            feat_text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read corpus in {directory}: {exc}") from None
    return MeasurementLog.from_csv(log_text, feat_text)


def split(cfg: RunConfig, mlog: MeasurementLog) -> tuple:
    return pred.split_segments(mlog.segment_ids, cfg.test_fraction, cfg.split_seed)


def eval_segments(cfg: RunConfig, mlog: MeasurementLog) -> list:
    return split(cfg, mlog)[1] if cfg.eval_split == "test" else sorted(mlog.segment_ids)


# -- predictors -------------------------------------------------------------------

METRICS_HEADER = ["target", "r2", "rmse", "sdae", "mae_pct"]


def train_predictors(cfg: RunConfig, mlog: MeasurementLog, sweep: bool = False) -> tuple:
    """Fit the three models on the training split and score them on the test split.

    Returns (primary outputs, timing outputs); inference timings vary between
    runs so they are kept apart from the deterministic files.
    """
    train_ids, test_ids = split(cfg, mlog)
    params = cfg.predictor_params
    out = {}
    sweep_rows = []
    rows, timing = [], []
    for i, target in enumerate(pred.TARGETS):
        X, y, groups = pred.dataset_from_log(mlog, train_ids, target, cfg.metric)
        if sweep:
            best, table = pred.grid_search(X, y, groups, cfg.search_grid, k_folds=cfg.sweep_folds,
                                           base=params[target], seed=cfg.seed)
            params[target] = best
            sweep_rows += [[target, r["n_trees"], r["max_depth"], r["cv_rmse"], r["cv_rmse_std"]]
                           for r in table]
        model = pred.fit(X, y, params[target], seed=cfg.seed + i)
        Xt, yt, _ = pred.dataset_from_log(mlog, test_ids, target, cfg.metric)
        m = pred.evaluate(model, Xt, yt)
        rows.append([target, m.r2, m.rmse, m.sdae, m.mae_pct])
        timing.append([target, m.inference_time_s, len(yt)])
        out[f"{target}.model.gz"] = model.to_bytes()
        log.info("%s: R2=%.4f RMSE=%.4g MAE%%=%.2f", target, m.r2, m.rmse, m.mae_pct)
    out["predictor_metrics.csv"] = _csv(rows, METRICS_HEADER)
    if sweep:
        out["sweep.csv"] = _csv(sweep_rows, ["target", "n_trees", "max_depth", "cv_rmse", "cv_rmse_std"])
    out[MANIFEST_FILE] = json.dumps({"format": pred.MODEL_FORMAT, "version": pred.MODEL_VERSION,
                                     "metric": cfg.metric, "train": train_ids, "test": test_ids},
                                    indent=1) + "\n"
    timings = {"predictor_timing.csv": _csv(timing, ["target", "inference_time_s", "rows"])}
    return out, timings


def load_predictors(directory: str) -> pred.PredictorSet:
    try:
        with open(f"{directory}/{MANIFEST_FILE}") as fh:
            manifest = json.load(fh)
        models = {}
        for target in pred.TARGETS:
            with open(f"{directory}/{target}.model.gz", "rb") as fh:
                models[target] = pred.TreeEnsemble.from_bytes(fh.read())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read predictors in {directory}: {exc}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if manifest.get("format") != pred.MODEL_FORMAT or manifest.get("version") != pred.MODEL_VERSION:
        raise DataError(f"predictor manifest version {manifest.get('version')!r} is not supported")
    return pred.PredictorSet(metric=manifest["metric"], **models)


# -- agent ------------------------------------------------------------------------

def train_agent(cfg: RunConfig, mlog: MeasurementLog, segment_ids: Optional[Sequence[str]] = None) -> dict:
    ids = list(segment_ids) if segment_ids is not None else split(cfg, mlog)[0]
    res = train(mlog, ids, mlog.space, cfg.reward_weights, cfg.dqn_config, cfg.seed,
                cfg.penalty_policy, cfg.metric, mlog.bounds(cfg.metric))
    return {AGENT_FILE: res.agent.to_json(), "trace.csv": trace_csv(res.trace)}


def load_agent(path: str) -> Agent:
    try:
        with open(path) as fh:
            return Agent.from_json(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read agent checkpoint {path}: {exc}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"bad agent checkpoint {path}: {exc}") from None


def check_compatible(agent: Agent, predictors: pred.PredictorSet, mlog: MeasurementLog) -> None:
    if agent.metric != predictors.metric:
        raise DataError(f"agent trained on {agent.metric} but predictors model {predictors.metric}")
    if agent.space != mlog.space:
        raise DataError("agent action space does not match the corpus")


# -- ladders ------------------------------------------------------------------------

def build(cfg: RunConfig, mlog: MeasurementLog, predictors: pred.PredictorSet, agent: Agent,
          segment_ids: Optional[Sequence[str]] = None) -> tuple:
    """DQ ladder documents per segment, plus a timing breakdown kept apart."""
    check_compatible(agent, predictors, mlog)
    ids = list(segment_ids) if segment_ids is not None else eval_segments(cfg, mlog)
    out = {}
    timing = []
    for sid in ids:
        t0 = time.perf_counter()
        feats = mlog.features[sid]
        t_load = time.perf_counter() - t0
        tm = {}
        ladder = lad.infer_ladder(agent, predictors, feats, cfg.reward_weights, cfg.penalty_policy,
                                  timings=tm)
        bad = [v for v in validate_ladder(ladder, mlog.space) if not ladder.rungs[v.index].flags]
        if bad:
            raise InvariantError(f"{sid}: emitted ladder violates {bad[0]}")
        out[f"ladders/{sid}.json"] = lad.ladder_json(ladder)
        per_rung = tm["decision_s"]
        timing.append([sid, t_load * 1e3, tm["prediction_s"] * 1e3, float(np.mean(per_rung)) * 1e3,
                       float(np.sum(per_rung)) * 1e3])
    timings = {"build_timing.csv": _csv(timing, ["segment_id", "feature_load_ms", "prediction_ms",
                                                 "decision_ms_per_rung", "decision_ms_total"])}
    return out, timings


def method_ladders(cfg: RunConfig, mlog: MeasurementLog, predictors: pred.PredictorSet,
                   agent: Agent, segment_ids: Sequence[str], noise_pct: float = 0.0,
                   noise_seed: int = 0, methods: Sequence[str] = METHODS) -> dict:
    """Ladders per method for the given segments.

    HLS fills QPs from measured bitrates. The other baselines read predicted
    grids unless ``cfg.baseline_source`` is ``measured``. Noise perturbs the
    predictions seen by the agent and by CDBL.
    """
    space, metric = mlog.space, cfg.metric
    out = {m: [] for m in methods}
    for k, sid in enumerate(segment_ids):
        feats = mlog.features[sid]
        measured = mlog.grid(sid)
        predicted = lad.predicted_grid(predictors, feats, space)
        base = predicted if cfg.baseline_source == "predicted" else measured
        if "hls" in out:
            out["hls"].append(lad.hls_ladder(measured, space, metric))
        if "cdbl" in out:
            g = perturb_grid(base, noise_pct, np.random.default_rng([noise_seed, k, 0]))
            out["cdbl"].append(lad.cdbl_ladder(g, cfg.tau_l, space, metric))
        if "rqtpf" in out:
            out["rqtpf"].append(lad.rqtpf_ladder(base, cfg.alpha, space, metric))
        if "vexus" in out:
            out["vexus"].append(lad.vexus_ladder(base, space, metric))
        if "dq" in out:
            out["dq"].append(lad.infer_ladder(agent, predictors, feats, cfg.reward_weights,
                                              cfg.penalty_policy, noise_pct,
                                              np.random.default_rng([noise_seed, k, 1]), grid=predicted))
    return out


EVAL_HEADER = ["method", "bd_rate_pct", "bd_metric", "bd_entime_s", "bd_detime_s", "switch",
               "violations", "quality", "dec_time_s", "bitrate_kbps"]


def evaluate(cfg: RunConfig, mlog: MeasurementLog, predictors: pred.PredictorSet, agent: Agent) -> dict:
    """Compare every method against the HLS template on measured outcomes."""
    check_compatible(agent, predictors, mlog)
    ids = eval_segments(cfg, mlog)
    ladders = method_ladders(cfg, mlog, predictors, agent, ids)
    out = {}
    rows = []
    for method in METHODS:
        report = bdmetrics.compare_ladders(mlog, ladders["hls"], ladders[method], cfg.metric, mlog.space)
        out[f"compare_{method}.csv"] = report.csv()
        mean = report.mean
        summ = [lad.ladder_summary(l, mlog.grid(l.segment_id), mlog.space) for l in ladders[method]]
        rows.append([method, mean.bd_rate_pct, mean.bd_metric, mean.bd_entime_s, mean.bd_detime_s,
                     mean.switch_B, mean.violations_B,
                     float(np.mean([s["quality"] for s in summ])),
                     float(np.mean([s["dec_time_s"] for s in summ])),
                     float(np.mean([s["bitrate_kbps"] for s in summ]))])
    out["evaluation.csv"] = _csv(rows, EVAL_HEADER)
    return out


ROBUST_HEADER = ["method", "noise_pct", "bd_rate_pct_mean", "bd_rate_pct_std",
                 "bd_metric_mean", "bd_metric_std", "n_seeds"]


def robustness(cfg: RunConfig, mlog: MeasurementLog, predictors: pred.PredictorSet,
               agents: Sequence[Agent]) -> dict:
    """BD-rate and BD-metric against HLS per noise level, mean and std over seeds.

    Seed ``k`` pairs ``agents[k]`` (or the single agent) with noise stream
    ``cfg.seeds[k]``.
    """
    if not agents:
        raise ValueError("need at least one agent")
    for a in agents:
        check_compatible(a, predictors, mlog)
    ids = eval_segments(cfg, mlog)
    pairs = [(agents[k] if len(agents) > 1 else agents[0], s) for k, s in enumerate(cfg.seeds)]
    if len(agents) > 1 and len(agents) != len(cfg.seeds):
        raise ValueError(f"{len(agents)} agents for {len(cfg.seeds)} seeds")
    hls = [lad.hls_ladder(mlog.grid(s), mlog.space, cfg.metric) for s in ids]
    rows = []
    for noise in cfg.noise:
        per = {m: [] for m in ROBUST_METHODS}
        for agent, seed in pairs:
            ladders = method_ladders(cfg, mlog, predictors, agent, ids, noise, seed, ROBUST_METHODS)
            for m in ROBUST_METHODS:
                mean = bdmetrics.compare_ladders(mlog, hls, ladders[m], cfg.metric, mlog.space).mean
                per[m].append((mean.bd_rate_pct, mean.bd_metric))
        for m in ROBUST_METHODS:
            v = np.array(per[m])
            rows.append([m, float(noise), float(v[:, 0].mean()), float(v[:, 0].std()),
                         float(v[:, 1].mean()), float(v[:, 1].std()), len(v)])
    return {"robustness.csv": _csv(rows, ROBUST_HEADER)}


# -- standalone BD -----------------------------------------------------------------------

def bd_from_csv(reference_text: str, test_text: str, metric_column: str = "metric") -> dict:
    ref = bdmetrics.read_curve_csv(reference_text)
    tst = bdmetrics.read_curve_csv(test_text)
    if metric_column not in ref or metric_column not in tst:
        raise DataError(f"both curves need a {metric_column!r} column")
    row = {
        "bd_rate_pct": bdmetrics.bd_rate(bdmetrics.RdCurve.from_points(ref["rate"], ref[metric_column]),
                                         bdmetrics.RdCurve.from_points(tst["rate"], tst[metric_column])),
        "bd_metric": bdmetrics.bd_metric(bdmetrics.RdCurve.from_points(ref["rate"], ref[metric_column]),
                                         bdmetrics.RdCurve.from_points(tst["rate"], tst[metric_column])),
    }
    for col, name in (("enc_time", "bd_entime_s"), ("dec_time", "bd_detime_s")):
        if col in ref and col in tst:
            row[name] = bdmetrics.bd_time(bdmetrics.RdCurve.from_points(ref["rate"], ref[col], repair=False),
                                          bdmetrics.RdCurve.from_points(tst["rate"], tst[col], repair=False))
    return {"bd.csv": _csv([list(row.values())], list(row))}
