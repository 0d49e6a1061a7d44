"""Bagged regression-tree ensembles for decoding time, quality and bitrate.

Inputs are the 5-vector (e_y, h, l_y, resolution, qp); see
:func:`qladder.domain.feature_vectors`.
"""
from __future__ import annotations

import gzip
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .domain import ConfigSpace, SegmentFeatures, check_metric, feature_vectors

MODEL_FORMAT = "qladder-tree-ensemble"
MODEL_VERSION = 1
N_FEATURES = 5
FEATURE_NAMES = ("e_y", "h", "l_y", "resolution", "qp")
TARGETS = ("dec_time", "quality", "bitrate")

# ensemble size x depth candidates for the grid search
DEFAULT_GRID = [{"n_trees": n, "max_depth": d} for n in (50, 100, 200, 300) for d in (3, 5, 7, 10)]


@dataclass(frozen=True)
class EnsembleParams:
    n_trees: int = 100
    max_depth: Optional[int] = 10
    min_samples_leaf: int = 2
    max_features: int = 3
    bootstrap: bool = True
    log_target: bool = False

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 1 <= self.max_features <= N_FEATURES:
            raise ValueError(f"max_features must lie in [1, {N_FEATURES}]")


@dataclass
class Tree:
    """Flat binary regression tree; ``feature == -1`` marks a leaf."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            n = node[active]
            go_left = X[active, self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = active[self.feature[node[active]] >= 0]
        return self.value[node]

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)


def _level_splits(codes: np.ndarray, pos: np.ndarray, y: np.ndarray, y2: np.ndarray, m: int,
                  n_bins: int, min_leaf: int) -> tuple:
    """Best variance-reduction cut of one coded feature for every node of a level.

    ``codes`` index the sorted unique values of the feature and ``pos`` gives
    each sample's node (0..m-1). Every cut between adjacent values present in
    a node is scored. Returns per-node arrays (gain, k_left, k_right) where
    k_left / k_right are the bins bordering the cut; gain is -inf when no cut
    leaves ``min_leaf`` samples on both sides.
    """
    key = pos * n_bins + codes
    size = m * n_bins
    cnt = np.bincount(key, minlength=size).reshape(m, n_bins)
    s = np.bincount(key, weights=y, minlength=size).reshape(m, n_bins)
    sq = np.bincount(key, weights=y2, minlength=size).reshape(m, n_bins)
    nl = np.cumsum(cnt, axis=1).astype(float)
    sl = np.cumsum(s, axis=1)
    ql = np.cumsum(sq, axis=1)
    n, total, total_sq = nl[:, -1:], sl[:, -1:], ql[:, -1:]
    nr = n - nl
    ok = (cnt > 0) & (nl >= min_leaf) & (nr >= min_leaf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sr = total - sl
        sse = (ql - sl * sl / nl) + ((total_sq - ql) - sr * sr / nr)
    sse = np.where(ok, sse, np.inf)
    rows = np.arange(m)
    k = np.argmin(sse, axis=1)
    best = sse[rows, k]
    parent = (total_sq - total * total / n)[:, 0]
    gain = np.where(np.isfinite(best), parent - best, -np.inf)
    # first present bin at or after each column, for the right edge of the cut
    nxt = np.where(cnt > 0, np.arange(n_bins), n_bins)
    nxt = np.minimum.accumulate(nxt[:, ::-1], axis=1)[:, ::-1]
    return gain, k, nxt[rows, np.minimum(k + 1, n_bins - 1)]


def _pick(gains: np.ndarray, order: np.ndarray, n_drawn: int) -> tuple:
    """Per node: the best feature among the first ``n_drawn`` of its random
    order, or among the rest when none of those admits a cut. Ties go to the
    earlier feature in the order. Returns (chosen column, has split)."""
    ranked = np.take_along_axis(gains, order, axis=1)
    valid = ranked > 0
    masked = np.where(valid, ranked, -np.inf)
    first = np.argmax(masked[:, :n_drawn], axis=1)
    has_first = valid[:, :n_drawn].any(axis=1)
    if n_drawn < gains.shape[1]:
        rest = n_drawn + np.argmax(masked[:, n_drawn:], axis=1)
        has_rest = valid[:, n_drawn:].any(axis=1)
    else:
        rest, has_rest = first, np.zeros_like(has_first)
    col = np.where(has_first, first, rest)
    return order[np.arange(len(order)), col], has_first | has_rest


def fit_tree(X: np.ndarray, y: np.ndarray, params: EnsembleParams, rng: np.random.Generator) -> Tree:
    """Grow one tree level by level; all nodes of a level are split together."""
    n, n_feat = X.shape
    uniques, codes = [], np.empty(X.shape, dtype=np.int64)
    for f in range(n_feat):
        u, inv = np.unique(X[:, f], return_inverse=True)
        uniques.append(u)
        codes[:, f] = inv
    y2 = y * y
    min_leaf = params.min_samples_leaf
    max_depth = params.max_depth if params.max_depth is not None else math.inf

    feature = np.array([-1], dtype=np.int64)
    threshold = np.zeros(1)
    left = np.array([-1], dtype=np.int64)
    right = np.array([-1], dtype=np.int64)
    value = np.array([float(np.mean(y))])
    count = np.array([n], dtype=np.int64)

    nodes = np.array([0])  # ids of the current level's open nodes
    rows = np.arange(n)  # samples still in open nodes
    pos = np.zeros(n, dtype=np.int64)  # their node, as an index into ``nodes``
    depth = 0
    while nodes.size and depth < max_depth:
        m = nodes.size
        yr = y[rows]
        lo = np.full(m, np.inf)
        hi = np.full(m, -np.inf)
        np.minimum.at(lo, pos, yr)
        np.maximum.at(hi, pos, yr)
        splittable = (count[nodes] >= 2 * min_leaf) & (lo < hi)
        gains = np.full((m, n_feat), -np.inf)
        kl = np.zeros((m, n_feat), dtype=np.int64)
        kr = np.zeros((m, n_feat), dtype=np.int64)
        for f in range(n_feat):
            gains[:, f], kl[:, f], kr[:, f] = _level_splits(
                codes[rows, f], pos, yr, y2[rows], m, len(uniques[f]), min_leaf)
        gains[~splittable] = -np.inf
        order = rng.permuted(np.tile(np.arange(n_feat), (m, 1)), axis=1)
        f_sel, split = _pick(gains, order, params.max_features)
        if not split.any():
            break
        idx = np.flatnonzero(split)
        f_sel = f_sel[idx]
        k_left, k_right = kl[idx, f_sel], kr[idx, f_sel]
        parents = nodes[idx]
        thr = np.array([0.5 * (uniques[f][a] + uniques[f][b]) for f, a, b in zip(f_sel, k_left, k_right)])

        # children: left then right for each split node, in level order
        base = len(feature)
        feature[parents] = f_sel
        threshold[parents] = thr
        left[parents] = base + 2 * np.arange(idx.size)
        right[parents] = left[parents] + 1

        rank = np.full(m, -1)
        rank[idx] = np.arange(idx.size)
        keep = rank[pos] >= 0
        rows, pos = rows[keep], pos[keep]
        goes_right = codes[rows, feature[nodes[pos]]] > k_left[rank[pos]]
        pos = 2 * rank[pos] + goes_right
        n_new = 2 * idx.size
        cnt = np.bincount(pos, minlength=n_new)
        sums = np.bincount(pos, weights=y[rows], minlength=n_new)

        feature = np.concatenate([feature, np.full(n_new, -1)])
        threshold = np.concatenate([threshold, np.zeros(n_new)])
        left = np.concatenate([left, np.full(n_new, -1)])
        right = np.concatenate([right, np.full(n_new, -1)])
        value = np.concatenate([value, sums / cnt])
        count = np.concatenate([count, cnt])
        nodes = base + np.arange(n_new)
        depth += 1
    return Tree(feature, threshold, left, right, value, count)


@dataclass
class TreeEnsemble:
    params: EnsembleParams
    seed: int
    trees: list = field(default_factory=list)

    def predict_trees(self, X) -> np.ndarray:
        """Per-tree predictions on the model's internal (possibly log) scale, shape (n_trees, n)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.array([t.predict(X) for t in self.trees])

    def predict(self, X) -> np.ndarray:
        out = self.predict_trees(X).mean(axis=0)
        return np.exp(out) if self.params.log_target else out

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT, "version": MODEL_VERSION,
            "features": list(FEATURE_NAMES),
            "params": asdict(self.params), "seed": self.seed,
            "trees": [{k: getattr(t, k).tolist() for k in
                       ("feature", "threshold", "left", "right", "value", "n_samples")}
                      for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsemble":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model file (format={d.get('format')!r}, version={d.get('version')!r})")
        trees = [Tree(np.array(t["feature"], dtype=np.int64), np.array(t["threshold"], dtype=float),
                      np.array(t["left"], dtype=np.int64), np.array(t["right"], dtype=np.int64),
                      np.array(t["value"], dtype=float), np.array(t["n_samples"], dtype=np.int64))
                 for t in d["trees"]]
        return cls(EnsembleParams(**d["params"]), d["seed"], trees)

    def to_bytes(self) -> bytes:
        raw = json.dumps(self.to_dict(), separators=(",", ":")).encode("utf-8")
        return gzip.compress(raw, mtime=0)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TreeEnsemble":
        return cls.from_dict(json.loads(gzip.decompress(data).decode("utf-8")))


def fit(X, y, params: EnsembleParams = EnsembleParams(), seed: int = 0) -> TreeEnsemble:
    """Fit a bagged ensemble of variance-reduction trees.

    Each tree gets its own generator spawned from ``seed``, so the result does
    not depend on the order in which trees are built.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(y) == 0:
        raise ValueError("cannot fit on an empty dataset")
    if X.shape != (len(y), N_FEATURES):
        raise ValueError(f"X must have shape (n, {N_FEATURES}), got {X.shape}")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise ValueError("features and targets must be finite")
    if params.log_target:
        if np.any(y <= 0):
            raise ValueError("log_target requires positive targets")
        y = np.log(y)
    trees = []
    for child in np.random.SeedSequence(seed).spawn(params.n_trees):
        rng = np.random.default_rng(child)
        if params.bootstrap:
            rows = rng.integers(0, len(y), len(y))
            trees.append(fit_tree(X[rows], y[rows], params, rng))
        else:
            trees.append(fit_tree(X, y, params, rng))
    return TreeEnsemble(params, seed, trees)


def predict(model: TreeEnsemble, x) -> float:
    return float(model.predict(np.asarray(x, dtype=float).reshape(1, -1))[0])


@dataclass(frozen=True)
class PredictorMetrics:
    r2: float
    rmse: float
    sdae: float
    mae_pct: float
    inference_time_s: float


def score(y_true, y_pred, inference_time_s: float = 0.0) -> PredictorMetrics:
    """R^2, RMSE, SDAE and MAE% = mean(|err| / |y|) * 100.

    R^2 is NaN when the targets have zero variance.
    """
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.size == 0:
        raise ValueError("empty test set")
    err = y_pred - y_true
    ss_res = float(np.sum(err ** 2))
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan
    abs_err = np.abs(err)
    return PredictorMetrics(r2, float(np.sqrt(np.mean(err ** 2))), float(np.std(abs_err)),
                            float(np.mean(abs_err / np.abs(y_true)) * 100.0), inference_time_s)


def evaluate(model: TreeEnsemble, X, y) -> PredictorMetrics:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t0 = time.perf_counter()
    pred = model.predict(X)
    elapsed = time.perf_counter() - t0
    return score(y, pred, elapsed)


# -- dataset assembly and splitting -------------------------------------------

def dataset_from_log(log, segment_ids: Sequence[str], target: str, metric: str = "xpsnr"):
    """(X, y, groups) rows for the given segments; target in dec_time|quality|bitrate."""
    Xs, ys, groups = [], [], []
    for sid in segment_ids:
        g = log.grid(sid)
        Xs.append(feature_vectors(log.features[sid], log.space))
        ys.append(target_values(g, target, metric))
        groups.extend([sid] * log.space.n_actions)
    return np.vstack(Xs), np.concatenate(ys), np.array(groups)


def target_values(grid, target: str, metric: str) -> np.ndarray:
    if target == "dec_time":
        return grid.dec_time
    if target == "bitrate":
        return grid.bitrate
    if target == "quality":
        return grid.quality(metric)
    raise ValueError(f"unknown target {target!r}")


def split_segments(segment_ids: Sequence[str], test_fraction: float = 0.3, seed: int = 42):
    """Shuffle segment ids and cut them into disjoint (train, test) lists."""
    ids = list(segment_ids)
    if len(ids) < 2:
        raise ValueError("need at least two segments to split")
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_test = min(len(ids) - 1, max(1, int(round(test_fraction * len(ids)))))
    test = sorted(ids[i] for i in perm[:n_test])
    train = sorted(ids[i] for i in perm[n_test:])
    return train, test


def group_folds(groups, k: int, seed: int = 0) -> list:
    """k row-index folds such that each group lands in exactly one fold."""
    if k < 2:
        raise ValueError("k_folds must be >= 2")
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    if len(uniq) < k:
        raise ValueError(f"{len(uniq)} groups cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(len(uniq))
    assignment = {uniq[j]: pos % k for pos, j in enumerate(perm)}
    fold_of = np.array([assignment[g] for g in groups])
    return [np.flatnonzero(fold_of == f) for f in range(k)]


def grid_search(X, y, groups, grid: Sequence[dict] = DEFAULT_GRID, k_folds: int = 5,
                base: EnsembleParams = EnsembleParams(), seed: int = 0):
    """Pick the candidate with the lowest mean cross-validated RMSE.

    Ties go to fewer trees, then shallower trees. Returns (best params, table).
    """
    if not grid:
        raise ValueError("empty hyperparameter grid")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    folds = group_folds(groups, k_folds, seed)
    table = []
    for cand in grid:
        params = EnsembleParams(**{**asdict(base), **cand})
        rmses = []
        for f, test_idx in enumerate(folds):
            train_idx = np.setdiff1d(np.arange(len(y)), test_idx)
            model = fit(X[train_idx], y[train_idx], params, seed=seed + f)
            rmses.append(score(y[test_idx], model.predict(X[test_idx])).rmse)
        table.append({**asdict(params), "cv_rmse": float(np.mean(rmses)),
                      "cv_rmse_std": float(np.std(rmses))})

    def key(row):
        depth = row["max_depth"] if row["max_depth"] is not None else math.inf
        return (row["cv_rmse"], row["n_trees"], depth)

    best = min(table, key=key)
    fields_ = set(asdict(base))
    return EnsembleParams(**{k: v for k, v in best.items() if k in fields_}), table


# -- the three-model predictor set ----------------------------------------------

def default_params(target: str) -> EnsembleParams:
    # bitrate spans four decades; fitting its log keeps relative errors even
    return EnsembleParams(log_target=(target == "bitrate"))


@dataclass
class PredictorSet:
    """Decoding-time, quality and bitrate models for one quality metric."""
    dec_time: TreeEnsemble
    quality: TreeEnsemble
    bitrate: TreeEnsemble
    metric: str = "xpsnr"

    def __post_init__(self):
        check_metric(self.metric)

    def predict_grid(self, features: SegmentFeatures, space: ConfigSpace):
        """Predicted (bitrate, quality, dec_time) arrays over every action."""
        X = feature_vectors(features, space)
        return self.bitrate.predict(X), self.quality.predict(X), self.dec_time.predict(X)

    def models(self) -> dict:
        return {"dec_time": self.dec_time, "quality": self.quality, "bitrate": self.bitrate}


def train_predictor_set(log, segment_ids: Sequence[str], metric: str = "xpsnr", seed: int = 0,
                        params: Optional[dict] = None) -> PredictorSet:
    params = params or {}
    models = {}
    for i, target in enumerate(TARGETS):
        X, y, _ = dataset_from_log(log, segment_ids, target, metric)
        models[target] = fit(X, y, params.get(target, default_params(target)), seed=seed + i)
    return PredictorSet(metric=metric, **models)
