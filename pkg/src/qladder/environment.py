"""Encoding environments: replayed measurement logs and a parametric surrogate.

Both backends answer ``measure(segment, action)`` with an EncodingOutcome and
``grid(segment)`` with the full outcome grid over a ConfigSpace.
"""
from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass, fields
from typing import Union

import numpy as np

from .domain import (Action, ConfigSpace, EncodingOutcome, SegmentFeatures,
                     check_metric, pixel_count)

LOG_HEADER = ["segment_id", "resolution", "qp", "bitrate_kbps", "xpsnr_db",
              "vmaf", "dec_time_s", "enc_time_s"]
FEATURES_HEADER = ["segment_id", "e_y", "h", "l_y"]

_MIN_DEC_TIME = 1e-6


class DataError(ValueError):
    """Malformed or incomplete measurement data."""


def fmt(x) -> str:
    # repr round-trips floats exactly
    return repr(float(x))


@dataclass(frozen=True)
class OutcomeGrid:
    """Outcomes for every action of one segment, in flat action-index order."""
    segment_id: str
    bitrate: np.ndarray
    xpsnr: np.ndarray
    vmaf: np.ndarray
    dec_time: np.ndarray
    enc_time: np.ndarray

    def quality(self, metric: str) -> np.ndarray:
        return getattr(self, check_metric(metric))

    def outcome(self, index: int) -> EncodingOutcome:
        return EncodingOutcome(float(self.bitrate[index]), float(self.dec_time[index]),
                               float(self.xpsnr[index]), float(self.vmaf[index]),
                               float(self.enc_time[index]))

    def replace(self, **arrays) -> "OutcomeGrid":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(arrays)
        return OutcomeGrid(**values)


@dataclass(frozen=True)
class SurrogateParams:
    """Coefficients of the synthetic rate/quality/time model."""
    bpp_at_ref_qp: float = 0.06       # bits per pixel at ref_qp for flat content
    ref_qp: int = 10
    qp_rate_base: float = 0.87        # bitrate multiplier per +1 QP
    texture_gain: float = 1.2
    motion_gain: float = 1.0
    fps: float = 60.0
    texture_ref: float = 100.0
    motion_ref: float = 60.0
    brightness_ref: float = 100.0
    # quality: logistic in QP, ceiling drops for upsampled low resolutions
    xpsnr_floor: float = 22.0
    xpsnr_ceiling: float = 48.0
    xpsnr_res_loss: float = 4.5       # dB lost per halving of height
    vmaf_ceiling: float = 100.0
    vmaf_res_loss: float = 9.0
    quality_mid_qp: float = 36.0
    quality_slope: float = 7.0
    texture_quality_shift: float = 6.0
    motion_quality_shift: float = 2.0
    brightness_quality_shift: float = 1.0
    # decoding time: per-megapixel cost + per-Mbps cost + constant
    dec_per_mpixel: float = 2.6
    dec_per_mbps: float = 0.12
    dec_base: float = 0.4
    dec_texture_gain: float = 0.15
    dec_motion_gain: float = 0.3
    dec_jitter: float = 0.05
    enc_per_mpixel: float = 8.0
    enc_qp_gain: float = 0.03
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
        if not 0 < self.qp_rate_base < 1:
            raise ValueError("qp_rate_base must lie in (0, 1)")


def _segment_key(segment_id: str) -> int:
    return zlib.crc32(segment_id.encode("utf-8"))


class SurrogateEnvironment:
    """Deterministic synthetic encoder/decoder standing in for real measurements."""

    def __init__(self, space: ConfigSpace = ConfigSpace(), params: SurrogateParams = SurrogateParams()):
        self.space = space
        self.params = params

    def _evaluate(self, feat: SegmentFeatures, res: np.ndarray, qp: np.ndarray) -> dict:
        p = self.params
        e = feat.e_y / p.texture_ref
        h = feat.h / p.motion_ref
        lum = feat.l_y / p.brightness_ref
        px = pixel_count(1) * res * res
        complexity = 1.0 + p.texture_gain * e + p.motion_gain * h
        bpp = p.bpp_at_ref_qp * p.qp_rate_base ** (qp - p.ref_qp) * complexity
        bitrate = bpp * px * p.fps / 1000.0

        halvings = np.log2(max(self.space.resolutions) / res)
        z = (p.quality_mid_qp - qp - p.texture_quality_shift * e - p.motion_quality_shift * h
             + p.brightness_quality_shift * (lum - 1.0)) / p.quality_slope
        s = 1.0 / (1.0 + np.exp(-z))
        xp_ceiling = p.xpsnr_ceiling - p.xpsnr_res_loss * halvings
        xpsnr = p.xpsnr_floor + (xp_ceiling - p.xpsnr_floor) * s
        vmaf = np.clip((p.vmaf_ceiling - p.vmaf_res_loss * halvings) * s, 0.0, 100.0)

        mpx = px / 1e6
        dec = (p.dec_per_mpixel * mpx * (1.0 + p.dec_texture_gain * e + p.dec_motion_gain * h)
               + p.dec_per_mbps * bitrate / 1000.0 + p.dec_base)
        enc = p.enc_per_mpixel * mpx * complexity * (1.0 + p.enc_qp_gain * (max(self.space.qps) - qp))
        if p.dec_jitter > 0:
            rng = np.random.default_rng([p.seed, _segment_key(feat.segment_id)])
            # jitter drawn over the whole grid so single queries agree with grid()
            full = np.exp(p.dec_jitter * rng.standard_normal(self.space.n_actions))
            idx = (np.searchsorted(self.space.resolutions, res) * len(self.space.qps)
                   + np.searchsorted(self.space.qps, qp))
            dec = dec * full[idx]
        return dict(bitrate=bitrate, xpsnr=xpsnr, vmaf=vmaf, dec_time=dec, enc_time=enc)

    def grid(self, segment: SegmentFeatures) -> OutcomeGrid:
        res = self.space.action_resolutions()
        qp = self.space.action_qps()
        return OutcomeGrid(segment.segment_id, **self._evaluate(segment, res, qp))

    def measure(self, segment: SegmentFeatures, action: Action) -> EncodingOutcome:
        self.space.action_index(action.resolution, action.qp)
        out = self._evaluate(segment, np.array([float(action.resolution)]), np.array([float(action.qp)]))
        return EncodingOutcome(float(out["bitrate"][0]), float(out["dec_time"][0]),
                               float(out["xpsnr"][0]), float(out["vmaf"][0]),
                               float(out["enc_time"][0]))


class MeasurementLog:
    """Complete factorial outcome grid per segment, plus segment features."""

    def __init__(self, space: ConfigSpace, features: dict, grids: dict):
        missing = set(grids) - set(features)
        if missing:
            raise DataError(f"outcomes for segments without features: {sorted(missing)[:5]}")
        absent = set(features) - set(grids)
        if absent:
            raise DataError(f"segments without outcomes: {sorted(absent)[:5]}")
        for sid, g in grids.items():
            for name in ("bitrate", "xpsnr", "vmaf", "dec_time", "enc_time"):
                arr = getattr(g, name)
                if arr.shape != (space.n_actions,) or not np.all(np.isfinite(arr)):
                    raise DataError(f"segment {sid}: incomplete or non-finite {name} grid")
            if np.any(g.bitrate <= 0) or np.any(g.dec_time <= 0):
                raise DataError(f"segment {sid}: bitrate and decoding time must be positive")
        self.space = space
        self.features = dict(features)
        self.grids = dict(grids)

    @property
    def segment_ids(self) -> list:
        return list(self.features)

    def __len__(self):
        return len(self.grids) * self.space.n_actions

    def _sid(self, segment: Union[str, SegmentFeatures]) -> str:
        sid = segment if isinstance(segment, str) else segment.segment_id
        if sid not in self.grids:
            raise KeyError(f"unknown segment {sid!r}")
        return sid

    def grid(self, segment) -> OutcomeGrid:
        return self.grids[self._sid(segment)]

    def measure(self, segment, action: Action) -> EncodingOutcome:
        g = self.grids[self._sid(segment)]
        return g.outcome(self.space.action_index(action.resolution, action.qp))

    def subset(self, segment_ids) -> "MeasurementLog":
        ids = list(segment_ids)
        return MeasurementLog(self.space, {s: self.features[s] for s in ids},
                              {s: self.grids[s] for s in ids})

    def bounds(self, metric: str) -> dict:
        """Corpus-wide min/max of bitrate, quality and decoding time."""
        b = np.concatenate([g.bitrate for g in self.grids.values()])
        q = np.concatenate([g.quality(metric) for g in self.grids.values()])
        t = np.concatenate([g.dec_time for g in self.grids.values()])
        return {"b_min": float(b.min()), "b_max": float(b.max()),
                "q_min": float(q.min()), "q_max": float(q.max()),
                "t_min": float(t.min()), "t_max": float(t.max())}

    # -- CSV -------------------------------------------------------------
    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for sid, g in self.grids.items():
            for i, a in enumerate(self.space.actions()):
                w.writerow([sid, a.resolution, a.qp, fmt(g.bitrate[i]), fmt(g.xpsnr[i]),
                            fmt(g.vmaf[i]), fmt(g.dec_time[i]), fmt(g.enc_time[i])])
        return buf.getvalue()

    def features_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FEATURES_HEADER)
        for f in self.features.values():
            w.writerow([f.segment_id, fmt(f.e_y), fmt(f.h), fmt(f.l_y)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, log_text: str, features_text: str, space: ConfigSpace = ConfigSpace(),
                 bitrate_scale: float = 1.0, time_scale: float = 1.0) -> "MeasurementLog":
        """Parse the CSV pair; scales convert source units to kbps / seconds."""
        features = read_features_csv(features_text)
        reader = csv.DictReader(io.StringIO(log_text))
        if reader.fieldnames is None or list(reader.fieldnames) != LOG_HEADER:
            raise DataError(f"measurement log header must be {','.join(LOG_HEADER)}")
        n = space.n_actions
        arrays = {}
        seen = {}
        for lineno, row in enumerate(reader, start=2):
            sid = row["segment_id"]
            try:
                idx = space.action_index(int(row["resolution"]), int(row["qp"]))
                values = [float(row[k]) for k in LOG_HEADER[3:]]
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            if sid not in arrays:
                arrays[sid] = np.full((5, n), np.nan)
                seen[sid] = np.zeros(n, dtype=bool)
            if seen[sid][idx]:
                raise DataError(f"line {lineno}: duplicate grid point for {sid}")
            seen[sid][idx] = True
            b, xp, vm, dt, et = values
            arrays[sid][:, idx] = (b * bitrate_scale, xp, vm, dt * time_scale, et * time_scale)
        for sid, mask in seen.items():
            if not mask.all():
                a = space.action(int(np.flatnonzero(~mask)[0]))
                raise DataError(f"segment {sid}: missing grid point ({a.resolution}, {a.qp}); "
                                f"{int((~mask).sum())} of {n} absent")
        grids = {sid: OutcomeGrid(sid, *arr) for sid, arr in arrays.items()}
        return cls(space, features, grids)


def read_features_csv(text: str) -> dict:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or list(reader.fieldnames) != FEATURES_HEADER:
        raise DataError(f"features header must be {','.join(FEATURES_HEADER)}")
    out = {}
    for lineno, row in enumerate(reader, start=2):
        try:
            f = SegmentFeatures(row["segment_id"], float(row["e_y"]), float(row["h"]), float(row["l_y"]))
        except ValueError as exc:
            raise DataError(f"features line {lineno}: {exc}") from None
        if f.segment_id in out:
            raise DataError(f"features line {lineno}: duplicate segment {f.segment_id}")
        out[f.segment_id] = f
    return out


def sample_features(n_segments: int, rng: np.random.Generator) -> list:
    """Content features spanning flat/static through detailed/high-motion segments."""
    e_y = np.clip(rng.lognormal(math.log(60.0), 0.4, n_segments), 15.0, 180.0)
    h = np.clip(rng.lognormal(math.log(25.0), 0.6, n_segments), 2.0, 120.0)
    l_y = rng.uniform(40.0, 160.0, n_segments)
    return [SegmentFeatures(f"seg{i:04d}", float(e), float(t), float(lum))
            for i, (e, t, lum) in enumerate(zip(e_y, h, l_y))]


def generate_synthetic_corpus(n_segments: int, seed: int, space: ConfigSpace = ConfigSpace(),
                              params: SurrogateParams = SurrogateParams()):
    """Seeded features plus the full surrogate outcome grid for each segment."""
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    rng = np.random.default_rng(seed)
    feats = sample_features(n_segments, rng)
    env = SurrogateEnvironment(space, params)
    log = MeasurementLog(space, {f.segment_id: f for f in feats},
                         {f.segment_id: env.grid(f) for f in feats})
    return feats, log


def _noise_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def perturb_predictions(outcome: EncodingOutcome, noise_pct: float, seed=None) -> EncodingOutcome:
    """Additive zero-mean Gaussian noise on decoding time and quality.

    The standard deviation is ``noise_pct * |value|``; bitrate is untouched.
    """
    if noise_pct < 0:
        raise ValueError("noise_pct must be >= 0")
    if noise_pct == 0:
        return outcome
    rng = _noise_rng(seed)
    dec = outcome.dec_time_s + rng.normal(0.0, noise_pct * abs(outcome.dec_time_s))
    xp = outcome.xpsnr
    if xp is not None:
        xp = max(0.0, xp + rng.normal(0.0, noise_pct * abs(xp)))
    vm = outcome.vmaf
    if vm is not None:
        vm = min(100.0, max(0.0, vm + rng.normal(0.0, noise_pct * abs(vm))))
    return EncodingOutcome(outcome.bitrate_kbps, max(_MIN_DEC_TIME, dec), xp, vm, outcome.enc_time_s)


def perturb_grid(grid: OutcomeGrid, noise_pct: float, rng) -> OutcomeGrid:
    """Grid version of :func:`perturb_predictions`, one fresh draw per entry."""
    if noise_pct < 0:
        raise ValueError("noise_pct must be >= 0")
    if noise_pct == 0:
        return grid
    rng = _noise_rng(rng)
    dec = grid.dec_time + rng.normal(0.0, 1.0, grid.dec_time.shape) * noise_pct * np.abs(grid.dec_time)
    xp = grid.xpsnr + rng.normal(0.0, 1.0, grid.xpsnr.shape) * noise_pct * np.abs(grid.xpsnr)
    vm = grid.vmaf + rng.normal(0.0, 1.0, grid.vmaf.shape) * noise_pct * np.abs(grid.vmaf)
    return grid.replace(dec_time=np.maximum(dec, _MIN_DEC_TIME), xpsnr=np.maximum(xp, 0.0),
                        vmaf=np.clip(vm, 0.0, 100.0))
