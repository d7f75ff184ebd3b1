"""Y-channel PSNR/SSIM and motion-centroid evaluation on synthetic clips."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from tmnet.synth import (ClipSpec, Corpus, PROTOCOLS, baseline_bicubic_blend, measure_centroid,
                         output_moments, render_frame)
from tmnet.tensor import ConfigError, Tensor, no_grad
from tmnet.video_ops import psnr, rgb_to_y, ssim

CSV_HEADER = ("clip_id", "t", "psnr_db", "ssim", "centroid_error_px")
CENTROID_THRESHOLD = 0.1
DENSE_T = tuple(round(0.1 * k, 10) for k in range(1, 10))

EVAL_PROTOCOLS = {
    "step1": ((0, 2, 4, 6), [0.5]),
    "step2": ((0, 6), [k / 6 for k in range(1, 6)]),
    "dense": ((0, 6), list(DENSE_T)),
}


@dataclass
class MetricsRecord:
    clip_id: str
    t: float  # moment normalised over the clip, tau / (frames - 1)
    psnr_db: Optional[float]
    ssim: Optional[float]
    centroid_error_px: Optional[float]
    interpolated: bool = False

    def row(self) -> list[str]:
        def fmt(v, spec):
            return "" if v is None or (isinstance(v, float) and math.isnan(v)) else format(v, spec)

        return [self.clip_id, f"{self.t:.6f}", fmt(self.psnr_db, ".4f"), fmt(self.ssim, ".6f"),
                fmt(self.centroid_error_px, ".4f")]


# --- predictors ------------------------------------------------------------------


class ModelPredictor:
    """Runs a network without recording gradients, in batches of clips."""

    def __init__(self, model, zero_modulation: bool = False):
        self.model = model
        self.zero_modulation = zero_modulation

    def predict(self, lr_inputs: np.ndarray, input_idx, t_per_gap, specs) -> np.ndarray:
        b, k = lr_inputs.shape[:2]
        dt = self.model.dtype
        frames = [Tensor(np.ascontiguousarray(lr_inputs[:, i]).astype(dt)) for i in range(k)]
        with no_grad():
            out, prov = self.model.forward_stacked(frames, t_per_gap, zero_modulation=self.zero_modulation)
        arr = out.data.astype(np.float64)
        return arr.reshape(len(prov), b, *arr.shape[1:]).swapaxes(0, 1)


class BicubicBlendPredictor:
    """Upsample each input bicubically and blend neighbours linearly in t."""

    def __init__(self, scale: int = 4):
        self.scale = scale

    def predict(self, lr_inputs: np.ndarray, input_idx, t_per_gap, specs) -> np.ndarray:
        outs = []
        k = lr_inputs.shape[1]
        for g in range(k):
            a = lr_inputs[:, g]
            outs.append(baseline_bicubic_blend(a, a, 0.0, self.scale))
            if g < k - 1:
                for t in sorted(t_per_gap[g]):
                    outs.append(baseline_bicubic_blend(a, lr_inputs[:, g + 1], t, self.scale))
        return np.stack(outs, axis=1)


class GroundTruthPredictor:
    """Renders the analytic scene at every requested moment (an upper bound)."""

    def predict(self, lr_inputs: np.ndarray, input_idx, t_per_gap, specs) -> np.ndarray:
        taus = output_moments(input_idx, t_per_gap)
        return np.stack([np.stack([render_frame(s, tau) for tau in taus]) for s in specs])


# --- metrics ---------------------------------------------------------------------


def centroid_error(frame: np.ndarray, spec: ClipSpec, tau: float, threshold: float = CENTROID_THRESHOLD) -> float:
    """Mean Euclidean distance between measured and analytic object centres."""
    if not spec.objects:
        return float("nan")
    errs = [np.linalg.norm(measure_centroid(frame, spec, o, threshold) - o.center(tau)) for o in spec.objects]
    return float(np.mean(errs))


def _is_grid(tau: float, n_frames: int) -> Optional[int]:
    r = round(tau)
    return int(r) if abs(tau - r) < 1e-9 and 0 <= r < n_frames else None


def evaluate(predictor, corpus: Corpus, split: str = "test", protocol: str = "step1",
             t_per_gap=None, batch: int = 10, clip_ids: Optional[Sequence[int]] = None,
             id_prefix: str = "") -> list[MetricsRecord]:
    """Score ``predictor`` on every clip of ``split``.

    On-grid moments get Y-PSNR/SSIM against the rendered ground truth;
    off-grid moments get the centroid metric only.
    """
    if protocol not in EVAL_PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {sorted(EVAL_PROTOCOLS)}")
    input_idx, default_t = EVAL_PROTOCOLS[protocol]
    if t_per_gap is None:
        t_per_gap = [list(default_t) for _ in range(len(input_idx) - 1)]
    ids = [cid for cid, _ in corpus.split(split)] if clip_ids is None else list(clip_ids)
    if not ids:
        raise ConfigError(f"no clips to evaluate in split {split!r}")
    taus = output_moments(input_idx, t_per_gap)
    records: list[MetricsRecord] = []
    for start in range(0, len(ids), batch):
        chunk = ids[start : start + batch]
        items = [corpus.clip(c) for c in chunk]
        lr = np.stack([lr_clip.frames[list(input_idx)] for _, _, lr_clip in items])
        preds = predictor.predict(lr, input_idx, t_per_gap, [spec for spec, _, _ in items])
        for cid, (spec, hr, _), pred in zip(chunk, items, preds):
            n_frames = len(hr)
            for pos, tau in enumerate(taus):
                out = np.clip(pred[pos], 0.0, 1.0)
                grid = _is_grid(tau, n_frames)
                p = s = None
                if grid is not None:
                    y_pred, y_true = rgb_to_y(out[None]), rgb_to_y(hr.frames[grid][None])
                    p, s = psnr(y_pred, y_true), ssim(y_pred, y_true)
                records.append(MetricsRecord(f"{id_prefix}{cid}", tau / (n_frames - 1), p, s,
                                             centroid_error(out, spec, tau), tau not in input_idx))
    return records


def mean_of(records: Sequence[MetricsRecord], field: str, interpolated_only: bool = False) -> float:
    vals = [getattr(r, field) for r in records if (r.interpolated or not interpolated_only)]
    vals = [v for v in vals if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def summarize(records: Sequence[MetricsRecord], interpolated_only: bool = False) -> dict:
    return {f: mean_of(records, f, interpolated_only) for f in ("psnr_db", "ssim", "centroid_error_px")}


def write_metrics_csv(path, records: Sequence[MetricsRecord],
                      baseline: Optional[Sequence[MetricsRecord]] = None) -> None:
    """Rows per output frame, then one ``mean`` footer row per record set."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        groups = [("", records)] + ([("baseline:", baseline)] if baseline is not None else [])
        for _, recs in groups:
            for r in recs:
                w.writerow(r.row())
        for prefix, recs in groups:
            row = MetricsRecord(f"{prefix}mean", 0.0, **summarize(recs)).row()
            row[1] = ""
            w.writerow(row)


def temporal_consistency(predictor, corpus: Corpus, split: str = "test", ts: Sequence[float] = DENSE_T,
                         tolerance_px: float = 1.0, batch: int = 10) -> list[dict]:
    """Per clip: are object centroids strictly monotone along the motion and near the analytic path?

    Inputs are frames 0 and 6; each moment ``t`` maps to ``tau = 6 t``.
    """
    input_idx = (0, 6)
    ids = [cid for cid, _ in corpus.split(split)]
    results = []
    for start in range(0, len(ids), batch):
        chunk = ids[start : start + batch]
        items = [corpus.clip(c) for c in chunk]
        lr = np.stack([lr_clip.frames[list(input_idx)] for _, _, lr_clip in items])
        preds = predictor.predict(lr, input_idx, [list(ts)], [s for s, _, _ in items])
        for cid, (spec, _, _), pred in zip(chunk, items, preds):
            monotone, max_err = True, 0.0
            for obj in spec.objects:
                direction = np.asarray(obj.velocity) / np.linalg.norm(obj.velocity)
                proj = []
                for j, t in enumerate(ts):
                    tau = 6.0 * t
                    c = measure_centroid(np.clip(pred[1 + j], 0, 1), spec, obj, CENTROID_THRESHOLD)
                    err = float(np.linalg.norm(c - obj.center(tau)))
                    max_err = err if math.isnan(err) else max(max_err, err)
                    proj.append(float(c @ direction))
                monotone &= bool(np.all(np.diff(proj) > 0))
            results.append({"clip_id": cid, "monotone": monotone, "max_error_px": max_err,
                            "passed": bool(monotone and max_err <= tolerance_px)})
    return results


CONTINUITY_DELTAS = (1e-2, 5e-3, 2.5e-3)


def difference_ratios(f, t: float, deltas: Sequence[float] = CONTINUITY_DELTAS) -> list[float]:
    """Successive ratios of ``max|f(t + d) - f(t)|`` over halving ``d``.

    A function that is smooth (or piecewise linear away from kinks) near ``t``
    gives ratios close to 2.
    """
    base = np.asarray(f(t), dtype=np.float64)
    diffs = [float(np.abs(np.asarray(f(t + d), dtype=np.float64) - base).max()) for d in deltas]
    return [a / b if b > 0 else float("inf") for a, b in zip(diffs, diffs[1:])]


def interpolation_ratios(model, lr_pair: np.ndarray, t: float,
                         deltas: Sequence[float] = CONTINUITY_DELTAS) -> list[float]:
    """Continuity ratios of the frame synthesised at ``t`` between two LR frames [B,2,3,h,w]."""
    pred = ModelPredictor(model)
    return difference_ratios(lambda s: pred.predict(lr_pair, (0, 1), [[s]], None)[:, 1], t, deltas)
