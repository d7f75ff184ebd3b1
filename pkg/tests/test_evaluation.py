import csv
import math

import numpy as np
import pytest

from tmnet.evaluation import (BicubicBlendPredictor, GroundTruthPredictor, MetricsRecord, evaluate, mean_of,
                              summarize, temporal_consistency, write_metrics_csv)
from tmnet.synth import ObjectSpec, output_moments
from tmnet.tensor import ConfigError


def test_ground_truth_is_perfect(small_corpus):
    recs = evaluate(GroundTruthPredictor(), small_corpus, "test", "step1")
    assert len(recs) == 2 * 7
    assert all(r.psnr_db == 100.0 and r.ssim == pytest.approx(1.0) for r in recs)
    assert all(r.centroid_error_px < 0.05 for r in recs)


def test_off_grid_moments_get_centroid_only(small_corpus):
    recs = evaluate(GroundTruthPredictor(), small_corpus, "test", "dense")
    off = [r for r in recs if r.interpolated and abs(6 * r.t - round(6 * r.t)) > 1e-9]
    assert off and all(r.psnr_db is None and r.ssim is None for r in off)
    assert all(r.centroid_error_px is not None for r in off)


def test_baseline_finite_on_grid(small_corpus):
    recs = evaluate(BicubicBlendPredictor(), small_corpus, "test", "step2")
    assert len(recs) == 2 * 7
    assert all(math.isfinite(r.psnr_db) and r.psnr_db < 100 for r in recs)
    assert [r.interpolated for r in recs[:7]] == [False] + [True] * 5 + [False]


def test_linear_motion_midpoint():
    obj = ObjectSpec("gaussian_blob", (10.0, 20.0), (4.0 / 6.0, 0.0), (2.0, 2.0), (1.0, 1.0, 1.0))
    tau = output_moments((0, 6), [[0.5]])[1]
    assert tau == 3.0 and obj.center(tau)[0] == pytest.approx(12.0)


def test_csv_footer_is_mean_of_rows(tmp_path, small_corpus):
    recs = evaluate(BicubicBlendPredictor(), small_corpus, "val", "step1")
    base = evaluate(BicubicBlendPredictor(), small_corpus, "val", "step2", id_prefix="baseline:")
    path = tmp_path / "m.csv"
    write_metrics_csv(path, recs, base)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["clip_id", "t", "psnr_db", "ssim", "centroid_error_px"]
    body = [r for r in rows if not r["clip_id"].endswith("mean") and not r["clip_id"].startswith("baseline:")]
    footer = next(r for r in rows if r["clip_id"] == "mean")
    assert float(footer["psnr_db"]) == pytest.approx(np.mean([float(r["psnr_db"]) for r in body]), abs=1e-3)
    assert any(r["clip_id"] == "baseline:mean" for r in rows)


def test_record_formatting():
    r = MetricsRecord("3", 0.5, None, float("nan"), 0.25)
    assert r.row() == ["3", "0.500000", "", "", "0.2500"]
    assert math.isnan(mean_of([r], "psnr_db"))
    assert summarize([r])["centroid_error_px"] == 0.25


def test_unknown_protocol(small_corpus):
    with pytest.raises(ConfigError):
        evaluate(GroundTruthPredictor(), small_corpus, "test", "step3")


def test_temporal_consistency_oracle(small_corpus):
    res = temporal_consistency(GroundTruthPredictor(), small_corpus, "test")
    assert len(res) == 2 and all(r["passed"] for r in res)
