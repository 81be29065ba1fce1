import csv
import math
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bridgecond.datapipe import world
from bridgecond.datapipe.pipeline import build_edit_pair, extract_objects, gen_masks, read_manifest
from bridgecond.datapipe.scorer import ScorerAdapter
from bridgecond.metrics import (PSNR_CAP, MetricReport, aggregate, evaluate, masked_consistency, masked_mse, psnr,
                                ssim, ssim_window)

unit_images = arrays(np.float64, (10, 10, 3), elements=st.floats(0, 1, allow_nan=False))


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 1.0) == pytest.approx(0.0, abs=1e-12)
    assert psnr(np.zeros((2, 2, 3), np.uint8), np.full((2, 2, 3), 255, np.uint8)) == 0.0
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        psnr(a, a, region=np.zeros((4, 4), bool))


def test_psnr_region_ignores_outside_pixels():
    a, b = np.zeros((4, 4, 3)), np.zeros((4, 4, 3))
    b[0, 0] = 1.0
    region = np.ones((4, 4), bool)
    region[0, 0] = False
    assert psnr(a, b, region) == PSNR_CAP
    b[1, 1] = 0.1
    assert psnr(a, b, region) == pytest.approx(10 * math.log10(15 / 0.01), abs=1e-9)


def test_psnr_decreases_with_noise_amplitude():
    rng = np.random.default_rng(0)
    img = rng.random((32, 32, 3)) * 0.5 + 0.25
    noise = rng.uniform(-1, 1, img.shape)
    values = [psnr(img, img + amp * noise) for amp in (0.01, 0.05, 0.1)]
    assert values[0] > values[1] > values[2]


def _ssim_formula(x, y):
    """Textbook single-window SSIM written out scalar by scalar."""
    x, y = list(x.ravel()), list(y.ravel())
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    vx = sum((v - mx) ** 2 for v in x) / n
    vy = sum((v - my) ** 2 for v in y) / n
    cxy = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    return (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def test_single_window_ssim_matches_formula():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, y = rng.random((8, 8)), rng.random((8, 8))
        assert ssim(x, y) == pytest.approx(_ssim_formula(x, y), abs=1e-12)
        assert ssim_window(x, y) == pytest.approx(_ssim_formula(x, y), abs=1e-12)


def test_ssim_examples():
    img = world.gen_scene(0)[1]
    assert ssim(img, img) == 1.0
    with pytest.raises(ValueError):
        ssim(np.zeros((6, 6, 3)), np.zeros((6, 6, 3)))
    # two windows across the width: mean of the per-window values
    rng = np.random.default_rng(2)
    x, y = rng.random((8, 9)), rng.random((8, 9))
    expect = (_ssim_formula(x[:, :8], y[:, :8]) + _ssim_formula(x[:, 1:], y[:, 1:])) / 2
    assert ssim(x, y) == pytest.approx(expect, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(unit_images, unit_images)
def test_ssim_is_bounded_and_symmetric(a, b):
    s = ssim(a, b)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_masked_mse_hand_case():
    a = np.zeros((2, 2, 1))
    b = np.array([[[0.5], [0.0]], [[0.0], [1.0]]])
    mask = np.array([[True, False], [False, False]])
    assert masked_mse(a, b, mask) == {"bg_mse": pytest.approx(1 / 3), "edit_mse": 0.25}
    assert masked_mse(a, a, mask) == {"bg_mse": 0.0, "edit_mse": 0.0}
    with pytest.raises(ValueError):
        masked_mse(a, b, np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        masked_mse(a, b, np.ones((2, 2), bool))


def test_masked_consistency_on_pipeline_sample():
    scene, _ = world.gen_scene(2)
    rec = gen_masks(scene, extract_objects(scene)[0], 0.5)[0]
    for task in ("removal", "replacement"):
        res = masked_consistency(build_edit_pair(scene, rec, task, np.random.default_rng(0)))
        assert res["bg_mse"] == 0.0 and res["edit_mse"] > 0


def _rows(values):
    return [{"present": True, "psnr_bg": v, "ssim": v / 100, "masked_mse_edit": None, "sc": None, "pq": None,
             "vie": None} for v in values]


def test_aggregate_is_mean_of_finite_present_rows():
    rows = _rows([10.0, 20.0, 33.0])
    assert aggregate(rows)["psnr_bg"] == pytest.approx(21.0)
    rows.append({**_rows([1000.0])[0], "present": False})
    rows.append(_rows([float("inf")])[0])
    assert aggregate(rows)["psnr_bg"] == pytest.approx(21.0)
    assert aggregate(rows)["vie"] is None


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 99, allow_nan=False), min_size=1, max_size=12), st.randoms())
def test_aggregate_is_permutation_invariant(values, rnd):
    rows = _rows(values)
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    assert aggregate(rows) == aggregate(shuffled)


def _predict(dataset, pred_dir, key):
    pred_dir.mkdir(exist_ok=True)
    rows = read_manifest(dataset / "manifest.jsonl")
    for r in rows:
        shutil.copy(dataset / r[key], pred_dir / f"{r['id']}.ppm")
    return rows


def test_evaluate_perfect_predictions(removal_dir, tmp_path):
    rows = _predict(removal_dir, tmp_path / "pred", "tgt_path")
    report = evaluate(removal_dir / "manifest.jsonl", tmp_path / "pred", ScorerAdapter("builtin-mock"))
    assert len(report.rows) == len(rows) and report.missing == 0
    assert all(r["psnr_bg"] == PSNR_CAP and r["psnr_capped"] and r["ssim"] == 1.0 for r in report.rows)
    assert report.aggregates["vie"] == 10.0
    assert "VIEScore" in report.summary() and "1.0000" in report.summary() and "n/a" in report.summary()


def test_evaluate_copy_source_and_missing_rows(removal_dir, tmp_path):
    rows = _predict(removal_dir, tmp_path / "pred", "src_path")
    (tmp_path / "pred" / f"{rows[0]['id']}.ppm").unlink()
    report = evaluate(removal_dir / "manifest.jsonl", tmp_path / "pred", None, workers=2)
    assert report.missing == 1 and not report.rows[0]["present"]
    assert all(r["masked_mse_edit"] > 0 for r in report.rows[1:])
    assert report.aggregates["sc"] is None
    present = [r["ssim"] for r in report.rows if r["present"]]
    assert report.aggregates["ssim"] == pytest.approx(sum(present) / len(present), abs=1e-15)


def test_report_csv(tmp_path):
    rows = [{"id": "a", "task": "removal", "present": True, "psnr_bg": 20.0, "psnr_capped": False, "ssim": 0.5,
             "masked_mse_edit": 0.1, "sc": None, "pq": None, "vie": None},
            {"id": "b", "task": "removal", "present": False, "psnr_bg": None, "psnr_capped": None, "ssim": None,
             "masked_mse_edit": None, "sc": None, "pq": None, "vie": None}]
    MetricReport(rows).write_csv(tmp_path / "r.csv")
    lines = list(csv.reader(open(tmp_path / "r.csv")))
    assert lines[0][:4] == ["id", "task", "present", "psnr_bg"]
    assert lines[1][:4] == ["a", "removal", "1", "20.0"] and lines[2][2] == "0"
    assert lines[-1][0] == "mean" and lines[-1][3] == "20.0"
