import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_confusion
from scarseg import nn
from scarseg.evaluate import (
    ConfusionCounts,
    MetricsReport,
    binarize,
    confusion,
    counts_to_area,
    evaluate_masks,
    f1,
    miou,
    miou_macro,
    precision,
    predict_tiled,
    recall,
)
from scarseg.raster import GeoTransform, Raster
from scarseg.vector import Mask

T = GeoTransform(0.0, 0.0, 5.0, 5.0)


def model(c=3, f=2, depth=2, seed=0):
    cfg = nn.UNetConfig(c, f, depth)
    return cfg, nn.init_weights(cfg, seed)


# -- tiled inference ----------------------------------------------------------


def test_tile_equals_area_single_pass(rng):
    cfg, w = model()
    area = Raster(rng.random((3, 16, 16)).astype(np.float32), T)
    got = predict_tiled((cfg, w), area, 16)
    np.testing.assert_array_equal(got, nn.unet_forward(cfg, w, area.data[None])[0, 0])


def test_zero_model_half(rng):
    cfg = nn.UNetConfig(3, 2, 2)
    area = Raster(rng.random((3, 24, 40)).astype(np.float32), T)
    assert (predict_tiled((cfg, nn.zero_weights(cfg)), area, 8) == 0.5).all()


def test_two_tile_average(rng):
    # width 12, tile 8, overlap 0.5 -> offsets 0 and 4; columns 4..7 are averaged
    cfg, w = model(depth=1)
    area = Raster(rng.random((3, 8, 12)).astype(np.float32), T)
    got = predict_tiled((cfg, w), area, 8, 0.5)
    a = nn.unet_forward(cfg, w, area.data[None, :, :, 0:8])[0, 0]
    b = nn.unet_forward(cfg, w, area.data[None, :, :, 4:12])[0, 0]
    np.testing.assert_allclose(got[:, :4], a[:, :4])
    np.testing.assert_allclose(got[:, 8:], b[:, 4:])
    np.testing.assert_allclose(got[:, 4:8], (a[:, 4:] + b[:, :4]) / 2, rtol=1e-6)


def test_nonoverlapping_is_concatenation(rng):
    cfg, w = model()
    area = Raster(rng.random((3, 16, 32)).astype(np.float32), T)
    got = predict_tiled((cfg, w), area, 16, 0.0)
    left = nn.unet_forward(cfg, w, area.data[None, :, :, :16])[0, 0]
    right = nn.unet_forward(cfg, w, area.data[None, :, :, 16:])[0, 0]
    np.testing.assert_array_equal(got, np.concatenate([left, right], axis=1))


def test_predict_errors(rng):
    cfg, w = model()
    area = Raster(rng.random((3, 16, 16)).astype(np.float32), T)
    with pytest.raises(nn.ShapeError):
        predict_tiled((cfg, w), Raster(area.data[:2], T), 8)
    with pytest.raises(ValueError):
        predict_tiled((cfg, w), area, 32)
    with pytest.raises(nn.ShapeError):
        predict_tiled((cfg, w), area, 6)


# -- binarize / confusion -----------------------------------------------------


def test_binarize_boundary():
    assert (binarize(np.full((3, 3), 0.5)) == 1).all()
    with pytest.raises(ValueError):
        binarize(np.zeros(2), 1.0 + 1e-9)


@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_binarize_oracle(seed, thr):
    p = np.random.default_rng(seed).random((6, 6))
    got = binarize(p, thr)
    for v, b in zip(p.ravel(), got.ravel()):
        assert b == (1 if v >= thr else 0)


def test_confusion_trivial(rng):
    t = (rng.random((5, 5)) < 0.4).astype(np.uint8)
    c = confusion(t, t)
    assert c.fp == c.fn == 0
    c = confusion(1 - t, t)
    assert c.tp == c.tn == 0
    with pytest.raises(ValueError, match="dim mismatch"):
        confusion(t, t[:4])


def test_confusion_accepts_masks(rng):
    a = Mask((rng.random((4, 4)) < 0.5).astype(np.uint8), T)
    b = Mask((rng.random((4, 4)) < 0.5).astype(np.uint8), T)
    assert confusion(a, b) == confusion(a.data, b.data)


@given(st.integers(0, 2**32 - 1), st.sampled_from([(4, 4), (8, 8)]))
def test_confusion_matches_brute_force(seed, shape):
    rng = np.random.default_rng(seed)
    p = (rng.random(shape) < rng.random()).astype(np.uint8)
    t = (rng.random(shape) < rng.random()).astype(np.uint8)
    c = confusion(p, t)
    assert (c.tp, c.fp, c.fn, c.tn) == brute_confusion(p, t)
    assert c.total == p.size


# -- metrics ------------------------------------------------------------------


def test_published_miou_pairs():
    assert round(miou(ConfusionCounts(0.26, 0.29, 0.30, 25.37)), 4) == 0.3059
    assert round(miou(ConfusionCounts(0.32, 0.20, 0.27, 25.43)), 4) == 0.4051


def test_degenerate_all_flagged():
    r = MetricsReport.from_counts(ConfusionCounts(0, 0, 0, 100))
    assert set(r.undefined_flags) == {"precision", "recall", "f1", "miou"}
    assert r.precision == r.recall == r.f1 == r.miou == 0.0


def test_counts_to_area():
    a = counts_to_area(ConfusionCounts(10_400, 0, 0, 0), 5.0)
    assert a["tp"] == pytest.approx(0.26)
    assert a["fp"] == a["fn"] == a["tn"] == 0
    full = counts_to_area(ConfusionCounts(0, 0, 0, 1024 * 1024), 5.0)
    assert sum(full.values()) == 26.2144
    with pytest.raises(ValueError):
        counts_to_area(ConfusionCounts(1, 0, 0, 0), 0.0)


@given(st.integers(0, 2**32 - 1))
def test_metric_identities(seed):
    rng = np.random.default_rng(seed)
    p = (rng.random((8, 8)) < rng.random()).astype(np.uint8)
    t = (rng.random((8, 8)) < rng.random()).astype(np.uint8)
    c = confusion(p, t)
    tp, fp, fn, tn = brute_confusion(p, t)
    if tp + fp:
        assert precision(c) == tp / (tp + fp)
    if tp + fn:
        assert recall(c) == tp / (tp + fn)
    if tp + fp + fn:
        i = miou(c)
        assert i == tp / (tp + fp + fn)
        assert f1(c) == pytest.approx(2 * i / (1 + i))
        assert i <= f1(c) + 1e-12 <= 1 + 1e-12
        assert i <= min(precision(c), recall(c)) + 1e-12
        pr, rc = precision(c), recall(c)
        if pr + rc:
            assert f1(c) == pytest.approx(2 * pr * rc / (pr + rc))
    if tn + fp + fn:
        assert miou_macro(c) == pytest.approx(0.5 * (miou(c) + tn / (tn + fp + fn)))


def test_report_json_and_csv(rng):
    p = (rng.random((32, 32)) < 0.2).astype(np.uint8)
    t = (rng.random((32, 32)) < 0.2).astype(np.uint8)
    r = evaluate_masks(p, t)
    d = json.loads(r.to_json())
    for k in ("precision", "recall", "f1", "miou", "miou_macro", "areas_km2", "undefined_flags"):
        assert k in d
    assert sum(d["areas_km2"].values()) == pytest.approx(32 * 32 * 25 / 1e6)
    assert len(r.csv_row()) == len(MetricsReport.CSV_FIELDS)
