from __future__ import annotations

import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from signsynth.config import Config
from signsynth.core import Annotation, BBox, FrameRecord, OutOfFrameError
from signsynth.inpaint import UntrainedWarning
from signsynth.placement import (AffineParams, Density, SemanticMap, SemanticMapError, WhereModule, affine_to_bbox,
                                 bbox_to_affine, box_raster, collapse_check, fit_kde, ingest_semantic_maps,
                                 make_where_batch, placement_heatmap, sample_kde, sample_where, save_semantic_map, supervised_losses,
                                 train_step_where, where_generate)
from signsynth.toy import count_shaped_detection, default_taxonomy, pole_fixture

SMALL = {"placement.map_size": 16}


# ---------------------------------------------------------------- affine geometry


@pytest.mark.parametrize("p,box", [
    (AffineParams(1, 1, 0, 0), BBox(0, 0, 200, 100)),
    (AffineParams(0.5, 0.5, 0, 0), BBox(50, 25, 100, 50)),
    (AffineParams(0.1, 0.2, -0.9, 0.8), BBox(0, 80, 20, 20)),
])
def test_affine_to_bbox_examples(p, box):
    assert affine_to_bbox(p, (200, 100)) == box


def test_affine_box_leaving_frame_is_error():
    with pytest.raises(OutOfFrameError):
        affine_to_bbox(AffineParams(0.1, 0.1, 1.0, 0.0), (100, 100))


@given(st.integers(0, 150), st.integers(0, 80), st.integers(1, 50), st.integers(1, 20))
def test_bbox_affine_roundtrip(x, y, w, h):
    box = BBox(x, y, w, h)
    assert affine_to_bbox(bbox_to_affine(box, (200, 100)), (200, 100)) == box


def test_affine_params_validated():
    with pytest.raises(ValueError):
        AffineParams(0.0, 0.5, 0, 0)
    with pytest.raises(ValueError):
        AffineParams(0.5, 0.5, float("nan"), 0)


# ---------------------------------------------------------------- KDE


def _frames(boxes_per_frame, width=200, height=100):
    out = []
    for i, boxes in enumerate(boxes_per_frame):
        anns = tuple(Annotation(f"f{i}", b, 0) for b in boxes)
        out.append(FrameRecord(f"f{i}", f"f{i}.png", width, height, anns))
    return out


def test_single_annotation_degenerate_density_returns_its_center(rng):
    model = fit_kde(_frames([[BBox(40, 30, 20, 10)]]))
    centers = model.centers.resample(500, rng)
    assert np.all(centers == np.array([[0.25], [0.35]]))
    assert model.centers.bandwidth == 0.0


def test_fit_kde_rejects_empty():
    with pytest.raises(ValueError):
        fit_kde(_frames([[], []]))
    with pytest.raises(ValueError):
        Density(np.zeros((2, 0)))


def test_two_cluster_proportions(rng):
    # 30% of signs on the left cluster, 70% on the right
    left = [[BBox(18 + i % 5, 40 + i % 7, 10, 10)] for i in range(30)]
    right = [[BBox(168 + i % 5, 40 + i % 7, 10, 10)] for i in range(70)]
    model = fit_kde(_frames(left + right))
    cx = model.centers.resample(10_000, rng)[0]
    assert np.mean(cx < 0.5) == pytest.approx(0.3, abs=0.05)


def test_count_density_on_detection_shaped_fixture(rng):
    m = count_shaped_detection("train", default_taxonomy(), seed=0)
    assert len(m.frames) == 47_639 and sum(len(f.annotations) for f in m.frames) == 80_277
    model = fit_kde(m)
    assert model.counts.mean[0] == pytest.approx(80_277 / 47_639, rel=1e-12)
    draws = [model.draw_count(rng) for _ in range(4000)]
    assert np.mean(draws) == pytest.approx(80_277 / 47_639, abs=0.1)


def _toy_model():
    rows = [[BBox(10 + 7 * i % 150, 5 + 3 * i % 60, 8 + i % 9, 8 + i % 7) for i in range(k, k + 1 + k % 3)]
            for k in range(40)]
    return fit_kde(_frames(rows))


def test_sample_kde_contract_and_determinism():
    model = _toy_model()
    for seed in range(30):
        boxes = sample_kde(model, (200, 100), np.random.default_rng(seed))
        assert all(b.inside(200, 100) for b in boxes)
        assert all(a.iou(b) == 0 for i, a in enumerate(boxes) for b in boxes[i + 1:])
    a = sample_kde(model, (200, 100), np.random.default_rng(3), count=4)
    b = sample_kde(model, (200, 100), np.random.default_rng(3), count=4)
    assert a == b and len(a) == 4


def test_sample_kde_zero_count_and_existing_boxes(rng):
    model = _toy_model()
    assert sample_kde(model, (200, 100), rng, count=0) == []
    existing = [BBox(0, 0, 100, 100)]
    boxes = sample_kde(model, (200, 100), rng, existing=existing, count=3)
    assert all(b.iou(existing[0]) == 0 for b in boxes)


def test_sample_kde_reports_shortfall_when_budget_runs_out(rng):
    model = _toy_model()
    model.budget = 3
    boxes = sample_kde(model, (200, 100), rng, existing=[BBox(0, 0, 200, 100)], count=5)
    assert boxes == [] and boxes.shortfall == 5


def test_heatmap_peaks_at_sampled_centers():
    heat = placement_heatmap([(0.25, 0.5)] * 3 + [(0.75, 0.5), (1.0, 0.2)], size=(40, 20), sigma=1.5)
    assert heat.shape == (20, 40) and heat.max() == 1.0
    assert np.unravel_index(heat.argmax(), heat.shape) == (10, 10)
    assert heat[10, 30] == pytest.approx(1 / 3, rel=1e-5)
    assert not placement_heatmap([], size=(8, 4)).any()


# ---------------------------------------------------------------- semantic maps


def test_ingest_maps_missing_and_palette(tmp_path):
    lab = np.zeros((8, 12), np.uint8)
    for fid in ("a", "b"):
        save_semantic_map(SemanticMap(fid, lab), tmp_path)
    store = ingest_semantic_maps(tmp_path, ["a", "b"])
    assert store.missing == [] and "a" in store and store["b"].shape == (8, 12)
    store = ingest_semantic_maps(tmp_path, ["a", "b", "c"])
    assert store.missing == ["c"]
    bad = lab.copy()
    bad[0, 0] = 255
    Image.fromarray(bad, mode="L").save(tmp_path / "d.png")
    with pytest.raises(SemanticMapError, match="255"):
        ingest_semantic_maps(tmp_path, ["d"])
    Image.fromarray(np.zeros((8, 12, 3), np.uint8)).save(tmp_path / "e.png")
    with pytest.raises(SemanticMapError, match="single-channel"):
        ingest_semantic_maps(tmp_path, ["e"])


def test_semantic_map_frame_check():
    smap = SemanticMap("f", np.zeros((50, 100), np.uint8))
    smap.check_frame(200, 100, downscale=2)
    with pytest.raises(SemanticMapError):
        smap.check_frame(200, 100)


# ---------------------------------------------------------------- where module


def small_where(**extra) -> WhereModule:
    return WhereModule.build(Config({**SMALL, **extra}), seed=0)


def test_where_generate_deterministic_and_warns_untrained():
    wm = small_where()
    smap = pole_fixture(1)[0].smap
    z = np.arange(wm.z_dim, dtype=np.float32) / 10
    with pytest.warns(UntrainedWarning):
        a = where_generate(wm, smap, z)
    wm.steps = 1
    assert where_generate(wm, smap, z) == a
    assert 0 < a.sx <= 0.5 and 0 < a.sy <= 0.5


def test_sample_where_contract():
    wm = small_where()
    wm.steps = 1
    smap = pole_fixture(1)[0].smap
    boxes = sample_where(wm, smap, (64, 64), np.random.default_rng(0), count=4, existing=[BBox(0, 0, 8, 8)])
    assert all(b.inside(64, 64) for b in boxes)
    assert all(a.iou(b) == 0 for i, a in enumerate([BBox(0, 0, 8, 8), *boxes]) for b in boxes[i:] if a is not b)


def test_collapse_check_flags_constant_generator():
    wm = small_where()
    smap = pole_fixture(1)[0].smap
    with torch.no_grad():
        for p in wm.gen.parameters():
            p.zero_()
    value, ok = collapse_check(wm, smap, np.random.default_rng(0), n=50)
    assert value == 0.0 and not ok


def test_box_raster_covers_box():
    r = box_raster(torch.tensor([[0.5, 0.25, 0.0, 0.0]]), 32, sharpness=1e-4)[0, 0]
    assert r.shape == (32, 32)
    assert float(r[16, 16]) == pytest.approx(1.0) and float(r[0, 0]) == pytest.approx(0.0, abs=1e-6)
    # half-extent 0.5 of the [-1, 1] grid in x, 0.25 in y
    assert int((r > 0.5).sum(dim=1).max()) == 16 and int((r > 0.5).sum(dim=0).max()) == 8


def test_supervised_oracle_wiring_reconstructs_affine():
    wm = small_where(**{"placement.z_dim": 4})
    items = pole_fixture(3)
    batch = make_where_batch(wm, [i.smap for i in items], [i.box for i in items], [(64, 64)] * 3)
    zeros = torch.zeros(3, 4)
    oracle = dataclasses.replace(wm, enc=lambda maps, a: (a, zeros), gen=lambda maps, z: z)
    bundle = supervised_losses(oracle, batch.maps, batch.affine, eps=zeros)
    assert bundle["affine_rec"] == 0.0
    # unit-variance, zero-mean encoder -> KL 0
    zero_enc = dataclasses.replace(wm, enc=lambda maps, a: (zeros, zeros), gen=lambda maps, z: batch.affine)
    assert supervised_losses(zero_enc, batch.maps, batch.affine, eps=zeros)["kl"] == 0.0


def test_train_step_where_zero_weights_and_terms():
    items = pole_fixture(4)
    zeros = {f"loss.{k}": 0.0 for k in ("adversarial", "recon", "kl", "affine")}
    wm = small_where(**zeros)
    before = {(n, k): v.clone() for n, m in wm.modules().items() for k, v in m.state_dict().items()}
    batch = make_where_batch(wm, [i.smap for i in items], [i.box for i in items])
    train_step_where(wm, batch, torch.Generator().manual_seed(0))
    after = {(n, k): v for n, m in wm.modules().items() for k, v in m.state_dict().items()}
    assert all(torch.equal(before[k], after[k]) for k in before)
    wm = small_where()
    sup = train_step_where(wm, batch, torch.Generator().manual_seed(0))
    assert {"adv_layout", "recon_map", "recon_z", "affine_rec", "kl", "adv_pair", "d1", "d2"} <= set(sup.floats())
    unsup = train_step_where(wm, make_where_batch(wm, [i.smap for i in items]), torch.Generator().manual_seed(0))
    assert "affine_rec" not in unsup.floats() and "d1" not in unsup.floats()
    assert wm.steps == 2
