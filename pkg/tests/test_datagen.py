from __future__ import annotations

import warnings

import numpy as np
import pytest

from signsynth.config import Config
from signsynth.core import ClassTaxonomy, DatasetManifest, Provenance, TaxonomyError, read_image
from signsynth.datagen import (BalancePlan, GenerationMode, GenerationNets, ModeError, QuotaDeck, class_balance_plan,
                               generate_dataset, split_targets)
from signsynth.embed import EmbedNet
from signsynth.inpaint import InpaintNet, UntrainedWarning
from signsynth.placement import WhereModule, fit_kde, ingest_semantic_maps
from signsynth.styled import StyledNet, grow
from signsynth.toy import write_toy_corpus

SMALL = Config({"inpaint.channels": 4, "inpaint.res_blocks": 1, "styled.channels": 8, "placement.map_size": 16})


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return write_toy_corpus(tmp_path_factory.mktemp("toy"), n_train=5, n_test=2, seed=3)


@pytest.fixture(scope="module")
def nets(corpus):
    def ready(net):
        net.steps = 1
        return net

    styled = StyledNet.build(SMALL, seed=0)
    for _ in range(3):
        grow(styled.gen, styled.critics)
    styled.set_progress(3, 1.0)
    return {
        "pasted": ready(EmbedNet.build("pasted", SMALL, seed=0)),
        "cycled": ready(EmbedNet.build("cycled", SMALL, seed=0)),
        "inpaint": ready(InpaintNet.build(SMALL, seed=0)),
        "styled": ready(styled),
        "kde": fit_kde(corpus.train),
        "where": ready(WhereModule.build(SMALL, seed=0)),
        "maps": ingest_semantic_maps(corpus.root / "maps"),
    }


def _nets_for(mode: GenerationMode, n) -> GenerationNets:
    embed = n[mode.processing] if mode.processing in ("pasted", "cycled") else None
    return GenerationNets(embed, n["inpaint"], n["styled"], n["kde"], n["where"], n["maps"])


def _run(mode, corpus, n, out, seed=11):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UntrainedWarning)
        return generate_dataset(mode, corpus.train, corpus.icons, _nets_for(mode, n), seed, corpus.root, out,
                                taxonomy=corpus.taxonomy, rare_share=0.5)


ALL_MODES = [GenerationMode(p) for p in ("pasted", "cycled", "styled")] + [
    GenerationMode("styled", pl, v) for pl in ("kde", "nn") for v in ("additional", "only-synt", "manystyled")]


# ---------------------------------------------------------------- modes


@pytest.mark.parametrize("args", [("stacked",), ("styled", "grid"), ("styled", "replace", "additional"),
                                  ("styled", "kde"), ("pasted", "kde", "additional")])
def test_invalid_modes(args):
    with pytest.raises(ModeError):
        GenerationMode(*args)


def test_mode_names():
    assert GenerationMode("cycled").name == "cycled"
    assert GenerationMode("styled", "nn", "only-synt").name == "nn-only-synt"


def test_missing_nets_rejected(corpus, tmp_path):
    with pytest.raises(ModeError, match="styled"):
        generate_dataset(GenerationMode("styled"), corpus.train, corpus.icons, GenerationNets(), 0, corpus.root,
                         tmp_path)
    wrong = GenerationNets(embed=EmbedNet.build("cycled", SMALL))
    with pytest.raises(ModeError, match="built for cycled"):
        generate_dataset(GenerationMode("pasted"), corpus.train, corpus.icons, wrong, 0, corpus.root, tmp_path)


def test_missing_icons_rejected(corpus, nets, tmp_path):
    icons = {c: i for c, i in corpus.icons.items() if c != 7}
    with pytest.raises(TaxonomyError):
        generate_dataset(GenerationMode("pasted"), corpus.train, icons, _nets_for(GenerationMode("pasted"), nets), 0,
                         corpus.root, tmp_path, taxonomy=corpus.taxonomy)


# ---------------------------------------------------------------- balance


def test_balance_plan_reproduces_synthetic_set_totals():
    tax = ClassTaxonomy.split()
    targets = split_targets(196_455, 94_472 / 196_455)
    assert targets == {"rare": 94_472, "frequent": 101_983}
    plan = class_balance_plan(tax, targets, frame_budget=196_455)
    assert plan.group_totals(tax) == (196_455, 94_472, 101_983)
    assert plan.shortfall == 0
    rare_q = [plan.quota[c] for c in tax.rare]
    freq_q = [plan.quota[c] for c in tax.train_present]
    assert max(rare_q) - min(rare_q) <= 1 and max(freq_q) - min(freq_q) <= 1


def test_balance_plan_shortfall_and_validation():
    tax = ClassTaxonomy.split(6, n_rare=2)
    plan = class_balance_plan(tax, {"rare": 5, "frequent": 3}, frame_budget=6)
    assert plan.shortfall == 2 and plan.total == 8
    with pytest.raises(ValueError):
        class_balance_plan(tax, {"rare": -1})


def test_quota_deck_draws_exact_multiset_then_falls_back():
    plan = BalancePlan({1: 3, 4: 2})
    deck = QuotaDeck(plan, seed=5)
    first = [deck.draw() for _ in range(5)]
    assert sorted(first) == [1, 1, 1, 4, 4]
    assert deck.draw() in (1, 4)
    again = QuotaDeck(plan, 5)
    assert [again.draw() for _ in range(5)] == first


# ---------------------------------------------------------------- contracts


@pytest.mark.parametrize("mode", ALL_MODES, ids=lambda m: m.name)
def test_mode_contracts(mode, corpus, nets, tmp_path):
    manifest, report = _run(mode, corpus, nets, tmp_path)
    assert len(manifest.frames) == len(corpus.train.frames) == report.images
    assert (tmp_path / "manifest.txt").exists() and (tmp_path / "report.json").exists()
    by_id = {f.frame_id: f for f in manifest.frames}
    real = [a for f in manifest.frames for a in f.annotations if a.provenance is Provenance.REAL]
    synthetic = [a for f in manifest.frames for a in f.annotations if a.provenance is Provenance.SYNTHETIC]
    assert report.total_signs == len(synthetic)
    if mode.variant == "additional":
        for rec in corpus.train.frames:
            assert set(rec.annotations) <= set(by_id[rec.frame_id].annotations)
    elif mode.variant in ("only-synt", "manystyled"):
        assert real == []
    else:  # replacement keeps only signs it could not process
        assert len(real) == len(report.skips)
    for f in manifest.frames:
        boxes = [a.bbox for a in f.annotations]
        assert all(b.inside(f.width, f.height) for b in boxes)
        if mode.placement != "replace":
            assert all(a.iou(b) == 0 for i, a in enumerate(boxes) for b in boxes[i + 1:])


def test_replace_uses_every_real_slot(corpus, nets, tmp_path):
    manifest, report = _run(GenerationMode("pasted"), corpus, nets, tmp_path)
    n_real = sum(len(f.annotations) for f in corpus.train.frames)
    assert report.total_signs + len(report.skips) == n_real
    assert report.group_totals(corpus.taxonomy)[1] > 0  # rare classes appear in the synthetic set


@pytest.mark.parametrize("mode", [GenerationMode("cycled"), GenerationMode("styled", "kde", "manystyled")],
                         ids=lambda m: m.name)
def test_reruns_are_byte_identical(mode, corpus, nets, tmp_path):
    m1, _ = _run(mode, corpus, nets, tmp_path / "a")
    m2, _ = _run(mode, corpus, nets, tmp_path / "b")
    assert m1.sha256() == m2.sha256()
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    for f in m1.frames:
        assert (tmp_path / "a" / f.image_path).read_bytes() == (tmp_path / "b" / f.image_path).read_bytes()
    m3, _ = _run(mode, corpus, nets, tmp_path / "c", seed=12)
    assert m3.sha256() != m1.sha256() or any(
        not np.array_equal(read_image(tmp_path / "a" / f.image_path), read_image(tmp_path / "c" / f.image_path))
        for f in m1.frames)


def test_manifest_reloads(corpus, nets, tmp_path):
    manifest, _ = _run(GenerationMode("styled", "nn", "only-synt"), corpus, nets, tmp_path)
    assert DatasetManifest.load(tmp_path / "manifest.txt") == manifest
    assert manifest.split == "synthetic-nn-only-synt"
