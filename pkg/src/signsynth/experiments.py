"""End-to-end toy experiment: does styled synthesis teach a classifier classes it never saw in real data?"""

from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .classifier import CropSet, crops_from_manifest, predict, train_toy_classifier
from .config import Config, derive_seed
from .core import Provenance
from .datagen import GenerationMode, GenerationNets, generate_dataset
from .inpaint import InpaintNet, UntrainedWarning
from .metrics import ConfusionCounts, micro_recall
from .styled import StyledNet
from .toy import write_toy_corpus
from .training import background_patches, sign_patches, styled_items, train_inpaint_loop, train_styled_loop


@dataclass
class UpliftSettings:
    n_train: int = 150
    n_test: int = 80
    inpaint_steps: int = 150
    inpaint_batch: int = 4
    styled_steps_per_stage: int = 300
    styled_final_steps: int = 200
    styled_batch: int = 8
    classifier_steps: int = 400
    classifier_batch: int = 32
    config: dict = field(default_factory=lambda: {
        "inpaint.channels": 8, "inpaint.res_blocks": 2, "styled.channels": 16, "styled.fade_steps": 100,
        "features.taps": "0,1,2,3", "features.tap_weights": "1,1,1,1", "loss.adversarial": 0.001,
        "inpaint.prefill": "pushpull", "styled.icon_share": 0.25, "eval.mask_absent": True,
    })


@dataclass
class UpliftResult:
    seed: int
    rare_recall_real: float
    frequent_recall_real: float
    rare_recall_mixed: float
    frequent_recall_mixed: float
    n_real_crops: int
    n_synthetic_crops: int
    seconds: float

    @property
    def uplift(self) -> float:
        return self.rare_recall_mixed - self.rare_recall_real

    @property
    def frequent_drop(self) -> float:
        return self.frequent_recall_real - self.frequent_recall_mixed

    def as_dict(self) -> dict:
        return asdict(self)


def _recalls(model, crops: CropSet, allowed, rare, frequent, num_classes) -> tuple[float, float]:
    pred = predict(model, crops.images, allowed)
    c = ConfusionCounts.from_predictions(pred, crops.labels, num_classes)
    return micro_recall(c, rare), micro_recall(c, frequent)


def _synthetic_crops(manifest, root) -> CropSet:
    frames = []
    for rec in manifest.frames:
        anns = tuple(a for a in rec.annotations if a.provenance is Provenance.SYNTHETIC)
        frames.append(type(rec)(rec.frame_id, rec.image_path, rec.width, rec.height, anns))
    return crops_from_manifest(type(manifest)(frames, manifest.split), root)


def run_toy_uplift(workdir: str | Path, seed: int = 0, settings: UpliftSettings | None = None,
                   log=None) -> UpliftResult:
    """Real-only vs real+styled classifier on an 8-class corpus with 2 classes missing from real training."""
    s = settings or UpliftSettings()
    t0 = time.time()
    workdir = Path(workdir)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg = Config({"seed": seed, **s.config})
    corpus = write_toy_corpus(workdir / "corpus", s.n_train, s.n_test, seed=seed)
    tax = corpus.taxonomy
    rare, frequent = sorted(tax.rare), sorted(tax.train_present)
    n_cls = tax.total

    def note(msg, **kw):
        if log:
            log({"event": "uplift", "stage": msg, "seconds": round(time.time() - t0, 1), **kw})

    # background inpainting
    inp = InpaintNet.build(cfg, seed=derive_seed(seed, "inpaint") % 2 ** 31, residual=True)
    bgs = background_patches(corpus.train, corpus.root, 200, rng)
    train_inpaint_loop(inp, bgs, s.inpaint_steps, s.inpaint_batch, rng)
    note("inpaint")

    # styled generator on real signs of the seen classes
    signs = sign_patches(corpus.train, corpus.root)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UntrainedWarning)
        items = styled_items(signs, inp, corpus.icons)
    sty = StyledNet.build(cfg, seed=derive_seed(seed, "styled") % 2 ** 31)
    train_styled_loop(sty, items, s.styled_steps_per_stage, s.styled_batch, rng, final_steps=s.styled_final_steps,
                      generator=torch.Generator().manual_seed(seed), icon_pool=list(corpus.icons.values()))
    note("styled")

    # one styled replacement pass over the training frames
    nets = GenerationNets(inpaint=inp, styled=sty)
    synth_manifest, report = generate_dataset(GenerationMode("styled"), corpus.train, corpus.icons, nets, seed,
                                              corpus.root, workdir / "styled", taxonomy=tax,
                                              rare_share=cfg["datagen.rare_share"])
    note("generate", signs=report.total_signs)

    real = crops_from_manifest(corpus.train, corpus.root)
    synth = _synthetic_crops(synth_manifest, workdir / "styled")
    test = crops_from_manifest(corpus.test, corpus.root)

    clf_seed = derive_seed(seed, "classifier") % 2 ** 31
    base, _ = train_toy_classifier(real, n_cls, s.classifier_steps, clf_seed, s.classifier_batch, k=cfg["eval.k"])
    mixed, _ = train_toy_classifier(CropSet.concat([real, synth]), n_cls, s.classifier_steps, clf_seed,
                                    s.classifier_batch, k=cfg["eval.k"])
    # with eval.mask_absent, classes with no training examples are masked out of each head
    mask = cfg["eval.mask_absent"]
    seen_real = sorted(set(real.labels.tolist()))
    seen_mixed = sorted(set(seen_real) | set(synth.labels.tolist()))
    r_real, f_real = _recalls(base, test, seen_real if mask else None, rare, frequent, n_cls)
    r_mix, f_mix = _recalls(mixed, test, seen_mixed if mask else None, rare, frequent, n_cls)
    result = UpliftResult(seed, r_real, f_real, r_mix, f_mix, len(real), len(synth), time.time() - t0)
    note("done", **result.as_dict())
    return result
