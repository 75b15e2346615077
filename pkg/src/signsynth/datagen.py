"""Whole-dataset synthesis: replace real signs, or add signs at new places chosen by a placement model."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import derive_seed
from .core import (Annotation, BBox, ClassTaxonomy, DatasetManifest, FrameRecord, Provenance, SignIcon,
                   TaxonomyError, mask_rect, read_image, write_image)
from .embed import (EmbedNet, Skip, embed_processor, extract_context_patch, paste_region, patch_rect_to_frame,
                    replace_signs_in_frame)
from .inpaint import InpaintNet, inpaint
from .placement import KDEModel, MapStore, WhereModule, sample_kde, sample_where
from .styled import StyledNet, styled_processor, synthesize_patch

PROCESSING = ("pasted", "cycled", "styled")
PLACEMENT = ("replace", "kde", "nn")
VARIANTS = ("additional", "only-synt", "manystyled")


class ModeError(ValueError):
    pass


@dataclass(frozen=True)
class GenerationMode:
    processing: str
    placement: str = "replace"
    variant: str | None = None

    def __post_init__(self):
        if self.processing not in PROCESSING:
            raise ModeError(f"processing must be one of {PROCESSING}, got {self.processing!r}")
        if self.placement not in PLACEMENT:
            raise ModeError(f"placement must be one of {PLACEMENT}, got {self.placement!r}")
        if self.placement == "replace":
            if self.variant is not None:
                raise ModeError("replacement sets take no variant")
        else:
            if self.variant not in VARIANTS:
                raise ModeError(f"placement sets need a variant from {VARIANTS}")
            if self.processing != "styled":
                raise ModeError("placement-driven sets are rendered with styled processing only")

    @property
    def name(self) -> str:
        return self.processing if self.placement == "replace" else f"{self.placement}-{self.variant}"


# --------------------------------------------------------------------------
# class balance


@dataclass
class BalancePlan:
    quota: dict[int, int]
    shortfall: int = 0

    @property
    def total(self) -> int:
        return sum(self.quota.values())

    def group_totals(self, taxonomy: ClassTaxonomy) -> tuple[int, int, int]:
        rare = sum(n for c, n in self.quota.items() if c in taxonomy.rare)
        return self.total, rare, self.total - rare


def _even(total: int, classes: Sequence[int]) -> dict[int, int]:
    classes = sorted(classes)
    if total and not classes:
        raise ValueError("no classes to spread a nonzero target over")
    base, extra = divmod(total, len(classes)) if classes else (0, 0)
    return {c: base + (1 if i < extra else 0) for i, c in enumerate(classes)}


def class_balance_plan(taxonomy: ClassTaxonomy, target_counts: Mapping[str, int],
                       frame_budget: int | None = None) -> BalancePlan:
    """Per-class icon quotas meeting ``{"rare": n, "frequent": m}`` group targets, spread evenly in each group.

    ``frame_budget`` is the number of sign slots the frames can hold; the
    plan reports how far the targets exceed it.
    """
    n_rare, n_freq = int(target_counts.get("rare", 0)), int(target_counts.get("frequent", 0))
    if n_rare < 0 or n_freq < 0:
        raise ValueError("targets must be non-negative")
    quota = {**_even(n_rare, sorted(taxonomy.rare)), **_even(n_freq, sorted(taxonomy.train_present))}
    quota = {c: n for c, n in sorted(quota.items()) if n > 0}
    shortfall = max(0, n_rare + n_freq - frame_budget) if frame_budget is not None else 0
    return BalancePlan(quota, shortfall)


def split_targets(total: int, rare_share: float) -> dict[str, int]:
    rare = int(round(total * rare_share))
    return {"rare": rare, "frequent": total - rare}


class QuotaDeck:
    """Shuffled multiset of class ids drawn in order; falls back to quota-weighted draws when exhausted."""

    def __init__(self, plan: BalancePlan, seed: int):
        self.plan = plan
        rng = np.random.default_rng(seed)
        deck = np.repeat(np.array(list(plan.quota), dtype=np.int64), list(plan.quota.values()))
        self.deck = list(rng.permutation(deck))
        self.rng = rng
        classes = np.array(list(plan.quota))
        weights = np.array(list(plan.quota.values()), dtype=np.float64)
        self._fallback = (classes, weights / weights.sum()) if weights.sum() > 0 else None

    def draw(self) -> int:
        if self.deck:
            return int(self.deck.pop(0))
        if self._fallback is None:
            raise TaxonomyError("empty class plan")
        classes, p = self._fallback
        return int(self.rng.choice(classes, p=p))


# --------------------------------------------------------------------------
# frame-level primitives


def remove_sign(frame: np.ndarray, ann: Annotation, net: InpaintNet, ratio: float = 2.0,
                margin: int = 2) -> np.ndarray | None:
    """Inpaint a real sign away; ``None`` when its context window leaves the frame."""
    patch = extract_context_patch(frame, ann.bbox, ann.frame_id, ratio, margin)
    if patch is None:
        return None
    filled = inpaint(net, patch)
    out, _ = paste_region(frame, filled, mask_rect(patch.removal_mask))
    return out


def insert_sign(frame: np.ndarray, box: BBox, icon: SignIcon, net: StyledNet, rng: np.random.Generator,
                frame_id: str, ratio: float = 2.0) -> tuple[np.ndarray, Annotation] | None:
    """Generate a background-consistent sign at ``box``; ``None`` when its window leaves the frame."""
    patch = extract_context_patch(frame, box, frame_id, ratio, with_mask=False)
    if patch is None:
        return None
    out_patch, rect = synthesize_patch(net, patch, icon, rng)
    out, _ = paste_region(frame, out_patch, rect)
    ann = Annotation(frame_id, patch_rect_to_frame(patch.origin.window, rect), icon.class_id, Provenance.SYNTHETIC)
    return out, ann


# --------------------------------------------------------------------------
# dataset generation


@dataclass
class GenerationNets:
    embed: EmbedNet | None = None
    inpaint: InpaintNet | None = None
    styled: StyledNet | None = None
    kde: KDEModel | None = None
    where: WhereModule | None = None
    maps: MapStore | None = None


@dataclass
class GenerationReport:
    mode: str
    seed: int
    images: int = 0
    signs_per_class: dict[int, int] = field(default_factory=dict)
    real_kept: int = 0
    skips: list[Skip] = field(default_factory=list)
    quota: dict[int, int] = field(default_factory=dict)
    shortfall: int = 0

    @property
    def total_signs(self) -> int:
        return sum(self.signs_per_class.values())

    def group_totals(self, taxonomy: ClassTaxonomy) -> tuple[int, int, int]:
        rare = sum(n for c, n in self.signs_per_class.items() if c in taxonomy.rare)
        return self.total_signs, rare, self.total_signs - rare

    def to_json(self) -> str:
        return json.dumps({
            "mode": self.mode, "seed": self.seed, "images": self.images, "total_signs": self.total_signs,
            "signs_per_class": {str(k): v for k, v in sorted(self.signs_per_class.items())},
            "real_kept": self.real_kept, "quota": {str(k): v for k, v in sorted(self.quota.items())},
            "shortfall": self.shortfall,
            "skips": [{"frame_id": s.frame_id, "bbox": [s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h], "reason": s.reason}
                      for s in self.skips],
        }, indent=1, sort_keys=True)


def _check_nets(mode: GenerationMode, nets: GenerationNets) -> None:
    need = []
    if mode.placement == "replace":
        need.append("embed" if mode.processing in ("pasted", "cycled") else "styled")
        if mode.processing == "styled":
            need.append("inpaint")
    else:
        need += ["styled", "kde" if mode.placement == "kde" else "where"]
        if mode.variant != "additional":
            need.append("inpaint")
    missing = [n for n in need if getattr(nets, n) is None]
    if missing:
        raise ModeError(f"mode {mode.name} needs trained models: {missing}")
    if (mode.placement == "replace" and mode.processing in ("pasted", "cycled")
            and nets.embed.approach != mode.processing):
        raise ModeError(f"embed net was built for {nets.embed.approach}, mode asks for {mode.processing}")


def _new_boxes(mode: GenerationMode, rec: FrameRecord, nets: GenerationNets, rng: np.random.Generator,
               existing: Sequence[BBox], skips: list[Skip]) -> list[BBox]:
    dims = (rec.width, rec.height)
    if mode.placement == "kde":
        boxes = sample_kde(nets.kde, dims, rng, existing)
    else:
        if nets.maps is None or rec.frame_id not in nets.maps:
            skips.append(Skip(rec.frame_id, BBox(0, 0, rec.width, rec.height), "no semantic map"))
            return []
        count = nets.kde.draw_count(rng) if nets.kde is not None else 1
        boxes = sample_where(nets.where, nets.maps[rec.frame_id], dims, rng, count, existing)
    if len(boxes) < boxes.requested:
        skips.append(Skip(rec.frame_id, BBox(0, 0, rec.width, rec.height),
                          f"placement budget exhausted ({len(boxes)}/{boxes.requested} boxes)"))
    return list(boxes)


def plan_slots(mode: GenerationMode, manifest: DatasetManifest, nets: GenerationNets,
               seed: int) -> tuple[dict[str, list[BBox]], list[Skip], int]:
    """New boxes per frame and the total number of synthetic sign slots."""
    new_boxes: dict[str, list[BBox]] = {}
    skips: list[Skip] = []
    slots = 0
    for rec in sorted(manifest.frames, key=lambda r: r.frame_id):
        real = [a.bbox for a in rec.annotations]
        boxes = []
        if mode.placement != "replace":
            rng = np.random.default_rng(derive_seed(seed, rec.frame_id, "place"))
            obstacles = real if mode.variant in ("additional", "manystyled") else []
            boxes = _new_boxes(mode, rec, nets, rng, obstacles, skips)
        new_boxes[rec.frame_id] = boxes
        reuse_real = mode.placement == "replace" or mode.variant == "manystyled"
        slots += len(boxes) + (len(real) if reuse_real else 0)
    return new_boxes, skips, slots


def generate_dataset(mode: GenerationMode, train_manifest: DatasetManifest, icon_pool: Mapping[int, SignIcon],
                     nets: GenerationNets, seed: int, image_root: str | Path, out_dir: str | Path,
                     taxonomy: ClassTaxonomy | None = None, rare_share: float = 94472 / 196455,
                     plan: BalancePlan | None = None, ratio: float = 2.0,
                     margin: int = 2) -> tuple[DatasetManifest, GenerationReport]:
    """Augment every training frame exactly once; writes images, ``manifest.txt`` and ``report.json``."""
    _check_nets(mode, nets)
    image_root, out_dir = Path(image_root), Path(out_dir)
    new_boxes, skips, slots = plan_slots(mode, train_manifest, nets, seed)
    if plan is None:
        if taxonomy is None:
            classes = sorted(icon_pool)
            plan = BalancePlan(_even(slots, classes))
        else:
            plan = class_balance_plan(taxonomy, split_targets(slots, rare_share), frame_budget=slots)
    missing = sorted(c for c in plan.quota if c not in icon_pool)
    if missing:
        raise TaxonomyError(f"no icons for planned classes {missing[:10]}", missing[0])
    deck = QuotaDeck(plan, derive_seed(seed, "deck"))
    report = GenerationReport(mode.name, seed, quota=dict(plan.quota), skips=list(skips))
    emitted: Counter[int] = Counter()
    frames = []
    for rec in sorted(train_manifest.frames, key=lambda r: r.frame_id):
        rng = np.random.default_rng(derive_seed(seed, rec.frame_id, "render"))
        image = read_image(image_root / rec.image_path)
        image, anns = _render_frame(mode, rec, image, new_boxes[rec.frame_id], nets, deck, icon_pool, rng,
                                    report, ratio, margin)
        rel = f"images/{rec.frame_id}.png"
        write_image(out_dir / rel, image)
        for a in anns:
            if a.provenance is Provenance.SYNTHETIC:
                emitted[a.class_id] += 1
            else:
                report.real_kept += 1
        frames.append(FrameRecord(rec.frame_id, rel, rec.width, rec.height, tuple(anns)))
        report.images += 1
    report.signs_per_class = dict(sorted(emitted.items()))
    report.shortfall = max(0, plan.total - report.total_signs)
    manifest = DatasetManifest(frames, f"synthetic-{mode.name}")
    manifest.save(out_dir / "manifest.txt")
    (out_dir / "report.json").write_text(report.to_json())
    return manifest, report


def _render_frame(mode: GenerationMode, rec: FrameRecord, image: np.ndarray, boxes: Sequence[BBox],
                  nets: GenerationNets, deck: QuotaDeck, icons: Mapping[int, SignIcon], rng: np.random.Generator,
                  report: GenerationReport, ratio: float, margin: int) -> tuple[np.ndarray, list[Annotation]]:
    icon_source = lambda _rng: icons[deck.draw()]  # noqa: E731
    anns: list[Annotation] = []
    if mode.placement == "replace":
        if not rec.annotations:
            return image, []
        processor = (embed_processor(nets.embed) if mode.processing in ("pasted", "cycled")
                     else styled_processor(nets.inpaint, nets.styled))
        image, new, skips = replace_signs_in_frame(processor, image, rec.annotations, icon_source, rng, ratio, margin)
        report.skips += skips
        skipped = {(s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h) for s in skips}
        # signs that could not be processed stay in the picture and keep their real label
        anns += [a for a in rec.annotations if (a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h) in skipped]
        return image, anns + new

    if mode.variant == "additional":
        anns += list(rec.annotations)
        old_targets: list[BBox] = []
    else:
        old_targets = []
        for a in rec.annotations:
            cleaned = remove_sign(image, a, nets.inpaint, ratio, margin)
            if cleaned is None:
                report.skips.append(Skip(rec.frame_id, a.bbox, "context window leaves frame; real sign unlabeled"))
                continue
            image = cleaned
            old_targets.append(a.bbox)
        if mode.variant == "only-synt":
            old_targets = []
    for box in list(old_targets) + list(boxes):
        icon = icon_source(rng)
        res = insert_sign(image, box, icon, nets.styled, rng, rec.frame_id, ratio)
        if res is None:
            report.skips.append(Skip(rec.frame_id, box, "context window leaves frame"))
            continue
        image, ann = res
        anns.append(ann)
    return image, anns
