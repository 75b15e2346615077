"""Joint inpaint-then-refine pipelines ("pasted" and "cycled").

Two generators and two discriminators: G1 fills the centered hole, the icon
is blended into the middle of G1's output, G2 refines the result.  The
"cycled" approach adds a second data stream where a real sign is cut out,
re-embedded from its own class icon, and the whole chain must reproduce the
original patch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import Config
from .core import (MAX_REMOVAL_SIDE, PATCH_SIZE, Annotation, BBox, GeometryError, Patch, PatchOrigin, Provenance,
                   SignIcon, TaxonomyError, centered_rect, composite, fit_size, mask_rect, place_icon, rect_mask,
                   resize, restore_outside_mask, stack_patches, to_numpy, to_tensor)
from .inpaint import (PatchDiscriminator, PatchGenerator, UntrainedWarning, _adam, feature_extractor,
                      inpaint_input, masks_tensor, sample_mask)
from .losses import (FeatureExtractor, LossBundle, NonFiniteLossError, gan_loss_ce, l1_loss, masked_l1,
                     perceptual_loss, style_loss)

APPROACHES = ("pasted", "cycled")


@dataclass(frozen=True)
class IconScaleRule:
    """Icon max side is ``64 - delta`` with ``delta`` uniform in ``[0, delta_max]``."""

    delta_max: int = 16
    base: int = MAX_REMOVAL_SIDE

    def __post_init__(self):
        if not 0 <= self.delta_max < self.base:
            raise ValueError(f"delta_max must be in [0, {self.base})")

    def sample(self, rng: np.random.Generator) -> int:
        delta = int(rng.integers(0, self.delta_max + 1)) if self.delta_max else 0
        return self.base - delta


def icon_rect(icon: SignIcon, max_side: int, size: int = PATCH_SIZE) -> BBox:
    h, w = fit_size(*icon.source_resolution, max_side)
    return centered_rect(w, h, size)


def embed_icon(patch: Patch, icon: SignIcon, rule: IconScaleRule, rng: np.random.Generator) -> tuple[Patch, BBox]:
    """Blend ``icon`` into the middle of ``patch`` at max side ``64 - delta``."""
    rect = icon_rect(icon, rule.sample(rng), patch.size)
    return composite(icon, patch, rect), rect


def icon_canvas(icon: SignIcon, rect: BBox, size: int = PATCH_SIZE) -> tuple[torch.Tensor, torch.Tensor]:
    """Icon rendered into ``rect`` as ``(1x3xSxS rgb, 1x1xSxS alpha)`` tensors."""
    rgb, alpha = place_icon(icon, rect, size)
    return to_tensor(rgb), torch.from_numpy(alpha)[None, None]


def blend_tensor(background: torch.Tensor, rgb: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    return alpha * rgb + (1.0 - alpha) * background


@dataclass
class EmbedNet:
    g1: PatchGenerator
    g2: PatchGenerator
    d1: PatchDiscriminator
    d2: PatchDiscriminator
    fx: FeatureExtractor
    weights: dict[str, float]
    rule: IconScaleRule = IconScaleRule()
    approach: str = "pasted"
    min_side: int = 16
    opt_g: torch.optim.Optimizer | None = None
    opt_d: torch.optim.Optimizer | None = None
    steps: int = 0
    config: Config = field(default_factory=Config)

    @classmethod
    def build(cls, approach: str = "pasted", cfg: Config | None = None, seed: int | None = None,
              residual: bool = False) -> EmbedNet:
        if approach not in APPROACHES:
            raise ValueError(f"approach must be one of {APPROACHES}")
        cfg = cfg or Config()
        torch.manual_seed(cfg["seed"] if seed is None else seed)
        ch, nres = cfg["inpaint.channels"], cfg["inpaint.res_blocks"]
        g1 = PatchGenerator(4, ch, nres, residual=residual, norm=cfg["inpaint.norm"],
                            prefill=cfg["inpaint.prefill"])
        g2 = PatchGenerator(3, ch, nres, residual=residual, norm=cfg["inpaint.norm"])
        d1, d2 = PatchDiscriminator(3, ch), PatchDiscriminator(3, ch)
        keys = ("adversarial", "l1", "perceptual", "style", "bg_l1", "cut_l1")
        weights = {k: cfg[f"loss.{k}"] for k in keys}
        opt_g = _adam(list(g1.parameters()) + list(g2.parameters()), cfg)
        opt_d = _adam(list(d1.parameters()) + list(d2.parameters()), cfg)
        return cls(g1, g2, d1, d2, feature_extractor(cfg), weights, IconScaleRule(cfg["embed.delta_max"]),
                   approach, cfg["inpaint.min_side"], opt_g, opt_d, 0, cfg)

    def modules(self) -> dict[str, nn.Module]:
        return {"g1": self.g1, "g2": self.g2, "d1": self.d1, "d2": self.d2}

    def generators(self):
        return (self.g1, self.g2)

    def discriminators(self):
        return (self.d1, self.d2)


def _w(weights: Mapping[str, float], key: str) -> float:
    return float(weights.get(key, 0.0))


@dataclass
class StreamABatch:
    """Stream A: clean backgrounds to inpaint plus unrelated real sign patches for D2."""

    real_signs: torch.Tensor
    backgrounds: torch.Tensor
    masks: torch.Tensor
    icon_rgb: torch.Tensor
    icon_alpha: torch.Tensor


@dataclass
class StreamBBatch:
    """Stream B: real sign patches, the cut-out mask over each sign and its own-class icon."""

    real_signs: torch.Tensor
    masks: torch.Tensor
    icon_rgb: torch.Tensor
    icon_alpha: torch.Tensor
    restore: torch.Tensor


def make_stream_a(real_sign_patches, background_patches, icons: Sequence[SignIcon], rule: IconScaleRule,
                  rng: np.random.Generator, min_side: int = 16) -> StreamABatch:
    real = _batch(real_sign_patches)
    bg = _batch(background_patches)
    specs = [sample_mask(rng, min_side) for _ in range(bg.shape[0])]
    rgbs, alphas = [], []
    for icon in icons:
        rgb, alpha = icon_canvas(icon, icon_rect(icon, rule.sample(rng)))
        rgbs.append(rgb)
        alphas.append(alpha)
    return StreamABatch(real, bg, masks_tensor(specs), torch.cat(rgbs), torch.cat(alphas))


def make_stream_b(patches: Sequence[Patch], icons: Sequence[SignIcon], rule: IconScaleRule,
                  rng: np.random.Generator) -> StreamBBatch:
    """``patches`` must carry a removal mask over their real sign; ``icons`` are the true classes."""
    rgbs, alphas, masks, restores = [], [], [], []
    for patch, icon in zip(patches, icons):
        if icon is None:
            raise TaxonomyError("no icon for the sign class in this patch")
        if patch.removal_mask is None:
            raise ValueError("stream B patches need a removal mask over the real sign")
        rect = icon_rect(icon, rule.sample(rng))
        rgb, alpha = icon_canvas(icon, rect)
        rgbs.append(rgb)
        alphas.append(alpha)
        masks.append(patch.removal_mask)
        restores.append(union_mask(patch.removal_mask, rect))
    to_t = lambda ms: torch.from_numpy(np.stack(ms).astype(np.float32)).unsqueeze(1)  # noqa: E731
    return StreamBBatch(stack_patches(patches), to_t(masks), torch.cat(rgbs), torch.cat(alphas), to_t(restores))


def _batch(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else stack_patches(list(x))


def union_mask(mask: np.ndarray, rect: BBox) -> np.ndarray:
    """Centered removal mask widened to also cover the icon rectangle."""
    size = mask.shape[0]
    r = mask_rect(mask)
    w, h = (rect.w, rect.h) if r is None else (max(r.w, rect.w), max(r.h, rect.h))
    return rect_mask(centered_rect(w, h, size), size)


def stream_a_forward(g1: nn.Module, g2: nn.Module, b: StreamABatch) -> dict[str, torch.Tensor]:
    out1 = g1(inpaint_input(b.backgrounds, b.masks))
    comp1 = out1 * b.masks + b.backgrounds * (1.0 - b.masks)
    x2 = blend_tensor(comp1, b.icon_rgb, b.icon_alpha)
    out2 = g2(x2)
    return {"out1": out1, "comp1": comp1, "x2": x2, "out2": out2}


def stream_a_generator_losses(net: EmbedNet, b: StreamABatch, fw: Mapping[str, torch.Tensor]) -> LossBundle:
    w = net.weights
    bundle = LossBundle()
    if _w(w, "adversarial") > 0:
        bundle.add("g1_adv", gan_loss_ce(None, net.d1(fw["comp1"]), "generator"), w["adversarial"])
        bundle.add("g2_adv", gan_loss_ce(None, net.d2(fw["out2"]), "generator"), w["adversarial"])
    bundle.add("g1_l1", l1_loss(fw["out1"], b.backgrounds), _w(w, "l1"))
    if _w(w, "perceptual") > 0:
        bundle.add("g1_perc", perceptual_loss(net.fx, fw["out1"], b.backgrounds), w["perceptual"])
        bundle.add("g2_perc", perceptual_loss(net.fx, fw["x2"], fw["out2"]), w["perceptual"])
    if _w(w, "style") > 0:
        bundle.add("g1_style", style_loss(net.fx, fw["out1"], b.backgrounds), w["style"])
        bundle.add("g2_style", style_loss(net.fx, fw["out2"], fw["comp1"]), w["style"])
    bundle.add("g2_bg_l1", masked_l1(fw["out2"], fw["x2"], 1.0 - b.icon_alpha), _w(w, "bg_l1"))
    return bundle


def stream_b_forward(g1: nn.Module, g2: nn.Module, b: StreamBBatch) -> dict[str, torch.Tensor]:
    out1 = g1(inpaint_input(b.real_signs, b.masks))
    comp1 = out1 * b.masks + b.real_signs * (1.0 - b.masks)
    x2 = blend_tensor(comp1, b.icon_rgb, b.icon_alpha)
    out2 = g2(x2)
    final = out2 * b.restore + b.real_signs * (1.0 - b.restore)
    return {"out1": out1, "comp1": comp1, "x2": x2, "out2": out2, "final": final}


def stream_b_generator_losses(net: EmbedNet, b: StreamBBatch, fw: Mapping[str, torch.Tensor]) -> LossBundle:
    """Reconstruction of the original patch; G1 interior gets no direct target."""
    w = net.weights
    bundle = LossBundle()
    if _w(w, "adversarial") > 0:
        bundle.add("g1_adv", gan_loss_ce(None, net.d1(fw["comp1"]), "generator"), w["adversarial"])
        bundle.add("g2_adv", gan_loss_ce(None, net.d2(fw["final"]), "generator"), w["adversarial"])
    bundle.add("rec_l1", l1_loss(fw["out2"], b.real_signs), _w(w, "l1"))
    if _w(w, "perceptual") > 0:
        bundle.add("rec_perc", perceptual_loss(net.fx, fw["out2"], b.real_signs), w["perceptual"])
    if _w(w, "style") > 0:
        bundle.add("rec_style", style_loss(net.fx, fw["out2"], b.real_signs), w["style"])
    bundle.add("cut_l1", masked_l1(fw["out1"], b.real_signs, 1.0 - b.masks), _w(w, "cut_l1"))
    return bundle


def _update(opt: torch.optim.Optimizer, loss: torch.Tensor) -> None:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()


def _generator_step(net: EmbedNet, bundle: LossBundle) -> None:
    bundle.check_finite()
    if bundle.active and bundle.total.requires_grad:
        _update(net.opt_g, bundle.total)


def _frozen(*modules: nn.Module):
    class _Ctx:
        def __enter__(self):
            for m in modules:
                m.requires_grad_(False)

        def __exit__(self, *exc):
            for m in modules:
                m.requires_grad_(True)

    return _Ctx()


def train_step_stream_a(net: EmbedNet, real_sign_patches, background_patches, icons: Sequence[SignIcon],
                        rng: np.random.Generator | None = None, batch: StreamABatch | None = None) -> LossBundle:
    """Inpaint -> embed -> refine on clean backgrounds; D1 and D2 then G1+G2 updated."""
    rng = rng if rng is not None else np.random.default_rng(net.steps)
    b = batch or make_stream_a(real_sign_patches, background_patches, icons, net.rule, rng, net.min_side)
    for m in (*net.generators(), *net.discriminators()):
        m.train()
    fw = stream_a_forward(net.g1, net.g2, b)

    d1 = gan_loss_ce(net.d1(b.backgrounds), net.d1(fw["comp1"].detach()), "discriminator")
    d2 = gan_loss_ce(net.d2(b.real_signs), net.d2(fw["out2"].detach()), "discriminator")
    if not (torch.isfinite(d1) and torch.isfinite(d2)):
        raise NonFiniteLossError("discriminator loss is not finite")
    if _w(net.weights, "adversarial") > 0:
        _update(net.opt_d, net.weights["adversarial"] * (d1 + d2))

    with _frozen(*net.discriminators()):
        bundle = stream_a_generator_losses(net, b, fw)
        _generator_step(net, bundle)
    bundle.monitor.update(d1=float(d1.detach()), d2=float(d2.detach()))
    net.steps += 1
    return bundle


def train_step_stream_b(net: EmbedNet, patches: Sequence[Patch] | None = None,
                        icons: Sequence[SignIcon] | None = None, rng: np.random.Generator | None = None,
                        batch: StreamBBatch | None = None) -> LossBundle:
    """Cut the real sign out, inpaint, re-embed its own icon, refine; compare to the original.

    Only D2 is updated here: the stream has no clean background to show D1
    as "real", so D1 acts as a fixed judge for G1.
    """
    rng = rng if rng is not None else np.random.default_rng(net.steps)
    b = batch or make_stream_b(patches, icons, net.rule, rng)
    for m in (*net.generators(), *net.discriminators()):
        m.train()
    fw = stream_b_forward(net.g1, net.g2, b)

    d2 = gan_loss_ce(net.d2(b.real_signs), net.d2(fw["final"].detach()), "discriminator")
    if not torch.isfinite(d2):
        raise NonFiniteLossError("discriminator loss is not finite")
    if _w(net.weights, "adversarial") > 0:
        _update(net.opt_d, net.weights["adversarial"] * d2)

    with _frozen(*net.discriminators()):
        bundle = stream_b_generator_losses(net, b, fw)
        _generator_step(net, bundle)
    bundle.monitor["d2"] = float(d2.detach())
    net.steps += 1
    return bundle


def process_tensor(net: EmbedNet, pixels: np.ndarray, mask: np.ndarray, icon: SignIcon,
                   rect: BBox) -> np.ndarray:
    rgb, alpha = icon_canvas(icon, rect)
    with torch.no_grad():
        out1 = net.g1(inpaint_input(to_tensor(pixels), torch.from_numpy(mask.astype(np.float32))[None, None]))
        m = torch.from_numpy(mask.astype(np.float32))[None, None]
        comp1 = out1 * m + to_tensor(pixels) * (1.0 - m)
        out2 = net.g2(blend_tensor(comp1, rgb, alpha))
    return to_numpy(out2)


def process_patch(net: EmbedNet, patch_with_real_sign: Patch, target_icon: SignIcon,
                  rng: np.random.Generator) -> tuple[Patch, BBox]:
    """Replace the real sign in the patch center with a refined ``target_icon``.

    Pixels outside the union of the removal mask and the icon rectangle are
    returned bit-exactly.
    """
    patch = patch_with_real_sign
    if patch.removal_mask is None or not patch.removal_mask.any():
        raise GeometryError("patch carries no removal mask over its real sign")
    if net.steps == 0:
        warnings.warn("processing with an untrained network", UntrainedWarning, stacklevel=2)
    rect = icon_rect(target_icon, net.rule.sample(rng), patch.size)
    for m in net.generators():
        m.eval()
    out = process_tensor(net, patch.pixels, patch.removal_mask, target_icon, rect)
    region = union_mask(patch.removal_mask, rect)
    return restore_outside_mask(patch, patch.replace(out), region), rect


# --------------------------------------------------------------------------
# frame level


@dataclass
class Skip:
    frame_id: str
    bbox: BBox
    reason: str


PatchProcessor = Callable[[Patch, SignIcon, np.random.Generator], tuple[Patch, BBox]]


def context_window(frame_w: int, frame_h: int, box: BBox, ratio: float) -> BBox | None:
    """Square window of side ``ratio * max(w, h)`` centered on ``box``; ``None`` if it leaves the frame."""
    side = max(2, int(round(ratio * max(box.w, box.h))))
    side += side % 2
    cx, cy = box.x + box.w // 2, box.y + box.h // 2
    win_x, win_y = cx - side // 2, cy - side // 2
    if win_x < 0 or win_y < 0 or win_x + side > frame_w or win_y + side > frame_h:
        return None
    return BBox(win_x, win_y, side, side)


def extract_context_patch(frame: np.ndarray, box: BBox, frame_id: str, ratio: float = 2.0, margin: int = 2,
                          with_mask: bool = True) -> Patch | None:
    """Window around ``box`` resampled to 128x128 with a centered removal mask over the sign."""
    fh, fw = frame.shape[:2]
    win = context_window(fw, fh, box, ratio)
    if win is None:
        return None
    pixels = resize(frame[win.slices()], PATCH_SIZE, PATCH_SIZE)
    mask = None
    if with_mask:
        k = PATCH_SIZE / win.w
        mw = min(MAX_REMOVAL_SIDE, max(1, int(np.ceil(box.w * k)) + 2 * margin))
        mh = min(MAX_REMOVAL_SIDE, max(1, int(np.ceil(box.h * k)) + 2 * margin))
        mask = rect_mask(centered_rect(mw, mh))
    return Patch(pixels, mask, PatchOrigin(frame_id, win, box))


def paste_region(frame: np.ndarray, processed: Patch, region: BBox) -> tuple[np.ndarray, BBox]:
    """Write ``region`` (patch coords) of a processed context patch back into the frame.

    Returns the new frame and the frame-space rectangle that was written;
    every pixel outside that rectangle is untouched.
    """
    win = processed.origin.window
    k = win.w / PATCH_SIZE
    x0 = win.x + int(np.floor(region.x * k))
    y0 = win.y + int(np.floor(region.y * k))
    x1 = win.x + int(np.ceil(region.x2 * k))
    y1 = win.y + int(np.ceil(region.y2 * k))
    if win.w == PATCH_SIZE:
        back = processed.pixels
    else:
        back = resize(processed.pixels, win.h, win.w)
    out = np.array(frame, dtype=np.float32, copy=True)
    out[y0:y1, x0:x1] = back[y0 - win.y:y1 - win.y, x0 - win.x:x1 - win.x]
    return out, BBox(x0, y0, x1 - x0, y1 - y0)


def patch_rect_to_frame(window: BBox, rect: BBox) -> BBox:
    k = window.w / PATCH_SIZE
    x0 = window.x + int(round(rect.x * k))
    y0 = window.y + int(round(rect.y * k))
    x1 = window.x + int(round(rect.x2 * k))
    y1 = window.y + int(round(rect.y2 * k))
    return BBox(x0, y0, max(1, x1 - x0), max(1, y1 - y0))


def changed_region(before: Patch, after: Patch) -> BBox | None:
    diff = np.any(before.pixels != after.pixels, axis=2)
    return mask_rect(diff)


def replace_signs_in_frame(processor: PatchProcessor | EmbedNet, frame: np.ndarray, annotations, icon_source,
                           rng: np.random.Generator, ratio: float = 2.0, margin: int = 2):
    """Replace every annotated real sign with a processed synthetic icon.

    ``processor`` is an :class:`EmbedNet` or any callable with the
    :func:`process_patch` signature.  ``icon_source(rng)`` returns the icon
    to embed.  Returns the new frame,
    the new annotations (boxes of the embedded icons, provenance synthetic)
    and a list of :class:`Skip` records for signs whose context window does
    not fit in the frame.
    """
    if isinstance(processor, EmbedNet):
        processor = embed_processor(processor)
    out = np.array(frame, dtype=np.float32, copy=True)
    new_anns, skips = [], []
    for ann in annotations:
        patch = extract_context_patch(out, ann.bbox, ann.frame_id, ratio, margin)
        if patch is None:
            skips.append(Skip(ann.frame_id, ann.bbox, "context window leaves frame"))
            continue
        icon = icon_source(rng)
        processed, rect = processor(patch, icon, rng)
        region = union_rect(patch.removal_mask, rect)
        out, _ = paste_region(out, processed, region)
        new_anns.append(Annotation(ann.frame_id, patch_rect_to_frame(patch.origin.window, rect), icon.class_id,
                                   Provenance.SYNTHETIC))
    return out, new_anns, skips


def union_rect(mask: np.ndarray | None, rect: BBox) -> BBox:
    if mask is None:
        return rect
    return mask_rect(union_mask(mask, rect))


def embed_processor(net: EmbedNet) -> PatchProcessor:
    return lambda patch, icon, rng: process_patch(net, patch, icon, rng)
