"""Patch extraction from manifests, training loops and checkpoint round-trips for every network."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .core import PATCH_SIZE, BBox, DatasetManifest, Patch, PatchOrigin, SignIcon, read_image, resize
from .embed import EmbedNet, extract_context_patch, train_step_stream_a, train_step_stream_b
from .inpaint import InpaintNet, inpaint, train_step_inpaint
from .placement import MapStore, WhereModule, make_where_batch, train_step_where
from .styled import StyledNet, grow, make_styled_batch, train_step_styled

Logger = Callable[[dict], None]


@dataclass
class SignItem:
    patch: Patch  # context patch with removal mask over the real sign
    class_id: int


def sign_patches(manifest: DatasetManifest, image_root: str | Path, ratio: float = 2.0, margin: int = 2,
                 max_items: int | None = None) -> list[SignItem]:
    """Context patches around every annotated sign whose window fits in the frame."""
    out = []
    for rec in manifest.frames:
        if not rec.annotations:
            continue
        frame = read_image(Path(image_root) / rec.image_path)
        for ann in rec.annotations:
            p = extract_context_patch(frame, ann.bbox, rec.frame_id, ratio, margin)
            if p is not None:
                out.append(SignItem(p, ann.class_id))
            if max_items is not None and len(out) >= max_items:
                return out
    return out


def background_patches(manifest: DatasetManifest, image_root: str | Path, n: int, rng: np.random.Generator,
                       side_range: tuple[int, int] = (32, 96), tries: int = 50) -> list[Patch]:
    """Sign-free square windows resampled to 128x128."""
    frames = [(rec, read_image(Path(image_root) / rec.image_path)) for rec in manifest.frames]
    if not frames:
        raise ValueError("manifest has no frames")
    out = []
    attempts = 0
    while len(out) < n and attempts < n * tries:
        attempts += 1
        rec, img = frames[int(rng.integers(len(frames)))]
        hi = min(side_range[1], rec.width, rec.height)
        lo = min(side_range[0], hi)
        side = int(rng.integers(lo, hi + 1))
        x, y = int(rng.integers(0, rec.width - side + 1)), int(rng.integers(0, rec.height - side + 1))
        win = BBox(x, y, side, side)
        if any(win.intersection(a.bbox) > 0 for a in rec.annotations):
            continue
        pixels = resize(img[win.slices()], PATCH_SIZE, PATCH_SIZE)
        out.append(Patch(pixels, None, PatchOrigin(rec.frame_id, win, win)))
    if len(out) < n:
        raise ValueError(f"found only {len(out)} of {n} sign-free windows")
    return out


def _pick(items: Sequence, batch: int, rng: np.random.Generator) -> list:
    return [items[i] for i in rng.integers(0, len(items), size=batch)]


def train_inpaint_loop(net: InpaintNet, patches: Sequence[Patch], steps: int, batch: int,
                       rng: np.random.Generator, log: Logger | None = None) -> list[dict]:
    history = []
    for _ in range(steps):
        losses = train_step_inpaint(net, _pick(patches, batch, rng), rng).floats()
        history.append(losses)
        if log:
            log({"event": "step", "step": net.steps, **losses})
    return history


def train_embed_loop(net: EmbedNet, signs: Sequence[SignItem], backgrounds: Sequence[Patch],
                     icons: Mapping[int, SignIcon], steps: int, batch: int, rng: np.random.Generator,
                     log: Logger | None = None) -> list[dict]:
    """Stream A every step; the cycled approach adds a stream B step on real signs."""
    classes = sorted(icons)
    history = []
    for _ in range(steps):
        real = _pick(signs, batch, rng)
        bgs = _pick(backgrounds, batch, rng)
        target = [icons[int(c)] for c in rng.choice(classes, size=batch)]
        losses = train_step_stream_a(net, [s.patch for s in real], bgs, target, rng).floats()
        if net.approach == "cycled":
            b = train_step_stream_b(net, [s.patch for s in real], [icons[s.class_id] for s in real], rng)
            losses.update({f"b.{k}": v for k, v in b.floats().items()})
        history.append(losses)
        if log:
            log({"event": "step", "step": net.steps, **losses})
    return history


@dataclass
class StyledItem:
    real: Patch
    background: Patch
    icon: SignIcon


def styled_items(signs: Sequence[SignItem], inpaint_net: InpaintNet | None,
                 icons: Mapping[int, SignIcon]) -> list[StyledItem]:
    """Pair each real sign patch with its inpainted background and the icon of its class."""
    out = []
    for s in signs:
        bg = inpaint(inpaint_net, s.patch) if inpaint_net is not None else s.patch
        out.append(StyledItem(s.patch, bg, icons[s.class_id]))
    return out


def train_styled_loop(net: StyledNet, items: Sequence[StyledItem], steps_per_stage: int, batch: int,
                      rng: np.random.Generator, log: Logger | None = None, final_steps: int | None = None,
                      generator: torch.Generator | None = None,
                      icon_pool: Sequence[SignIcon] | None = None) -> list[dict]:
    """Progressive schedule 8 -> 16 -> 32 -> 64; each stage runs ``steps_per_stage`` steps (the last ``final_steps``).

    With ``styled.icon_share`` > 0 and an ``icon_pool``, that share of every batch pairs a random pool icon with a
    real inpainted background and no real sign (generator terms only).
    """
    share = float(net.config["styled.icon_share"])
    if not 0.0 <= share <= 1.0:
        raise ValueError(f"styled.icon_share must be in [0, 1], got {share}")
    n_icon = int(round(share * batch)) if icon_pool else 0
    history = []
    while True:
        last = net.gen.level == 3
        budget = final_steps if (last and final_steps is not None) else steps_per_stage
        while net.stage_steps < budget:
            chosen = _pick(items, batch, rng)
            reals, icons = [i.real for i in chosen], [i.icon for i in chosen]
            for k in range(n_icon):
                reals[k], icons[k] = None, icon_pool[int(rng.integers(len(icon_pool)))]
            b = make_styled_batch(reals, [i.background for i in chosen], icons)
            losses = train_step_styled(net, b, generator).floats()
            losses["resolution"] = net.gen.resolution
            history.append(losses)
            if log:
                log({"event": "step", "step": net.steps, **losses})
        if last:
            return history
        grow(net.gen, net.critics)
        net.stage_steps = 0


def train_where_loop(wm: WhereModule, maps: MapStore | Mapping, manifest: DatasetManifest, steps: int, batch: int,
                     rng: np.random.Generator, log: Logger | None = None) -> list[dict]:
    """Supervised batches: one real box per frame with its semantic map (frames without maps are ignored)."""
    pairs = []
    for rec in manifest.frames:
        if rec.frame_id in maps:
            for a in rec.annotations:
                pairs.append((maps[rec.frame_id], a.bbox, (rec.width, rec.height)))
    if not pairs:
        raise ValueError("no annotated frames with semantic maps")
    return train_where_pairs(wm, pairs, steps, batch, rng, log)


def train_where_pairs(wm: WhereModule, pairs: Sequence[tuple], steps: int, batch: int, rng: np.random.Generator,
                      log: Logger | None = None) -> list[dict]:
    gen = torch.Generator().manual_seed(int(rng.integers(2 ** 31)))
    history = []
    for _ in range(steps):
        chosen = _pick(pairs, batch, rng)
        b = make_where_batch(wm, [c[0] for c in chosen], [c[1] for c in chosen], [c[2] for c in chosen])
        losses = train_step_where(wm, b, gen).floats()
        history.append(losses)
        if log:
            log({"event": "step", "step": wm.steps, **losses})
    return history


# --------------------------------------------------------------------------
# checkpoints


def save_net(path: str | Path, net) -> None:
    meta = {"kind": type(net).__name__, "config": json.loads(net.config.to_json()), "steps": net.steps}
    if isinstance(net, InpaintNet):
        meta["residual"] = net.g.residual
    if isinstance(net, EmbedNet):
        meta.update(approach=net.approach, residual=net.g1.residual)
    if isinstance(net, StyledNet):
        meta.update(level=net.gen.level, alpha=net.gen.alpha, stage_steps=net.stage_steps)
    save_checkpoint(path, net.modules(), net.config.hash(), meta)


def load_net(path: str | Path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
    cfg = Config(meta["config"])
    kind = meta["kind"]
    if kind == "InpaintNet":
        net = InpaintNet.build(cfg, residual=meta.get("residual", False))
    elif kind == "EmbedNet":
        net = EmbedNet.build(meta["approach"], cfg, residual=meta.get("residual", False))
    elif kind == "StyledNet":
        net = StyledNet.build(cfg)
        net.set_progress(meta["level"], meta["alpha"])
        net.stage_steps = meta.get("stage_steps", 0)
    elif kind == "WhereModule":
        net = WhereModule.build(cfg)
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    load_checkpoint(path, net.modules())
    net.steps = meta["steps"]
    return net
