"""Mask-centered inpainting generator and discriminator.

A reduced version of the EdgeConnect inpainting branch (no edge branch):
three strided convs down, residual blocks, three transposed convs up.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config
from .core import (MAX_REMOVAL_SIDE, PATCH_SIZE, BBox, GeometryError, Patch, centered_rect, rect_mask,
                   restore_outside_mask, stack_patches, to_numpy, to_tensor)
from .losses import (FeatureExtractor, LossBundle, NonFiniteLossError, gan_loss_ce, l1_loss, perceptual_loss,
                     style_loss)


class UntrainedWarning(UserWarning):
    pass


NORMS = ("instance", "none")


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(ch)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}; expected one of {NORMS}")


PREFILLS = ("zero", "pushpull")


def pushpull_fill(image: torch.Tensor, hole: torch.Tensor) -> torch.Tensor:
    """Fill ``hole`` (B x 1 x H x W, 1 = missing) by mask-weighted pyramid averaging."""
    valid = 1.0 - hole
    levels = [(image * valid, valid)]
    while levels[-1][0].shape[-1] > 1 and float(levels[-1][1].amin()) == 0.0:
        num, den = levels[-1]
        levels.append((F.avg_pool2d(num, 2), F.avg_pool2d(den, 2)))
    filled = levels[-1][0] / levels[-1][1].clamp_min(1e-8)
    for num, den in reversed(levels[:-1]):
        up = F.interpolate(filled, size=num.shape[-2:], mode="bilinear", align_corners=False)
        known = num / den.clamp_min(1e-8)
        w = den.clamp(0.0, 1.0)
        filled = w * known + (1.0 - w) * up
    return image * valid + filled * hole


class ResBlock(nn.Module):
    def __init__(self, ch: int, norm: str = "instance"):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(norm, ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(norm, ch),
        )

    def forward(self, x):
        return x + self.body(x)


class PatchGenerator(nn.Module):
    """Encoder / residual / decoder generator on 128x128 patches.

    With ``residual=True`` the output is ``clamp(input_rgb + head)`` and the
    head starts at zero, so a fresh network is an exact passthrough.
    ``norm="instance"`` discards each image's channel means, so absolute
    colors must be rebuilt from context; ``"none"`` keeps them.
    ``prefill="pushpull"`` replaces the blanked hole with a smooth pyramid
    fill before the first layer (and as the residual base).
    """

    def __init__(self, in_channels: int = 4, ch: int = 16, res_blocks: int = 4, residual: bool = False,
                 norm: str = "instance", prefill: str = "zero"):
        super().__init__()
        if prefill not in PREFILLS:
            raise ValueError(f"unknown prefill {prefill!r}; expected one of {PREFILLS}")
        self.in_channels = in_channels
        self.residual = residual
        self.prefill = prefill
        self.encoder = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(in_channels, ch, 7), _norm(norm, ch), nn.ReLU(True),
            nn.Conv2d(ch, ch * 2, 4, 2, 1), _norm(norm, ch * 2), nn.ReLU(True),
            nn.Conv2d(ch * 2, ch * 4, 4, 2, 1), _norm(norm, ch * 4), nn.ReLU(True),
            nn.Conv2d(ch * 4, ch * 4, 4, 2, 1), _norm(norm, ch * 4), nn.ReLU(True),
        )
        self.middle = nn.Sequential(*[ResBlock(ch * 4, norm) for _ in range(res_blocks)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(ch * 4, ch * 4, 4, 2, 1), _norm(norm, ch * 4), nn.ReLU(True),
            nn.ConvTranspose2d(ch * 4, ch * 2, 4, 2, 1), _norm(norm, ch * 2), nn.ReLU(True),
            nn.ConvTranspose2d(ch * 2, ch, 4, 2, 1), _norm(norm, ch), nn.ReLU(True),
        )
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ch, 3, 7))
        if residual:
            nn.init.zeros_(self.head[1].weight)
            nn.init.zeros_(self.head[1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.prefill == "pushpull" and self.in_channels == 4:
            x = torch.cat([pushpull_fill(x[:, :3], x[:, 3:]), x[:, 3:]], dim=1)
        h = self.head(self.decoder(self.middle(self.encoder(x))))
        if self.residual:
            return (x[:, :3] + h).clamp(0.0, 1.0)
        return torch.sigmoid(h)


class PatchDiscriminator(nn.Module):
    """Strided conv critic; spatial logits are averaged into one logit per item."""

    def __init__(self, in_channels: int = 3, ch: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, ch, 4, 2, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(ch, ch * 2, 4, 2, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(ch * 2, ch * 4, 4, 2, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(ch * 4, ch * 4, 4, 2, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(ch * 4, 1, 3, 1, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).mean(dim=(1, 2, 3))


def inpaint_input(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Blank the hole and append the mask channel."""
    return torch.cat([image * (1.0 - mask), mask], dim=1)


@dataclass(frozen=True)
class MaskSpec:
    side_w: int
    side_h: int
    size: int = PATCH_SIZE

    def __post_init__(self):
        if self.side_w < 0 or self.side_h < 0 or self.side_w > MAX_REMOVAL_SIDE or self.side_h > MAX_REMOVAL_SIDE:
            raise GeometryError(f"mask sides {self.side_w}x{self.side_h} outside [0, {MAX_REMOVAL_SIDE}]")

    @property
    def empty(self) -> bool:
        return self.side_w == 0 or self.side_h == 0

    @property
    def rect(self) -> BBox:
        return centered_rect(self.side_w, self.side_h, self.size)

    def array(self) -> np.ndarray:
        if self.empty:
            return np.zeros((self.size, self.size), dtype=bool)
        return rect_mask(self.rect, self.size)


def sample_mask(rng: np.random.Generator, min_side: int = 16, max_side: int = MAX_REMOVAL_SIDE) -> MaskSpec:
    """Centered removal rectangle with sides i.i.d. uniform in ``[min_side, max_side]``."""
    if not 1 <= min_side <= max_side <= MAX_REMOVAL_SIDE:
        raise ValueError(f"need 1 <= min_side <= max_side <= {MAX_REMOVAL_SIDE}, got {min_side}, {max_side}")
    w, h = rng.integers(min_side, max_side + 1, size=2)
    return MaskSpec(int(w), int(h))


def _adam(params, cfg: Config, lr: float | None = None) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr or cfg["optim.lr"], betas=(cfg["optim.beta1"], cfg["optim.beta2"]))


def feature_extractor(cfg: Config) -> FeatureExtractor:
    fx = FeatureExtractor.default(seed=cfg["features.seed"], taps=cfg.ints("features.taps"),
                                  weights=cfg.floats("features.tap_weights"))
    if cfg["features.weights_path"]:
        fx.load_weights(cfg["features.weights_path"])
    return fx


@dataclass
class InpaintNet:
    g: PatchGenerator
    d: PatchDiscriminator
    fx: FeatureExtractor
    weights: dict[str, float]
    min_side: int = 16
    max_side: int = MAX_REMOVAL_SIDE
    opt_g: torch.optim.Optimizer | None = None
    opt_d: torch.optim.Optimizer | None = None
    steps: int = 0
    config: Config = field(default_factory=Config)

    @classmethod
    def build(cls, cfg: Config | None = None, seed: int | None = None, residual: bool = False) -> InpaintNet:
        cfg = cfg or Config()
        torch.manual_seed(cfg["seed"] if seed is None else seed)
        g = PatchGenerator(4, cfg["inpaint.channels"], cfg["inpaint.res_blocks"], residual=residual,
                           norm=cfg["inpaint.norm"], prefill=cfg["inpaint.prefill"])
        d = PatchDiscriminator(3, cfg["inpaint.channels"])
        weights = {k: cfg[f"loss.{k}"] for k in ("adversarial", "l1", "perceptual", "style")}
        return cls(g, d, feature_extractor(cfg), weights, cfg["inpaint.min_side"], cfg["inpaint.max_side"],
                   _adam(g.parameters(), cfg), _adam(d.parameters(), cfg), 0, cfg)

    def modules(self) -> dict[str, nn.Module]:
        return {"g": self.g, "d": self.d}


def inpaint_tensor(g: nn.Module, image: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Raw generator output and its mask-restored composite."""
    out = g(inpaint_input(image, mask))
    return out, out * mask + image * (1.0 - mask)


def inpaint(net: InpaintNet, patch: Patch, mask: MaskSpec | np.ndarray | None = None) -> Patch:
    """Fill the removal rectangle; pixels outside it are returned bit-exactly."""
    if mask is None:
        m = patch.removal_mask
    elif isinstance(mask, MaskSpec):
        m = mask.array()
    else:
        m = np.asarray(mask, dtype=bool)
    if m is None or not m.any():
        return patch.replace(patch.pixels.copy())
    if net.steps == 0:
        warnings.warn("inpainting with an untrained network", UntrainedWarning, stacklevel=2)
    net.g.eval()
    with torch.no_grad():
        out = net.g(inpaint_input(to_tensor(patch.pixels), torch.from_numpy(m.astype(np.float32))[None, None]))
    return restore_outside_mask(patch, patch.replace(to_numpy(out)), m)


def masks_tensor(specs: Sequence[MaskSpec]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.array() for s in specs]).astype(np.float32)).unsqueeze(1)


def inpaint_generator_losses(net: InpaintNet, real: torch.Tensor, masks: torch.Tensor,
                             out: torch.Tensor | None = None) -> LossBundle:
    """Generator-side terms: adversarial CE plus L1, perceptual and style against the true patch."""
    if out is None:
        out, comp = inpaint_tensor(net.g, real, masks)
    else:
        comp = out * masks + real * (1.0 - masks)
    w = net.weights
    bundle = LossBundle()
    if w["adversarial"] > 0:
        bundle.add("adversarial", gan_loss_ce(None, net.d(comp), "generator"), w["adversarial"])
    bundle.add("l1", l1_loss(out, real), w["l1"])
    if w["perceptual"] > 0:
        bundle.add("perceptual", perceptual_loss(net.fx, out, real), w["perceptual"])
    if w["style"] > 0:
        bundle.add("style", style_loss(net.fx, out, real), w["style"])
    return bundle


def _as_batch(real_patches) -> torch.Tensor:
    if isinstance(real_patches, torch.Tensor):
        return real_patches
    return stack_patches(list(real_patches))


def train_step_inpaint(net: InpaintNet, real_patches, rng: np.random.Generator | None = None,
                       masks: Sequence[MaskSpec] | torch.Tensor | None = None) -> LossBundle:
    """One discriminator update followed by one generator update."""
    real = _as_batch(real_patches)
    if masks is None:
        rng = rng if rng is not None else np.random.default_rng(net.steps)
        masks = [sample_mask(rng, net.min_side, net.max_side) for _ in range(real.shape[0])]
    m = masks if isinstance(masks, torch.Tensor) else masks_tensor(masks)
    net.g.train()
    net.d.train()
    out, comp = inpaint_tensor(net.g, real, m)

    w_adv = net.weights["adversarial"]
    d_loss = gan_loss_ce(net.d(real), net.d(comp.detach()), "discriminator")
    if not torch.isfinite(d_loss):
        raise NonFiniteLossError("discriminator loss is not finite")
    if w_adv > 0:
        net.opt_d.zero_grad(set_to_none=True)
        (w_adv * d_loss).backward()
        net.opt_d.step()

    net.d.requires_grad_(False)
    try:
        bundle = inpaint_generator_losses(net, real, m, out)
        bundle.check_finite()
        if bundle.active:
            net.opt_g.zero_grad(set_to_none=True)
            bundle.total.backward()
            net.opt_g.step()
    finally:
        net.d.requires_grad_(True)
    bundle.monitor["d_loss"] = float(d_loss.detach())
    net.steps += 1
    return bundle

