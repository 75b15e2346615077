"""Background-conditioned sign generator ("styled" approach).

A descriptor vector built from two conv subnets (icon-on-background and
background alone) drives a style-modulated generator that grows from 8x8 to
64x64.  Two WGAN-GP critics judge the raw sign and the sign blended into its
background; a two-layer classifier on the descriptor predicts the sign class.
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
from .core import NUM_CLASSES, PATCH_SIZE, BBox, Patch, SignIcon, blend, centered_rect, place_icon, to_numpy, \
    to_tensor
from .embed import icon_rect
from .inpaint import UntrainedWarning, feature_extractor
from .losses import FeatureExtractor, LossBundle, NonFiniteLossError, perceptual_loss, wgan_gp

RESOLUTIONS = (8, 16, 32, 64)
SIGN_SIZE = 64


class StageError(RuntimeError):
    pass


def level_of(resolution: int) -> int:
    if resolution not in RESOLUTIONS:
        raise StageError(f"resolution {resolution} not in {RESOLUTIONS}")
    return RESOLUTIONS.index(resolution)


def _conv_stack(cin: int, widths: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for cout in widths:
        layers += [nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        cin = cout
    return nn.Sequential(*layers)


class DescriptorEncoder(nn.Module):
    """Icon-on-background (128x128) -> ``icon_code``; background at 64x64 -> ``bg_code``."""

    def __init__(self, icon_code: int = 548, bg_code: int = 64, ch: int = 16):
        super().__init__()
        self.icon_code, self.bg_code = icon_code, bg_code
        self.icon_net = _conv_stack(3, (ch, ch * 2, ch * 4, ch * 4))  # 128 -> 8
        self.icon_fc = nn.Linear(ch * 4 * 4 * 4, icon_code)
        self.bg_net = _conv_stack(3, (ch, ch * 2, ch * 4))  # 64 -> 8
        self.bg_fc = nn.Linear(ch * 4, bg_code)

    @property
    def dim(self) -> int:
        return self.icon_code + self.bg_code

    def forward(self, icon_on_bg: torch.Tensor, bg_only: torch.Tensor) -> torch.Tensor:
        for name, t in (("icon_on_bg", icon_on_bg), ("bg_only", bg_only)):
            if tuple(t.shape[1:]) != (3, PATCH_SIZE, PATCH_SIZE):
                raise ValueError(f"{name} must be Bx3x128x128, got {tuple(t.shape)}")
        a = F.adaptive_avg_pool2d(self.icon_net(icon_on_bg), 4).flatten(1)
        bg_small = F.interpolate(bg_only, size=(64, 64), mode="area")
        b = self.bg_net(bg_small).mean(dim=(2, 3))
        return torch.cat([self.icon_fc(a), self.bg_fc(b)], dim=1)


class NoiseInjection(nn.Module):
    def __init__(self, ch: int, init: float = 0.05):
        super().__init__()
        self.scale = nn.Parameter(torch.full((1, ch, 1, 1), init))

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        noise = torch.randn((x.shape[0], 1, x.shape[2], x.shape[3]), generator=generator, dtype=x.dtype)
        return x + self.scale * noise


class AdaIN(nn.Module):
    """Instance norm followed by a per-channel affine predicted from the descriptor."""

    def __init__(self, ch: int, v_dim: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(ch)
        self.affine = nn.Linear(v_dim, ch * 2)
        nn.init.zeros_(self.affine.weight)
        with torch.no_grad():
            self.affine.bias.copy_(torch.cat([torch.ones(ch), torch.zeros(ch)]))

    def forward(self, x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.affine(v).unsqueeze(-1).unsqueeze(-1).chunk(2, dim=1)
        return gamma * self.norm(x) + beta


class StyleBlock(nn.Module):
    def __init__(self, cin: int, cout: int, v_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.noise1 = NoiseInjection(cout)
        self.ada1 = AdaIN(cout, v_dim)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.noise2 = NoiseInjection(cout)
        self.ada2 = AdaIN(cout, v_dim)

    def forward(self, x, v, generator=None):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.leaky_relu(self.ada1(self.noise1(self.conv1(x), generator), v), 0.2)
        return F.leaky_relu(self.ada2(self.noise2(self.conv2(x), generator), v), 0.2)


class ProgressiveMixin:
    """Active level (0 -> 8x8 ... 3 -> 64x64) and fade-in coefficient of the newest block."""

    level: int
    alpha: float

    @property
    def resolution(self) -> int:
        return RESOLUTIONS[self.level]


class StyledGenerator(nn.Module, ProgressiveMixin):
    def __init__(self, v_dim: int = 612, widths: Sequence[int] = (32, 32, 16, 16), start_ch: int = 32):
        super().__init__()
        self.v_dim = v_dim
        self.start_ch = start_ch
        self.fc = nn.Linear(v_dim, start_ch * 4 * 4)
        blocks, to_rgb = [], []
        cin = start_ch
        for w in widths:
            blocks.append(StyleBlock(cin, w, v_dim))
            to_rgb.append(nn.Conv2d(w, 3, 1))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.ModuleList(to_rgb)
        self.level = 0
        self.alpha = 1.0

    def forward(self, v: torch.Tensor, resolution: int | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
        level = self.level if resolution is None else level_of(resolution)
        if level > self.level:
            raise StageError(f"stage {RESOLUTIONS[level]} not grown yet (active {self.resolution})")
        h = F.leaky_relu(self.fc(v), 0.2).view(v.shape[0], self.start_ch, 4, 4)
        prev = h
        for i in range(level + 1):
            prev = h
            h = self.blocks[i](h, v, generator)
        img = torch.sigmoid(self.to_rgb[level](h))
        if level == self.level and level > 0 and self.alpha < 1.0:
            low = torch.sigmoid(self.to_rgb[level - 1](prev))
            img = (1.0 - self.alpha) * F.interpolate(low, scale_factor=2, mode="nearest") + self.alpha * img
        return img


class ProgressiveCritic(nn.Module, ProgressiveMixin):
    """Mirror of the generator; ``base`` is the input size at level 0 (8 for signs, 16 for patches)."""

    def __init__(self, base: int = 8, widths: Sequence[int] = (32, 32, 16, 16)):
        super().__init__()
        self.base = base
        self.from_rgb = nn.ModuleList([nn.Conv2d(3, w, 1) for w in widths])
        # blocks[i] maps level i features (width widths[i]) down to level i-1 width
        blocks = []
        for i, w in enumerate(widths):
            wout = widths[i - 1] if i > 0 else widths[0]
            blocks.append(nn.Sequential(nn.Conv2d(w, w, 3, padding=1), nn.LeakyReLU(0.2),
                                        nn.Conv2d(w, wout, 3, padding=1), nn.LeakyReLU(0.2)))
        self.blocks = nn.ModuleList(blocks)
        side = base // 2
        self.final = nn.Linear(widths[0] * side * side, 1)
        self.level = 0
        self.alpha = 1.0

    def input_size(self, level: int | None = None) -> int:
        return self.base * 2 ** (self.level if level is None else level)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        level = self.level
        if x.shape[-1] != self.input_size(level):
            raise ValueError(f"critic at level {level} expects {self.input_size(level)}px, got {x.shape[-1]}")
        h = F.leaky_relu(self.from_rgb[level](x), 0.2)
        h = F.avg_pool2d(self.blocks[level](h), 2)
        if level > 0 and self.alpha < 1.0:
            skip = F.leaky_relu(self.from_rgb[level - 1](F.avg_pool2d(x, 2)), 0.2)
            h = self.alpha * h + (1.0 - self.alpha) * skip
        for i in range(level - 1, -1, -1):
            h = F.avg_pool2d(self.blocks[i](h), 2)
        return self.final(h.flatten(1)).squeeze(1)


class AuxClassifier(nn.Module):
    def __init__(self, v_dim: int = 612, hidden: int = 256, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(v_dim, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, num_classes))

    def forward(self, v):
        return self.net(v)


@dataclass
class StyledCritics:
    sign: ProgressiveCritic
    patch: ProgressiveCritic
    classifier: AuxClassifier

    def modules(self) -> list[nn.Module]:
        return [self.sign, self.patch, self.classifier]


@dataclass
class StyledNet:
    gen: StyledGenerator
    enc: DescriptorEncoder
    critics: StyledCritics
    fx: FeatureExtractor
    weights: dict[str, float]
    gp_weight: float = 10.0
    fade_steps: int = 2000
    opt_g: torch.optim.Optimizer | None = None
    opt_c: torch.optim.Optimizer | None = None
    steps: int = 0
    stage_steps: int = 0
    config: Config = field(default_factory=Config)

    @classmethod
    def build(cls, cfg: Config | None = None, seed: int | None = None) -> StyledNet:
        cfg = cfg or Config()
        torch.manual_seed(cfg["seed"] if seed is None else seed)
        ch = cfg["styled.channels"]
        widths = (ch, ch, max(ch // 2, 4), max(ch // 2, 4))
        enc = DescriptorEncoder(cfg["styled.icon_code"], cfg["styled.bg_code"], max(ch // 2, 4))
        gen = StyledGenerator(enc.dim, widths, ch)
        critics = StyledCritics(ProgressiveCritic(8, widths), ProgressiveCritic(16, widths),
                                AuxClassifier(enc.dim))
        weights = {
            "adversarial": cfg["loss.adversarial"],
            "aux_class": cfg["loss.aux_class"],
            "perceptual": cfg["loss.perceptual"],
            "bg_perceptual": cfg["loss.bg_perceptual"],
        }
        betas = (0.0, 0.99)
        opt_g = torch.optim.Adam(list(gen.parameters()) + list(enc.parameters())
                                 + list(critics.classifier.parameters()), lr=cfg["styled.lr"], betas=betas)
        opt_c = torch.optim.Adam(list(critics.sign.parameters()) + list(critics.patch.parameters()),
                                 lr=cfg["styled.lr"], betas=betas)
        return cls(gen, enc, critics, feature_extractor(cfg), weights, cfg["loss.gp_weight"],
                   cfg["styled.fade_steps"], opt_g, opt_c, 0, 0, cfg)

    def modules(self) -> dict[str, nn.Module]:
        return {"gen": self.gen, "enc": self.enc, "c_sign": self.critics.sign, "c_patch": self.critics.patch,
                "aux": self.critics.classifier}

    def progress(self) -> dict[str, float]:
        return {"level": self.gen.level, "alpha": self.gen.alpha, "steps": self.steps,
                "stage_steps": self.stage_steps}

    def set_progress(self, level: int, alpha: float) -> None:
        for m in (self.gen, self.critics.sign, self.critics.patch):
            m.level, m.alpha = int(level), float(alpha)


def encode_descriptor(enc: DescriptorEncoder, icon_on_bg: np.ndarray | torch.Tensor,
                      bg_only: np.ndarray | torch.Tensor) -> torch.Tensor:
    """612-long descriptor for a single item (or a batch if tensors are given)."""
    single = isinstance(icon_on_bg, np.ndarray)
    a = to_tensor(icon_on_bg) if single else icon_on_bg
    b = to_tensor(bg_only) if isinstance(bg_only, np.ndarray) else bg_only
    enc.eval()
    with torch.no_grad():
        v = enc(a, b)
    return v[0] if single else v


def generate_sign(gen: StyledGenerator, v: torch.Tensor, stage: int, noise_seed: int) -> np.ndarray:
    """Deterministic ``stage x stage x 3`` sign for descriptor ``v`` and ``noise_seed``."""
    level = level_of(stage)
    if level > gen.level:
        raise StageError(f"stage {stage} not grown yet (active {gen.resolution})")
    gen.eval()
    g = torch.Generator().manual_seed(int(noise_seed))
    with torch.no_grad():
        out = gen(v.reshape(1, -1), stage, generator=g)
    return to_numpy(out)


def grow(gen: StyledGenerator, critics: StyledCritics | None = None) -> None:
    """Enable the next resolution block; its fade-in starts at alpha 0."""
    if gen.level >= len(RESOLUTIONS) - 1:
        raise StageError("generator is already at 64x64")
    models = [gen] + ([critics.sign, critics.patch] if critics is not None else [])
    for m in models:
        m.level += 1
        m.alpha = 0.0


def advance_fade(net: StyledNet, n: int = 1) -> None:
    if net.gen.alpha >= 1.0:
        return
    alpha = min(1.0, net.gen.alpha + n / max(net.fade_steps, 1))
    net.set_progress(net.gen.level, alpha)


# --------------------------------------------------------------------------
# training


@dataclass
class StyledBatch:
    real_patches: torch.Tensor  # B x 3 x 128 x 128, real sign in the middle
    backgrounds: torch.Tensor  # B x 3 x 128 x 128, sign inpainted away
    icon_rgb: torch.Tensor  # B x 3 x 128 x 128 icon canvas (64x64 fit, centered)
    icon_alpha: torch.Tensor  # B x 1 x 128 x 128
    labels: torch.Tensor  # B
    has_real: torch.Tensor | None = None  # B bool; False marks icon-only items (no real sign), None = all real

    def real_index(self) -> torch.Tensor | None:
        if self.has_real is None or bool(self.has_real.all()):
            return None
        return torch.nonzero(self.has_real).squeeze(1)


def icon_canvas64(icon: SignIcon) -> tuple[np.ndarray, np.ndarray, BBox]:
    rect = icon_rect(icon, SIGN_SIZE)
    rgb, alpha = place_icon(icon, rect)
    return rgb, alpha, rect


def make_styled_batch(real_patches: Sequence[Patch | None], backgrounds: Sequence[Patch],
                      icons: Sequence[SignIcon]) -> StyledBatch:
    """``None`` in ``real_patches`` marks an icon-only item: it trains the generator terms but never feeds a critic
    as a real sample."""
    rgbs, alphas = [], []
    for icon in icons:
        rgb, alpha, _ = icon_canvas64(icon)
        rgbs.append(rgb)
        alphas.append(alpha)
    t = lambda arrs: torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()  # noqa: E731
    has_real = torch.tensor([p is not None for p in real_patches])
    reals = [p.pixels if p is not None else b.pixels for p, b in zip(real_patches, backgrounds)]
    return StyledBatch(
        t(reals), t([p.pixels for p in backgrounds]), t(rgbs),
        torch.from_numpy(np.stack(alphas))[:, None], torch.tensor([i.class_id for i in icons], dtype=torch.long),
        None if bool(has_real.all()) else has_real)


def _center(x: torch.Tensor) -> torch.Tensor:
    lo = (PATCH_SIZE - SIGN_SIZE) // 2
    return x[..., lo:lo + SIGN_SIZE, lo:lo + SIGN_SIZE]


def _area(x: torch.Tensor, size: int) -> torch.Tensor:
    return x if x.shape[-1] == size else F.interpolate(x, size=(size, size), mode="area")


def embed_sign_tensor(sign: torch.Tensor, alpha64: torch.Tensor, background: torch.Tensor) -> torch.Tensor:
    """Blend an ``r x r`` sign into the center of the background at ``2r x 2r``."""
    r = sign.shape[-1]
    bg = _area(background, 2 * r)
    a = _area(alpha64, r)
    pad = (r // 2, r // 2, r // 2, r // 2)
    return F.pad(a, pad) * F.pad(sign, pad) + (1.0 - F.pad(a, pad)) * bg


def styled_forward(net: StyledNet, b: StyledBatch, generator: torch.Generator | None = None):
    icon_on_bg = b.icon_alpha * b.icon_rgb + (1.0 - b.icon_alpha) * b.backgrounds
    v = net.enc(icon_on_bg, b.backgrounds)
    fake = net.gen(v, generator=generator)
    r = fake.shape[-1]
    fake_patch = embed_sign_tensor(fake, _center(b.icon_alpha), b.backgrounds)
    return {
        "v": v, "fake": fake, "fake_patch": fake_patch,
        "real_sign": _area(_center(b.real_patches), r),
        "real_patch": _area(b.real_patches, 2 * r),
        "target_patch": _area(icon_on_bg, 2 * r),
        "bg_patch": _area(b.backgrounds, 2 * r),
    }


def styled_generator_losses(net: StyledNet, b: StyledBatch, fw) -> LossBundle:
    w = net.weights
    bundle = LossBundle()
    if w["adversarial"] > 0:
        adv = -net.critics.sign(fw["fake"]).mean() - net.critics.patch(fw["fake_patch"]).mean()
        bundle.add("adversarial", adv, w["adversarial"])
    bundle.add("aux_class", F.cross_entropy(net.critics.classifier(fw["v"]), b.labels), w["aux_class"])
    bundle.add("perceptual", perceptual_loss(net.fx, fw["fake_patch"], fw["target_patch"]), w["perceptual"])
    bundle.add("bg_perceptual", perceptual_loss(net.fx, fw["fake_patch"], fw["bg_patch"]), w["bg_perceptual"])
    return bundle


def train_step_styled(net: StyledNet, batch: StyledBatch, generator: torch.Generator | None = None) -> LossBundle:
    """Critic update (WGAN-GP on both critics) then generator/encoder/classifier update."""
    for m in (net.gen, net.enc, *net.critics.modules()):
        m.train()
    fw = styled_forward(net, batch, generator)
    w_adv = net.weights["adversarial"]
    idx = batch.real_index()
    pick = (lambda x: x) if idx is None else (lambda x: x.index_select(0, idx))  # noqa: E731
    zero = torch.zeros(())
    c_sign = c_patch = pen_sign = pen_patch = zero
    if idx is None or len(idx):
        c_sign, _, pen_sign = wgan_gp(net.critics.sign, pick(fw["real_sign"]), pick(fw["fake"]), net.gp_weight,
                                      generator=generator)
        c_patch, _, pen_patch = wgan_gp(net.critics.patch, pick(fw["real_patch"]), pick(fw["fake_patch"]),
                                        net.gp_weight, generator=generator)
    critic_loss = c_sign + c_patch
    if not torch.isfinite(critic_loss):
        raise NonFiniteLossError("critic loss is not finite")
    if w_adv > 0 and critic_loss.requires_grad:
        net.opt_c.zero_grad(set_to_none=True)
        (w_adv * critic_loss).backward()
        net.opt_c.step()

    for c in (net.critics.sign, net.critics.patch):
        c.requires_grad_(False)
    try:
        bundle = styled_generator_losses(net, batch, fw)
        bundle.check_finite()
        if bundle.active:
            net.opt_g.zero_grad(set_to_none=True)
            bundle.total.backward()
            net.opt_g.step()
    finally:
        for c in (net.critics.sign, net.critics.patch):
            c.requires_grad_(True)
    bundle.monitor.update(critic_sign=float(c_sign.detach()), critic_patch=float(c_patch.detach()),
                          gp_sign=float(pen_sign.detach()), gp_patch=float(pen_patch.detach()))
    with torch.no_grad():
        acc = (net.critics.classifier(fw["v"]).argmax(1) == batch.labels).float().mean()
    bundle.monitor["aux_acc"] = float(acc)
    net.steps += 1
    net.stage_steps += 1
    advance_fade(net)
    return bundle


def synthesize_patch(net: StyledNet, inpainted_patch: Patch, icon: SignIcon,
                     rng: np.random.Generator) -> tuple[Patch, BBox]:
    """Generate a sign for ``icon`` consistent with the background and blend it in the center.

    Only pixels inside the centered 64x64 sign square can change; the
    background is copied bit-exactly everywhere else.
    """
    if net.gen.level < len(RESOLUTIONS) - 1:
        raise StageError(f"synthesis needs the 64x64 stage (active {net.gen.resolution})")
    if net.steps == 0:
        warnings.warn("synthesizing with an untrained network", UntrainedWarning, stacklevel=2)
    rgb, alpha, rect = icon_canvas64(icon)
    square = centered_rect(SIGN_SIZE, SIGN_SIZE)
    icon_on_bg = blend(inpainted_patch.pixels, rgb, alpha, square)
    v = encode_descriptor(net.enc, icon_on_bg, inpainted_patch.pixels)
    sign = generate_sign(net.gen, v, SIGN_SIZE, int(rng.integers(2 ** 31)))
    canvas = np.zeros_like(inpainted_patch.pixels)
    canvas[square.slices()] = sign
    out = blend(inpainted_patch.pixels, canvas, alpha, square)
    return inpainted_patch.replace(out), rect


def styled_processor(inpaint_net, net: StyledNet):
    """Patch processor for frame-level replacement: inpaint the real sign, then synthesize."""
    from .inpaint import inpaint

    def process(patch: Patch, icon: SignIcon, rng: np.random.Generator):
        background = inpaint(inpaint_net, patch) if patch.removal_mask is not None else patch
        return synthesize_patch(net, background, icon, rng)

    return process
