"""Differentiable losses used by the training loops."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteLossError(FloatingPointError):
    """A loss term came out NaN or infinite; the step was aborted."""


class FeatureExtractor(nn.Module):
    """Frozen convolutional feature pyramid with selectable tap layers.

    Tap ``0`` is the input itself; tap ``i`` is the output of ``layers[i-1]``.
    """

    def __init__(self, layers: Sequence[nn.Module], taps: Sequence[int], weights: Sequence[float] | None = None):
        super().__init__()
        if not taps:
            raise ValueError("feature extractor needs at least one tap layer")
        if max(taps) > len(layers) or min(taps) < 0:
            raise ValueError(f"tap indices {list(taps)} out of range for {len(layers)} layers")
        self.layers = nn.ModuleList(layers)
        self.taps = tuple(int(t) for t in taps)
        self.weights = tuple(float(w) for w in (weights if weights is not None else [1.0] * len(taps)))
        if len(self.weights) != len(self.taps):
            raise ValueError("one weight per tap required")
        if any(w < 0 for w in self.weights):
            raise ValueError("tap weights must be non-negative")
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @classmethod
    def default(cls, seed: int = 0, taps: Sequence[int] = (1, 2, 3), weights: Sequence[float] | None = None,
                channels: Sequence[int] = (16, 32, 64)) -> FeatureExtractor:
        gen = torch.Generator().manual_seed(seed)
        layers: list[nn.Module] = []
        cin = 3
        for i, cout in enumerate(channels):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = cin * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers.append(nn.Sequential(conv, nn.ReLU()))
            cin = cout
        return cls(layers, taps, weights)

    @classmethod
    def identity(cls) -> FeatureExtractor:
        return cls([], taps=(0,))

    def train(self, mode: bool = True) -> FeatureExtractor:
        # permanently in eval mode; parameters never train
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = {0: x} if 0 in self.taps else {}
        h = x
        for i, layer in enumerate(self.layers, 1):
            if i > max(self.taps):
                break
            h = layer(h)
            if i in self.taps:
                feats[i] = h
        return [feats[t] for t in self.taps]

    def load_weights(self, path: str) -> None:
        arrays = np.load(path)
        state = {k: torch.from_numpy(arrays[k]) for k in arrays.files}
        self.load_state_dict(state)
        for p in self.parameters():
            p.requires_grad_(False)


@dataclass
class LossBundle:
    """Named scalar terms with weights; ``total`` is the weighted sum.

    ``monitor`` holds values that are reported but not part of the total
    (e.g. the discriminator side of an adversarial game).
    """

    terms: dict[str, torch.Tensor] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    monitor: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, value: torch.Tensor, weight: float = 1.0) -> None:
        if weight < 0:
            raise ValueError(f"negative weight for {name}")
        self.terms[name] = value
        self.weights[name] = float(weight)

    @property
    def total(self) -> torch.Tensor:
        out = None
        for name, value in self.terms.items():
            w = self.weights.get(name, 1.0)
            if w == 0.0:
                continue
            out = w * value if out is None else out + w * value
        if out is None:
            ref = next(iter(self.terms.values()), torch.zeros(()))
            return torch.zeros((), dtype=ref.dtype)
        return out

    @property
    def active(self) -> bool:
        return any(w > 0 for w in self.weights.values())

    def check_finite(self) -> None:
        for name, value in self.terms.items():
            if not torch.isfinite(value).all():
                raise NonFiniteLossError(f"loss term {name!r} is not finite")

    def floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out.update(self.monitor)
        return out

    def __getitem__(self, name: str) -> float:
        if name in self.terms:
            return float(self.terms[name].detach())
        return self.monitor[name]


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return (a - b).abs().mean()


def masked_l1(a: torch.Tensor, b: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over the region selected by ``weight`` (broadcast over channels)."""
    _same_shape(a, b)
    weight = weight.expand_as(a)
    denom = weight.sum()
    if float(denom) == 0.0:
        return (a - b).abs().sum() * 0.0
    return ((a - b).abs() * weight).sum() / denom


def gram(features: torch.Tensor) -> torch.Tensor:
    """Channel Gram matrix normalized by ``C * H * W``."""
    b, c, h, w = features.shape
    f = features.reshape(b, c, h * w)
    return f @ f.transpose(1, 2) / (c * h * w)


def perceptual_loss(fx: FeatureExtractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    out = 0.0
    for w, fa, fb in zip(fx.weights, fx(a), fx(b)):
        out = out + w * l1_loss(fa, fb)
    return out


def style_loss(fx: FeatureExtractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    out = 0.0
    for fa, fb in zip(fx(a), fx(b)):
        out = out + l1_loss(gram(fa), gram(fb))
    return out


def gan_loss_ce(logits_real: torch.Tensor | None, logits_fake: torch.Tensor, side: str) -> torch.Tensor:
    """Binary cross-entropy adversarial loss on raw logits."""
    if side == "discriminator":
        if logits_real is None:
            raise ValueError("discriminator side needs real logits")
        return (F.binary_cross_entropy_with_logits(logits_real, torch.ones_like(logits_real))
                + F.binary_cross_entropy_with_logits(logits_fake, torch.zeros_like(logits_fake)))
    if side == "generator":
        return F.binary_cross_entropy_with_logits(logits_fake, torch.ones_like(logits_fake))
    raise ValueError(f"unknown side {side!r}")


def gradient_penalty(critic: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor, fake: torch.Tensor,
                     eps: torch.Tensor) -> torch.Tensor:
    """``E[(||grad critic(x_hat)||_2 - 1)^2]`` at ``x_hat = eps*real + (1-eps)*fake``."""
    x_hat = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
    out = critic(x_hat)
    if not out.requires_grad:
        raise RuntimeError("critic output does not depend on its input; gradient unavailable")
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    norms = grad.reshape(grad.shape[0], -1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def wgan_gp(critic: Callable[[torch.Tensor], torch.Tensor], real_batch: torch.Tensor, fake_batch: torch.Tensor,
            gp_weight: float = 10.0, eps: torch.Tensor | None = None,
            generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return ``(critic_loss, generator_loss, penalty)``.

    ``critic_loss`` uses the detached fake batch and includes the weighted
    penalty; ``generator_loss`` keeps the graph to the fake batch.  The
    returned ``penalty`` is already multiplied by ``gp_weight``.
    """
    _same_shape(real_batch, fake_batch)
    if eps is None:
        shape = (real_batch.shape[0],) + (1,) * (real_batch.dim() - 1)
        eps = torch.rand(shape, generator=generator, dtype=real_batch.dtype)
    real_score = critic(real_batch).mean()
    fake_detached = critic(fake_batch.detach()).mean()
    if gp_weight:
        penalty = gp_weight * gradient_penalty(critic, real_batch, fake_batch.detach(), eps)
    else:
        penalty = real_score * 0.0
    critic_loss = fake_detached - real_score + penalty
    generator_loss = -critic(fake_batch).mean()
    return critic_loss, generator_loss, penalty


def kl_gaussian(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dims, averaged over the batch."""
    _same_shape(mu, log_var)
    if mu.dim() == 1:
        mu, log_var = mu.unsqueeze(0), log_var.unsqueeze(0)
    kl = 0.5 * (mu.pow(2) + log_var.exp() - 1.0 - log_var)
    return kl.sum(dim=-1).mean()
