"""Where new signs go: a KDE baseline and a semantic-map conditioned VAE-GAN.

Affine parameters follow a normalized-grid convention: ``tx, ty`` in
``[-1, 1]`` place the box center, ``sx, sy`` are the box size as a fraction of
the frame.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter
from scipy.stats import gaussian_kde

from .config import Config
from .core import BBox, DatasetManifest, FrameRecord, GeometryError, OutOfFrameError
from .inpaint import UntrainedWarning
from .losses import LossBundle, NonFiniteLossError, gan_loss_ce, kl_gaussian, l1_loss

NUM_LABELS = 19  # urban-scene segmentation palette, labels 0..18
POLE_LABEL = 5
_EDGE_TOL = 1e-9


class SemanticMapError(ValueError):
    pass


@dataclass
class SemanticMap:
    frame_id: str
    labels: np.ndarray  # H x W uint8

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise SemanticMapError(f"semantic map for {self.frame_id} must be single-channel, got {labels.shape}")
        bad = labels >= NUM_LABELS
        if bad.any() or (labels < 0).any():
            found = sorted(set(np.unique(labels[bad | (labels < 0)]).tolist()))
            raise SemanticMapError(f"semantic map for {self.frame_id} has labels {found} outside 0..{NUM_LABELS - 1}")
        self.labels = labels.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def check_frame(self, width: int, height: int, downscale: int = 1) -> None:
        h, w = self.shape
        if (w * downscale, h * downscale) != (width, height):
            raise SemanticMapError(f"map {w}x{h} (x{downscale}) does not match frame {width}x{height}")


@dataclass
class MapStore:
    maps: dict[str, SemanticMap]
    missing: list[str]

    def __getitem__(self, frame_id: str) -> SemanticMap:
        return self.maps[frame_id]

    def __contains__(self, frame_id: str) -> bool:
        return frame_id in self.maps


def ingest_semantic_maps(directory: str | Path, frame_ids: Iterable[str] | None = None) -> MapStore:
    """Load ``<frame_id>.png`` label rasters; frames without a raster are reported in ``missing``."""
    directory = Path(directory)
    available = {p.stem: p for p in sorted(directory.glob("*.png"))}
    wanted = list(frame_ids) if frame_ids is not None else list(available)
    maps, missing = {}, []
    for fid in wanted:
        path = available.get(fid)
        if path is None:
            missing.append(fid)
            continue
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise SemanticMapError(f"{path} is not a single-channel raster (mode {im.mode})")
            maps[fid] = SemanticMap(fid, np.array(im))
    return MapStore(maps, missing)


def save_semantic_map(smap: SemanticMap, directory: str | Path) -> Path:
    path = Path(directory) / f"{smap.frame_id}.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(smap.labels, mode="L").save(path)
    return path


# --------------------------------------------------------------------------
# affine geometry


@dataclass(frozen=True)
class AffineParams:
    sx: float
    sy: float
    tx: float
    ty: float

    def __post_init__(self):
        if not (self.sx > 0 and self.sy > 0):
            raise GeometryError(f"scales must be positive, got {self.sx}, {self.sy}")
        if not all(math.isfinite(v) for v in (self.sx, self.sy, self.tx, self.ty)):
            raise GeometryError("affine parameters must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.sx, self.sy, self.tx, self.ty], dtype=np.float32)


def affine_to_bbox(p: AffineParams, frame_dims: tuple[int, int]) -> BBox:
    """Box centered at ``((tx+1)/2 W, (ty+1)/2 H)`` with size ``(sx W, sy H)``."""
    width, height = frame_dims
    cx, cy = (p.tx + 1.0) / 2.0 * width, (p.ty + 1.0) / 2.0 * height
    w, h = p.sx * width, p.sy * height
    x0, y0 = cx - w / 2.0, cy - h / 2.0
    if x0 < -_EDGE_TOL or y0 < -_EDGE_TOL or x0 + w > width + _EDGE_TOL or y0 + h > height + _EDGE_TOL:
        raise OutOfFrameError(f"box ({x0:.2f}, {y0:.2f}, {w:.2f}, {h:.2f}) leaves {width}x{height} frame")
    wi, hi = max(1, int(round(w))), max(1, int(round(h)))
    xi = min(max(int(round(x0)), 0), width - wi)
    yi = min(max(int(round(y0)), 0), height - hi)
    return BBox(xi, yi, wi, hi)


def bbox_to_affine(box: BBox, frame_dims: tuple[int, int]) -> AffineParams:
    width, height = frame_dims
    cx, cy = box.x + box.w / 2.0, box.y + box.h / 2.0
    return AffineParams(box.w / width, box.h / height, 2.0 * cx / width - 1.0, 2.0 * cy / height - 1.0)


def _overlaps(box: BBox, others: Iterable[BBox]) -> bool:
    return any(box.iou(o) > 0.0 for o in others)


class BoxList(list):
    """Sampled boxes plus how many were requested (fewer means the rejection budget ran out)."""

    def __init__(self, boxes: Iterable[BBox] = (), requested: int = 0):
        super().__init__(boxes)
        self.requested = requested

    @property
    def shortfall(self) -> int:
        return self.requested - len(self)


# --------------------------------------------------------------------------
# KDE baseline


class Density:
    """Gaussian KDE with Scott's rule; degenerate data falls back to resampling the points."""

    def __init__(self, data: np.ndarray, bw_method: str | float = "scott"):
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if data.shape[1] == 0:
            raise ValueError("density needs at least one sample")
        self.data = data
        self.kde = None
        if data.shape[1] > data.shape[0] and not (isinstance(bw_method, (int, float)) and bw_method == 0):
            try:
                self.kde = gaussian_kde(data, bw_method=bw_method)
            except np.linalg.LinAlgError:
                self.kde = None

    @property
    def bandwidth(self) -> float:
        return float(self.kde.factor) if self.kde is not None else 0.0

    @property
    def mean(self) -> np.ndarray:
        return self.data.mean(axis=1)

    def resample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``d x n`` draws."""
        if self.kde is None:
            return self.data[:, rng.integers(0, self.data.shape[1], size=n)]
        return self.kde.resample(n, seed=rng)


@dataclass
class KDEModel:
    centers: Density  # normalized (cx / W, cy / H)
    sizes: Density  # pixels (w, h)
    counts: Density  # signs per frame
    max_count: int = 10
    budget: int = 100

    def draw_count(self, rng: np.random.Generator) -> int:
        return int(np.clip(np.rint(self.counts.resample(1, rng)[0, 0]), 0, self.max_count))

    def draw_box(self, frame_dims: tuple[int, int], rng: np.random.Generator) -> BBox | None:
        width, height = frame_dims
        cx, cy = self.centers.resample(1, rng)[:, 0]
        w, h = np.rint(self.sizes.resample(1, rng)[:, 0]).astype(int)
        if w < 1 or h < 1:
            return None
        x, y = int(round(cx * width - w / 2.0)), int(round(cy * height - h / 2.0))
        box = BBox(x, y, int(w), int(h))
        return box if box.inside(width, height) else None


def fit_kde(frames: DatasetManifest | Sequence[FrameRecord], bandwidth: str | float = "scott",
            max_count: int = 10, budget: int = 100) -> KDEModel:
    """Fit center, size and per-frame count densities on labeled frames."""
    records = list(frames.frames) if isinstance(frames, DatasetManifest) else list(frames)
    centers, sizes, counts = [], [], []
    for rec in records:
        counts.append(len(rec.annotations))
        for ann in rec.annotations:
            cx, cy = ann.bbox.center
            centers.append((cx / rec.width, cy / rec.height))
            sizes.append((ann.bbox.w, ann.bbox.h))
    if not centers:
        raise ValueError("cannot fit placement densities without annotations")
    return KDEModel(Density(np.array(centers).T, bandwidth), Density(np.array(sizes).T, bandwidth),
                    Density(np.array(counts, dtype=np.float64)[None], bandwidth), max_count, budget)


def sample_kde(model: KDEModel, frame_dims: tuple[int, int], rng: np.random.Generator,
               existing: Sequence[BBox] = (), count: int | None = None) -> BoxList:
    """Draw a count, then boxes by rejection until inside the frame and disjoint from all others."""
    n = model.draw_count(rng) if count is None else int(count)
    out = BoxList(requested=n)
    taken = list(existing)
    for _ in range(n):
        for _ in range(model.budget):
            box = model.draw_box(frame_dims, rng)
            if box is not None and not _overlaps(box, taken):
                out.append(box)
                taken.append(box)
                break
    return out


def placement_heatmap(centers: Iterable[tuple[float, float]], size: tuple[int, int] = (256, 144),
                      sigma: float = 4.0) -> np.ndarray:
    """Gaussian splats at normalized ``(cx, cy)`` centers, peak scaled to 1. For visualization only."""
    width, height = size
    grid = np.zeros((height, width), np.float64)
    for cx, cy in centers:
        if 0.0 <= cx < 1.0 and 0.0 <= cy < 1.0:
            grid[int(cy * height), int(cx * width)] += 1.0
    grid = gaussian_filter(grid, sigma, mode="constant")
    peak = grid.max()
    return (grid / peak if peak > 0 else grid).astype(np.float32)


# --------------------------------------------------------------------------
# where module


def one_hot_maps(labels: torch.Tensor | np.ndarray, size: int) -> torch.Tensor:
    """B x H x W labels -> B x NUM_LABELS x size x size (nearest downscale)."""
    t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if t.dim() == 2:
        t = t[None]
    t = F.interpolate(t[:, None].float(), size=(size, size), mode="nearest")[:, 0].long()
    return F.one_hot(t, NUM_LABELS).permute(0, 3, 1, 2).float()


def _coords(b: int, size: int) -> torch.Tensor:
    lin = torch.linspace(-1.0, 1.0, size)
    yy, xx = torch.meshgrid(lin, lin, indexing="ij")
    return torch.stack([xx, yy])[None].expand(b, 2, size, size)


class MapEncoder(nn.Module):
    """CoordConv stack: one-hot map (+ coordinate channels) -> flat feature vector."""

    def __init__(self, in_channels: int = NUM_LABELS, size: int = 32, ch: int = 16, out: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels + 2, ch, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(ch, ch * 2, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(ch * 2, ch * 2, 3, 2, 1), nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(ch * 2 * (size // 8) ** 2, out)

    def forward(self, x):
        h = self.net(torch.cat([x, _coords(x.shape[0], x.shape[-1])], 1))
        return F.leaky_relu(self.fc(h.flatten(1)), 0.2)


class AffineGenerator(nn.Module):
    """(map, z) -> (sx, sy, tx, ty); translations are bounded so the box always fits the frame."""

    def __init__(self, size: int = 32, z_dim: int = 8, max_scale: float = 0.5, hidden: int = 128):
        super().__init__()
        self.z_dim, self.max_scale = z_dim, max_scale
        self.enc = MapEncoder(NUM_LABELS, size, out=hidden)
        self.head = nn.Sequential(nn.Linear(hidden + z_dim, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, 4))

    def forward(self, maps: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        raw = self.head(torch.cat([self.enc(maps), z], 1))
        scale = torch.sigmoid(raw[:, :2]) * self.max_scale
        trans = torch.tanh(raw[:, 2:]) * (1.0 - scale)
        return torch.cat([scale, trans], 1)


class AffineEncoder(nn.Module):
    """(map, real affine) -> (mu, log_var); starts at the prior (zero last layer)."""

    def __init__(self, size: int = 32, z_dim: int = 8, hidden: int = 128):
        super().__init__()
        self.enc = MapEncoder(NUM_LABELS, size, out=hidden)
        self.mlp = nn.Sequential(nn.Linear(hidden + 4, hidden), nn.LeakyReLU(0.2))
        self.out = nn.Linear(hidden, 2 * z_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, maps, affine):
        mu, log_var = self.out(self.mlp(torch.cat([self.enc(maps), affine], 1))).chunk(2, dim=1)
        return mu, log_var


class PairCritic(nn.Module):
    """D1: is this affine a real one for this map?"""

    def __init__(self, size: int = 32, hidden: int = 128):
        super().__init__()
        self.enc = MapEncoder(NUM_LABELS, size, out=hidden)
        self.mlp = nn.Sequential(nn.Linear(hidden + 4, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, 1))

    def forward(self, maps, affine):
        return self.mlp(torch.cat([self.enc(maps), affine], 1)).squeeze(1)


class LayoutCritic(nn.Module):
    """D2: is the box raster consistent with the map?"""

    def __init__(self, size: int = 32, hidden: int = 128):
        super().__init__()
        self.enc = MapEncoder(NUM_LABELS + 1, size, out=hidden)
        self.fc = nn.Linear(hidden, 1)

    def forward(self, maps, raster):
        return self.fc(self.enc(torch.cat([maps, raster], 1))).squeeze(1)


class Reconstructor(nn.Module):
    """Recover the map (at 8x8) and the noise vector from map features and generated affine."""

    def __init__(self, size: int = 32, z_dim: int = 8, hidden: int = 128, small: int = 8):
        super().__init__()
        self.small = small
        self.enc = MapEncoder(NUM_LABELS, size, out=hidden)
        self.mlp = nn.Sequential(nn.Linear(hidden + 4, hidden), nn.LeakyReLU(0.2),
                                 nn.Linear(hidden, z_dim + NUM_LABELS * small * small))
        self.z_dim = z_dim

    def forward(self, maps, affine):
        out = self.mlp(torch.cat([self.enc(maps), affine], 1))
        z = out[:, :self.z_dim]
        m = torch.sigmoid(out[:, self.z_dim:]).view(-1, NUM_LABELS, self.small, self.small)
        return m, z


def box_raster(affine: torch.Tensor, size: int, sharpness: float | None = None) -> torch.Tensor:
    """Soft, differentiable B x 1 x size x size indicator of the affine box."""
    tau = sharpness if sharpness is not None else 1.0 / size
    lin = torch.linspace(-1.0, 1.0, size)
    sx, sy, tx, ty = (affine[:, i].view(-1, 1) for i in range(4))
    rx = torch.sigmoid((lin - (tx - sx)) / tau) * torch.sigmoid(((tx + sx) - lin) / tau)
    ry = torch.sigmoid((lin - (ty - sy)) / tau) * torch.sigmoid(((ty + sy) - lin) / tau)
    return (ry[:, :, None] * rx[:, None, :])[:, None]


@dataclass
class WhereModule:
    gen: nn.Module
    enc: nn.Module
    d1: nn.Module
    d2: nn.Module
    recon: nn.Module
    weights: dict[str, float]
    map_size: int = 32
    z_dim: int = 8
    opt_g: torch.optim.Optimizer | None = None
    opt_d: torch.optim.Optimizer | None = None
    steps: int = 0
    config: Config = field(default_factory=Config)

    @classmethod
    def build(cls, cfg: Config | None = None, seed: int | None = None) -> WhereModule:
        cfg = cfg or Config()
        torch.manual_seed(cfg["seed"] if seed is None else seed)
        size, z_dim = cfg["placement.map_size"], cfg["placement.z_dim"]
        if size % 8:
            raise ValueError("placement.map_size must be a multiple of 8")
        gen = AffineGenerator(size, z_dim, cfg["placement.max_scale"])
        enc, d1 = AffineEncoder(size, z_dim), PairCritic(size)
        d2, recon = LayoutCritic(size), Reconstructor(size, z_dim)
        weights = {k: cfg[f"loss.{k}"] for k in ("adversarial", "recon", "kl", "affine")}
        lr = cfg["placement.lr"]
        betas = (cfg["optim.beta1"], cfg["optim.beta2"])
        opt_g = torch.optim.Adam([*gen.parameters(), *enc.parameters(), *recon.parameters()], lr=lr, betas=betas)
        opt_d = torch.optim.Adam([*d1.parameters(), *d2.parameters()], lr=lr, betas=betas)
        return cls(gen, enc, d1, d2, recon, weights, size, z_dim, opt_g, opt_d, 0, cfg)

    def modules(self) -> dict[str, nn.Module]:
        return {"gen": self.gen, "enc": self.enc, "d1": self.d1, "d2": self.d2, "recon": self.recon}

    def onehot(self, labels) -> torch.Tensor:
        return one_hot_maps(labels, self.map_size)


def where_generate(wm: WhereModule, smap: SemanticMap, z: np.ndarray | torch.Tensor) -> AffineParams:
    if wm.steps == 0:
        warnings.warn("placing with an untrained where module", UntrainedWarning, stacklevel=2)
    wm.gen.eval()
    with torch.no_grad():
        out = wm.gen(wm.onehot(smap.labels), torch.as_tensor(np.asarray(z), dtype=torch.float32).reshape(1, -1))
    sx, sy, tx, ty = (float(v) for v in out[0])
    return AffineParams(sx, sy, tx, ty)


def where_batch_generate(wm: WhereModule, smap: SemanticMap, zs: np.ndarray) -> np.ndarray:
    """N x 4 affine params for N noise vectors on one map."""
    wm.gen.eval()
    with torch.no_grad():
        maps = wm.onehot(smap.labels).expand(len(zs), -1, -1, -1)
        return wm.gen(maps, torch.as_tensor(zs, dtype=torch.float32)).numpy()


def diversity(params: np.ndarray) -> float:
    """Spread of generated translations: ``sqrt(var tx + var ty)``."""
    params = np.asarray(params)
    return float(np.sqrt(params[:, 2].var() + params[:, 3].var()))


def collapse_check(wm: WhereModule, smap: SemanticMap, rng: np.random.Generator, n: int = 1000,
                   eps: float | None = None) -> tuple[float, bool]:
    """Diversity of ``n`` noise draws on one map and whether it clears ``placement.diversity_eps``."""
    eps = wm.config["placement.diversity_eps"] if eps is None else eps
    value = diversity(where_batch_generate(wm, smap, rng.standard_normal((n, wm.z_dim))))
    return value, value > eps


def sample_where(wm: WhereModule, smap: SemanticMap, frame_dims: tuple[int, int], rng: np.random.Generator,
                 count: int, existing: Sequence[BBox] = (), budget: int = 100) -> BoxList:
    out = BoxList(requested=count)
    taken = list(existing)
    for _ in range(count):
        for _ in range(budget):
            p = where_generate(wm, smap, rng.standard_normal(wm.z_dim))
            try:
                box = affine_to_bbox(p, frame_dims)
            except GeometryError:
                continue
            if not _overlaps(box, taken):
                out.append(box)
                taken.append(box)
                break
    return out


@dataclass
class WhereBatch:
    maps: torch.Tensor  # B x L x S x S one-hot
    affine: torch.Tensor | None  # B x 4 real params (supervised path) or None


def make_where_batch(wm: WhereModule, maps: Sequence[SemanticMap],
                     boxes: Sequence[BBox] | None = None,
                     frame_dims: Sequence[tuple[int, int]] | None = None) -> WhereBatch:
    onehot = wm.onehot(np.stack([m.labels for m in maps]))
    affine = None
    if boxes is not None:
        dims = frame_dims or [(m.shape[1], m.shape[0]) for m in maps]
        affine = torch.from_numpy(np.stack([bbox_to_affine(b, d).as_array() for b, d in zip(boxes, dims)]))
    return WhereBatch(onehot, affine)


def unsupervised_losses(wm: WhereModule, maps: torch.Tensor, z: torch.Tensor, fake: torch.Tensor) -> LossBundle:
    w = wm.weights
    bundle = LossBundle()
    raster = box_raster(fake, maps.shape[-1])
    bundle.add("adv_layout", gan_loss_ce(None, wm.d2(maps, raster), "generator"), w["adversarial"])
    map_hat, z_hat = wm.recon(maps, fake)
    small = F.adaptive_avg_pool2d(maps, map_hat.shape[-1])
    bundle.add("recon_map", l1_loss(map_hat, small), w["recon"])
    bundle.add("recon_z", l1_loss(z_hat, z), w["recon"])
    return bundle


def supervised_losses(wm: WhereModule, maps: torch.Tensor, real_affine: torch.Tensor,
                      eps: torch.Tensor | None = None, fake: torch.Tensor | None = None) -> LossBundle:
    """Encode the real affine, regenerate it, and score a fresh sample against D1."""
    w = wm.weights
    bundle = LossBundle()
    mu, log_var = wm.enc(maps, real_affine)
    eps = torch.randn_like(mu) if eps is None else eps
    z = mu + eps * torch.exp(0.5 * log_var)
    rec = wm.gen(maps, z)
    bundle.add("affine_rec", l1_loss(rec, real_affine), w["affine"])
    bundle.add("kl", kl_gaussian(mu, log_var), w["kl"])
    if fake is not None:
        bundle.add("adv_pair", gan_loss_ce(None, wm.d1(maps, fake), "generator"), w["adversarial"])
    return bundle


def train_step_where(wm: WhereModule, batch: WhereBatch, generator: torch.Generator | None = None) -> LossBundle:
    """Critic update (D2, plus D1 when real boxes are given) then generator/encoder/reconstructor update."""
    for m in wm.modules().values():
        m.train()
    maps = batch.maps
    z = torch.randn((maps.shape[0], wm.z_dim), generator=generator)
    fake = wm.gen(maps, z)
    size = maps.shape[-1]

    d_terms = {}
    if batch.affine is not None:
        real_raster = box_raster(batch.affine, size)
        d_terms["d2"] = gan_loss_ce(wm.d2(maps, real_raster), wm.d2(maps, box_raster(fake.detach(), size)),
                                    "discriminator")
        d_terms["d1"] = gan_loss_ce(wm.d1(maps, batch.affine), wm.d1(maps, fake.detach()), "discriminator")
    if d_terms:
        d_loss = sum(d_terms.values())
        if not torch.isfinite(d_loss):
            raise NonFiniteLossError("placement critic loss is not finite")
        if wm.weights["adversarial"] > 0:
            wm.opt_d.zero_grad(set_to_none=True)
            (wm.weights["adversarial"] * d_loss).backward()
            wm.opt_d.step()

    for d in (wm.d1, wm.d2):
        d.requires_grad_(False)
    try:
        bundle = unsupervised_losses(wm, maps, z, fake)
        if batch.affine is not None:
            sup = supervised_losses(wm, maps, batch.affine, fake=fake)
            for name, value in sup.terms.items():
                bundle.add(name, value, sup.weights[name])
        bundle.check_finite()
        if bundle.active:
            wm.opt_g.zero_grad(set_to_none=True)
            bundle.total.backward()
            wm.opt_g.step()
    finally:
        for d in (wm.d1, wm.d2):
            d.requires_grad_(True)
    for k, v in d_terms.items():
        bundle.monitor[k] = float(v.detach())
    wm.steps += 1
    return bundle
