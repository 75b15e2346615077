"""Procedural icons, road scenes and count-shaped fixtures for tests and demos.

Icons are compositional (outer shape x color x inner glyph) so a generator
trained on some combinations can be asked for unseen ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import (NUM_CLASSES, Annotation, BBox, ClassTaxonomy, DatasetManifest, FrameRecord, Provenance, SignIcon,
                   resize, save_icons, write_image)
from .placement import POLE_LABEL, SemanticMap, save_semantic_map

SHAPES = ("circle", "triangle", "square", "diamond", "octagon")
COLORS = ((0.85, 0.10, 0.10), (0.10, 0.30, 0.85), (0.95, 0.80, 0.10), (0.10, 0.60, 0.25))
N_GLYPHS = 11

# scene labels (urban 19-label convention)
ROAD, BUILDING, VEGETATION, SKY, SIGN = 0, 2, 8, 10, 7

# 8-class toy: every shape and color of the two held-out classes also occurs among the six seen ones
TOY8_DESIGNS = ((0, 0, 0), (1, 0, 0), (2, 0, 0), (1, 1, 0), (2, 1, 0), (3, 1, 0), (3, 0, 0), (0, 1, 0))
TOY8_RARE = (6, 7)


def icon_design(class_id: int) -> tuple[int, int, int]:
    """Mixed-radix (shape, color, glyph) for the full 205-class set."""
    shape = class_id % len(SHAPES)
    color = (class_id // len(SHAPES)) % len(COLORS)
    glyph = class_id // (len(SHAPES) * len(COLORS))
    return shape, color, glyph


def _shape_mask(shape: int, size: int, scale: float = 1.0, ss: int = 4) -> np.ndarray:
    """Anti-aliased coverage of a centered shape (supersampled)."""
    n = size * ss
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    y, x = np.meshgrid(c, c, indexing="ij")
    r = 0.95 * scale
    name = SHAPES[shape]
    if name == "circle":
        m = x ** 2 + y ** 2 <= r ** 2
    elif name == "triangle":
        m = (y <= r * 0.8) & (np.abs(x) <= (y + r) * 0.577)  # apex up
    elif name == "square":
        m = (np.abs(x) <= r * 0.85) & (np.abs(y) <= r * 0.85)
    elif name == "diamond":
        m = np.abs(x) + np.abs(y) <= r
    else:
        m = (np.abs(x) <= r * 0.92) & (np.abs(y) <= r * 0.92) & (np.abs(x) + np.abs(y) <= r * 1.3)
    return m.reshape(size, ss, size, ss).mean(axis=(1, 3)).astype(np.float32)


def make_icon(class_id: int, size: int = 64, design: tuple[int, int, int] | None = None) -> SignIcon:
    shape, color, glyph = design if design is not None else icon_design(class_id)
    outer = _shape_mask(shape, size)
    inner = _shape_mask(shape, size, 0.62)
    rgb = np.ones((size, size, 3), np.float32) * np.asarray(COLORS[color], np.float32)
    rgb = rgb * (1.0 - inner[..., None]) + inner[..., None]  # white core
    if glyph:
        bars = np.zeros((size, size), np.float32)
        rows = np.linspace(size * 0.38, size * 0.62, glyph)
        for row in rows:
            r0 = int(row)
            bars[r0:r0 + max(1, size // 32), int(size * 0.4):int(size * 0.6)] = 1.0
        bars *= inner
        rgb = rgb * (1.0 - bars[..., None]) + 0.1 * bars[..., None]
    return SignIcon(class_id, np.concatenate([rgb, outer[..., None]], axis=2).clip(0, 1))


def make_icons(class_ids: Sequence[int], designs: Sequence[tuple[int, int, int]] | None = None,
               size: int = 64) -> dict[int, SignIcon]:
    return {c: make_icon(c, size, designs[c] if designs is not None else None) for c in class_ids}


def degrade_sign(icon: SignIcon, w: int, h: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """How a sign looks in a road photo: resized, recolored by lighting, faded, blurred and noisy."""
    px = resize(icon.pixels, h, w)
    rgb, alpha = px[..., :3], px[..., 3]
    gain = rng.uniform(0.75, 1.05, size=3).astype(np.float32) * rng.uniform(0.8, 1.0)
    fade = rng.uniform(0.0, 0.2)
    rgb = (rgb * gain) * (1.0 - fade) + fade * np.float32(0.55)
    sigma = rng.uniform(0.3, 0.9)
    rgb = np.stack([gaussian_filter(rgb[..., k], sigma) for k in range(3)], -1)
    rgb = rgb + rng.normal(0.0, 0.02, rgb.shape).astype(np.float32)
    return rgb.clip(0, 1).astype(np.float32), gaussian_filter(alpha, 0.4).clip(0, 1).astype(np.float32)


def render_background(width: int, height: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sky, buildings, vegetation and road with a matching label raster."""
    img = np.zeros((height, width, 3), np.float32)
    labels = np.full((height, width), BUILDING, np.uint8)
    horizon = int(height * rng.uniform(0.3, 0.45))
    road = int(height * rng.uniform(0.65, 0.8))
    sky = np.asarray([0.55, 0.7, 0.9], np.float32) * rng.uniform(0.8, 1.1)
    img[:horizon] = sky * np.linspace(1.0, 0.85, horizon)[:, None, None]
    labels[:horizon] = SKY
    img[horizon:road] = rng.uniform(0.3, 0.6, size=3)
    x = 0
    while x < width:
        bw = int(rng.integers(width // 8, width // 3))
        top = int(rng.integers(max(horizon // 3, 1), horizon + 1))
        img[top:road, x:x + bw] = rng.uniform(0.25, 0.7, size=3)
        labels[top:road, x:x + bw] = BUILDING
        x += bw
    for _ in range(int(rng.integers(1, 4))):
        cx, cy = int(rng.integers(0, width)), int(rng.integers(horizon, road))
        r = int(rng.integers(6, 20))
        yy, xx = np.ogrid[:height, :width]
        blob = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        img[blob] = np.asarray([0.15, 0.45, 0.15]) * rng.uniform(0.7, 1.2)
        labels[blob] = VEGETATION
    img[road:] = 0.35 * rng.uniform(0.8, 1.2)
    labels[road:] = ROAD
    img += rng.normal(0.0, 0.02, img.shape).astype(np.float32)
    return img.clip(0, 1).astype(np.float32), labels


def _free_box(width: int, height: int, taken: list[BBox], rng: np.random.Generator, side_range=(16, 36),
              tries: int = 50) -> BBox | None:
    for _ in range(tries):
        s = int(rng.integers(side_range[0], side_range[1] + 1))
        # keep a margin so a 2x context window around the sign fits inside the frame
        x = int(rng.integers(s // 2 + 1, width - s - s // 2 - 1))
        y = int(rng.integers(s // 2 + 1, int(height * 0.6) - s))
        box = BBox(x, y, s, s)
        if all(box.iou(t) == 0 and not _near(box, t) for t in taken):
            return box
    return None


def _near(a: BBox, b: BBox) -> bool:
    return not (a.x2 + 4 <= b.x or b.x2 + 4 <= a.x or a.y2 + 4 <= b.y or b.y2 + 4 <= a.y)


@dataclass
class Scene:
    image: np.ndarray
    labels: np.ndarray
    signs: list[tuple[BBox, int]]


def make_scene(classes: Sequence[int], icons: dict[int, SignIcon], rng: np.random.Generator,
               width: int = 192, height: int = 128, side_range=(16, 36)) -> Scene:
    """Road scene with one pole-mounted, degraded sign per entry of ``classes``."""
    img, labels = render_background(width, height, rng)
    signs: list[tuple[BBox, int]] = []
    for cls in classes:
        box = _free_box(width, height, [b for b, _ in signs], rng, side_range)
        if box is None:
            continue
        px = box.x + box.w // 2 - 1
        img[box.y2:, px:px + 3] = 0.5
        labels[box.y2:, px:px + 3] = POLE_LABEL
        rgb, alpha = degrade_sign(icons[cls], box.w, box.h, rng)
        region = img[box.slices()]
        img[box.slices()] = alpha[..., None] * rgb + (1 - alpha[..., None]) * region
        labels[box.slices()][alpha > 0.5] = SIGN
        signs.append((box, cls))
    return Scene(img, labels, signs)


@dataclass
class ToyCorpus:
    root: Path
    train: DatasetManifest
    test: DatasetManifest
    taxonomy: ClassTaxonomy
    icons: dict[int, SignIcon]


def write_toy_corpus(root: str | Path, n_train: int = 60, n_test: int = 30, seed: int = 0,
                     designs: Sequence[tuple[int, int, int]] = TOY8_DESIGNS, rare: Sequence[int] = TOY8_RARE,
                     signs_per_frame: tuple[int, int] = (1, 2), width: int = 192, height: int = 128,
                     side_range: tuple[int, int] = (16, 36)) -> ToyCorpus:
    """Frames, icons, semantic maps and train/test manifests; training frames never show rare classes."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    n_classes = len(designs)
    taxonomy = ClassTaxonomy.split(n_classes, rare=rare)
    icons = make_icons(range(n_classes), designs)
    save_icons(icons.values(), root / "icons")
    (root / "taxonomy.json").write_text(json.dumps({"total": n_classes, "rare": sorted(taxonomy.rare)}))
    frequent = sorted(taxonomy.train_present)
    manifests = {}
    for split, n, pool in (("train", n_train, frequent), ("test", n_test, list(range(n_classes)))):
        frames = []
        for i in range(n):
            fid = f"{split}_{i:05d}"
            k = int(rng.integers(signs_per_frame[0], signs_per_frame[1] + 1))
            scene = make_scene([int(c) for c in rng.choice(pool, size=k)], icons, rng, width, height, side_range)
            rel = f"images/{fid}.png"
            write_image(root / rel, scene.image)
            save_semantic_map(SemanticMap(fid, scene.labels), root / "maps")
            anns = tuple(Annotation(fid, b, c, Provenance.REAL) for b, c in scene.signs)
            frames.append(FrameRecord(fid, rel, width, height, anns))
        manifests[split] = DatasetManifest(frames, split)
        manifests[split].save(root / f"{split}.txt")
    return ToyCorpus(root, manifests["train"], manifests["test"], taxonomy, icons)


# --------------------------------------------------------------------------
# count-shaped fixtures (no pixels)

DETECTION_COUNTS = {"train": (47639, 80277), "test": (11389, 25232)}
CLASSIFICATION_COUNTS = {"train": (79896, 0, 79896), "test": (25613, 1622, 23991)}
SYNTHETIC_COUNTS = {"pasted_cycled_styled": (196455, 94472, 101983), "cgi_gan": (193444, 94465, 98979)}


def _spread(total: int, classes: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Class label per item: every class at least once, the rest uniform."""
    classes = np.asarray(classes)
    if total < len(classes):
        raise ValueError("not enough items to cover every class")
    labels = np.concatenate([classes, rng.choice(classes, size=total - len(classes))])
    return rng.permutation(labels)


def count_shaped_detection(split: str, taxonomy: ClassTaxonomy, seed: int = 0, width: int = 1280,
                           height: int = 720) -> DatasetManifest:
    """Detection manifest with the full-scale image and sign counts; no pixel data."""
    n_images, n_signs = DETECTION_COUNTS[split]
    rng = np.random.default_rng(seed)
    per_frame = np.ones(n_images, dtype=np.int64)
    np.add.at(per_frame, rng.integers(0, n_images, size=n_signs - n_images), 1)
    per_frame = np.minimum(per_frame, 12)
    short = n_signs - int(per_frame.sum())
    while short > 0:  # top up frames below the cap (only if the cap removed anything)
        room = np.nonzero(per_frame < 12)[0]
        per_frame[room[:short]] += 1
        short = n_signs - int(per_frame.sum())
    pool = sorted(taxonomy.train_present) if split == "train" else list(range(taxonomy.total))
    labels = _spread(n_signs, pool, rng)
    frames, k = [], 0
    slot = (width - 20) // 12
    for i, n in enumerate(per_frame):
        fid = f"{split}_{i:06d}"
        anns = []
        for j in range(int(n)):
            s = int(rng.integers(16, min(slot - 4, 80)))
            box = BBox(10 + j * slot, int(rng.integers(0, height - s)), s, s)
            anns.append(Annotation(fid, box, int(labels[k]), Provenance.REAL))
            k += 1
        frames.append(FrameRecord(fid, f"{fid}.jpg", width, height, tuple(anns)))
    return DatasetManifest(frames, split)


def count_shaped_classification(split: str, taxonomy: ClassTaxonomy, seed: int = 0) -> DatasetManifest:
    """One 64x64 crop per frame, class counts per group as in the full-scale classification set."""
    total, n_rare, n_freq = CLASSIFICATION_COUNTS[split]
    rng = np.random.default_rng(seed)
    labels = np.concatenate([
        _spread(n_rare, sorted(taxonomy.rare), rng) if n_rare else np.zeros(0, np.int64),
        _spread(n_freq, sorted(taxonomy.train_present), rng),
    ])
    labels = rng.permutation(labels)
    frames = [FrameRecord(f"{split}_c{i:06d}", f"{split}_c{i:06d}.png", 64, 64,
                          (Annotation(f"{split}_c{i:06d}", BBox(0, 0, 64, 64), int(c), Provenance.REAL),))
              for i, c in enumerate(labels)]
    return DatasetManifest(frames, split)


# --------------------------------------------------------------------------
# placement rule fixture


@dataclass
class PoleItem:
    smap: SemanticMap
    box: BBox
    band: tuple[int, int]  # pole columns [x0, x1)


def pole_item(rng: np.random.Generator, size: int = 64, sign: int = 6) -> PoleItem:
    """Map with one vertical pole; the sign box always sits centered on the pole, upper half of the frame."""
    lab = np.full((size, size), BUILDING, np.uint8)
    lab[: size // 4] = SKY
    lab[int(size * 0.7):] = ROAD
    x0 = int(rng.integers(4, size - 8))
    lab[size // 8:, x0:x0 + 4] = POLE_LABEL
    cy = int(rng.integers(size // 4 - 2, size // 2 + 2))
    box = BBox(x0 + 2 - sign // 2, cy - sign // 2, sign, sign)
    return PoleItem(SemanticMap(f"pole_{x0}_{cy}", lab), box, (x0, x0 + 4))


def pole_fixture(n: int, seed: int = 0, size: int = 64) -> list[PoleItem]:
    rng = np.random.default_rng(seed)
    return [pole_item(rng, size) for _ in range(n)]


def default_taxonomy() -> ClassTaxonomy:
    return ClassTaxonomy.split(NUM_CLASSES)
