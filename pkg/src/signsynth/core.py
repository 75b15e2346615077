"""Data model and pixel primitives shared by every pipeline.

Images live in the floating [0, 1] domain as ``H x W x C`` float32 arrays;
8-bit conversion happens only in :func:`read_image` / :func:`write_image`.
"""

from __future__ import annotations

import enum
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

NUM_CLASSES = 205
PATCH_SIZE = 128
MAX_REMOVAL_SIDE = 64
MIN_ICON_SIDE = 8


class GeometryError(ValueError):
    pass


class OutOfFrameError(GeometryError):
    pass


class TaxonomyError(ValueError):
    def __init__(self, message: str, class_id: int | None = None):
        super().__init__(message)
        self.class_id = class_id


class ShapeError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class Provenance(str, enum.Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box, ``(x, y)`` is the top-left corner."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"degenerate box {self}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def check_inside(self, width: int, height: int) -> None:
        if not self.inside(width, height):
            raise OutOfFrameError(f"{self} not inside {width}x{height} frame")

    def intersection(self, other: BBox) -> int:
        iw = min(self.x2, other.x2) - max(self.x, other.x)
        ih = min(self.y2, other.y2) - max(self.y, other.y)
        return max(iw, 0) * max(ih, 0)

    def iou(self, other: BBox) -> float:
        inter = self.intersection(other)
        return inter / float(self.area + other.area - inter)

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y2), slice(self.x, self.x2)


def centered_rect(w: int, h: int, size: int = PATCH_SIZE) -> BBox:
    """Rectangle of ``w x h`` centered in a ``size x size`` canvas."""
    return BBox(size // 2 - w // 2, size // 2 - h // 2, w, h)


@dataclass
class SignIcon:
    class_id: int
    pixels: np.ndarray  # H x W x 4, RGB + alpha

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 4:
            raise ShapeError(f"icon must be HxWx4, got {px.shape}")
        if min(px.shape[:2]) < MIN_ICON_SIDE:
            raise ShapeError(f"icon sides must be >= {MIN_ICON_SIDE}, got {px.shape[:2]}")
        if not np.all((px >= 0.0) & (px <= 1.0)):
            raise ValueError("icon values must lie in [0, 1]")
        if not 0 <= self.class_id < NUM_CLASSES:
            raise TaxonomyError(f"class id {self.class_id} outside taxonomy", self.class_id)
        self.pixels = px

    @property
    def source_resolution(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @property
    def rgb(self) -> np.ndarray:
        return self.pixels[..., :3]

    @property
    def alpha(self) -> np.ndarray:
        return self.pixels[..., 3]


@dataclass(frozen=True)
class Annotation:
    frame_id: str
    bbox: BBox
    class_id: int
    provenance: Provenance = Provenance.REAL


@dataclass(frozen=True)
class ClassTaxonomy:
    total: int
    train_present: frozenset[int]
    rare: frozenset[int]

    def __post_init__(self):
        every = set(range(self.total))
        if self.train_present & self.rare:
            raise TaxonomyError("train_present and rare overlap")
        if set(self.train_present) | set(self.rare) != every:
            missing = sorted(every - set(self.train_present) - set(self.rare))
            extra = sorted((set(self.train_present) | set(self.rare)) - every)
            raise TaxonomyError(f"taxonomy does not partition ids: missing={missing[:5]} extra={extra[:5]}")

    @classmethod
    def split(cls, total: int = NUM_CLASSES, rare: Iterable[int] | None = None, n_rare: int = 99) -> ClassTaxonomy:
        """Partition ``range(total)``; by default the last ``n_rare`` ids are rare."""
        rare_ids = frozenset(rare) if rare is not None else frozenset(range(total - n_rare, total))
        return cls(total, frozenset(range(total)) - rare_ids, rare_ids)

    def __contains__(self, class_id: int) -> bool:
        return 0 <= class_id < self.total

    def check(self, class_id: int) -> None:
        if class_id not in self:
            raise TaxonomyError(f"unknown class id {class_id}", class_id)

    def is_rare(self, class_id: int) -> bool:
        return class_id in self.rare


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    image_path: str
    width: int
    height: int
    annotations: tuple[Annotation, ...] = ()

    def __post_init__(self):
        for ann in self.annotations:
            if ann.frame_id != self.frame_id:
                raise ManifestError(f"annotation for {ann.frame_id} attached to frame {self.frame_id}")


@dataclass
class DatasetManifest:
    frames: list[FrameRecord]
    split: str = "train"

    def __post_init__(self):
        seen: set[str] = set()
        for fr in self.frames:
            if fr.frame_id in seen:
                raise ManifestError(f"duplicate frame id {fr.frame_id!r}")
            seen.add(fr.frame_id)
            for ann in fr.annotations:
                if not ann.bbox.inside(fr.width, fr.height):
                    raise ManifestError(f"{ann.bbox} outside frame {fr.frame_id} ({fr.width}x{fr.height})")

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[FrameRecord]:
        return iter(self.frames)

    def annotations(self) -> Iterator[Annotation]:
        for fr in self.frames:
            yield from fr.annotations

    @property
    def sign_count(self) -> int:
        return sum(len(fr.annotations) for fr in self.frames)

    def by_id(self) -> dict[str, FrameRecord]:
        return {fr.frame_id: fr for fr in self.frames}

    # Text format: "# split: <name>" header, then one frame per line:
    #   frame_id path width height [x y w h class_id provenance]*
    def to_text(self) -> str:
        lines = [f"# split: {self.split}"]
        for fr in self.frames:
            parts = [fr.frame_id, fr.image_path, str(fr.width), str(fr.height)]
            for a in fr.annotations:
                b = a.bbox
                parts += [str(b.x), str(b.y), str(b.w), str(b.h), str(a.class_id), a.provenance.value]
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> DatasetManifest:
        split = "train"
        frames = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                if key.strip() == "split":
                    split = value.strip()
                continue
            parts = line.split()
            if len(parts) < 4 or (len(parts) - 4) % 6:
                raise ManifestError(f"line {lineno}: malformed record")
            fid, path, width, height = parts[0], parts[1], int(parts[2]), int(parts[3])
            anns = []
            for i in range(4, len(parts), 6):
                x, y, w, h, cid = (int(v) for v in parts[i:i + 5])
                anns.append(Annotation(fid, BBox(x, y, w, h), cid, Provenance(parts[i + 5])))
            frames.append(FrameRecord(fid, path, width, height, tuple(anns)))
        return cls(frames, split)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PatchOrigin:
    frame_id: str
    window: BBox
    sign_box: BBox | None = None


@dataclass
class Patch:
    pixels: np.ndarray  # 128 x 128 x 3
    removal_mask: np.ndarray | None = None  # 128 x 128 bool
    origin: PatchOrigin | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"patch must be HxWx3, got {self.pixels.shape}")
        if self.removal_mask is not None:
            self.removal_mask = np.asarray(self.removal_mask, dtype=bool)
            if self.removal_mask.shape != self.pixels.shape[:2]:
                raise ShapeError("removal mask shape does not match patch")
            check_centered_mask(self.removal_mask)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def replace(self, pixels: np.ndarray) -> Patch:
        return Patch(pixels, self.removal_mask, self.origin)


def rect_mask(rect: BBox, size: int = PATCH_SIZE) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    m[rect.slices()] = True
    return m


def mask_rect(mask: np.ndarray) -> BBox | None:
    """Bounding rectangle of a boolean mask, ``None`` when empty."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return BBox(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def check_centered_mask(mask: np.ndarray, max_side: int = MAX_REMOVAL_SIDE) -> None:
    rect = mask_rect(mask)
    if rect is None:
        return
    size = mask.shape[0]
    if rect.area != int(mask.sum()):
        raise ShapeError("removal mask is not a single rectangle")
    if rect.w > max_side or rect.h > max_side:
        raise ShapeError(f"removal rect {rect.w}x{rect.h} exceeds {max_side}")
    if rect != centered_rect(rect.w, rect.h, size):
        raise ShapeError(f"removal rect {rect} is not centered")


# --------------------------------------------------------------------------
# image helpers


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """``H x W x C`` array -> ``1 x C x H x W`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)


def to_numpy(t: torch.Tensor) -> np.ndarray:
    """``1 x C x H x W`` (or ``C x H x W``) tensor -> ``H x W x C`` float32 array."""
    if t.dim() == 4:
        t = t[0]
    return t.detach().permute(1, 2, 0).contiguous().cpu().numpy().astype(np.float32)


def resize(img: np.ndarray, height: int, width: int, mode: str = "bilinear") -> np.ndarray:
    """Resize an ``H x W x C`` array; bilinear with antialiasing, or ``area``."""
    if img.shape[:2] == (height, width):
        return np.array(img, dtype=np.float32, copy=True)
    t = to_tensor(img)
    if mode == "area":
        out = F.interpolate(t, size=(height, width), mode="area")
    else:
        out = F.interpolate(t, size=(height, width), mode=mode, align_corners=False, antialias=(mode == "bilinear"))
    return np.clip(to_numpy(out), 0.0, 1.0)


def fit_size(h: int, w: int, max_side: int) -> tuple[int, int]:
    """Aspect-preserving size whose longer side equals ``max_side``."""
    scale = max_side / float(max(h, w))
    nh, nw = int(round(h * scale)), int(round(w * scale))
    if nh < 1 or nw < 1:
        raise GeometryError(f"icon {h}x{w} degenerates at max side {max_side}")
    return nh, nw


def place_icon(icon: SignIcon, rect: BBox, size: int = PATCH_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Render ``icon`` into ``rect`` of a ``size x size`` canvas.

    The icon is resized aspect-preserving to fit the rect and centered in it.
    Returns ``(rgb, alpha)`` canvases; alpha is zero outside the icon footprint.
    """
    if rect.w <= 0 or rect.h <= 0:
        raise GeometryError(f"degenerate target rect {rect}")
    ih, iw = icon.source_resolution
    scale = min(rect.w / iw, rect.h / ih)
    nh, nw = max(1, int(round(ih * scale))), max(1, int(round(iw * scale)))
    nh, nw = min(nh, rect.h), min(nw, rect.w)
    small = resize(icon.pixels, nh, nw)
    y0 = rect.y + (rect.h - nh) // 2
    x0 = rect.x + (rect.w - nw) // 2
    rgb = np.zeros((size, size, 3), dtype=np.float32)
    alpha = np.zeros((size, size), dtype=np.float32)
    rgb[y0:y0 + nh, x0:x0 + nw] = small[..., :3]
    alpha[y0:y0 + nh, x0:x0 + nw] = small[..., 3]
    return rgb, alpha


def blend(background: np.ndarray, rgb: np.ndarray, alpha: np.ndarray, rect: BBox) -> np.ndarray:
    out = np.array(background, dtype=np.float32, copy=True)
    ys, xs = rect.slices()
    a = alpha[ys, xs, None]
    out[ys, xs] = a * rgb[ys, xs] + (1.0 - a) * background[ys, xs]
    return out


# --------------------------------------------------------------------------
# operations


def composite(icon: SignIcon, background: Patch, target_rect: BBox) -> Patch:
    """Alpha-blend ``icon`` into ``target_rect``; pixels outside the rect are untouched."""
    size = background.size
    if not target_rect.inside(size, size):
        raise GeometryError(f"{target_rect} outside {size}x{size} patch")
    rgb, alpha = place_icon(icon, target_rect, size)
    return background.replace(blend(background.pixels, rgb, alpha, target_rect))


def restore_outside_mask(original: Patch, generated: Patch, mask: np.ndarray) -> Patch:
    """Take ``generated`` where ``mask`` is set and ``original`` everywhere else."""
    mask = np.asarray(mask, dtype=bool)
    if original.pixels.shape != generated.pixels.shape or mask.shape != original.pixels.shape[:2]:
        raise ShapeError(
            f"shape mismatch: {original.pixels.shape} vs {generated.pixels.shape} vs mask {mask.shape}")
    return original.replace(np.where(mask[..., None], generated.pixels, original.pixels))


def crop_window(frame_w: int, frame_h: int, center_box: BBox, side: int, edge_policy: str = "shift") -> BBox:
    """Square window of ``side`` centered on ``center_box``, shifted minimally into the frame."""
    if frame_w < side or frame_h < side:
        raise OutOfFrameError(f"frame {frame_w}x{frame_h} smaller than window {side}")
    cx = center_box.x + center_box.w // 2
    cy = center_box.y + center_box.h // 2
    x, y = cx - side // 2, cy - side // 2
    if edge_policy == "shift":
        x = min(max(x, 0), frame_w - side)
        y = min(max(y, 0), frame_h - side)
    elif edge_policy == "reject":
        if x < 0 or y < 0 or x + side > frame_w or y + side > frame_h:
            raise OutOfFrameError(f"window at ({x},{y}) exceeds frame {frame_w}x{frame_h}")
    else:
        raise ValueError(f"unknown edge policy {edge_policy!r}")
    return BBox(x, y, side, side)


def crop_patch(frame: np.ndarray, center_box: BBox, frame_id: str = "", patch_size: int = PATCH_SIZE,
               edge_policy: str = "shift", with_mask: bool = True) -> Patch:
    """Cut a native-resolution patch centered on ``center_box``.

    When ``with_mask`` is set the patch carries a centered removal mask the
    size of the box, capped at 64 per side.  A window that had to be shifted
    no longer centers the box, so no mask is attached in that case.
    """
    fh, fw = frame.shape[:2]
    window = crop_window(fw, fh, center_box, patch_size, edge_policy)
    pixels = np.array(frame[window.slices()], dtype=np.float32, copy=True)
    mask = None
    centered = crop_window(fw, fh, center_box, patch_size, "shift") == _unshifted(center_box, patch_size)
    if with_mask and centered:
        mw = min(center_box.w, MAX_REMOVAL_SIDE)
        mh = min(center_box.h, MAX_REMOVAL_SIDE)
        mask = rect_mask(centered_rect(mw, mh, patch_size), patch_size)
    return Patch(pixels, mask, PatchOrigin(frame_id, window, center_box))


def _unshifted(center_box: BBox, side: int) -> BBox:
    cx = center_box.x + center_box.w // 2
    cy = center_box.y + center_box.h // 2
    return BBox(cx - side // 2, cy - side // 2, side, side)


def paste_patch(frame: np.ndarray, patch: Patch, mask: np.ndarray | None = None) -> np.ndarray:
    """Write a native-resolution patch back at its origin window (optionally only under ``mask``)."""
    if patch.origin is None:
        raise ValueError("patch has no origin")
    out = np.array(frame, dtype=np.float32, copy=True)
    ys, xs = patch.origin.window.slices()
    if mask is None:
        out[ys, xs] = patch.pixels
    else:
        out[ys, xs] = np.where(mask[..., None], patch.pixels, out[ys, xs])
    return out


@dataclass
class ValidationReport:
    train_counts: dict[int, int]
    test_counts: dict[int, int]
    violations: list[int] = field(default_factory=list)
    taxonomy: ClassTaxonomy | None = None

    @property
    def passed(self) -> bool:
        return not self.violations

    def group_totals(self, counts: dict[int, int]) -> tuple[int, int, int]:
        """``(all, rare, frequent)`` totals of a per-class count table."""
        rare = sum(n for c, n in counts.items() if self.taxonomy and c in self.taxonomy.rare)
        total = sum(counts.values())
        return total, rare, total - rare

    def summary(self) -> str:
        lines = [f"{'':10s} {'All':>8s} {'Rare':>8s} {'Frequent':>8s}"]
        for name, counts in (("Train", self.train_counts), ("Test", self.test_counts)):
            a, r, f = self.group_totals(counts)
            lines.append(f"{name:10s} {a:8d} {r:8d} {f:8d}")
        present = sum(1 for c in self.train_counts if self.train_counts[c] > 0)
        lines.append(f"classes with train instances: {present}")
        lines.append("PASS" if self.passed else f"FAIL rare classes with train data: {self.violations}")
        return "\n".join(lines)


def dataset_statistics(manifest: DatasetManifest) -> tuple[int, int]:
    """``(images, signs)`` of a detection manifest."""
    return len(manifest), manifest.sign_count


def _count_classes(manifest: DatasetManifest, taxonomy: ClassTaxonomy) -> dict[int, int]:
    counts = Counter()
    for ann in manifest.annotations():
        taxonomy.check(ann.class_id)
        counts[ann.class_id] += 1
    return {c: counts.get(c, 0) for c in range(taxonomy.total)}


def validate_taxonomy(manifest_train: DatasetManifest, manifest_test: DatasetManifest,
                      taxonomy: ClassTaxonomy) -> ValidationReport:
    """Per-class train/test counts; a rare class seen in training is a violation."""
    train = _count_classes(manifest_train, taxonomy)
    test = _count_classes(manifest_test, taxonomy)
    violations = sorted(c for c in taxonomy.rare if train[c] > 0)
    return ValidationReport(train, test, violations, taxonomy)


# --------------------------------------------------------------------------
# file I/O


def read_image(path: str | Path, mode: str = "RGB") -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert(mode), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def write_image(path: str | Path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    mode = "RGBA" if arr.ndim == 3 and arr.shape[2] == 4 else "RGB"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode).save(path)


def icon_filename(class_id: int) -> str:
    return f"{class_id:03d}.png"


def load_icons(directory: str | Path) -> dict[int, SignIcon]:
    icons = {}
    for path in sorted(Path(directory).glob("*.png")):
        if path.stem.isdigit():
            cid = int(path.stem)
            icons[cid] = SignIcon(cid, read_image(path, "RGBA"))
    return icons


def save_icons(icons: Iterable[SignIcon], directory: str | Path) -> None:
    for icon in icons:
        write_image(Path(directory) / icon_filename(icon.class_id), icon.pixels)


def frame_size(path: str | Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def stack_patches(patches: Sequence[Patch]) -> torch.Tensor:
    return torch.from_numpy(np.stack([p.pixels for p in patches])).permute(0, 3, 1, 2).contiguous()
