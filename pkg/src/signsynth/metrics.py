"""Classification and detection metrics, k-NN index and rare/frequent routing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .core import BBox, ClassTaxonomy


class UndefinedMetricError(ZeroDivisionError):
    pass


class RoutingError(RuntimeError):
    pass


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def __post_init__(self):
        self.tp, self.fp, self.fn = (np.asarray(a, dtype=np.int64) for a in (self.tp, self.fp, self.fn))
        if not (self.tp.shape == self.fp.shape == self.fn.shape) or self.tp.ndim != 1 or self.tp.size < 1:
            raise ValueError("tp/fp/fn must be equal-length 1-D arrays with at least one class")
        if (self.tp < 0).any() or (self.fp < 0).any() or (self.fn < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return int(self.tp.size)

    @classmethod
    def from_predictions(cls, predictions: Sequence[int], labels: Sequence[int], num_classes: int) -> ConfusionCounts:
        pred, lab = _aligned(predictions, labels)
        if pred.size and (min(pred.min(), lab.min()) < 0 or max(pred.max(), lab.max()) >= num_classes):
            raise ValueError(f"class ids must lie in [0, {num_classes})")
        hit = pred == lab
        tp = np.bincount(lab[hit], minlength=num_classes)
        fn = np.bincount(lab[~hit], minlength=num_classes)
        fp = np.bincount(pred[~hit], minlength=num_classes)
        return cls(tp, fp, fn)


def _aligned(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    pred, lab = np.asarray(predictions, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    if pred.shape != lab.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {lab.shape} labels")
    return pred.ravel(), lab.ravel()


def _subset(c: ConfusionCounts, class_subset: Iterable[int] | None) -> np.ndarray:
    idx = np.arange(c.num_classes) if class_subset is None else np.array(sorted(set(class_subset)), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("class subset is empty")
    if idx.min() < 0 or idx.max() >= c.num_classes:
        raise ValueError("class subset outside the confusion table")
    return idx


def micro_recall(c: ConfusionCounts, class_subset: Iterable[int] | None = None) -> float:
    """Pooled ``sum TP / sum (TP + FN)`` over the subset."""
    idx = _subset(c, class_subset)
    tp, denom = c.tp[idx].sum(), (c.tp[idx] + c.fn[idx]).sum()
    if denom == 0:
        raise UndefinedMetricError("no ground-truth items in the class subset")
    return float(tp / denom)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_prf(c: ConfusionCounts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class precision, recall and F1; every 0/0 is taken as 0."""
    p = _ratio(c.tp.astype(np.float64), (c.tp + c.fp).astype(np.float64))
    r = _ratio(c.tp.astype(np.float64), (c.tp + c.fn).astype(np.float64))
    f = _ratio(2.0 * p * r, p + r)
    return p, r, f


def macro_prf(c: ConfusionCounts, class_subset: Iterable[int] | None = None) -> tuple[float, float, float]:
    """Unweighted means over the subset; sums are correctly rounded so results do not depend on order."""
    idx = _subset(c, class_subset)
    p, r, f = per_class_prf(c)
    return tuple(math.fsum(v[idx]) / idx.size for v in (p, r, f))


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    pred, lab = _aligned(predictions, labels)
    if pred.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float((pred == lab).mean())


# --------------------------------------------------------------------------
# detection


@dataclass(frozen=True)
class Detection:
    frame_id: str
    box: BBox
    score: float
    class_id: int

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")


def match_detections(detections: Sequence[Detection], ground_truth: Mapping[str, Sequence[tuple[BBox, int]]],
                     iou_threshold: float = 0.5, class_aware: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching in descending score order.

    Each detection takes the unmatched ground-truth box of highest IoU
    (same class if ``class_aware``) provided IoU >= threshold.  Returns the
    scores and a true-positive flag, both sorted by descending score.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    used = {fid: [False] * len(boxes) for fid, boxes in ground_truth.items()}
    scores = np.empty(len(order))
    hits = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        det = detections[i]
        scores[rank] = det.score
        best, best_iou = -1, -1.0
        for j, (gt, cls) in enumerate(ground_truth.get(det.frame_id, ())):
            if used[det.frame_id][j] or (class_aware and cls != det.class_id):
                continue
            iou = det.box.iou(gt)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[det.frame_id][best] = True
            hits[rank] = True
    return scores, hits


def precision_recall_curve(scores: np.ndarray, hits: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """One PR point per distinct score threshold (descending), prefixed by recall 0."""
    if n_gt <= 0:
        raise UndefinedMetricError("no ground-truth boxes")
    if len(scores) == 0:
        return np.array([0.0]), np.array([0.0])
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    last = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    recall = tp[last] / n_gt
    precision = tp[last] / (tp[last] + fp[last])
    return np.r_[0.0, recall], np.r_[precision[0], precision]


def detection_auc(detections: Sequence[Detection], ground_truth: Mapping[str, Sequence[tuple[BBox, int]]],
                  iou_threshold: float = 0.5, class_aware: bool = True) -> float:
    """Trapezoidal area under the precision-recall curve."""
    n_gt = sum(len(v) for v in ground_truth.values())
    if n_gt == 0:
        raise UndefinedMetricError("detection AUC needs at least one ground-truth box")
    scores, hits = match_detections(detections, ground_truth, iou_threshold, class_aware)
    recall, precision = precision_recall_curve(scores, hits, n_gt)
    return math.fsum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0)


# --------------------------------------------------------------------------
# k-NN index


@dataclass
class FeatureIndex:
    features: np.ndarray
    labels: np.ndarray
    k: int = 1

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.features.shape[0] == 0:
            raise ValueError("feature index is empty")
        if self.features.shape[0] != self.labels.size:
            raise ValueError("one label per feature vector required")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, classes: Iterable[int]) -> FeatureIndex:
        keep = np.isin(self.labels, list(classes))
        return FeatureIndex(self.features[keep], self.labels[keep], self.k)


def _vote(labels: np.ndarray) -> int:
    classes, counts = np.unique(labels, return_counts=True)  # classes ascending
    return int(classes[np.argmax(counts)])


def knn_classify_batch(index: FeatureIndex, features: np.ndarray) -> np.ndarray:
    """Majority label among the ``k`` nearest (Euclidean); ties go to the smallest class id."""
    q = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if q.shape[1] != index.dim:
        raise ValueError(f"feature dimension {q.shape[1]} does not match index dimension {index.dim}")
    k = min(index.k, len(index.labels))
    out = np.empty(len(q), dtype=np.int64)
    for i, x in enumerate(q):
        d = ((index.features - x) ** 2).sum(axis=1)
        nearest = np.argsort(d, kind="stable")[:k]
        out[i] = _vote(index.labels[nearest])
    return out


def knn_classify(index: FeatureIndex, feature: np.ndarray) -> int:
    return int(knn_classify_batch(index, np.asarray(feature)[None])[0])


# --------------------------------------------------------------------------
# routing


class RareGate(Protocol):
    def predict(self, features: np.ndarray) -> np.ndarray:  # truthy = rare
        ...


@dataclass
class ConstantGate:
    rare: bool

    def predict(self, features):
        return np.full(len(np.atleast_2d(features)), self.rare)


class SklearnGate:
    """Binary rare/frequent gate around a scikit-learn classifier."""

    def __init__(self, kind: str = "forest", seed: int = 0):
        if kind == "forest":
            from sklearn.ensemble import RandomForestClassifier
            self.model = RandomForestClassifier(n_estimators=100, random_state=seed)
        elif kind == "logistic":
            from sklearn.linear_model import LogisticRegression
            self.model = LogisticRegression(max_iter=1000)
        else:
            raise ValueError(f"unknown gate kind {kind!r}")

    def fit(self, features: np.ndarray, is_rare: np.ndarray) -> SklearnGate:
        is_rare = np.asarray(is_rare, dtype=bool)
        if is_rare.all() or not is_rare.any():
            self.model = ConstantGate(bool(is_rare.all()))
        else:
            self.model.fit(features, is_rare)
        return self

    def predict(self, features):
        return np.asarray(self.model.predict(np.atleast_2d(features)), dtype=bool)


def routed_classify_batch(gate: RareGate, softmax_head: Callable[[np.ndarray], np.ndarray],
                          rare_index: FeatureIndex | None, features: np.ndarray) -> np.ndarray:
    """Frequent items take the softmax argmax; items the gate marks rare go to the k-NN index."""
    features = np.atleast_2d(np.asarray(features))
    rare = np.asarray(gate.predict(features), dtype=bool)
    out = np.empty(len(features), dtype=np.int64)
    if (~rare).any():
        out[~rare] = np.argmax(softmax_head(features[~rare]), axis=1)
    if rare.any():
        if rare_index is None or len(rare_index.labels) == 0:
            raise RoutingError("gate routed an item to an empty rare-class index")
        out[rare] = knn_classify_batch(rare_index, features[rare])
    return out


def routed_classify(gate: RareGate, softmax_head, rare_index: FeatureIndex | None, feature: np.ndarray) -> int:
    return int(routed_classify_batch(gate, softmax_head, rare_index, np.asarray(feature)[None])[0])


# --------------------------------------------------------------------------
# reports and files


def classification_report(predictions: Sequence[int], labels: Sequence[int], taxonomy: ClassTaxonomy) -> dict:
    """Accuracy and micro/macro figures over all, rare and frequent classes."""
    c = ConfusionCounts.from_predictions(predictions, labels, taxonomy.total)
    lab = np.asarray(labels)
    out = {"accuracy": accuracy(predictions, labels), "n": int(lab.size)}
    groups = {"all": range(taxonomy.total), "rare": sorted(taxonomy.rare), "frequent": sorted(taxonomy.train_present)}
    for name, classes in groups.items():
        present = [k for k in classes if (c.tp[k] + c.fn[k]) > 0]
        if not present:
            continue
        out[f"{name}.micro_recall"] = micro_recall(c, present)
        p, r, f = macro_prf(c, present)
        out.update({f"{name}.precision": p, f"{name}.recall": r, f"{name}.f1": f})
    return out


def format_report(rows: Mapping[str, Mapping[str, float]]) -> str:
    """Rows of named runs, columns of metric names, as a fixed-width text table (values in percent)."""
    columns = sorted({k for r in rows.values() for k in r if k != "n"})
    width = max([12] + [len(c) for c in columns]) + 2
    name_w = max([8] + [len(n) for n in rows]) + 2
    lines = ["".ljust(name_w) + "".join(c.rjust(width) for c in columns)]
    for name, row in rows.items():
        cells = [f"{100.0 * row[c]:.2f}" if c in row else "-" for c in columns]
        lines.append(name.ljust(name_w) + "".join(x.rjust(width) for x in cells))
    return "\n".join(lines)


def read_predictions(path: str | Path) -> list[tuple[str, int, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            item, cls, score = line.split()
            out.append((item, int(cls), float(score)))
    return out


def write_predictions(path: str | Path, rows: Iterable[tuple[str, int, float]]) -> None:
    Path(path).write_text("".join(f"{i} {c} {s:.6g}\n" for i, c, s in rows))


def read_detections(path: str | Path) -> list[Detection]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            fid, x, y, w, h, score, cls = line.split()
            out.append(Detection(fid, BBox(int(x), int(y), int(w), int(h)), float(score), int(cls)))
    return out


def write_detections(path: str | Path, detections: Iterable[Detection]) -> None:
    Path(path).write_text("".join(
        f"{d.frame_id} {d.box.x} {d.box.y} {d.box.w} {d.box.h} {d.score:.6g} {d.class_id}\n" for d in detections))
