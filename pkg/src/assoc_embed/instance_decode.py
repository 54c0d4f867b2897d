"""Instance segmentation decoding from a detection map and a tag map.

Threshold the detection map, histogram the foreground tags, keep histogram
peaks as instance identifiers, and label every foreground pixel with its
closest identifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionMismatchError, ParameterError
from .grid import as_grid

BACKGROUND = -1


@dataclass(frozen=True)
class InstanceDecodeConfig:
    mask_threshold: float = 0.5
    bin_width: float = 0.1
    min_separation: float = 0.5
    min_mass: int = 10
    overlap_iou: float = 0.5

    def __post_init__(self):
        if not self.bin_width > 0:
            raise ParameterError("bin_width must be positive")
        if self.min_separation < self.bin_width:
            raise ParameterError("min_separation must be >= bin_width")


@dataclass
class LabelMap:
    """Per-pixel instance ids in ``[0, M)``; background is ``-1``."""

    labels: np.ndarray
    identifiers: list[float] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def n_instances(self) -> int:
        return len(self.identifiers)

    def masks(self) -> np.ndarray:
        return self.labels[None] == np.arange(self.n_instances)[:, None, None]

    def to_dict(self) -> dict:
        return {
            "w": self.width,
            "h": self.height,
            "identifiers": [float(v) for v in self.identifiers],
            "scores": [float(v) for v in self.scores],
        }


@dataclass(frozen=True)
class TagHistogram:
    bin_width: float
    origin: float
    counts: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return self.origin + (np.arange(len(self.counts)) + 0.5) * self.bin_width


def threshold_mask(det, t: float) -> np.ndarray:
    return as_grid(det, "det") >= t


def tag_histogram(tag, mask, bin_width: float) -> TagHistogram:
    if not bin_width > 0:
        raise ParameterError(f"bin_width must be positive, got {bin_width}")
    t = as_grid(tag, "tag")
    m = np.asarray(mask, dtype=bool)
    if m.shape != t.shape:
        raise DimensionMismatchError(f"mask {m.shape} does not match tag map {t.shape}")
    values = t[m]
    if values.size == 0:
        raise DegenerateInputError("cannot histogram an empty foreground")
    origin = float(np.floor(values.min() / bin_width) * bin_width)
    idx = np.maximum(np.floor((values - origin) / bin_width).astype(np.int64), 0)
    counts = np.bincount(idx)
    return TagHistogram(float(bin_width), origin, counts)


def extract_identifiers(hist: TagHistogram, min_separation: float, min_mass: int) -> list[float]:
    """Greedy NMS over histogram bins, heaviest first; returns sorted bin centres."""
    if min_separation < hist.bin_width:
        raise ParameterError("min_separation must be >= bin_width")
    counts = np.asarray(hist.counts)
    if counts.size == 0:
        return []
    centers = hist.centers
    order = np.lexsort((np.arange(counts.size), -counts))
    # bin centres differ by integer multiples of bin_width; absorb rounding
    slack = 1e-9 * hist.bin_width
    accepted: list[float] = []
    for i in order:
        if counts[i] < min_mass:
            break
        c = centers[i]
        if all(abs(c - a) >= min_separation - slack for a in accepted):
            accepted.append(float(c))
    return sorted(accepted)


def assign_pixels(tag, mask, identifiers: Sequence[float]) -> LabelMap:
    """Label each foreground pixel with the nearest identifier (lower index on ties).

    Identifiers that end up owning no pixel are dropped so labels stay contiguous.
    """
    t = as_grid(tag, "tag")
    m = np.asarray(mask, dtype=bool)
    if m.shape != t.shape:
        raise DimensionMismatchError(f"mask {m.shape} does not match tag map {t.shape}")
    labels = np.full(t.shape, BACKGROUND, dtype=np.int64)
    ids = np.asarray(identifiers, dtype=np.float64)
    if not m.any():
        return LabelMap(labels, [float(v) for v in ids])
    if ids.size == 0:
        raise ParameterError("foreground pixels present but no identifiers")
    nearest = np.argmin(np.abs(t[m][:, None] - ids[None, :]), axis=1)
    used = np.unique(nearest)
    remap = np.full(ids.size, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    labels[m] = remap[nearest]
    return LabelMap(labels, [float(v) for v in ids[used]])


def _score(labels: LabelMap, det: np.ndarray) -> LabelMap:
    labels.scores = [float(det[labels.labels == i].mean()) for i in range(labels.n_instances)]
    return labels


def decode_instances(det, tag, cfg: InstanceDecodeConfig = InstanceDecodeConfig()) -> LabelMap:
    """Full pipeline; each instance is scored by its mean detection value."""
    d = as_grid(det, "det")
    t = as_grid(tag, "tag")
    if d.shape != t.shape:
        raise DimensionMismatchError(f"det {d.shape} and tag {t.shape} differ")
    mask = threshold_mask(d, cfg.mask_threshold)
    if not mask.any():
        return LabelMap(np.full(d.shape, BACKGROUND, dtype=np.int64))
    hist = tag_histogram(t, mask, cfg.bin_width)
    ids = extract_identifiers(hist, cfg.min_separation, cfg.min_mass)
    if not ids:
        return LabelMap(np.full(d.shape, BACKGROUND, dtype=np.int64))
    return _score(assign_pixels(t, mask, ids), d)


def decode_instances_per_category(dets, tags, cfg: InstanceDecodeConfig = InstanceDecodeConfig()) -> list[LabelMap]:
    """One label map per category channel."""
    return [decode_instances(d, t, cfg) for d, t in zip(dets, tags, strict=True)]


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def merge_instance_scales(proposals: Sequence[LabelMap], overlap_iou: float = 0.5) -> LabelMap:
    """Greedy mask NMS across per-scale label maps of one common resolution.

    Proposals are ranked by score (earlier scale, then lower label, on ties);
    one is dropped when its IoU with an accepted proposal exceeds
    ``overlap_iou``. Accepted proposals are painted highest score first,
    never overwriting an already-labeled pixel, and relabeled in
    (scale, label) order.
    """
    proposals = list(proposals)
    if not proposals:
        raise ParameterError("merge_instance_scales needs at least one label map")
    shape = proposals[0].labels.shape
    if any(p.labels.shape != shape for p in proposals):
        raise DimensionMismatchError("label maps must share one resolution")
    cands = []
    for s, lm in enumerate(proposals):
        scores = lm.scores or [0.0] * lm.n_instances
        for i in range(lm.n_instances):
            cands.append((-scores[i], s, i, lm.labels == i, lm.identifiers[i], scores[i]))
    cands.sort(key=lambda c: c[:3])
    accepted = []
    for cand in cands:
        if all(mask_iou(cand[3], a[3]) <= overlap_iou for a in accepted):
            accepted.append(cand)
    final_order = sorted(accepted, key=lambda c: (c[1], c[2]))
    label_of = {(c[1], c[2]): n for n, c in enumerate(final_order)}
    labels = np.full(shape, BACKGROUND, dtype=np.int64)
    for c in accepted:
        free = c[3] & (labels == BACKGROUND)
        labels[free] = label_of[(c[1], c[2])]
    # a proposal can be fully covered by higher-scoring ones; drop it
    used = [n for n in range(len(final_order)) if np.any(labels == n)]
    remap = np.full(len(final_order) + 1, BACKGROUND, dtype=np.int64)
    remap[used] = np.arange(len(used))
    labels = np.where(labels == BACKGROUND, BACKGROUND, remap[labels])
    return LabelMap(
        labels,
        [final_order[n][4] for n in used],
        [final_order[n][5] for n in used],
    )
