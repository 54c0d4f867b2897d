"""Multi-person pose decoding from detection heatmaps and tag maps.

Peaks are extracted per joint, then joints are visited in a fixed order
(head and torso first). Each joint's detections are matched against the
current pool of people by a weight that rewards detection score and
penalizes tag distance; unmatched detections start new people.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatchError, ParameterError
from .grid import as_stack, local_maxima, peaks_from_mask, resize_bilinear
from .matching import max_weight_matching

# nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles (COCO index order)
COCO_JOINT_ORDER = tuple(range(17))


@dataclass(frozen=True)
class DecodeConfig:
    detection_threshold: float = 0.3
    nms_window: int = 3
    tag_threshold: float = 1.0
    score_weight: float = 1.0
    joint_order: tuple[int, ...] | None = None
    max_people: int = 30

    def __post_init__(self):
        if not self.tag_threshold > 0:
            raise ParameterError(f"tag_threshold must be positive, got {self.tag_threshold}")
        if self.nms_window < 3 or self.nms_window % 2 == 0:
            raise ParameterError(f"nms_window must be odd and >= 3, got {self.nms_window}")
        if self.max_people < 0:
            raise ParameterError("max_people must be >= 0")
        if self.joint_order is not None:
            order = tuple(int(j) for j in self.joint_order)
            if sorted(order) != list(range(len(order))):
                raise ParameterError(f"joint_order {order} is not a permutation")
            object.__setattr__(self, "joint_order", order)

    def order_for(self, k: int) -> tuple[int, ...]:
        if self.joint_order is None:
            return COCO_JOINT_ORDER if k == 17 else tuple(range(k))
        if len(self.joint_order) != k:
            raise DimensionMismatchError(f"joint_order covers {len(self.joint_order)} joints, maps have {k}")
        return self.joint_order


@dataclass(frozen=True)
class Detection:
    joint: int
    x: int
    y: int
    score: float
    tag: np.ndarray = field(compare=False)


@dataclass(frozen=True)
class Slot:
    x: int
    y: int
    score: float


@dataclass
class PoseEstimate:
    """One person: a detection per joint at most, plus running tag/score means."""

    n_joints: int
    detections: list[Detection] = field(default_factory=list)
    ref_tag: np.ndarray | None = None
    person_score: float = 0.0

    def add(self, det: Detection) -> None:
        if any(d.joint == det.joint for d in self.detections):
            raise ParameterError(f"person already holds joint {det.joint}")
        self.detections.append(det)
        tags = np.array([d.tag for d in self.detections])
        self.ref_tag = tags.mean(axis=0)
        self.person_score = float(np.mean([d.score for d in self.detections]))

    @property
    def slots(self) -> list[Slot | None]:
        out: list[Slot | None] = [None] * self.n_joints
        for d in self.detections:
            out[d.joint] = Slot(d.x, d.y, d.score)
        return out

    def to_dict(self) -> dict:
        return {
            "slots": [
                None if s is None else {"joint": j, "x": s.x, "y": s.y, "score": s.score}
                for j, s in enumerate(self.slots)
            ],
            "ref_tag": [float(t) for t in self.ref_tag],
            "person_score": self.person_score,
        }


def _tag_stack(tags, k: int, shape) -> np.ndarray:
    t = np.asarray(tags, dtype=np.float64)
    if t.ndim == 3:
        t = t[..., None]
    if t.ndim != 4 or t.shape[0] != k or t.shape[1:3] != tuple(shape):
        raise DimensionMismatchError(
            f"tag maps of shape {t.shape} do not match {k} detection maps of size {tuple(shape)}"
        )
    return t


def extract_detections(det, tags, cfg: DecodeConfig = DecodeConfig()) -> list[list[Detection]]:
    """Per joint, NMS peaks above threshold with the tag vector read at each peak.

    ``tags`` is ``(k, h, w)`` for scalar tags or ``(k, h, w, m)`` for
    multi-scale tag vectors.
    """
    d = as_stack(det, "det")
    k = d.shape[0]
    t = _tag_stack(tags, k, d.shape[1:])
    keep = local_maxima(d, cfg.nms_window)
    out = []
    for j in range(k):
        peaks = peaks_from_mask(d[j], keep[j], cfg.detection_threshold)
        out.append([Detection(j, p.x, p.y, p.score, t[j, p.y, p.x].copy()) for p in peaks])
    return out


def group_detections(dets: Sequence[Sequence[Detection]], cfg: DecodeConfig = DecodeConfig()) -> list[PoseEstimate]:
    k = len(dets)
    people: list[PoseEstimate] = []
    tag_len = None
    for j in cfg.order_for(k):
        cands = list(dets[j])
        if not cands:
            continue
        if tag_len is None:
            tag_len = len(cands[0].tag)
        matched: set[int] = set()
        if people:
            cand_tags = np.array([c.tag for c in cands])
            refs = np.array([p.ref_tag for p in people])
            if cand_tags.shape[1] != tag_len or refs.shape[1] != tag_len:
                raise DimensionMismatchError("tag vectors differ in length across detections")
            dist = np.linalg.norm(cand_tags[:, None, :] - refs[None, :, :], axis=2)
            scores = np.array([c.score for c in cands])
            weights = cfg.score_weight * scores[:, None] - dist
            allowed = dist <= cfg.tag_threshold * math.sqrt(tag_len)
            for i, p in max_weight_matching(weights, allowed):
                people[p].add(cands[i])
                matched.add(i)
        for i, c in enumerate(cands):
            if i in matched or len(people) >= cfg.max_people:
                continue
            person = PoseEstimate(k)
            person.add(c)
            people.append(person)
    return people


def merge_scales(per_scale, target_w: int, target_h: int):
    """Average detection maps and stack tag maps across scales.

    ``per_scale`` is a sequence of ``(det, tags)`` pairs, each ``(k, h, w)``
    at its own resolution. Returns ``(det, tags)`` with det ``(k, H, W)``
    and tags ``(k, H, W, m)``.
    """
    per_scale = list(per_scale)
    if not per_scale:
        raise ParameterError("merge_scales needs at least one scale")
    dets, tags = [], []
    k = None
    for det, tag in per_scale:
        d, t = as_stack(det, "det"), as_stack(tag, "tags")
        if d.shape != t.shape:
            raise DimensionMismatchError(f"det {d.shape} and tags {t.shape} differ within a scale")
        if k is None:
            k = d.shape[0]
        elif d.shape[0] != k:
            raise DimensionMismatchError(f"scales disagree on joint count: {k} vs {d.shape[0]}")
        dets.append(resize_bilinear(d, target_w, target_h))
        tags.append(resize_bilinear(t, target_w, target_h))
    return np.mean(dets, axis=0), np.stack(tags, axis=-1)


def decode_pose(det, tags, cfg: DecodeConfig = DecodeConfig()) -> list[PoseEstimate]:
    return group_detections(extract_detections(det, tags, cfg), cfg)


def partition(people: Sequence[PoseEstimate]) -> list[frozenset]:
    """People as sets of ``(joint, x, y)``; convenient for order-free comparison."""
    return sorted(
        (frozenset((d.joint, d.x, d.y) for d in p.detections) for p in people),
        key=lambda s: sorted(s),
    )
