"""Desk-scale metrics: keypoint AP, grouping accuracy given true detections, instance mAP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError
from .instance_decode import LabelMap, mask_iou
from .loss import PoseGroundTruth
from .matching import max_weight_matching
from .pose_decode import DecodeConfig, Detection, PoseEstimate, group_detections


def default_distance_threshold(keypoint_sigma_px: float) -> float:
    return 0.5 * keypoint_sigma_px * 6


@dataclass
class MatchResult:
    pred_to_gt: list[int | None]
    gt_covered: list[bool]
    joint_correct: list[np.ndarray]


def match_poses(preds: Sequence[PoseEstimate], gt: PoseGroundTruth, dist_threshold_px: float) -> MatchResult:
    """Greedily match predicted people to ground-truth people, best-scoring first.

    A predicted joint is correct when it lies within ``dist_threshold_px`` of
    the same joint of the matched person. Each prediction takes the free
    ground-truth person with the most correct joints (lower index on ties);
    a prediction with no correct joint against any free person stays unmatched.
    """
    k = gt.n_joints
    pred_to_gt: list[int | None] = [None] * len(preds)
    covered = [False] * gt.n_people
    correct = [np.zeros(k, bool) for _ in preds]
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].person_score, i))
    for i in order:
        slots = preds[i].slots
        filled = np.array([s is not None for s in slots], bool)
        xy = np.array([(s.x, s.y) if s is not None else (0, 0) for s in slots], dtype=np.float64).reshape(k, 2)
        best, best_hits = None, None
        for n in range(gt.n_people):
            if covered[n]:
                continue
            dist = np.linalg.norm(xy - gt.locations[n], axis=1)
            hits = filled & gt.visible[n] & (dist <= dist_threshold_px)
            if best is None or hits.sum() > best_hits.sum():
                best, best_hits = n, hits
        if best is not None and best_hits.any():
            pred_to_gt[i] = best
            covered[best] = True
            correct[i] = best_hits
    return MatchResult(pred_to_gt, covered, correct)


def keypoint_scores(preds: Sequence[PoseEstimate], match: MatchResult):
    """Flatten predicted joints into ``(scores, correct)`` arrays for AP."""
    scores, flags = [], []
    for pred, ok in zip(preds, match.joint_correct):
        for j, s in enumerate(pred.slots):
            if s is not None:
                scores.append(s.score)
                flags.append(bool(ok[j]))
    return np.array(scores, dtype=np.float64), np.array(flags, dtype=bool)


def average_precision(scores, correct, n_ground_truth: int) -> float:
    """All-point interpolated area under the precision/recall curve."""
    if n_ground_truth <= 0:
        raise DegenerateInputError("average precision needs at least one ground-truth item")
    scores = np.asarray(scores, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(correct[order])
    precision = tp / np.arange(1, len(order) + 1)
    recall = tp / n_ground_truth
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    recall_steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(recall_steps * envelope))


def pose_ap(scenes: Sequence[tuple[Sequence[PoseEstimate], PoseGroundTruth]], dist_threshold_px: float) -> float:
    """Keypoint AP pooled over ``(predictions, ground truth)`` pairs."""
    all_scores, all_flags, n_gt = [], [], 0
    for preds, gt in scenes:
        match = match_poses(preds, gt, dist_threshold_px)
        s, f = keypoint_scores(preds, match)
        all_scores.append(s)
        all_flags.append(f)
        n_gt += int(gt.visible.sum())
    return average_precision(np.concatenate(all_scores), np.concatenate(all_flags), n_gt)


def grouping_accuracy_with_gt_detections(tags, gt: PoseGroundTruth, cfg: DecodeConfig = DecodeConfig()) -> float:
    """Fraction of joints grouped with the right person when detections are perfect.

    Detections are placed at the annotated joints with score 1 and carry the
    predicted tags; predicted people are aligned to annotated people by the
    bijection maximizing shared joints. Scenes without visible joints score 1.
    """
    t = np.asarray(tags, dtype=np.float64)
    if t.ndim == 3:
        t = t[..., None]
    k = gt.n_joints
    dets: list[list[Detection]] = [[] for _ in range(k)]
    owner: dict[int, int] = {}
    for n in range(gt.n_people):
        for j in range(k):
            if gt.visible[n, j]:
                x, y = (int(v) for v in gt.locations[n, j])
                d = Detection(j, x, y, 1.0, t[j, y, x].copy())
                dets[j].append(d)
                owner[id(d)] = n
    total = len(owner)
    if total == 0:
        return 1.0
    people = group_detections(dets, cfg)
    agree = np.zeros((len(people), gt.n_people))
    for p, person in enumerate(people):
        for d in person.detections:
            agree[p, owner[id(d)]] += 1
    pairs = max_weight_matching(agree)
    return float(sum(agree[p, n] for p, n in pairs) / total)


def instance_matches(pred: LabelMap, gt_masks, iou_threshold: float):
    """Score-ranked ``(scores, correct)`` for predicted instances at one IoU threshold."""
    gt_masks = np.asarray(gt_masks, dtype=bool)
    masks = pred.masks()
    scores = list(pred.scores) or [1.0] * pred.n_instances
    order = sorted(range(pred.n_instances), key=lambda i: (-scores[i], i))
    taken = np.zeros(len(gt_masks), bool)
    flags = np.zeros(pred.n_instances, bool)
    for i in order:
        ious = np.array([mask_iou(masks[i], g) for g in gt_masks])
        ious[taken] = -1.0
        if ious.size and ious.max() >= iou_threshold:
            g = int(np.argmax(ious))
            taken[g] = True
            flags[i] = True
    return np.array(scores, dtype=np.float64), flags


def instance_map(pred: LabelMap, gt_masks, iou_thresholds: Sequence[float] = (0.5, 0.7)) -> dict[float, float]:
    gt_masks = np.asarray(gt_masks, dtype=bool)
    if len(gt_masks) == 0:
        raise DegenerateInputError("instance mAP needs at least one ground-truth instance")
    out = {}
    for thr in iou_thresholds:
        scores, flags = instance_matches(pred, gt_masks, thr)
        out[float(thr)] = average_precision(scores, flags, len(gt_masks))
    return out
