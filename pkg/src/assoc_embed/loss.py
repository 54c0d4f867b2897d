"""Detection and grouping losses with hand-derived gradients.

Tag maps are 1D: one scalar tag per pixel per joint. Pose tags are a
``(k, h, w)`` stack, instance tags a single ``(h, w)`` grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionMismatchError, ParameterError
from .grid import as_grid, as_stack

POSE_GROUPING_WEIGHT = 1e-3
INSTANCE_GROUPING_WEIGHT = 1e-4


@dataclass(frozen=True)
class LossParams:
    sigma: float = 1.0
    grouping_weight: float = POSE_GROUPING_WEIGHT
    sample_count: int = 16

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if self.sample_count < 2:
            raise ParameterError(f"sample_count must be >= 2, got {self.sample_count}")

    @classmethod
    def for_instances(cls, sigma: float = 1.0, sample_count: int = 16) -> "LossParams":
        return cls(sigma=sigma, grouping_weight=INSTANCE_GROUPING_WEIGHT, sample_count=sample_count)


@dataclass(frozen=True)
class PoseGroundTruth:
    """Joint annotations for N people with K joint slots each.

    ``locations`` is an ``(n, k, 2)`` integer array of ``(x, y)`` pixels and
    ``visible`` an ``(n, k)`` boolean array. Locations of invisible joints
    are ignored.
    """

    locations: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=np.int64)
        vis = np.asarray(self.visible, dtype=bool)
        if loc.ndim != 3 or loc.shape[2] != 2:
            raise ParameterError(f"locations must have shape (n, k, 2), got {loc.shape}")
        if vis.shape != loc.shape[:2]:
            raise ParameterError(f"visible shape {vis.shape} does not match locations {loc.shape}")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "visible", vis)

    @classmethod
    def from_persons(cls, persons: Sequence[Sequence[tuple[int, int, bool]]], n_joints: int | None = None):
        """Build from nested ``[(x, y, visible), ...]`` lists, one list per person."""
        if not persons:
            return cls(np.zeros((0, n_joints or 0, 2), np.int64), np.zeros((0, n_joints or 0), bool))
        arr = np.asarray(persons, dtype=np.int64)
        return cls(arr[..., :2], arr[..., 2].astype(bool))

    @property
    def n_people(self) -> int:
        return self.locations.shape[0]

    @property
    def n_joints(self) -> int:
        return self.locations.shape[1]

    def check_bounds(self, width: int, height: int) -> None:
        xs = self.locations[..., 0][self.visible]
        ys = self.locations[..., 1][self.visible]
        if xs.size and (xs.min() < 0 or ys.min() < 0 or xs.max() >= width or ys.max() >= height):
            raise ParameterError(f"visible joint outside {width}x{height} grid")


@dataclass(frozen=True)
class InstanceSamples:
    """Per-instance sampled pixel locations, each an ``(m, 2)`` array of ``(x, y)``."""

    sets: list = field(default_factory=list)

    def __post_init__(self):
        sets = [np.asarray(s, dtype=np.int64).reshape(-1, 2) for s in self.sets]
        seen = set()
        for pts in sets:
            for x, y in pts.tolist():
                if (x, y) in seen:
                    raise ParameterError(f"pixel ({x}, {y}) sampled more than once")
                seen.add((x, y))
        object.__setattr__(self, "sets", sets)


@dataclass(frozen=True)
class SparseGradient:
    """Gradient entries at the few pixels a grouping loss reads; zero elsewhere."""

    joint: np.ndarray
    x: np.ndarray
    y: np.ndarray
    value: np.ndarray

    def __len__(self) -> int:
        return len(self.value)

    def to_dense(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=np.float64)
        if len(shape) == 2:
            np.add.at(out, (self.y, self.x), self.value)
        else:
            np.add.at(out, (self.joint, self.y, self.x), self.value)
        return out


def detection_loss(pred, gt, mask=None) -> float:
    """Mean squared error over all unmasked pixels of all joints."""
    p = as_stack(pred, "pred")
    g = as_stack(gt, "gt")
    if p.shape != g.shape:
        raise DimensionMismatchError(f"pred {p.shape} and gt {g.shape} differ")
    sq = (p - g) ** 2
    if mask is None:
        return float(sq.mean())
    m = as_grid(mask, "mask")
    if m.shape != p.shape[1:]:
        raise DimensionMismatchError(f"mask {m.shape} does not match grids {p.shape[1:]}")
    keep = m != 0
    count = keep.sum() * p.shape[0]
    if count == 0:
        raise DegenerateInputError("every pixel is masked out")
    return float(sq[:, keep].sum() / count)


def _pose_tag_values(tags, gt: PoseGroundTruth):
    t = as_stack(tags, "tags")
    if t.shape[0] != gt.n_joints:
        raise DimensionMismatchError(f"{t.shape[0]} tag maps for {gt.n_joints} joints")
    gt.check_bounds(t.shape[2], t.shape[1])
    counts = gt.visible.sum(axis=1)
    if np.any(counts == 0):
        raise DegenerateInputError(f"person {int(np.argmin(counts))} has no visible joints")
    k_idx = np.broadcast_to(np.arange(gt.n_joints), gt.visible.shape)
    xs = np.where(gt.visible, gt.locations[..., 0], 0)
    ys = np.where(gt.visible, gt.locations[..., 1], 0)
    vals = np.where(gt.visible, t[k_idx, ys, xs], 0.0)
    return vals, counts, t.shape


def reference_embeddings(tags, gt: PoseGroundTruth) -> np.ndarray:
    """Mean tag over each person's visible joints."""
    vals, counts, _ = _pose_tag_values(tags, gt)
    return vals.sum(axis=1) / counts


def _push_matrix(refs: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    diff = refs[:, None] - refs[None, :]
    kern = np.exp(-(diff**2) / (2.0 * sigma**2))
    np.fill_diagonal(kern, 0.0)
    return diff, kern


def pose_grouping_loss(tags, gt: PoseGroundTruth, params: LossParams = LossParams()) -> float:
    n = gt.n_people
    if n == 0:
        return 0.0
    vals, counts, _ = _pose_tag_values(tags, gt)
    refs = vals.sum(axis=1) / counts
    pull = np.sum(np.where(gt.visible, (refs[:, None] - vals) ** 2, 0.0)) / n
    _, kern = _push_matrix(refs, params.sigma)
    return float(pull + kern.sum() / n**2)


def pose_grouping_grad(tags, gt: PoseGroundTruth, params: LossParams = LossParams()) -> SparseGradient:
    """Analytic gradient of :func:`pose_grouping_loss` at every visible joint pixel.

    Joints of different people that share a pixel read the same tag, so
    their contributions are summed into one entry.
    """
    n = gt.n_people
    if n == 0:
        empty = np.zeros(0, np.int64)
        return SparseGradient(empty, empty, empty, np.zeros(0))
    vals, counts, (_, h, w) = _pose_tag_values(tags, gt)
    refs = vals.sum(axis=1) / counts
    # d/dh of sum_k (ref - h_k)^2 is 2 (h_j - ref); the ref terms cancel since deviations sum to 0
    g_pull = 2.0 * (vals - refs[:, None]) / n
    diff, kern = _push_matrix(refs, params.sigma)
    g_ref = -2.0 * np.sum(diff * kern, axis=1) / (params.sigma**2 * n**2)
    g = np.where(gt.visible, g_pull + (g_ref / counts)[:, None], 0.0)

    person, joint = np.nonzero(gt.visible)
    xs = gt.locations[person, joint, 0]
    ys = gt.locations[person, joint, 1]
    flat = (joint * h + ys) * w + xs
    keys, inverse = np.unique(flat, return_inverse=True)
    value = np.zeros(len(keys))
    np.add.at(value, inverse, g[person, joint])
    return SparseGradient(keys // (h * w), keys % w, (keys // w) % h, value)


def _instance_values(tag, samples: InstanceSamples) -> list[np.ndarray]:
    t = as_grid(tag, "tag")
    h, w = t.shape
    out = []
    for pts in samples.sets:
        if pts.size and (pts.min() < 0 or pts[:, 0].max() >= w or pts[:, 1].max() >= h):
            raise ParameterError(f"sample outside {w}x{h} grid")
        out.append(t[pts[:, 1], pts[:, 0]])
    return out


def instance_grouping_loss(tag, samples: InstanceSamples, params: LossParams = LossParams()) -> float:
    """Pairwise pull within each sampled instance plus pairwise push across instances.

    Both double sums run over ordered pairs, so every unordered pair counts twice.
    """
    vals = _instance_values(tag, samples)
    if not vals:
        return 0.0
    pull = sum(float(np.sum((v[:, None] - v[None, :]) ** 2)) for v in vals)
    allv = np.concatenate(vals)
    owner = np.repeat(np.arange(len(vals)), [len(v) for v in vals])
    cross = owner[:, None] != owner[None, :]
    diff = allv[:, None] - allv[None, :]
    push = float(np.sum(np.exp(-(diff**2) / (2.0 * params.sigma**2))[cross]))
    return pull + push


def instance_grouping_grad(tag, samples: InstanceSamples, params: LossParams = LossParams()) -> SparseGradient:
    vals = _instance_values(tag, samples)
    if not vals:
        empty = np.zeros(0, np.int64)
        return SparseGradient(empty, empty, empty, np.zeros(0))
    allv = np.concatenate(vals)
    sizes = [len(v) for v in vals]
    owner = np.repeat(np.arange(len(vals)), sizes)
    same = owner[:, None] == owner[None, :]
    diff = allv[:, None] - allv[None, :]
    g_pull = 4.0 * np.sum(np.where(same, diff, 0.0), axis=1)
    kern = np.where(same, 0.0, np.exp(-(diff**2) / (2.0 * params.sigma**2)))
    g_push = -2.0 * np.sum(kern * diff, axis=1) / params.sigma**2
    pts = np.concatenate(samples.sets)
    return SparseGradient(np.zeros(len(pts), np.int64), pts[:, 0], pts[:, 1], g_pull + g_push)


def combined_loss(det_pred, det_gt, tags, gt: PoseGroundTruth, params: LossParams = LossParams(), mask=None) -> float:
    """Detection MSE plus the weighted pose grouping loss."""
    return detection_loss(det_pred, det_gt, mask) + params.grouping_weight * pose_grouping_loss(tags, gt, params)


def finite_difference_check(
    loss_eval: Callable[[np.ndarray], float],
    grad_eval: Callable[[np.ndarray], np.ndarray],
    point,
    eps: float = 1e-4,
) -> float:
    """Largest relative error between ``grad_eval`` and central differences of ``loss_eval``."""
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    x0 = np.array(point, dtype=np.float64).ravel()
    analytic = np.asarray(grad_eval(x0.copy()), dtype=np.float64).ravel()
    if analytic.shape != x0.shape:
        raise DimensionMismatchError(f"gradient shape {analytic.shape} != point shape {x0.shape}")
    numeric = np.empty_like(x0)
    x = x0.copy()
    for i in range(x0.size):
        x[i] = x0[i] + eps
        plus = loss_eval(x)
        x[i] = x0[i] - eps
        minus = loss_eval(x)
        x[i] = x0[i]
        numeric[i] = (plus - minus) / (2.0 * eps)
    if x0.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_pose_gradient(tags, gt: PoseGroundTruth, params: LossParams = LossParams(), eps: float = 1e-4) -> float:
    """Finite-difference check of the pose gradient over every tag the loss reads."""
    base = as_stack(tags, "tags")
    coords = pose_grouping_grad(base, gt, params)
    index = (coords.joint, coords.y, coords.x)

    def at(values):
        t = base.copy()
        t[index] = values
        return t

    return finite_difference_check(
        lambda v: pose_grouping_loss(at(v), gt, params),
        lambda v: pose_grouping_grad(at(v), gt, params).value,
        base[index],
        eps,
    )


def check_instance_gradient(tag, samples: InstanceSamples, params: LossParams = LossParams(), eps: float = 1e-4) -> float:
    base = as_grid(tag, "tag")
    coords = instance_grouping_grad(base, samples, params)
    index = (coords.y, coords.x)

    def at(values):
        t = base.copy()
        t[index] = values
        return t

    return finite_difference_check(
        lambda v: instance_grouping_loss(at(v), samples, params),
        lambda v: instance_grouping_grad(at(v), samples, params).value,
        base[index],
        eps,
    )
