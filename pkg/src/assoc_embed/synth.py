"""Random ground-truth scenes and their rendered detection/tag grids.

Everything here is a pure function of a config and a seed. Pose scenes are
people whose joints scatter within a fixed radius of a body centre; instance
scenes are painted ellipses and rectangles where later shapes occlude
earlier ones.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, GenerationError, ParameterError
from .loss import InstanceSamples, PoseGroundTruth

_GENERATE_STREAM = 0
_RENDER_STREAM = 1


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    n_min: int = 1
    n_max: int = 4
    k_joints: int = 17
    keypoint_sigma_px: float = 1.0
    tag_gap: float = 1.0
    tag_noise_std: float = 0.0
    det_noise_std: float = 0.0
    visibility_rate: float = 1.0
    person_radius: float = 8.0
    # Chebyshev distance between same-type joints of different people
    min_joint_separation: int = 2
    shape_min: int = 4
    shape_max: int = 12
    min_instance_area: int = 40
    blur_sigma: float = 0.0
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ParameterError("scene must be at least 1x1")
        if not 0 <= self.n_min <= self.n_max:
            raise ParameterError(f"empty count range [{self.n_min}, {self.n_max}]")
        if self.k_joints < 1:
            raise ParameterError("k_joints must be >= 1")
        if self.tag_gap < 0:
            raise ParameterError("tag_gap must be >= 0")
        if not 0 < self.visibility_rate <= 1:
            raise ParameterError("visibility_rate must lie in (0, 1]")
        if not self.keypoint_sigma_px > 0:
            raise ParameterError("keypoint_sigma_px must be positive")
        if self.tag_noise_std < 0 or self.det_noise_std < 0:
            raise ParameterError("noise std must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, stream])


def sample_tags(rng: np.random.Generator, n: int, gap: float) -> np.ndarray:
    """``n`` tag values in random order whose sorted spacing is at least ``gap``."""
    steps = gap * (1.0 + 0.5 * rng.random(n))
    values = np.cumsum(steps) - steps[0] + rng.uniform(-1.0, 1.0)
    return values[rng.permutation(n)]


@dataclass(frozen=True)
class PoseScene:
    gt: PoseGroundTruth
    tags: np.ndarray
    width: int
    height: int

    def to_dict(self) -> dict:
        people = []
        for n in range(self.gt.n_people):
            joints = [
                {"x": int(x), "y": int(y), "visible": bool(v)}
                for (x, y), v in zip(self.gt.locations[n].tolist(), self.gt.visible[n].tolist())
            ]
            people.append({"joints": joints, "tag": float(self.tags[n])})
        return {"w": self.width, "h": self.height, "k": self.gt.n_joints, "people": people}

    @classmethod
    def from_dict(cls, data: dict) -> "PoseScene":
        try:
            people = data["people"]
            k = data.get("k", len(people[0]["joints"]) if people else 0)
            persons = [[(j["x"], j["y"], j["visible"]) for j in p["joints"]] for p in people]
            gt = PoseGroundTruth.from_persons(persons, n_joints=k)
            return cls(gt, np.array([p["tag"] for p in people], dtype=np.float64), int(data["w"]), int(data["h"]))
        except (KeyError, TypeError, IndexError) as exc:
            raise ParameterError(f"malformed pose scene: {exc}") from exc


def generate_pose_scene(cfg: SceneConfig) -> PoseScene:
    rng = _rng(cfg.seed, _GENERATE_STREAM)
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    k = cfg.k_joints
    w, h = cfg.width, cfg.height
    locations = np.zeros((n, k, 2), dtype=np.int64)
    margin_x = min(cfg.person_radius, (w - 1) / 2)
    margin_y = min(cfg.person_radius, (h - 1) / 2)
    for p in range(n):
        for _ in range(cfg.max_retries):
            cx = rng.uniform(margin_x, w - 1 - margin_x)
            cy = rng.uniform(margin_y, h - 1 - margin_y)
            r = cfg.person_radius * np.sqrt(rng.random(k))
            theta = rng.uniform(0, 2 * np.pi, k)
            xs = np.clip(np.rint(cx + r * np.cos(theta)), 0, w - 1)
            ys = np.clip(np.rint(cy + r * np.sin(theta)), 0, h - 1)
            cand = np.stack([xs, ys], axis=-1).astype(np.int64)
            if p == 0:
                break
            cheb = np.abs(locations[:p] - cand[None]).max(axis=-1)
            if cheb.min() >= cfg.min_joint_separation:
                break
        else:
            raise GenerationError(f"could not place person {p} of {n} on a {w}x{h} grid")
        locations[p] = cand
    visible = rng.random((n, k)) < cfg.visibility_rate
    for p in range(n):
        if not visible[p].any():
            visible[p, rng.integers(k)] = True
    tags = sample_tags(rng, n, cfg.tag_gap)
    return PoseScene(PoseGroundTruth(locations, visible), tags, w, h)


def render_pose_scene(scene: PoseScene, cfg: SceneConfig, seed: int | None = None):
    """Render ``(det, tag)`` stacks of shape ``(k, h, w)``.

    Detection maps max-compose a Gaussian at every visible joint. Each tag
    map carries the tag of the person whose joint is nearest, within three
    keypoint sigmas; elsewhere it is zero. Both get i.i.d. Gaussian noise
    per the config, drawn from ``seed`` (defaults to ``cfg.seed``).
    """
    rng = _rng(cfg.seed if seed is None else seed, _RENDER_STREAM)
    gt = scene.gt
    k, w, h = gt.n_joints, scene.width, scene.height
    det = np.zeros((k, h, w))
    tag = np.zeros((k, h, w))
    ys = np.arange(h, dtype=np.float64)[None, :, None]
    xs = np.arange(w, dtype=np.float64)[None, None, :]
    radius = 3.0 * cfg.keypoint_sigma_px
    for j in range(k):
        who = np.nonzero(gt.visible[:, j])[0]
        if who.size == 0:
            continue
        jx = gt.locations[who, j, 0].astype(np.float64)[:, None, None]
        jy = gt.locations[who, j, 1].astype(np.float64)[:, None, None]
        d2 = (xs - jx) ** 2 + (ys - jy) ** 2
        det[j] = np.exp(-d2 / (2.0 * cfg.keypoint_sigma_px**2)).max(axis=0)
        nearest = d2.argmin(axis=0)
        inside = d2.min(axis=0) <= radius**2
        tag[j] = np.where(inside, scene.tags[who][nearest], 0.0)
    if cfg.tag_noise_std > 0:
        tag = tag + rng.normal(0.0, cfg.tag_noise_std, tag.shape)
    if cfg.det_noise_std > 0:
        det = det + rng.normal(0.0, cfg.det_noise_std, det.shape)
    return det, tag


def encode_rle(mask) -> dict:
    """Column-major run lengths starting with a (possibly empty) background run."""
    m = np.asarray(mask, dtype=bool)
    flat = m.ravel(order="F")
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": [int(m.shape[0]), int(m.shape[1])], "counts": [int(c) for c in counts]}


def decode_rle(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if counts.sum() != h * w:
        raise ParameterError(f"RLE covers {counts.sum()} pixels, mask has {h * w}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


@dataclass(frozen=True)
class InstanceScene:
    masks: np.ndarray  # (n, h, w) bool, pairwise disjoint
    tags: np.ndarray
    width: int
    height: int

    @property
    def labels(self) -> np.ndarray:
        out = np.full((self.height, self.width), -1, dtype=np.int64)
        for i, m in enumerate(self.masks):
            out[m] = i
        return out

    def to_dict(self) -> dict:
        return {
            "w": self.width,
            "h": self.height,
            "instances": [
                {"mask_rle": encode_rle(m), "tag": float(t)} for m, t in zip(self.masks, self.tags)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InstanceScene":
        try:
            w, h = int(data["w"]), int(data["h"])
            inst = data["instances"]
            masks = np.array([decode_rle(i["mask_rle"]) for i in inst], dtype=bool).reshape(len(inst), h, w)
            return cls(masks, np.array([i["tag"] for i in inst], dtype=np.float64), w, h)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParameterError(f"malformed instance scene: {exc}") from exc


def _paint_shape(rng, labels, index, cfg):
    h, w = labels.shape
    a, b = rng.uniform(cfg.shape_min, cfg.shape_max, 2)
    cx, cy = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
    ys, xs = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        inside = ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0
    else:
        inside = (np.abs(xs - cx) <= a) & (np.abs(ys - cy) <= b)
    labels[inside] = index


def generate_instance_scene(cfg: SceneConfig) -> InstanceScene:
    rng = _rng(cfg.seed, _GENERATE_STREAM)
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    w, h = cfg.width, cfg.height
    for _ in range(cfg.max_retries):
        labels = np.full((h, w), -1, dtype=np.int64)
        for i in range(n):
            _paint_shape(rng, labels, i, cfg)
        masks = labels[None] == np.arange(n)[:, None, None]
        if n == 0 or masks.sum(axis=(1, 2)).min() >= cfg.min_instance_area:
            break
    else:
        raise GenerationError(f"could not fit {n} instances of area >= {cfg.min_instance_area} in {w}x{h}")
    tags = sample_tags(rng, n, cfg.tag_gap)
    return InstanceScene(masks, tags, w, h)


def render_instance_scene(scene: InstanceScene, cfg: SceneConfig, seed: int | None = None):
    """Render ``(det, tag)`` grids: det is 1 on any instance (optionally blurred)."""
    rng = _rng(cfg.seed if seed is None else seed, _RENDER_STREAM)
    h, w = scene.height, scene.width
    fg = scene.masks.any(axis=0) if len(scene.masks) else np.zeros((h, w), bool)
    det = fg.astype(np.float64)
    if cfg.blur_sigma > 0:
        det = ndimage.gaussian_filter(det, cfg.blur_sigma, mode="constant")
    tag = np.zeros((h, w))
    for m, t in zip(scene.masks, scene.tags):
        tag[m] = t
    if cfg.tag_noise_std > 0:
        tag = tag + rng.normal(0.0, cfg.tag_noise_std, tag.shape)
    if cfg.det_noise_std > 0:
        det = det + rng.normal(0.0, cfg.det_noise_std, det.shape)
    return det, tag


def sample_instance_pixels(masks, sample_count: int, seed: int) -> InstanceSamples:
    """Draw ``sample_count`` distinct pixels uniformly from each mask."""
    rng = np.random.default_rng(seed)
    sets = []
    for i, m in enumerate(np.asarray(masks, dtype=bool)):
        ys, xs = np.nonzero(m)
        if ys.size < sample_count:
            raise DegenerateInputError(f"instance {i} has {ys.size} pixels, need {sample_count}")
        pick = rng.choice(ys.size, size=sample_count, replace=False)
        sets.append(np.stack([xs[pick], ys[pick]], axis=1))
    return InstanceSamples(sets)
