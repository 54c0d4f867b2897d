import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from assoc_embed.errors import DegenerateInputError
from assoc_embed.eval import (
    average_precision,
    default_distance_threshold,
    grouping_accuracy_with_gt_detections,
    instance_map,
    match_poses,
    pose_ap,
)
from assoc_embed.instance_decode import LabelMap
from assoc_embed.loss import PoseGroundTruth
from assoc_embed.pose_decode import Detection, PoseEstimate
from assoc_embed.synth import SceneConfig, generate_pose_scene, render_pose_scene


def poses_from_gt(gt, jitter=None, scores=None):
    out = []
    for n in range(gt.n_people):
        p = PoseEstimate(gt.n_joints)
        for j in range(gt.n_joints):
            if gt.visible[n, j]:
                x, y = (int(v) for v in gt.locations[n, j])
                if jitter is not None:
                    x, y = x + int(jitter[n, j, 0]), y + int(jitter[n, j, 1])
                s = 1.0 if scores is None else scores[n]
                p.add(Detection(j, x, y, s, np.zeros(1)))
        out.append(p)
    return out


def scene(seed=0, **kw):
    cfg = SceneConfig(seed=seed, **kw)
    return generate_pose_scene(cfg), cfg


def test_default_threshold():
    assert default_distance_threshold(1.0) == 3.0


def test_exact_predictions_match():
    s, _ = scene(n_min=3, n_max=3, visibility_rate=0.8)
    r = match_poses(poses_from_gt(s.gt), s.gt, 2.0)
    assert r.pred_to_gt == [0, 1, 2]
    assert all(r.gt_covered)
    for n, ok in enumerate(r.joint_correct):
        assert np.array_equal(ok, s.gt.visible[n])


def test_no_predictions():
    s, _ = scene(n_min=2, n_max=2)
    r = match_poses([], s.gt, 2.0)
    assert r.pred_to_gt == [] and not any(r.gt_covered)


def test_one_pixel_jitter_within_two_pixels():
    s, _ = scene(n_min=4, n_max=4, seed=3)
    jitter = np.random.default_rng(0).integers(-1, 2, size=s.gt.locations.shape)
    r = match_poses(poses_from_gt(s.gt, jitter), s.gt, 2.0)
    assert r.pred_to_gt == [0, 1, 2, 3]
    assert all(np.array_equal(ok, s.gt.visible[n]) for n, ok in enumerate(r.joint_correct))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n_pred=st.integers(0, 7))
def test_matching_is_injective(seed, n_pred):
    rng = np.random.default_rng(seed)
    s, _ = scene(seed=seed, n_min=1, n_max=5, k_joints=5)
    preds = []
    for _ in range(n_pred):
        p = PoseEstimate(5)
        for j in range(5):
            if rng.random() < 0.7:
                p.add(Detection(j, int(rng.integers(0, 64)), int(rng.integers(0, 64)), float(rng.random()), np.zeros(1)))
        preds.append(p)
    r = match_poses(preds, s.gt, 12.0)
    used = [g for g in r.pred_to_gt if g is not None]
    assert len(used) == len(set(used))
    assert sum(r.gt_covered) == len(used)


def test_ap_examples():
    assert average_precision([0.9, 0.5, 0.1], [True, True, True], 3) == 1.0
    assert average_precision([0.9, 0.5], [False, False], 2) == 0.0
    assert average_precision([0.9, 0.8], [True, False], 2) == pytest.approx(0.5)
    assert average_precision([], [], 3) == 0.0


def test_ap_hand_curve():
    # ranks: T F T, 3 GT -> recall 1/3 @ p=1, 2/3 @ p=2/3
    assert average_precision([0.9, 0.8, 0.7], [True, False, True], 3) == pytest.approx(1 / 3 + 1 / 3 * 2 / 3)


def test_ap_needs_ground_truth():
    with pytest.raises(DegenerateInputError):
        average_precision([0.5], [True], 0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_ap_bounded_and_rescaling_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 30))
    scores = rng.random(n)
    correct = rng.random(n) < 0.5
    n_gt = int(correct.sum() + rng.integers(0, 5)) or 1
    a = average_precision(scores, correct, n_gt)
    assert 0.0 <= a <= 1.0
    assert average_precision(scores * scale, correct, n_gt) == pytest.approx(a, abs=1e-12)


def test_pose_ap_perfect():
    pairs = []
    for seed in range(5):
        s, _ = scene(seed=seed, n_min=1, n_max=4, visibility_rate=0.7)
        pairs.append((poses_from_gt(s.gt), s.gt))
    assert pose_ap(pairs, 3.0) == 1.0


def test_grouping_accuracy_noiseless_is_one():
    for seed in range(10):
        s, cfg = scene(seed=seed, n_min=2, n_max=5, visibility_rate=0.8)
        _, tag = render_pose_scene(s, cfg)
        assert grouping_accuracy_with_gt_detections(tag, s.gt) == 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), offset=st.floats(-100, 100))
def test_grouping_accuracy_single_person_any_tag_value(seed, offset):
    s, _ = scene(seed=seed, n_min=1, n_max=1)
    # any common value, with spread kept inside the decoder's tag threshold
    rng = np.random.default_rng(seed)
    tag = offset + rng.uniform(-0.2, 0.2, size=(17, 64, 64))
    assert grouping_accuracy_with_gt_detections(tag, s.gt) == 1.0


def test_grouping_accuracy_single_person_split_by_far_tags():
    gt = PoseGroundTruth.from_persons([[(0, 0, True), (1, 0, True)]])
    tag = np.zeros((2, 1, 2))
    tag[1] = 50.0
    # two fragments, only one can be paired with the single true person
    assert grouping_accuracy_with_gt_detections(tag, gt) == 0.5


def test_grouping_accuracy_invariances():
    s, cfg = scene(seed=4, n_min=4, n_max=4, tag_noise_std=0.4)
    _, tag = render_pose_scene(s, cfg)
    base = grouping_accuracy_with_gt_detections(tag, s.gt)
    assert grouping_accuracy_with_gt_detections(tag + 7.25, s.gt) == base
    perm = [2, 0, 3, 1]
    relabeled = PoseGroundTruth(s.gt.locations[perm], s.gt.visible[perm])
    assert grouping_accuracy_with_gt_detections(tag, relabeled) == base


def test_grouping_accuracy_empty_scene():
    gt = PoseGroundTruth(np.zeros((0, 3, 2), np.int64), np.zeros((0, 3), bool))
    assert grouping_accuracy_with_gt_detections(np.zeros((3, 4, 4)), gt) == 1.0


def _label_map(masks, scores=None):
    labels = np.full(masks.shape[1:], -1)
    for i, m in enumerate(masks):
        labels[m] = i
    return LabelMap(labels, [float(i) for i in range(len(masks))], list(scores or [1.0] * len(masks)))


def test_instance_map_perfect_and_empty():
    masks = np.zeros((2, 6, 6), bool)
    masks[0, :3] = True
    masks[1, 3:] = True
    assert instance_map(_label_map(masks), masks) == {0.5: 1.0, 0.7: 1.0}
    assert instance_map(_label_map(masks[:0]), masks) == {0.5: 0.0, 0.7: 0.0}


def test_instance_map_iou_boundary():
    gt = np.zeros((1, 4, 4), bool)
    gt[0, :, :2] = True
    # half of the ground-truth mask, nothing outside it: IoU exactly 0.5
    pred = np.zeros((1, 4, 4), bool)
    pred[0, :, :1] = True
    assert instance_map(_label_map(pred), gt) == {0.5: 1.0, 0.7: 0.0}


def test_instance_map_needs_ground_truth():
    with pytest.raises(DegenerateInputError):
        instance_map(_label_map(np.zeros((0, 3, 3), bool)), np.zeros((0, 3, 3), bool))
