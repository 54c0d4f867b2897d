import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from assoc_embed.errors import DegenerateInputError, DimensionMismatchError, ParameterError
from assoc_embed.instance_decode import (
    BACKGROUND,
    InstanceDecodeConfig,
    LabelMap,
    TagHistogram,
    assign_pixels,
    decode_instances,
    decode_instances_per_category,
    extract_identifiers,
    merge_instance_scales,
    tag_histogram,
    threshold_mask,
)
from assoc_embed.synth import SceneConfig, generate_instance_scene, render_instance_scene

from helpers import same_partition_up_to_labels


def two_cluster_grid():
    tag = np.zeros((10, 22))
    tag[:, :10] = 0.0
    tag[:, 10:22] = 3.0
    return tag, np.ones_like(tag, bool)


def test_histogram_single_value():
    tag = np.zeros((10, 10))
    h = tag_histogram(tag, np.ones((10, 10), bool), 0.1)
    assert h.origin == 0.0
    assert h.counts.tolist() == [100]


def test_histogram_two_clusters():
    tag, mask = two_cluster_grid()
    h = tag_histogram(tag, mask, 0.1)
    nz = h.counts[h.counts > 0]
    assert nz.tolist() == [100, 120]
    assert h.counts.sum() == mask.sum()


def test_histogram_noisy_cluster_peak_contains_mean():
    rng = np.random.default_rng(0)
    tag = (1.0 + 0.05 * rng.normal(size=500)).reshape(20, 25)
    h = tag_histogram(tag, np.ones(tag.shape, bool), 0.1)
    lo = h.origin + np.argmax(h.counts) * h.bin_width
    # 1.0 is itself a bin edge, so either neighbouring bin may win
    assert lo - 1e-9 <= 1.0 <= lo + h.bin_width + 1e-9


def test_histogram_errors():
    with pytest.raises(DegenerateInputError):
        tag_histogram(np.zeros((3, 3)), np.zeros((3, 3), bool), 0.1)
    with pytest.raises(ParameterError):
        tag_histogram(np.zeros((3, 3)), np.ones((3, 3), bool), 0.0)
    with pytest.raises(DimensionMismatchError):
        tag_histogram(np.zeros((3, 3)), np.ones((3, 4), bool), 0.1)


def test_identifiers_two_clusters_are_bin_centres():
    tag, mask = two_cluster_grid()
    ids = extract_identifiers(tag_histogram(tag, mask, 0.1), 1.0, 10)
    assert ids == pytest.approx([0.05, 3.05])


def test_identifiers_empty_and_single():
    empty = TagHistogram(0.1, 0.0, np.zeros(0, np.int64))
    assert extract_identifiers(empty, 1.0, 10) == []
    one = tag_histogram(np.full((5, 5), 2.0), np.ones((5, 5), bool), 0.1)
    assert len(extract_identifiers(one, 1.0, 10)) == 1


def test_identifiers_respect_min_mass():
    h = TagHistogram(0.1, 0.0, np.array([50, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 9]))
    assert extract_identifiers(h, 0.5, 10) == pytest.approx([0.05])


def test_identifiers_min_separation_precondition():
    with pytest.raises(ParameterError):
        extract_identifiers(TagHistogram(0.1, 0.0, np.array([5])), 0.05, 1)


def test_assign_one_identifier_labels_all_foreground():
    tag = np.random.default_rng(1).normal(size=(6, 6))
    mask = np.zeros((6, 6), bool)
    mask[1:4, 2:5] = True
    lm = assign_pixels(tag, mask, [0.0])
    assert (lm.labels[mask] == 0).all()
    assert (lm.labels[~mask] == BACKGROUND).all()


def test_assign_midpoint_rule():
    tag = np.array([[1.4, 1.6]])
    lm = assign_pixels(tag, np.ones((1, 2), bool), [0.0, 3.0])
    assert lm.labels.tolist() == [[0, 1]]


def test_assign_tie_goes_to_lower_index():
    lm = assign_pixels(np.array([[1.5, 3.0]]), np.ones((1, 2), bool), [0.0, 3.0])
    assert lm.labels.tolist() == [[0, 1]]


def test_assign_needs_identifiers():
    with pytest.raises(ParameterError):
        assign_pixels(np.zeros((2, 2)), np.ones((2, 2), bool), [])


def pixel_accuracy(lm, scene):
    truth = scene.labels
    fg = truth >= 0
    hits = 0
    for label in range(lm.n_instances):
        owners = truth[(lm.labels == label) & fg]
        if owners.size:
            hits += np.bincount(owners).max()
    return hits / fg.sum()


def test_two_instance_scene_pixel_agreement():
    cfg = SceneConfig(n_min=2, n_max=2, tag_noise_std=0.05, seed=7)
    scene = generate_instance_scene(cfg)
    det, tag = render_instance_scene(scene, cfg)
    lm = decode_instances(det, tag)
    assert lm.n_instances == 2
    assert pixel_accuracy(lm, scene) >= 0.99


def test_decode_empty_detection():
    lm = decode_instances(np.zeros((5, 5)), np.zeros((5, 5)))
    assert lm.n_instances == 0
    assert (lm.labels == BACKGROUND).all()


def test_decode_never_labels_background():
    for seed in range(20):
        cfg = SceneConfig(n_min=1, n_max=5, tag_noise_std=0.1, seed=seed)
        scene = generate_instance_scene(cfg)
        det, tag = render_instance_scene(scene, cfg)
        lm = decode_instances(det, tag)
        assert (lm.labels[~threshold_mask(det, 0.5)] == BACKGROUND).all()
        assert set(np.unique(lm.labels[lm.labels >= 0])) == set(range(lm.n_instances))


def test_per_category_loop():
    cfg = SceneConfig(n_min=2, n_max=3, seed=2)
    scene = generate_instance_scene(cfg)
    det, tag = render_instance_scene(scene, cfg)
    out = decode_instances_per_category([det, np.zeros_like(det)], [tag, tag])
    assert out[0].n_instances == scene.masks.shape[0]
    assert out[1].n_instances == 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
def test_translation_invariance(seed, shift):
    cfg = SceneConfig(n_min=1, n_max=5, tag_noise_std=0.05, seed=seed)
    scene = generate_instance_scene(cfg)
    det, tag = render_instance_scene(scene, cfg)
    a = decode_instances(det, tag)
    b = decode_instances(det, tag + shift)
    assert a.n_instances == b.n_instances
    assert same_partition_up_to_labels(a.labels, b.labels)
    assert np.allclose(np.array(b.identifiers) - shift, a.identifiers, atol=0.1 + 1e-9)


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    k=st.integers(1, 6),
    noise=st.floats(0.0, 0.05),
)
def test_k_separated_clusters_give_k_identifiers(seed, k, noise):
    cfg = InstanceDecodeConfig()
    # bin quantization can move a noisy peak by up to one bin either way
    sep = max(4 * noise, cfg.min_separation + 2 * cfg.bin_width)
    rng = np.random.default_rng(seed)
    centres = np.cumsum(sep + rng.random(k) * sep) + rng.normal() * 10
    values = np.concatenate([c + noise * rng.normal(size=200) for c in centres])
    tag = values.reshape(k * 10, 20)
    hist = tag_histogram(tag, np.ones(tag.shape, bool), cfg.bin_width)
    ids = extract_identifiers(hist, cfg.min_separation, cfg.min_mass)
    assert len(ids) == k


def _scored(labels, identifiers, scores):
    return LabelMap(np.asarray(labels), list(identifiers), list(scores))


def test_merge_single_scale_identity():
    cfg = SceneConfig(n_min=3, n_max=3, seed=5)
    scene = generate_instance_scene(cfg)
    det, tag = render_instance_scene(scene, cfg)
    lm = decode_instances(det, tag)
    merged = merge_instance_scales([lm])
    assert np.array_equal(merged.labels, lm.labels)
    assert merged.identifiers == lm.identifiers


def test_merge_duplicates_are_suppressed():
    cfg = SceneConfig(n_min=4, n_max=4, tag_noise_std=0.05, seed=6)
    scene = generate_instance_scene(cfg)
    det, tag = render_instance_scene(scene, cfg)
    lm = decode_instances(det, tag)
    merged = merge_instance_scales([lm, lm])
    assert np.array_equal(merged.labels, lm.labels)
    assert merged.n_instances == lm.n_instances


def test_merge_partial_scales_recover_all_instances():
    for seed in range(10):
        cfg = SceneConfig(n_min=3, n_max=5, seed=seed)
        scene = generate_instance_scene(cfg)
        masks = scene.masks
        n = len(masks)
        proposals = []
        # every scale sees a different subset, together they cover all instances
        for s in range(3):
            keep = [i for i in range(n) if i % 3 != s]
            labels = np.full(masks.shape[1:], BACKGROUND)
            for new, i in enumerate(keep):
                labels[masks[i]] = new
            proposals.append(_scored(labels, [float(i) for i in keep], [1.0 - 0.1 * s] * len(keep)))
        merged = merge_instance_scales(proposals)
        assert merged.n_instances == n
        assert same_partition_up_to_labels(merged.labels, scene.labels)


def test_merge_higher_score_wins_overlap():
    a = np.array([[0, 0, 0, -1]])
    b = np.array([[-1, 0, 0, 0]])
    merged = merge_instance_scales([_scored(a, [0.0], [0.5]), _scored(b, [5.0], [0.9])], overlap_iou=0.4)
    assert merged.n_instances == 1
    assert merged.labels.tolist() == [[-1, 0, 0, 0]]
    assert merged.identifiers == [5.0]


def test_merge_errors():
    with pytest.raises(ParameterError):
        merge_instance_scales([])
    with pytest.raises(DimensionMismatchError):
        merge_instance_scales([_scored(np.zeros((2, 2), int), [0.0], [1.0]), _scored(np.zeros((3, 2), int), [0.0], [1.0])])
