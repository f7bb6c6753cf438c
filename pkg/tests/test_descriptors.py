"""Keypoint/descriptor layer: determinism, matching, hand-computed distances."""

import numpy as np

import synthdigits as sd
from semilex.descriptors import (
    DESCRIPTOR_DIM,
    DESCRIPTOR_SCALE,
    LocalDescriptor,
    detect_keypoints,
    extract,
    match_mutual,
    mean_feature_distance,
)


def unit(i, *extra):
    v = np.zeros(DESCRIPTOR_DIM)
    v[i] = 1.0
    for j, w in extra:
        v[j] = w
    return v / np.linalg.norm(v) * DESCRIPTOR_SCALE


def test_extract_is_deterministic():
    img = sd.render(5, np.random.default_rng(2))
    d1, d2 = extract(img), extract(img)
    np.testing.assert_array_equal(d1.vectors, d2.vectors)
    np.testing.assert_array_equal(d1.keypoints, d2.keypoints)


def test_featureless_image_has_no_keypoints():
    assert len(extract(np.zeros((28, 28)))) == 0
    assert detect_keypoints(np.zeros((28, 28))).shape == (0, 2)


def test_digit_images_have_keypoints():
    img = sd.render(8, np.random.default_rng(4))
    desc = extract(img)
    assert len(desc) >= 3
    assert desc.vectors.shape[1] == DESCRIPTOR_DIM


def test_self_distance_is_exactly_zero():
    img = sd.render(7, np.random.default_rng(9))
    desc = extract(img)
    m, mean = mean_feature_distance(desc, desc)
    assert m == len(desc)
    assert mean == 0.0


def test_mutual_matching_hand_computed_mean():
    # Three descriptors vs two, engineered so the mutual matches and their
    # distances are computable by hand:
    #   a1 ~ b1 at 12*sqrt(2 - 2*0.8), a2 == b2 at 0, a3 unmatched.
    a = LocalDescriptor(vectors=np.stack([unit(0), unit(1), unit(2)]))
    b = LocalDescriptor(vectors=np.stack([unit(0, (3, 0.75)), unit(1)]))
    cos = 1.0 / np.sqrt(1 + 0.75 ** 2)
    expected_pair = DESCRIPTOR_SCALE * np.sqrt(2 - 2 * cos)
    m, mean = mean_feature_distance(a, b)
    assert m == 2
    np.testing.assert_allclose(mean, (expected_pair + 0.0) / 2, rtol=1e-12)


def test_no_common_features_reports_zero_matches():
    a = LocalDescriptor(vectors=np.zeros((0, DESCRIPTOR_DIM)))
    b = LocalDescriptor(vectors=np.stack([unit(0)]))
    assert mean_feature_distance(a, b) == (0, None)


def test_match_mutual_pairs_are_mutual():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(6, DESCRIPTOR_DIM))
    b = rng.normal(size=(9, DESCRIPTOR_DIM))
    pairs, dist = match_mutual(a, b)
    assert pairs.shape[0] == dist.shape[0] > 0
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    for i, j in pairs:
        assert d2[i].argmin() == j
        assert d2[:, j].argmin() == i
