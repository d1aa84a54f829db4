"""Synthetic world: determinism, ranges, geometry properties, labeling, clips."""

import numpy as np
import pytest

from portrait_studio.camera import CameraPose
from portrait_studio.errors import InvalidInputError
from portrait_studio.world import (ATTRIBUTE_SLOTS, POSE_DELTA_CAP, FactorVector,
                                   label_attributes, make_target_sequence,
                                   reference_render, sample_factors)


def zero_factors(**kw):
    psi = np.zeros(6)
    for k, v in kw.items():
        psi[{"yaw": 0, "pitch": 1, "roll": 2, "jaw": 3}[k]] = v
    return FactorVector(np.zeros(8), np.zeros(8), psi, np.zeros(6))


def test_same_seed_identical_factors():
    a, b = sample_factors(11), sample_factors(11)
    assert np.array_equal(a.beta, b.beta) and np.array_equal(a.psi, b.psi)


def test_distinct_seeds_differ():
    assert not np.allclose(sample_factors(0).beta, sample_factors(1).beta)


def test_range_scan_1000_seeds():
    for seed in range(1000):
        f = sample_factors(seed)
        assert np.abs(f.beta).max() <= 3 and np.abs(f.theta_exp).max() <= 3
        assert np.abs(f.alpha_app).max() <= 3 and np.abs(f.psi).max() <= 3
        assert abs(f.psi[0]) <= np.pi / 6 and abs(f.psi[1]) <= np.pi / 9


def test_unsupported_resolution_rejected():
    with pytest.raises(InvalidInputError):
        reference_render(zero_factors(), CameraPose(0, 0), 48)


def test_zero_factors_centroid_at_center():
    img = reference_render(zero_factors(), CameraPose(0, 0), 64)
    ys, xs = np.nonzero(img.face_mask)
    assert abs(ys.mean() - 31.5) <= 1.0
    assert abs(xs.mean() - 31.5) <= 1.0


def test_closed_jaw_gives_empty_mouth_mask():
    img = reference_render(zero_factors(), CameraPose(0, 0), 64)
    assert img.mouth_mask.sum() == 0


def test_open_jaw_gives_mouth_mask_inside_face():
    img = reference_render(zero_factors(jaw=0.6), CameraPose(0, 0), 64)
    assert img.mouth_mask.sum() > 0
    assert not (img.mouth_mask & ~img.face_mask).any()


def test_mouth_subset_of_face_over_seeds():
    for seed in range(12):
        f = sample_factors(seed)
        img = reference_render(f, CameraPose(0, 0), 32)
        assert not (img.mouth_mask & ~img.face_mask).any()


def test_mirror_symmetry_for_symmetric_identity():
    pos = zero_factors(yaw=0.2, jaw=0.5)
    neg = zero_factors(yaw=-0.2, jaw=0.5)
    a = reference_render(pos, CameraPose(0, 0), 64).rgb
    b = reference_render(neg, CameraPose(0, 0), 64).rgb
    assert np.abs(a - b[:, ::-1]).max() <= 2.0 / 255.0


def test_head_camera_pose_equivariance():
    f_head = zero_factors(yaw=0.15, jaw=0.4)
    f_still = zero_factors(yaw=0.0, jaw=0.4)
    a = reference_render(f_head, CameraPose(0, 0), 64).rgb
    b = reference_render(f_still, CameraPose(0.15, 0), 64).rgb
    assert np.abs(a - b).max() <= 2.0 / 255.0


def test_label_attributes_pure_and_midpoints():
    f = zero_factors()
    lab = label_attributes(f)
    assert np.allclose(lab.values[:5], 0.0)
    assert lab["yaw"] == 0.0
    lab2 = label_attributes(zero_factors())
    assert np.array_equal(lab.values, lab2.values)


def test_label_age_strictly_monotone():
    vals = []
    for a0 in (-1.0, 0.0, 1.0):
        alpha = np.zeros(6)
        alpha[0] = a0
        f = FactorVector(np.zeros(8), np.zeros(8), np.zeros(6), alpha)
        vals.append(label_attributes(f)["age"])
    assert vals[0] < vals[1] < vals[2]


def test_label_yaw_equals_psi0_for_100_seeds():
    for seed in range(100):
        f = sample_factors(seed)
        assert label_attributes(f)["yaw"] == f.psi[0]


def test_sequence_single_frame():
    seq = make_target_sequence(5, 1)
    assert len(seq) == 1


def test_sequence_deterministic_and_pose_capped():
    seq1 = make_target_sequence(9, 24)
    seq2 = make_target_sequence(9, 24)
    for fr1, fr2 in zip(seq1, seq2):
        assert np.array_equal(fr1.factors.psi, fr2.factors.psi)
    yaws = np.array([fr.factors.psi[0] for fr in seq1])
    pitches = np.array([fr.factors.psi[1] for fr in seq1])
    assert np.abs(np.diff(yaws)).max() <= POSE_DELTA_CAP
    assert np.abs(np.diff(pitches)).max() <= POSE_DELTA_CAP


def test_sequence_has_mouth_open_segment():
    seq = make_target_sequence(3, 16)
    assert max(fr.factors.psi[3] for fr in seq) > 0.3


def test_attribute_slots_documented():
    assert ATTRIBUTE_SLOTS == ("age", "hair_length", "glasses", "facial_hair",
                               "gender_code", "yaw")
