import math

import numpy as np
import pytest

from src.data_models import GalleryConfig
from src.errors import CalibrationError, UsageError
from src.matcher import (
    MatchVector,
    calibrate,
    impostor_pass_rate,
    impostor_scores,
    match_matrix,
    match_user,
    match_vector,
    score,
    threshold_from_scores,
)
from src.population import UserRecord, build_gallery, generate_gallery
from tests.conftest import hand_calibration, slow

E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])


def test_score_of_basic_pairs():
    t = np.array([0.6, 0.8, 0.0])
    assert score(t, t) == pytest.approx(1.0, abs=1e-9)
    assert score(t, -t) == pytest.approx(-1.0, abs=1e-9)
    assert score(E1, E2) == 0.0
    assert score(t, E1) == score(E1, t)


def test_score_rejects_mismatched_dimensions():
    with pytest.raises(UsageError):
        score(E1, np.ones(4) / 2)


def test_threshold_from_four_scores():
    scores = [0.9, 0.5, 0.1, -0.2]
    assert threshold_from_scores(scores, 0.25) == (0.9, 0.25)
    assert threshold_from_scores(scores, 1.0) == (-0.2, 1.0)


def test_threshold_above_maximum_when_target_is_too_small():
    threshold, achieved = threshold_from_scores([0.3, 0.3, 0.3], 0.1)
    assert threshold > 0.3
    assert achieved == 0.0


def test_threshold_rejects_out_of_range_target():
    with pytest.raises(UsageError):
        threshold_from_scores([0.1, 0.2], 0.0)


def test_calibration_refuses_small_impostor_sets():
    gallery = generate_gallery(GalleryConfig(user_count=10, impressions_per_user=1), seed=0)
    with pytest.raises(CalibrationError):
        calibrate(gallery, 0.01, seed=0)


def test_calibration_rate_is_exact_on_its_own_impostor_set():
    gallery = generate_gallery(GalleryConfig(user_count=60), seed=3)
    for target in (0.01, 0.001):
        cal = calibrate(gallery, target, seed=5)
        scores = impostor_scores(gallery, seed=5)
        assert cal.impostor_pair_count == len(scores)
        assert np.count_nonzero(scores >= cal.threshold) / len(scores) == cal.achieved_fmr
        assert cal.achieved_fmr <= target
        assert impostor_pass_rate(gallery, cal.threshold, seed=5) == cal.achieved_fmr


def test_calibration_is_deterministic_and_monotone_in_target():
    gallery = generate_gallery(GalleryConfig(user_count=60), seed=3)
    loose = calibrate(gallery, 0.01, seed=1)
    assert calibrate(gallery, 0.01, seed=1) == loose
    strict = calibrate(gallery, 0.001, seed=1)
    assert strict.threshold >= loose.threshold


def test_impostor_subsample_is_seeded():
    gallery = generate_gallery(GalleryConfig(user_count=20), seed=3)
    a = impostor_scores(gallery, max_pairs=500, seed=1)
    b = impostor_scores(gallery, max_pairs=500, seed=1)
    assert len(a) == 500
    assert np.array_equal(a, b)


def test_match_user_any_impression_rule():
    low = np.array([0.3, math.sqrt(1 - 0.09), 0.0])
    high = np.array([0.7, math.sqrt(1 - 0.49), 0.0])
    user = UserRecord(user_id=0, impressions=np.stack([low, high]))
    assert match_user(E1, user, hand_calibration(0.5))
    assert not match_user(E1, user, hand_calibration(0.75))
    assert match_user(high, user, hand_calibration(1.0 - 1e-12))
    assert not match_user(high, user, hand_calibration(1.0 + 1e-9))


def test_match_vector_on_three_users():
    gallery = build_gallery(np.array([[E1], [[0.6, 0.8, 0.0]], [-E1]]))
    assert match_vector(E1, gallery, hand_calibration(0.5)).bits.tolist() == [True, True, False]
    assert match_vector(E1, gallery, hand_calibration(0.7)).bits.tolist() == [True, False, False]
    assert match_vector(E1, gallery, hand_calibration(-1.0)).popcount == 3
    assert match_vector(E1, gallery, hand_calibration(1.5)).popcount == 0


def test_raising_the_threshold_never_adds_matches():
    gallery = generate_gallery(GalleryConfig(feature_dim=8, user_count=30), seed=4)
    templates = np.random.default_rng(0).standard_normal((50, 8))
    templates /= np.linalg.norm(templates, axis=1, keepdims=True)
    previous = match_matrix(templates, gallery, -1.0)
    for threshold in np.linspace(-0.5, 1.0, 7):
        bits = match_matrix(templates, gallery, threshold)
        assert not np.any(bits & ~previous)
        previous = bits


def test_invalid_rows_match_nobody():
    gallery = build_gallery(np.array([[E1], [E2]]))
    bits = match_matrix(np.stack([E1, E2]), gallery, -1.0, valid=np.array([True, False]))
    assert bits.tolist() == [[True, True], [False, False]]


def test_match_vector_bitstring():
    vector = MatchVector.from_bitstring("0110", fmr=0.01)
    assert vector.popcount == 2
    assert vector.to_bitstring() == "0110"
    with pytest.raises(UsageError):
        MatchVector.from_bitstring("01a", fmr=0.01)


@slow
def test_heldout_pass_rate_tracks_the_target(default_world):
    train, test, _, _ = default_world
    for target, tolerance in ((0.01, 0.2), (0.001, 0.5)):
        cal = calibrate(train, target, seed=9)
        heldout = impostor_pass_rate(test, cal.threshold, seed=21)
        assert abs(heldout - target) <= tolerance * target
