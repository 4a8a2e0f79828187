"""
Shared fixtures.

``antipodal_*`` is a hand-built two-cluster world in R^4: four users near +e1,
four near -e1, and a 2-d generator spanning the e1/e2 plane. At threshold 0.9
no single template can match both clusters.
"""
import os

import numpy as np
import pytest

from src.data_models import GalleryConfig, load_experiment_config
from src.config import settings
from src.generator import GeneratorParams, build_generator
from src.matcher import FmrCalibration, calibrate
from src.population import build_gallery, split_train_test
from src.search import SearchContext

SMOKE_CONFIG = os.path.join(os.path.dirname(__file__), "..", "src", "data", "smoke_config.json")

slow = pytest.mark.skipif(not settings.RUN_SLOW, reason="set MASTERPRINT_RUN_SLOW=1 to run acceptance-scale tests")

ANTIPODAL_JITTER = (-0.05, -0.02, 0.02, 0.05)


def hand_calibration(threshold: float, target_fmr: float = 0.01) -> FmrCalibration:
    return FmrCalibration(target_fmr=target_fmr, threshold=threshold, impostor_pair_count=0, achieved_fmr=0.0)


@pytest.fixture
def antipodal_gallery():
    impressions = []
    for sign in (1.0, -1.0):
        for jitter in ANTIPODAL_JITTER:
            impressions.append([
                [sign, jitter, 0.0, 0.0],
                [sign, jitter, 0.03, 0.0],
            ])
    cluster_ids = [0] * 4 + [1] * 4
    centers = [[1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]]
    return build_gallery(np.array(impressions), cluster_ids=cluster_ids, cluster_centers=centers, name="antipodal")


@pytest.fixture
def plane_generator():
    projection = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    return GeneratorParams(projection=projection, offset=np.zeros(4), seed=0)


@pytest.fixture
def antipodal_context(antipodal_gallery, plane_generator):
    return SearchContext(
        decoder=plane_generator,
        gallery=antipodal_gallery,
        calibration=hand_calibration(0.9),
        seed=11,
    )


@pytest.fixture
def smoke_config():
    return load_experiment_config(SMOKE_CONFIG)


@pytest.fixture(scope="session")
def default_world():
    """Default-size train/test galleries, generator and FMR 1% calibration for one seed."""
    config = GalleryConfig()
    train, test = split_train_test(config, seed=2024)
    params = build_generator(config.feature_dim, 16, seed=5, gallery=train)
    cal = calibrate(train, 0.01, seed=9)
    return train, test, params, cal
