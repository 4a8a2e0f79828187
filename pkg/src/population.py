"""
Synthetic enrolled population.

Users are unit-sphere feature vectors drawn from a C-cluster mixture: one print
near a cluster center can match part of that cluster, and covering everybody
needs several prints. Each user is enrolled with k partial impressions.

Random stream layout (see ``src.utils.spawn_rng``)::

    (seed, STREAM_CLUSTERS)          cluster centers
    (seed, role, user_id, 0)         cluster assignment + user-center noise
    (seed, role, user_id, j + 1)     noise of impression j

``role`` is STREAM_GALLERY for ``generate_gallery`` and STREAM_TRAIN / STREAM_TEST
for the two halves of ``split_train_test``.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from src.data_models import GalleryConfig, GalleryDocument, GalleryUserDocument, load_model
from src.errors import ConfigurationError
from src.utils import (
    STREAM_CLUSTERS,
    STREAM_GALLERY,
    STREAM_TEST,
    STREAM_TRAIN,
    atomic_write_text,
    normalize,
    spawn_rng,
)

logger = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class UserRecord:
    user_id: int
    impressions: np.ndarray  # (k, m)
    cluster_id: int = -1
    center: np.ndarray = field(default=None, repr=False)


@dataclass(frozen=True, eq=False)
class Gallery:
    """
    Enrolled users. Immutable after construction and safe to share read-only
    across threads.
    """
    users: Tuple[UserRecord, ...]
    feature_dim: int
    seed: int
    cluster_count: int
    cluster_spread: float
    impression_noise: float
    cluster_centers: np.ndarray = field(repr=False)
    name: str = "gallery"

    def __post_init__(self):
        if not self.users:
            raise ConfigurationError("a gallery needs at least one user")
        k = len(self.users[0].impressions)
        for expected_id, user in enumerate(self.users):
            if user.user_id != expected_id:
                raise ConfigurationError(f"user ids must be 0..n-1 in order, got {user.user_id} at {expected_id}")
            if user.impressions.ndim != 2 or user.impressions.shape != (k, self.feature_dim) or k < 1:
                raise ConfigurationError(
                    f"user {user.user_id}: impressions shape {user.impressions.shape}, expected ({k}, {self.feature_dim})"
                )

    @property
    def user_count(self) -> int:
        return len(self.users)

    @property
    def impressions_per_user(self) -> int:
        return len(self.users[0].impressions)

    @cached_property
    def impression_tensor(self) -> np.ndarray:
        """(users, k, m) stack of every impression, read-only."""
        tensor = np.stack([u.impressions for u in self.users])
        tensor.setflags(write=False)
        return tensor

    @cached_property
    def user_centers(self) -> np.ndarray:
        centers = np.stack([u.center for u in self.users])
        centers.setflags(write=False)
        return centers

    @cached_property
    def cluster_ids(self) -> np.ndarray:
        return np.array([u.cluster_id for u in self.users], dtype=int)


def _cluster_centers(config: GalleryConfig, seed: int) -> np.ndarray:
    rng = spawn_rng(seed, STREAM_CLUSTERS)
    return normalize(rng.standard_normal((config.cluster_count, config.feature_dim)))


def _draw_users(config: GalleryConfig, seed: int, centers: np.ndarray, role: int, count: int) -> Tuple[UserRecord, ...]:
    m, k = config.feature_dim, config.impressions_per_user
    users = []
    for user_id in range(count):
        rng = spawn_rng(seed, role, user_id, 0)
        cluster_id = int(rng.integers(config.cluster_count))
        noise = rng.standard_normal(m)
        # 零噪声时直接复用中心向量，避免再次归一化带来的末位误差
        if config.cluster_spread == 0:
            center = centers[cluster_id].copy()
        else:
            center = normalize(centers[cluster_id] + config.cluster_spread * noise)

        impressions = np.empty((k, m))
        for j in range(k):
            imp_noise = spawn_rng(seed, role, user_id, j + 1).standard_normal(m)
            if config.impression_noise == 0:
                impressions[j] = center
            else:
                impressions[j] = normalize(center + config.impression_noise * imp_noise)
        impressions.setflags(write=False)
        center.setflags(write=False)
        users.append(UserRecord(user_id=user_id, impressions=impressions, cluster_id=cluster_id, center=center))
    return tuple(users)


def _build(config: GalleryConfig, seed: int, centers: np.ndarray, users, name: str) -> Gallery:
    centers = centers.copy()
    centers.setflags(write=False)
    return Gallery(
        users=users,
        feature_dim=config.feature_dim,
        seed=seed,
        cluster_count=config.cluster_count,
        cluster_spread=config.cluster_spread,
        impression_noise=config.impression_noise,
        cluster_centers=centers,
        name=name,
    )


def generate_gallery(config: GalleryConfig, seed: int) -> Gallery:
    """Deterministic in (config, seed): all ``config.user_count`` users in one gallery."""
    config.check()
    centers = _cluster_centers(config, seed)
    users = _draw_users(config, seed, centers, STREAM_GALLERY, config.user_count)
    logger.debug(f"Generated gallery: {config.user_count} users x {config.impressions_per_user} impressions, m={config.feature_dim}, seed={seed}")
    return _build(config, seed, centers, users, "gallery")


def split_train_test(config: GalleryConfig, seed: int) -> Tuple[Gallery, Gallery]:
    """
    Two disjoint halves sharing the same seed-derived cluster centers.

    :param config: ``user_count`` is the total and must be even
    :return: (train, test), each with ``user_count // 2`` users numbered from 0
    """
    config.check()
    if config.user_count % 2 != 0:
        raise ConfigurationError(f"user_count must be even to split in half, got {config.user_count}")
    half = config.user_count // 2
    centers = _cluster_centers(config, seed)
    train = _build(config, seed, centers, _draw_users(config, seed, centers, STREAM_TRAIN, half), "train")
    test = _build(config, seed, centers, _draw_users(config, seed, centers, STREAM_TEST, half), "test")
    logger.info(f"Split population seed={seed}: {half} train / {half} test users, {config.cluster_count} clusters")
    return train, test


def build_gallery(impressions, cluster_ids=None, cluster_centers=None, name: str = "gallery", seed: int = 0) -> Gallery:
    """
    Gallery from explicit impression vectors (users, k, m); rows are normalized.
    Used for hand-built scenarios where the geometry must be known exactly.
    """
    impressions = np.asarray(impressions, dtype=float)
    if impressions.ndim != 3:
        raise ConfigurationError(f"impressions must be (users, k, m), got shape {impressions.shape}")
    impressions = normalize(impressions)
    n_users, _, m = impressions.shape
    if cluster_ids is None:
        cluster_ids = np.zeros(n_users, dtype=int)
    if cluster_centers is None:
        cluster_centers = normalize(impressions.mean(axis=(0, 1), keepdims=False)[None, :])
    cluster_centers = np.array(cluster_centers, dtype=float)
    users = []
    for user_id in range(n_users):
        imp = impressions[user_id].copy()
        center = normalize(imp.mean(axis=0))
        imp.setflags(write=False)
        center.setflags(write=False)
        users.append(UserRecord(user_id=user_id, impressions=imp, cluster_id=int(cluster_ids[user_id]), center=center))
    cluster_centers.setflags(write=False)
    return Gallery(
        users=tuple(users),
        feature_dim=m,
        seed=seed,
        cluster_count=len(cluster_centers),
        cluster_spread=0.0,
        impression_noise=0.0,
        cluster_centers=cluster_centers,
        name=name,
    )


# --- persistence --------------------------------------------------------------

def gallery_to_document(gallery: Gallery) -> GalleryDocument:
    return GalleryDocument(
        name=gallery.name,
        seed=gallery.seed,
        feature_dim=gallery.feature_dim,
        cluster_count=gallery.cluster_count,
        impressions_per_user=gallery.impressions_per_user,
        cluster_spread=gallery.cluster_spread,
        impression_noise=gallery.impression_noise,
        cluster_centers=gallery.cluster_centers.tolist(),
        users=[
            GalleryUserDocument(
                user_id=u.user_id,
                cluster_id=u.cluster_id,
                center=u.center.tolist(),
                impressions=u.impressions.tolist(),
            )
            for u in gallery.users
        ],
    )


def gallery_from_document(doc: GalleryDocument) -> Gallery:
    users = []
    for u in doc.users:
        impressions = np.array(u.impressions, dtype=float)
        center = np.array(u.center, dtype=float)
        impressions.setflags(write=False)
        center.setflags(write=False)
        users.append(UserRecord(user_id=u.user_id, impressions=impressions, cluster_id=u.cluster_id, center=center))
    centers = np.array(doc.cluster_centers, dtype=float)
    centers.setflags(write=False)
    for user in users:
        norms = np.linalg.norm(user.impressions, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ConfigurationError(f"user {user.user_id}: impressions are not unit-norm")
    return Gallery(
        users=tuple(users),
        feature_dim=doc.feature_dim,
        seed=doc.seed,
        cluster_count=doc.cluster_count,
        cluster_spread=doc.cluster_spread,
        impression_noise=doc.impression_noise,
        cluster_centers=centers,
        name=doc.name,
    )


def save_gallery(gallery: Gallery, path: Union[str, Path]) -> Path:
    return atomic_write_text(path, gallery_to_document(gallery).model_dump_json(indent=2))


def load_gallery(path: Union[str, Path]) -> Gallery:
    return gallery_from_document(load_model(GalleryDocument, path))
