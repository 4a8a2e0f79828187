"""
Latent vector -> template map standing in for a trained decoder.

``generate(z) = normalize(projection @ tanh(z) + offset)``. The first min(C, n)
projection columns lean toward the gallery's cluster centers so that every
cluster is reachable from the latent space. Anything implementing
``LatentDecoder`` can replace it in the search code.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Tuple, Union

import numpy as np

from src.data_models import GeneratorDocument, load_model
from src.errors import ConfigurationError, DegenerateOutputError, UsageError
from src.population import Gallery
from src.utils import STREAM_GENERATOR, atomic_write_text, normalize, spawn_rng

logger = logging.getLogger(__name__)

# 归一化前向量范数低于该值视为退化输出
DEGENERATE_NORM = 1e-12
MAX_RANK_ATTEMPTS = 100


class LatentDecoder(Protocol):
    """Pure map from latent vectors to unit-norm templates."""

    @property
    def latent_dim(self) -> int: ...

    @property
    def feature_dim(self) -> int: ...

    def decode_batch(self, latents: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(λ, n) latents -> ((λ, m) templates, (λ,) bool mask of non-degenerate rows)."""
        ...


@dataclass(frozen=True, eq=False)
class GeneratorParams:
    projection: np.ndarray  # (m, n)
    offset: np.ndarray  # (m,)
    seed: int = 0
    full_rank_checked: bool = field(default=False, repr=False)

    def __post_init__(self):
        if self.projection.ndim != 2 or self.offset.shape != (self.projection.shape[0],):
            raise ConfigurationError(
                f"projection {self.projection.shape} and offset {self.offset.shape} do not agree"
            )

    @property
    def feature_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.projection.shape[1]

    def decode_batch(self, latents: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return generate_batch(self, latents)


def build_generator(m: int, n: int, seed: int, gallery: Gallery,
                    center_weight: float = 0.7, noise_weight: float = 0.3) -> GeneratorParams:
    """
    Deterministic in ``seed``. Column i < min(C, n) is
    ``normalize(center_weight * cluster_center_i + noise_weight * g_i)`` with g_i a
    raw standard normal draw; the remaining columns are normalized draws.
    A rank-deficient draw is rejected and redrawn from the next substream.

    :param gallery: only its cluster centers are read
    """
    if n < 1 or m < 2:
        raise ConfigurationError(f"need n >= 1 and m >= 2, got n={n}, m={m}")
    if n > m:
        raise ConfigurationError(f"latent dimension n={n} exceeds template dimension m={m}")
    if gallery.feature_dim != m:
        raise ConfigurationError(f"gallery has dimension {gallery.feature_dim}, generator asked for m={m}")

    centers = gallery.cluster_centers
    biased = min(len(centers), n)
    for attempt in range(MAX_RANK_ATTEMPTS):
        rng = spawn_rng(seed, STREAM_GENERATOR, attempt)
        draws = rng.standard_normal((n, m))
        columns = draws.copy()
        columns[:biased] = center_weight * centers[:biased] + noise_weight * draws[:biased]
        columns = normalize(columns)
        projection = np.ascontiguousarray(columns.T)
        if np.linalg.matrix_rank(projection) == n:
            break
        logger.warning(f"Generator draw {attempt} (seed={seed}) is rank deficient, redrawing")
    else:
        raise ConfigurationError(f"no full-rank projection after {MAX_RANK_ATTEMPTS} draws (seed={seed})")

    offset = np.zeros(m)
    projection.setflags(write=False)
    offset.setflags(write=False)
    logger.debug(f"Built generator m={m}, n={n}, seed={seed}, {biased} cluster-biased columns")
    return GeneratorParams(projection=projection, offset=offset, seed=seed, full_rank_checked=True)


def _pre_normalized(params: GeneratorParams, latents: np.ndarray) -> np.ndarray:
    return np.tanh(latents) @ params.projection.T + params.offset


def generate(params: GeneratorParams, z) -> np.ndarray:
    """Single latent vector -> unit-norm template."""
    z = np.asarray(z, dtype=float)
    if z.shape != (params.latent_dim,):
        raise UsageError(f"latent vector has shape {z.shape}, generator expects ({params.latent_dim},)")
    if not np.all(np.isfinite(z)):
        raise UsageError("latent vector contains non-finite entries")
    raw = _pre_normalized(params, z)
    norm = np.linalg.norm(raw)
    if norm <= DEGENERATE_NORM:
        raise DegenerateOutputError(f"pre-normalization norm {norm:.3e} for latent with norm {np.linalg.norm(z):.3e}")
    return raw / norm


def generate_batch(params: GeneratorParams, latents) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised ``generate`` over rows of ``latents``.

    Degenerate rows come back as zero vectors with ``valid`` False instead of
    raising, so a whole CMA-ES population can be scored in one call.
    """
    latents = np.atleast_2d(np.asarray(latents, dtype=float))
    if latents.shape[1] != params.latent_dim:
        raise UsageError(f"latents have width {latents.shape[1]}, generator expects {params.latent_dim}")
    if not np.all(np.isfinite(latents)):
        raise UsageError("latent batch contains non-finite entries")
    raw = _pre_normalized(params, latents)
    norms = np.linalg.norm(raw, axis=1)
    valid = norms > DEGENERATE_NORM
    templates = np.zeros_like(raw)
    templates[valid] = raw[valid] / norms[valid, None]
    return templates, valid


# --- persistence --------------------------------------------------------------

def save_generator(params: GeneratorParams, path: Union[str, Path]) -> Path:
    doc = GeneratorDocument(
        seed=params.seed,
        feature_dim=params.feature_dim,
        latent_dim=params.latent_dim,
        projection=params.projection.tolist(),
        offset=params.offset.tolist(),
    )
    return atomic_write_text(path, doc.model_dump_json(indent=2))


def load_generator(path: Union[str, Path]) -> GeneratorParams:
    doc = load_model(GeneratorDocument, path)
    projection = np.array(doc.projection, dtype=float)
    offset = np.array(doc.offset, dtype=float)
    if projection.shape != (doc.feature_dim, doc.latent_dim):
        raise ConfigurationError(f"{path}: projection shape {projection.shape} != ({doc.feature_dim}, {doc.latent_dim})")
    if np.linalg.matrix_rank(projection) != doc.latent_dim:
        raise ConfigurationError(f"{path}: projection is not full column rank")
    projection.setflags(write=False)
    offset.setflags(write=False)
    return GeneratorParams(projection=projection, offset=offset, seed=doc.seed, full_rank_checked=True)
