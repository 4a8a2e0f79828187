"""
Cosine matcher with empirical FMR calibration.

A template matches a user when its best score over the user's impressions
reaches the calibrated threshold (any-impression semantics). Thresholds come
from the impostor score distribution of the TRAIN gallery: cross-user
impression pairs, capped at ``max_pairs`` by a seeded uniform subsample.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.errors import CalibrationError, UsageError
from src.population import Gallery, UserRecord
from src.utils import STREAM_CALIBRATION, spawn_rng

logger = logging.getLogger(__name__)

DEFAULT_MAX_PAIRS = 1_000_000
MIN_IMPOSTOR_PAIRS = 1000


class FmrCalibration(BaseModel):
    """One FMR operating point; embedded verbatim in experiment reports."""
    model_config = ConfigDict(frozen=True)

    target_fmr: float
    threshold: float
    impostor_pair_count: int
    achieved_fmr: float
    seed: int = 0


@dataclass(frozen=True, eq=False)
class MatchVector:
    """Which users (in user_id order) a print matches at one FMR."""
    bits: np.ndarray
    fmr: float

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def to_bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)

    @classmethod
    def from_bitstring(cls, text: str, fmr: float) -> "MatchVector":
        if any(c not in "01" for c in text):
            raise UsageError(f"not a bitstring: {text[:20]!r}")
        return cls(bits=np.array([c == "1" for c in text], dtype=bool), fmr=fmr)

    def __len__(self) -> int:
        return len(self.bits)


def score(a, b) -> float:
    """Cosine similarity of two unit templates (their dot product)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"cannot score templates of shapes {a.shape} and {b.shape}")
    return float(np.dot(a, b))


def impostor_scores(gallery: Gallery, max_pairs: int = DEFAULT_MAX_PAIRS, seed: int = 0) -> np.ndarray:
    """
    Scores of every cross-user impression pair (i < j), or a seeded uniform
    subsample of ``max_pairs`` of them when there are more.
    """
    tensor = gallery.impression_tensor
    n_users, k, m = tensor.shape
    flat = tensor.reshape(n_users * k, m)
    owner = np.repeat(np.arange(n_users), k)
    rows, cols = np.triu_indices(len(flat), k=1)
    cross = owner[rows] != owner[cols]
    rows, cols = rows[cross], cols[cross]
    if len(rows) > max_pairs:
        rng = spawn_rng(seed, STREAM_CALIBRATION)
        keep = np.sort(rng.choice(len(rows), size=max_pairs, replace=False))
        rows, cols = rows[keep], cols[keep]
    return np.einsum("ij,ij->i", flat[rows], flat[cols])


def threshold_from_scores(scores, target_fmr: float) -> Tuple[float, float]:
    """
    Smallest observed score t with fraction{scores >= t} <= target_fmr.

    :return: (threshold, achieved_fmr). When even the maximum score passes too
             often, the threshold sits just above the maximum and achieved is 0.
    """
    if not 0.0 < target_fmr <= 1.0:
        raise UsageError(f"target_fmr must lie in (0, 1], got {target_fmr}")
    scores = np.sort(np.asarray(scores, dtype=float))
    total = len(scores)
    if total == 0:
        raise CalibrationError("no impostor scores to calibrate on")
    allowed = math.floor(target_fmr * total + 1e-9)
    candidates = np.unique(scores)
    # 每个候选阈值下 score >= t 的数量，随 t 递增而递减
    passing = total - np.searchsorted(scores, candidates, side="left")
    ok = np.nonzero(passing <= allowed)[0]
    if len(ok) == 0:
        return float(np.nextafter(scores[-1], np.inf)), 0.0
    first = ok[0]
    return float(candidates[first]), float(passing[first]) / total


def calibrate(gallery: Gallery, target_fmr: float, seed: int,
              max_pairs: int = DEFAULT_MAX_PAIRS, min_pairs: int = MIN_IMPOSTOR_PAIRS) -> FmrCalibration:
    """
    Threshold realising ``target_fmr`` on the gallery's impostor pairs.
    Deterministic in (gallery, target_fmr, seed).
    """
    if gallery.user_count < 2:
        raise CalibrationError(f"calibration needs at least 2 users, gallery '{gallery.name}' has {gallery.user_count}")
    scores = impostor_scores(gallery, max_pairs=max_pairs, seed=seed)
    if len(scores) < min_pairs:
        raise CalibrationError(
            f"only {len(scores)} impostor pairs in gallery '{gallery.name}', need at least {min_pairs}"
        )
    threshold, achieved = threshold_from_scores(scores, target_fmr)
    logger.info(
        f"Calibrated FMR {target_fmr:.4%} on '{gallery.name}': threshold={threshold:.6f}, "
        f"achieved={achieved:.4%} over {len(scores)} impostor pairs"
    )
    return FmrCalibration(
        target_fmr=target_fmr,
        threshold=threshold,
        impostor_pair_count=len(scores),
        achieved_fmr=achieved,
        seed=seed,
    )


def impostor_pass_rate(gallery: Gallery, threshold: float, max_pairs: int = DEFAULT_MAX_PAIRS, seed: int = 0) -> float:
    """Fraction of (a subsample of) the gallery's impostor pairs scoring >= threshold."""
    scores = impostor_scores(gallery, max_pairs=max_pairs, seed=seed)
    return float(np.count_nonzero(scores >= threshold)) / len(scores)


def match_user(t, user: UserRecord, cal: FmrCalibration) -> bool:
    t = np.asarray(t, dtype=float)
    if t.shape != (user.impressions.shape[1],):
        raise UsageError(f"template shape {t.shape} does not match impression dimension {user.impressions.shape[1]}")
    return bool(np.max(user.impressions @ t) >= cal.threshold)


def max_scores(templates: np.ndarray, gallery: Gallery) -> np.ndarray:
    """(λ, m) templates -> (λ, users) best score over each user's impressions."""
    templates = np.atleast_2d(np.asarray(templates, dtype=float))
    tensor = gallery.impression_tensor
    n_users, k, m = tensor.shape
    if templates.shape[1] != m:
        raise UsageError(f"templates have dimension {templates.shape[1]}, gallery '{gallery.name}' has {m}")
    return (templates @ tensor.reshape(n_users * k, m).T).reshape(len(templates), n_users, k).max(axis=2)


def match_matrix(templates: np.ndarray, gallery: Gallery, threshold: float,
                 valid: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Batch ``match_vector``: (λ, users) boolean matrix. Rows flagged invalid
    (degenerate generator outputs) match nobody.
    """
    bits = max_scores(templates, gallery) >= threshold
    if valid is not None:
        bits &= np.asarray(valid, dtype=bool)[:, None]
    return bits


def match_vector(t, gallery: Gallery, cal: FmrCalibration) -> MatchVector:
    t = np.asarray(t, dtype=float)
    if t.ndim != 1:
        raise UsageError(f"expected a single template, got shape {t.shape}")
    bits = match_matrix(t[None, :], gallery, cal.threshold)[0]
    return MatchVector(bits=bits, fmr=cal.target_fmr)
