"""
CMA-ES black-box maximizer (ask / tell).

Standard (μ/μ_w, λ) strategy with cumulative step-size adaptation and
rank-one + rank-μ covariance updates, default learning rates from Hansen's
tutorial. Maximization throughout: larger fitness is better. No restarts and
no bounds; stagnation is for the caller to report.

The state is single-writer: ask/tell must alternate on one thread. Candidates
may be evaluated concurrently in between as long as fitnesses come back in
candidate order.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd

from src.errors import ConfigurationError, NumericalError, UsageError
from src.utils import atomic_write_text

logger = logging.getLogger(__name__)

EIGENVALUE_FLOOR = 1e-14
SYMMETRY_TOL = 1e-9


@dataclass(eq=False)
class CmaesState:
    mean: np.ndarray
    sigma: float
    covariance: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int
    population_size: int
    parent_count: int
    weights: np.ndarray
    rng_seed: int
    # 策略常数
    mu_eff: float
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    c_mu: float
    chi_n: float
    # 协方差分解缓存：C = B diag(D^2) B^T
    eig_basis: np.ndarray = field(repr=False, default=None)
    eig_scale: np.ndarray = field(repr=False, default=None)
    rng: np.random.Generator = field(repr=False, default=None)

    @property
    def dimension(self) -> int:
        return len(self.mean)

    def parameters(self) -> Dict[str, float]:
        """Strategy constants, recorded in every experiment report."""
        return {
            "lambda": self.population_size,
            "mu": self.parent_count,
            "mu_eff": self.mu_eff,
            "c_sigma": self.c_sigma,
            "d_sigma": self.d_sigma,
            "c_c": self.c_c,
            "c_1": self.c_1,
            "c_mu": self.c_mu,
        }

    def dump(self) -> Dict[str, object]:
        """Plain-data snapshot for error messages."""
        return {
            "generation": self.generation,
            "sigma": self.sigma,
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "p_sigma": self.p_sigma.tolist(),
            "p_c": self.p_c.tolist(),
        }


def default_population_size(n: int) -> int:
    return 4 + int(math.floor(3 * math.log(n)))


def recombination_weights(mu: int) -> np.ndarray:
    weights = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    return weights / weights.sum()


def init(n: int, mean0=0.0, sigma0: float = 0.5, lam: Optional[int] = None, seed: int = 0) -> CmaesState:
    """
    Fresh strategy state.

    :param mean0: scalar (broadcast) or length-n vector
    :param lam: population size; None means 4 + floor(3 ln n)
    """
    if n < 1:
        raise ConfigurationError(f"dimension must be >= 1, got {n}")
    if not (sigma0 > 0 and math.isfinite(sigma0)):
        raise ConfigurationError(f"sigma0 must be a positive finite number, got {sigma0}")
    try:
        mean = np.array(np.broadcast_to(np.asarray(mean0, dtype=float), (n,)))
    except ValueError as e:
        raise ConfigurationError(f"mean0 does not fit dimension {n}: {e}") from e
    lam = default_population_size(n) if lam is None else int(lam)
    if lam < 2:
        raise ConfigurationError(f"population size must be >= 2, got {lam}")
    mu = lam // 2
    weights = recombination_weights(mu)
    mu_eff = 1.0 / float(np.sum(weights ** 2))

    c_sigma = (mu_eff + 2) / (n + mu_eff + 5)
    d_sigma = 1 + 2 * max(0.0, math.sqrt((mu_eff - 1) / (n + 1)) - 1) + c_sigma
    c_c = (4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n)
    c_1 = 2 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(1 - c_1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2) ** 2 + mu_eff))
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n ** 2))

    return CmaesState(
        mean=mean,
        sigma=float(sigma0),
        covariance=np.eye(n),
        p_sigma=np.zeros(n),
        p_c=np.zeros(n),
        generation=0,
        population_size=lam,
        parent_count=mu,
        weights=weights,
        rng_seed=seed,
        mu_eff=mu_eff,
        c_sigma=c_sigma,
        d_sigma=d_sigma,
        c_c=c_c,
        c_1=c_1,
        c_mu=c_mu,
        chi_n=chi_n,
        eig_basis=np.eye(n),
        eig_scale=np.ones(n),
        rng=np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed))),
    )


def ask(state: CmaesState) -> np.ndarray:
    """λ candidates as rows: mean + σ · B · D · g, g ~ N(0, I)."""
    if state.eig_basis is None or state.eig_scale is None:
        _decompose(state)
    g = state.rng.standard_normal((state.population_size, state.dimension))
    return state.mean + state.sigma * (g * state.eig_scale) @ state.eig_basis.T


def tell(state: CmaesState, candidates, fitnesses) -> CmaesState:
    """
    One generation update from the evaluated candidates (updates ``state`` in place
    and returns it). Ranking is a stable descending sort, so equal fitnesses
    keep candidate index order.
    """
    candidates = np.asarray(candidates, dtype=float)
    fitnesses = np.asarray(fitnesses, dtype=float)
    lam, n = state.population_size, state.dimension
    if candidates.shape != (lam, n):
        raise UsageError(f"expected {lam} candidates of dimension {n}, got shape {candidates.shape}")
    if fitnesses.shape != (lam,):
        raise UsageError(f"expected {lam} fitness values, got shape {fitnesses.shape}")
    if np.any(np.isnan(fitnesses)):
        raise UsageError(f"NaN fitness at candidate indices {np.nonzero(np.isnan(fitnesses))[0].tolist()}")

    order = np.argsort(-fitnesses, kind="stable")
    selected = candidates[order[: state.parent_count]]

    old_mean = state.mean
    new_mean = state.weights @ selected
    y_w = (new_mean - old_mean) / state.sigma

    # C^{-1/2} y_w，用采样时的分解
    inv_sqrt_y = state.eig_basis @ ((state.eig_basis.T @ y_w) / state.eig_scale)
    cs = state.c_sigma
    p_sigma = (1 - cs) * state.p_sigma + math.sqrt(cs * (2 - cs) * state.mu_eff) * inv_sqrt_y

    norm_ps = float(np.linalg.norm(p_sigma))
    decay = 1 - (1 - cs) ** (2 * (state.generation + 1))
    h_sigma = 1.0 if norm_ps / math.sqrt(decay) / state.chi_n < 1.4 + 2 / (n + 1) else 0.0

    cc = state.c_c
    p_c = (1 - cc) * state.p_c + h_sigma * math.sqrt(cc * (2 - cc) * state.mu_eff) * y_w

    steps = (selected - old_mean) / state.sigma
    rank_mu = (steps * state.weights[:, None]).T @ steps
    c1, cmu = state.c_1, state.c_mu
    covariance = (
        (1 - c1 - cmu) * state.covariance
        + c1 * (np.outer(p_c, p_c) + (1 - h_sigma) * cc * (2 - cc) * state.covariance)
        + cmu * rank_mu
    )

    sigma = state.sigma * math.exp((cs / state.d_sigma) * (norm_ps / state.chi_n - 1))
    if not (math.isfinite(sigma) and sigma > 0):
        raise NumericalError(f"step size became {sigma} at generation {state.generation}", state.dump())

    state.mean = new_mean
    state.p_sigma = p_sigma
    state.p_c = p_c
    state.covariance = covariance
    state.sigma = sigma
    state.generation += 1
    _decompose(state)
    return state


def _decompose(state: CmaesState) -> None:
    """Symmetrise, eigendecompose and floor the spectrum of the covariance."""
    cov = state.covariance
    if not np.all(np.isfinite(cov)):
        raise NumericalError(f"non-finite covariance at generation {state.generation}", state.dump())
    cov = (cov + cov.T) / 2
    try:
        eigenvalues, basis = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"covariance decomposition failed at generation {state.generation}: {e}", state.dump()) from e
    if eigenvalues.min() < EIGENVALUE_FLOOR:
        logger.debug(f"Repairing covariance at generation {state.generation}: min eigenvalue {eigenvalues.min():.3e}")
        eigenvalues = np.maximum(eigenvalues, EIGENVALUE_FLOOR)
        cov = (basis * eigenvalues) @ basis.T
        cov = (cov + cov.T) / 2
    state.covariance = cov
    state.eig_basis = basis
    state.eig_scale = np.sqrt(eigenvalues)


def is_positive_definite(covariance: np.ndarray) -> bool:
    if not np.allclose(covariance, covariance.T, atol=SYMMETRY_TOL, rtol=0):
        return False
    return bool(np.linalg.eigvalsh(covariance).min() > 0)


class CmaesTrace:
    """
    Per-generation trace (generation, best fitness, σ, mean norm) of every
    search that shares one log file. Rows stay in memory until ``flush``
    replaces the file in one atomic write.
    """
    COLUMNS = ["label", "generation", "best_fitness", "sigma", "mean_norm"]

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.rows: List[Dict[str, object]] = []

    def record(self, state: CmaesState, best_fitness: float, label: str = "") -> None:
        self.rows.append({
            "label": label,
            "generation": state.generation,
            "best_fitness": best_fitness,
            "sigma": state.sigma,
            "mean_norm": float(np.linalg.norm(state.mean)),
        })

    def flush(self) -> Optional[Path]:
        if not self.rows:
            return None
        frame = pd.DataFrame(self.rows, columns=self.COLUMNS)
        return atomic_write_text(self.path, frame.to_csv(index=False))
