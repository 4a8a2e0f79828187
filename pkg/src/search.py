"""
Attack strategies and the print dictionaries they build.

    random       size genomes ~ N(0, I), evaluated once
    single       one DeepMasterPrint maximising raw train coverage
    diversity    sequential prints; fitness u_i / U over the still-unseen pool
    novelty      sequential prints; fitness = min Hamming distance to the
                 dictionary's match vectors (popcount while it is empty)
    independent  max_size single prints evolved independently

Every evolved print is a fresh CMA-ES run (mean0, sigma0) that keeps the
best-ever candidate, not the final mean. Within a generation the λ candidates
are decoded and matched as one numpy batch.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Set, Union

import numpy as np

from src import cmaes
from src.data_models import DictionaryDocument, DictionaryEntryDocument, load_model
from src.errors import InvariantViolation, PoolExhaustedError, UsageError
from src.generator import LatentDecoder
from src.matcher import FmrCalibration, MatchVector, match_matrix
from src.population import Gallery
from src.utils import STREAM_SEARCH, atomic_write_text, derive_seed, spawn_rng

logger = logging.getLogger(__name__)

DEFAULT_MAX_SIZE = 10
COVERAGE_CEILING = 1.0

Objective = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class SearchContext:
    """Everything a strategy needs: decoder, train gallery, calibration and CMA-ES settings."""
    decoder: LatentDecoder
    gallery: Gallery
    calibration: FmrCalibration
    seed: int = 0
    sigma0: float = 0.5
    mean0: float = 0.0
    population_size: Optional[int] = None
    min_fitness: int = 1
    trace: Optional[cmaes.CmaesTrace] = None
    log_every: int = 100
    label: str = ""

    @property
    def user_count(self) -> int:
        return self.gallery.user_count

    def print_seed(self, index: int) -> int:
        """Seed of the index-th evolved print; shared across strategies so print 0 agrees."""
        return derive_seed(self.seed, STREAM_SEARCH, index)


@dataclass(eq=False)
class DictionaryEntry:
    genome: np.ndarray
    template: np.ndarray
    match_train: MatchVector
    fitness: float
    strategy_tag: str
    generation_budget: int
    evaluations: int = 0
    seed: int = 0
    overlap: int = 0
    stagnation: int = 0


@dataclass(eq=False)
class PrintDictionary:
    fmr: float
    max_size: int = DEFAULT_MAX_SIZE
    strategy: str = ""
    seed: int = 0
    entries: List[DictionaryEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, entry: DictionaryEntry) -> None:
        if len(self.entries) >= self.max_size:
            raise UsageError(f"dictionary is full ({self.max_size} prints)")
        if entry.match_train.fmr != self.fmr:
            raise UsageError(f"entry matched at FMR {entry.match_train.fmr}, dictionary is at {self.fmr}")
        if self.entries and len(entry.match_train) != len(self.entries[0].match_train):
            raise UsageError("match vectors of one dictionary must have the same length")
        self.entries.append(entry)

    @property
    def evaluations_used(self) -> int:
        return sum(e.evaluations for e in self.entries)

    def bit_matrix(self, user_count: Optional[int] = None) -> np.ndarray:
        """(entries, users) train match bits; an empty dictionary gives shape (0, user_count)."""
        if not self.entries:
            return np.zeros((0, user_count or 0), dtype=bool)
        return np.stack([e.match_train.bits for e in self.entries])

    def templates(self) -> np.ndarray:
        return np.stack([e.template for e in self.entries])


@dataclass
class DiversityState:
    """The pool of train users no print has matched yet."""
    unseen: Set[int]
    total_users: int

    @classmethod
    def full(cls, total_users: int) -> "DiversityState":
        return cls(unseen=set(range(total_users)), total_users=total_users)

    @property
    def pool_size(self) -> int:
        return len(self.unseen)

    def mask(self) -> np.ndarray:
        mask = np.zeros(self.total_users, dtype=bool)
        mask[list(self.unseen)] = True
        return mask

    def remove(self, bits: np.ndarray) -> int:
        matched = set(np.nonzero(bits)[0].tolist())
        removed = self.unseen & matched
        self.unseen -= removed
        return len(removed)


def _bits(x) -> np.ndarray:
    if isinstance(x, MatchVector):
        return x.bits
    return np.asarray(x, dtype=bool)


# --- fitness functions ----------------------------------------------------------

def diversity_fitness(x, state: DiversityState) -> float:
    """u_i / U: share of the unseen pool that ``x`` matches."""
    return float(diversity_fitness_batch(_bits(x)[None, :], state)[0])


def diversity_fitness_batch(bits: np.ndarray, state: DiversityState) -> np.ndarray:
    """Row-wise ``diversity_fitness`` over a (λ, users) bit matrix."""
    if state.pool_size == 0:
        raise PoolExhaustedError("no unseen users left in the pool")
    bits = np.atleast_2d(np.asarray(bits, dtype=bool))
    if bits.shape[1] != state.total_users:
        raise UsageError(f"match vector has length {bits.shape[1]}, pool is over {state.total_users} users")
    return np.count_nonzero(bits & state.mask(), axis=1) / state.pool_size


def novelty_score(x, d: PrintDictionary, min_fitness: int = 1) -> float:
    """
    Minimum Hamming distance from ``x`` to the dictionary's match vectors, or the
    popcount of ``x`` when the dictionary is empty. Prints matching fewer than
    ``min_fitness`` users score 0.
    """
    bits = _bits(x)
    archive = d.bit_matrix(len(bits))
    if archive.shape[1] != len(bits):
        raise UsageError(f"match vector has length {len(bits)}, dictionary vectors have {archive.shape[1]}")
    return float(_novelty_batch(bits[None, :], archive, min_fitness)[0])


def _novelty_batch(bits: np.ndarray, archive: np.ndarray, min_fitness: int) -> np.ndarray:
    popcount = bits.sum(axis=1)
    if len(archive) == 0:
        novelty = popcount.astype(float)
    else:
        novelty = (bits[:, None, :] != archive[None, :, :]).sum(axis=2).min(axis=1).astype(float)
    novelty[popcount < min_fitness] = 0.0
    return novelty


def coverage_fitness(bits: np.ndarray) -> np.ndarray:
    return bits.mean(axis=1)


# --- single-print CMA-ES run ----------------------------------------------------

@dataclass
class _PrintResult:
    genome: np.ndarray
    template: np.ndarray
    bits: np.ndarray
    fitness: float
    evaluations: int
    generations: int
    stagnation: int


def _evolve_print(ctx: SearchContext, objective: Objective, generations: int, seed: int,
                  label: str, ceiling: Optional[float] = None) -> _PrintResult:
    """
    Runs max(1, generations) ask/evaluate/tell cycles and returns the best-ever
    candidate (first index wins among equal fitness). Stops early once the
    best fitness reaches ``ceiling``.
    """
    state = cmaes.init(ctx.decoder.latent_dim, ctx.mean0, ctx.sigma0, ctx.population_size, seed)
    best: Optional[_PrintResult] = None
    evaluations = 0
    last_improvement = 0
    degenerate = 0
    cycles = max(1, generations)
    generation = 0
    for generation in range(cycles):
        candidates = cmaes.ask(state)
        templates, valid = ctx.decoder.decode_batch(candidates)
        degenerate += int(np.count_nonzero(~valid))
        bits = match_matrix(templates, ctx.gallery, ctx.calibration.threshold, valid)
        fitness = np.asarray(objective(bits), dtype=float)
        evaluations += len(candidates)

        i = int(np.argmax(fitness))
        if best is None or fitness[i] > best.fitness:
            best = _PrintResult(
                genome=candidates[i].copy(),
                template=templates[i].copy(),
                bits=bits[i].copy(),
                fitness=float(fitness[i]),
                evaluations=0,
                generations=0,
                stagnation=0,
            )
            last_improvement = generation

        cmaes.tell(state, candidates, fitness)
        if ctx.trace is not None:
            ctx.trace.record(state, best.fitness, label)
        if ctx.log_every and (generation + 1) % ctx.log_every == 0:
            logger.debug(f"[{label}] gen {generation + 1}/{cycles}: best={best.fitness:.4f} sigma={state.sigma:.4g}")
        if ceiling is not None and best.fitness >= ceiling:
            break

    if degenerate:
        logger.warning(f"[{label}] {degenerate} degenerate candidates scored as matching nobody")
    best.evaluations = evaluations
    best.generations = generation + 1
    best.stagnation = generation - last_improvement
    return best


def _entry(result: _PrintResult, ctx: SearchContext, tag: str, budget: int, seed: int,
           fitness: Optional[float] = None, overlap: int = 0) -> DictionaryEntry:
    return DictionaryEntry(
        genome=result.genome,
        template=result.template,
        match_train=MatchVector(bits=result.bits, fmr=ctx.calibration.target_fmr),
        fitness=result.fitness if fitness is None else fitness,
        strategy_tag=tag,
        generation_budget=budget,
        evaluations=result.evaluations,
        seed=seed,
        overlap=overlap,
        stagnation=result.stagnation,
    )


# --- strategies -----------------------------------------------------------------

def evolve_single_print(ctx: SearchContext, generations: int) -> PrintDictionary:
    """One DeepMasterPrint: maximise the fraction of all train users matched."""
    seed = ctx.print_seed(0)
    d = PrintDictionary(fmr=ctx.calibration.target_fmr, max_size=1, strategy="single", seed=ctx.seed)
    result = _evolve_print(ctx, coverage_fitness, generations, seed, f"{ctx.label}single", ceiling=COVERAGE_CEILING)
    d.append(_entry(result, ctx, "single", generations, seed))
    logger.info(
        f"[{ctx.label}single] coverage={result.fitness:.4f} after {result.generations} generations "
        f"({result.evaluations} evaluations, stagnant {result.stagnation})"
    )
    return d


def evolve_independent_dictionary(ctx: SearchContext, per_print_generations: int,
                                  max_size: int = DEFAULT_MAX_SIZE) -> PrintDictionary:
    """max_size DeepMasterPrints evolved independently (no pool removal, no archive)."""
    d = PrintDictionary(fmr=ctx.calibration.target_fmr, max_size=max_size, strategy="independent", seed=ctx.seed)
    for p in range(max_size):
        seed = ctx.print_seed(p)
        result = _evolve_print(ctx, coverage_fitness, per_print_generations, seed,
                               f"{ctx.label}independent/{p}", ceiling=COVERAGE_CEILING)
        d.append(_entry(result, ctx, "independent", per_print_generations, seed))
    logger.info(f"[{ctx.label}independent] {len(d)} prints, train union={union_coverage(d, ctx.gallery, ctx.calibration):.4f}")
    return d


def evolve_diversity_dictionary(ctx: SearchContext, per_print_generations: int,
                                max_size: int = DEFAULT_MAX_SIZE) -> PrintDictionary:
    """
    Sequential prints, each maximising u_i / U over the users no earlier print
    matched. Overlap with already-covered users is recorded, only unseen users
    leave the pool. Stops when the pool is empty or the dictionary is full.
    """
    d = PrintDictionary(fmr=ctx.calibration.target_fmr, max_size=max_size, strategy="diversity", seed=ctx.seed)
    pool = DiversityState.full(ctx.user_count)
    covered = np.zeros(ctx.user_count, dtype=bool)

    for p in range(max_size):
        if pool.pool_size == 0:
            logger.info(f"[{ctx.label}diversity] pool exhausted after {len(d)} prints")
            break

        def objective(bits: np.ndarray) -> np.ndarray:
            return diversity_fitness_batch(bits, pool)

        seed = ctx.print_seed(p)
        result = _evolve_print(ctx, objective, per_print_generations, seed,
                               f"{ctx.label}diversity/{p}", ceiling=COVERAGE_CEILING)
        overlap = int(np.count_nonzero(result.bits & covered))
        removed = pool.remove(result.bits)
        if np.any(pool.mask() & result.bits):
            raise InvariantViolation("matched users are still in the unseen pool")
        covered |= result.bits
        d.append(_entry(result, ctx, "diversity", per_print_generations, seed, overlap=overlap))
        logger.info(
            f"[{ctx.label}diversity] print {p + 1}/{max_size}: fitness={result.fitness:.4f}, "
            f"new={removed}, overlap={overlap}, unseen left={pool.pool_size}"
        )
    return d


def evolve_novelty_dictionary(ctx: SearchContext, per_print_generations: int,
                              max_size: int = DEFAULT_MAX_SIZE) -> PrintDictionary:
    """
    Sequential prints maximising novelty against the dictionary so far. Equal
    novelty is broken by the larger match count, then by the lower candidate
    index. Nothing is removed from any pool.
    """
    d = PrintDictionary(fmr=ctx.calibration.target_fmr, max_size=max_size, strategy="novelty", seed=ctx.seed)
    users = ctx.user_count

    for p in range(max_size):
        archive = d.bit_matrix(users)

        # novelty 为整数，popcount / (U + 1) < 1，因此先比 novelty 再比 popcount
        def objective(bits: np.ndarray, archive=archive) -> np.ndarray:
            return _novelty_batch(bits, archive, ctx.min_fitness) + bits.sum(axis=1) / (users + 1)

        seed = ctx.print_seed(p)
        result = _evolve_print(ctx, objective, per_print_generations, seed, f"{ctx.label}novelty/{p}")
        novelty = float(_novelty_batch(result.bits[None, :], archive, ctx.min_fitness)[0])
        d.append(_entry(result, ctx, "novelty", per_print_generations, seed, fitness=novelty))
        logger.info(
            f"[{ctx.label}novelty] print {p + 1}/{max_size}: novelty={novelty:.0f}, "
            f"matched={int(result.bits.sum())}"
        )
    return d


def random_dictionary(ctx: SearchContext, size: int, seed: int) -> PrintDictionary:
    """size genomes drawn i.i.d. N(0, I), decoded and matched once."""
    if size < 1:
        raise UsageError(f"random dictionary size must be >= 1, got {size}")
    rng = spawn_rng(seed, STREAM_SEARCH)
    genomes = rng.standard_normal((size, ctx.decoder.latent_dim))
    templates, valid = ctx.decoder.decode_batch(genomes)
    bits = match_matrix(templates, ctx.gallery, ctx.calibration.threshold, valid)
    d = PrintDictionary(fmr=ctx.calibration.target_fmr, max_size=size, strategy="random", seed=seed)
    for i in range(size):
        d.append(DictionaryEntry(
            genome=genomes[i],
            template=templates[i],
            match_train=MatchVector(bits=bits[i], fmr=ctx.calibration.target_fmr),
            fitness=float(bits[i].mean()),
            strategy_tag="random",
            generation_budget=0,
            evaluations=1,
            seed=seed,
        ))
    return d


# --- coverage -------------------------------------------------------------------

def coverage_of(bit_rows: np.ndarray, user_count: int) -> float:
    """Fraction of users with a 1 in at least one row."""
    bit_rows = np.asarray(bit_rows, dtype=bool)
    if len(bit_rows) == 0 or user_count == 0:
        return 0.0
    return float(np.count_nonzero(bit_rows.any(axis=0))) / user_count


def dictionary_bits(d: PrintDictionary, gallery: Gallery, cal: FmrCalibration) -> np.ndarray:
    """Recomputed (entries, users) match bits of every print against ``gallery``."""
    if not d.entries:
        return np.zeros((0, gallery.user_count), dtype=bool)
    templates = d.templates()
    valid = np.linalg.norm(templates, axis=1) > 0
    return match_matrix(templates, gallery, cal.threshold, valid)


def union_coverage(d: PrintDictionary, gallery: Gallery, cal: FmrCalibration) -> float:
    if not d.entries:
        return 0.0
    return coverage_of(dictionary_bits(d, gallery, cal), gallery.user_count)


def coverage_curve(d: PrintDictionary, gallery: Gallery, cal: FmrCalibration) -> List[float]:
    """Union coverage of each prefix d[:1], d[:2], ..."""
    if not d.entries:
        return []
    prefix = np.logical_or.accumulate(dictionary_bits(d, gallery, cal), axis=0)
    return (prefix.sum(axis=1) / gallery.user_count).tolist()


def best_print_coverage(d: PrintDictionary, gallery: Gallery, cal: FmrCalibration) -> float:
    if not d.entries:
        return 0.0
    return float(dictionary_bits(d, gallery, cal).mean(axis=1).max())


# --- persistence ----------------------------------------------------------------

def dictionary_to_document(d: PrintDictionary) -> DictionaryDocument:
    return DictionaryDocument(
        strategy=d.strategy,
        fmr=d.fmr,
        max_size=d.max_size,
        seed=d.seed,
        entries=[
            DictionaryEntryDocument(
                genome=e.genome.tolist(),
                template=e.template.tolist(),
                match_train=e.match_train.to_bitstring(),
                fitness=e.fitness,
                strategy_tag=e.strategy_tag,
                generation_budget=e.generation_budget,
                evaluations=e.evaluations,
                seed=e.seed,
                overlap=e.overlap,
                stagnation=e.stagnation,
            )
            for e in d.entries
        ],
    )


def save_dictionary(d: PrintDictionary, path: Union[str, Path]) -> Path:
    return atomic_write_text(path, dictionary_to_document(d).model_dump_json(indent=2))


def load_dictionary(path: Union[str, Path]) -> PrintDictionary:
    doc = load_model(DictionaryDocument, path)
    d = PrintDictionary(fmr=doc.fmr, max_size=doc.max_size, strategy=doc.strategy, seed=doc.seed)
    for e in doc.entries:
        d.append(DictionaryEntry(
            genome=np.array(e.genome, dtype=float),
            template=np.array(e.template, dtype=float),
            match_train=MatchVector.from_bitstring(e.match_train, doc.fmr),
            fitness=e.fitness,
            strategy_tag=e.strategy_tag,
            generation_budget=e.generation_budget,
            evaluations=e.evaluations,
            seed=e.seed,
            overlap=e.overlap,
            stagnation=e.stagnation,
        ))
    return d
