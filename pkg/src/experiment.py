"""
Multi-trial experiment matrix: trials x FMR levels x strategies.

Per trial::

    trial_seed = derive_seed(master_seed, STREAM_TRIAL, trial_index)
    galleries  <- split_train_test(gallery cfg, derive_seed(trial_seed, STREAM_GALLERY))
    generator  <- build_generator(..., derive_seed(trial_seed, STREAM_GENERATOR), train)
    for fmr:   calibrate on train (seed derive_seed(trial_seed, STREAM_CALIBRATION))
               evolve every strategy (seed derive_seed(trial_seed, STREAM_SEARCH, fmr_index))
    then, and only then, read the test gallery: coverages, held-out FMR.

Dictionaries are evolved separately per FMR level; test coverage reuses the
train-calibrated threshold. A component error aborts its trial and leaves
failure rows instead of stopping the whole matrix.
"""
import asyncio
import logging
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from src import __version__, cmaes
from src.data_models import ExperimentConfig, GalleryConfig
from src.errors import InvariantViolation, MasterPrintError
from src.generator import build_generator
from src.matcher import FmrCalibration, calibrate, impostor_pass_rate
from src.population import Gallery, split_train_test
from src.report import CellSummary, summarize
from src.search import (
    PrintDictionary,
    SearchContext,
    best_print_coverage,
    coverage_curve,
    dictionary_bits,
    evolve_diversity_dictionary,
    evolve_independent_dictionary,
    evolve_novelty_dictionary,
    evolve_single_print,
    random_dictionary,
    save_dictionary,
    union_coverage,
)
from src.utils import (
    STREAM_CALIBRATION,
    STREAM_GALLERY,
    STREAM_GENERATOR,
    STREAM_SEARCH,
    STREAM_TRIAL,
    derive_seed,
)

logger = logging.getLogger(__name__)

SplitFn = Callable[[GalleryConfig, int], Tuple[Gallery, Gallery]]
NOVELTY_TIEBREAK = "novelty, then larger match count, then lower candidate index"


class TrialRow(BaseModel):
    trial: int
    trial_seed: int
    strategy: str
    fmr: float
    status: str = "ok"
    train_coverage: Optional[float] = None
    test_coverage: Optional[float] = None
    best_print_train: Optional[float] = None
    best_print_test: Optional[float] = None
    dict_size: int = 0
    evaluations_used: int = 0
    threshold: Optional[float] = None
    achieved_fmr: Optional[float] = None
    impostor_pair_count: Optional[int] = None
    error: str = ""


class TrialDetail(BaseModel):
    trial: int
    trial_seed: int
    calibrations: List[FmrCalibration] = Field(default_factory=list)
    heldout_fmr: Dict[str, float] = Field(default_factory=dict)
    coverage_curves: Dict[str, List[float]] = Field(default_factory=dict)


class CoverageReport(BaseModel):
    version: str = __version__
    config: ExperimentConfig
    cmaes_parameters: Dict[str, float] = Field(default_factory=dict)
    novelty_tiebreak: str = NOVELTY_TIEBREAK
    rows: List[TrialRow] = Field(default_factory=list)
    cells: List[CellSummary] = Field(default_factory=list)
    details: List[TrialDetail] = Field(default_factory=list)

    @property
    def failed(self) -> List[TrialRow]:
        return [r for r in self.rows if r.status != "ok"]


def trial_seed(master_seed: int, trial_index: int) -> int:
    return derive_seed(master_seed, STREAM_TRIAL, trial_index)


def _cell_key(strategy: str, fmr: float) -> str:
    return f"{strategy}@{fmr:g}"


def run_strategy(strategy: str, ctx: SearchContext, config: ExperimentConfig) -> PrintDictionary:
    if strategy == "random":
        return random_dictionary(ctx, config.max_dict_size, ctx.seed)
    if strategy == "single":
        return evolve_single_print(ctx, config.single_print_generations)
    if strategy == "diversity":
        return evolve_diversity_dictionary(ctx, config.per_print_generations, config.max_dict_size)
    if strategy == "novelty":
        return evolve_novelty_dictionary(ctx, config.per_print_generations, config.max_dict_size)
    if strategy == "independent":
        return evolve_independent_dictionary(ctx, config.per_print_generations, config.max_dict_size)
    raise MasterPrintError(f"unknown strategy '{strategy}'")


def check_dictionary_invariants(d: PrintDictionary, gallery: Gallery, calibrations: List[FmrCalibration]) -> None:
    """
    Coverage over prefixes never decreases, and raising the threshold never
    turns a 0 bit into a 1 bit for the same prints.
    """
    curve = coverage_curve(d, gallery, calibrations[0]) if calibrations else []
    if any(b < a for a, b in zip(curve, curve[1:])):
        raise InvariantViolation(f"{d.strategy}: prefix coverage decreased: {curve}")
    ordered = sorted(calibrations, key=lambda c: c.threshold)
    previous = None
    for cal in ordered:
        bits = dictionary_bits(d, gallery, cal)
        if previous is not None and np.any(bits & ~previous):
            raise InvariantViolation(f"{d.strategy}: match bits appeared when the threshold rose to {cal.threshold}")
        previous = bits


def _failure_rows(config: ExperimentConfig, index: int, seed: int, error: Exception) -> List[TrialRow]:
    return [
        TrialRow(trial=index, trial_seed=seed, strategy=s, fmr=f, status="failed", error=f"{type(error).__name__}: {error}")
        for f in config.fmr_levels
        for s in config.strategies
    ]


def run_trial(config: ExperimentConfig, index: int, split_fn: SplitFn = split_train_test,
              trace_dir: Optional[Path] = None, dictionary_dir: Optional[Path] = None,
              log_every: int = 100) -> Tuple[List[TrialRow], TrialDetail]:
    seed = trial_seed(config.master_seed, index)
    detail = TrialDetail(trial=index, trial_seed=seed)
    started = time.perf_counter()
    logger.info(f"Trial {index + 1}/{config.trials} started (seed={seed})")
    try:
        train, test = split_fn(config.gallery, derive_seed(seed, STREAM_GALLERY))
        params = build_generator(
            config.gallery.feature_dim,
            config.generator.latent_dim,
            derive_seed(seed, STREAM_GENERATOR),
            train,
            config.generator.center_weight,
            config.generator.noise_weight,
        )
        cal_seed = derive_seed(seed, STREAM_CALIBRATION)
        calibrations = [
            calibrate(train, fmr, cal_seed, config.calibration_max_pairs, config.min_impostor_pairs)
            for fmr in config.fmr_levels
        ]
        detail.calibrations = calibrations

        dictionaries: Dict[Tuple[str, float], PrintDictionary] = {}
        for fmr_index, cal in enumerate(calibrations):
            trace = cmaes.CmaesTrace(trace_dir / f"trial_{index}_fmr_{cal.target_fmr:g}.csv") if trace_dir else None
            ctx = SearchContext(
                decoder=params,
                gallery=train,
                calibration=cal,
                seed=derive_seed(seed, STREAM_SEARCH, fmr_index),
                sigma0=config.cmaes.sigma0,
                mean0=config.cmaes.mean0,
                population_size=config.cmaes.population_size,
                min_fitness=config.min_fitness,
                trace=trace,
                log_every=log_every,
                label=f"t{index}/fmr{cal.target_fmr:g}/",
            )
            for strategy in config.strategies:
                d = run_strategy(strategy, ctx, config)
                check_dictionary_invariants(d, train, calibrations)
                dictionaries[(strategy, cal.target_fmr)] = d
                if dictionary_dir is not None:
                    save_dictionary(d, dictionary_dir / f"trial_{index}_{strategy}_{cal.target_fmr:g}.json")
            if trace is not None:
                trace.flush()

        # 所有字典已定稿，此后才读取测试集
        rows = []
        for cal in calibrations:
            detail.heldout_fmr[f"{cal.target_fmr:g}"] = impostor_pass_rate(
                test, cal.threshold, config.calibration_max_pairs, cal_seed
            )
            for strategy in config.strategies:
                d = dictionaries[(strategy, cal.target_fmr)]
                detail.coverage_curves[_cell_key(strategy, cal.target_fmr)] = coverage_curve(d, train, cal)
                rows.append(TrialRow(
                    trial=index,
                    trial_seed=seed,
                    strategy=strategy,
                    fmr=cal.target_fmr,
                    train_coverage=union_coverage(d, train, cal),
                    test_coverage=union_coverage(d, test, cal),
                    best_print_train=best_print_coverage(d, train, cal),
                    best_print_test=best_print_coverage(d, test, cal),
                    dict_size=len(d),
                    evaluations_used=d.evaluations_used,
                    threshold=cal.threshold,
                    achieved_fmr=cal.achieved_fmr,
                    impostor_pair_count=cal.impostor_pair_count,
                ))
    except MasterPrintError as e:
        logger.warning(f"Trial {index + 1} failed: {type(e).__name__}: {e}")
        rows = _failure_rows(config, index, seed, e)

    logger.info(f"Trial {index + 1}/{config.trials} finished in {time.perf_counter() - started:.1f}s")
    return rows, detail


async def _run_trials(config: ExperimentConfig, jobs: int, **kwargs) -> List[Tuple[List[TrialRow], TrialDetail]]:
    semaphore = asyncio.Semaphore(max(1, jobs))

    async def guarded(index: int):
        async with semaphore:
            return await asyncio.to_thread(run_trial, config, index, **kwargs)

    # gather 保持提交顺序，报告与 jobs 无关
    return await asyncio.gather(*(guarded(i) for i in range(config.trials)))


def run_experiment(config: ExperimentConfig, jobs: int = 1, split_fn: SplitFn = split_train_test,
                   trace_dir: Optional[Path] = None, dictionary_dir: Optional[Path] = None,
                   log_every: int = 100) -> CoverageReport:
    """
    Runs the full matrix and aggregates it. Fully deterministic in
    ``config.master_seed`` regardless of ``jobs``.
    """
    config.check()
    logger.info(
        f"Experiment: {config.trials} trials x {len(config.fmr_levels)} FMR levels x "
        f"strategies {config.strategies}, master_seed={config.master_seed}, jobs={jobs}"
    )
    results = asyncio.run(_run_trials(
        config, jobs, split_fn=split_fn, trace_dir=trace_dir, dictionary_dir=dictionary_dir, log_every=log_every,
    ))
    rows = [row for trial_rows, _ in results for row in trial_rows]
    details = [detail for _, detail in results]
    reference = cmaes.init(config.generator.latent_dim, config.cmaes.mean0, config.cmaes.sigma0, config.cmaes.population_size)
    report = CoverageReport(
        config=config,
        cmaes_parameters=reference.parameters(),
        rows=rows,
        cells=summarize(rows, config.fmr_levels, config.strategies),
        details=details,
    )
    if report.failed:
        logger.warning(f"{len(report.failed)} failure rows recorded")
    return report
