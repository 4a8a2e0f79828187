import numpy as np
import pytest

from src import experiment
from src.config import settings
from src.data_models import ExperimentConfig, load_experiment_config
from src.errors import ConfigurationError
from src.experiment import check_dictionary_invariants, run_experiment, trial_seed
from src.population import split_train_test
from src.report import mean_std, render_csv
from src.search import load_dictionary, union_coverage
from src.utils import STREAM_GALLERY, derive_seed
from tests.conftest import SMOKE_CONFIG, slow


class AccessLoggingGallery:
    """Forwards everything to the wrapped gallery and records each attribute read."""

    def __init__(self, inner, log):
        self._inner = inner
        self._log = log

    def __getattr__(self, name):
        self._log.append(f"test:{name}")
        return getattr(self._inner, name)


def one_trial_config(**overrides):
    base = {"trials": 1, "fmr_levels": [0.01]}
    base.update(overrides)
    return load_experiment_config(SMOKE_CONFIG, base)


def test_one_trial_has_a_row_per_strategy():
    report = run_experiment(one_trial_config())
    assert [r.strategy for r in report.rows] == ["random", "single", "diversity", "novelty"]
    for row in report.rows:
        assert row.status == "ok"
        assert 0.0 <= row.train_coverage <= 1.0
        assert 0.0 <= row.test_coverage <= 1.0
        assert row.best_print_train <= row.train_coverage
        assert row.threshold is not None
    sizes = {r.strategy: r.dict_size for r in report.rows}
    assert sizes["random"] == 3
    assert sizes["single"] == 1
    assert 1 <= sizes["diversity"] <= 3
    assert sizes["novelty"] == 3
    assert report.cmaes_parameters["lambda"] == 8


def test_report_is_identical_for_the_same_seed_and_any_job_count(smoke_config):
    a = run_experiment(smoke_config, jobs=1)
    b = run_experiment(smoke_config, jobs=2)
    assert a.model_dump_json() == b.model_dump_json()
    assert render_csv(a) == render_csv(b)


def test_trials_use_different_seeds(smoke_config):
    report = run_experiment(smoke_config)
    seeds = {r.trial: r.trial_seed for r in report.rows}
    assert seeds == {0: trial_seed(7, 0), 1: trial_seed(7, 1)}
    assert seeds[0] != seeds[1]


def test_cells_are_recomputed_from_trial_rows(smoke_config):
    report = run_experiment(smoke_config)
    assert len(report.cells) == len(smoke_config.fmr_levels) * 2 * len(smoke_config.strategies)
    for cell in report.cells:
        values = [
            getattr(r, f"{cell.split}_coverage")
            for r in report.rows
            if r.fmr == cell.fmr and r.strategy == cell.strategy
        ]
        assert (cell.mean, cell.std) == mean_std(values)
        assert cell.trials == 2


def test_test_gallery_is_untouched_until_every_dictionary_is_final(monkeypatch):
    log = []

    def split(config, seed):
        train, test = split_train_test(config, seed)
        return train, AccessLoggingGallery(test, log)

    original = experiment.run_strategy

    def logged_strategy(strategy, ctx, config):
        d = original(strategy, ctx, config)
        log.append(f"final:{strategy}@{ctx.calibration.target_fmr}")
        return d

    monkeypatch.setattr(experiment, "run_strategy", logged_strategy)
    config = load_experiment_config(SMOKE_CONFIG, {"trials": 1})
    run_experiment(config, split_fn=split)

    finals = [i for i, entry in enumerate(log) if entry.startswith("final:")]
    reads = [i for i, entry in enumerate(log) if entry.startswith("test:")]
    assert len(finals) == len(config.fmr_levels) * len(config.strategies)
    assert reads
    assert max(finals) < min(reads)


def test_component_failure_becomes_failure_rows():
    config = one_trial_config(gallery={"feature_dim": 8, "cluster_count": 3, "user_count": 10})
    report = run_experiment(config)
    assert len(report.rows) == 4
    assert all(r.status == "failed" for r in report.rows)
    assert all(r.error.startswith("CalibrationError") for r in report.rows)
    assert len(report.failed) == 4
    assert all(c.mean is None and c.trials == 0 for c in report.cells)


def test_invalid_config_is_rejected_before_running():
    with pytest.raises(ConfigurationError):
        run_experiment(ExperimentConfig(trials=0))


def test_fixed_dictionary_coverage_shrinks_with_stricter_fmr(smoke_config, tmp_path):
    report = run_experiment(smoke_config, dictionary_dir=tmp_path)
    detail = report.details[0]
    train, _ = split_train_test(smoke_config.gallery, derive_seed(detail.trial_seed, STREAM_GALLERY))
    calibrations = sorted(detail.calibrations, key=lambda c: c.threshold)
    for strategy in smoke_config.strategies:
        d = load_dictionary(tmp_path / f"trial_0_{strategy}_0.01.json")
        check_dictionary_invariants(d, train, calibrations)
        coverages = [union_coverage(d, train, cal) for cal in calibrations]
        assert coverages == sorted(coverages, reverse=True)
    for key, curve in detail.coverage_curves.items():
        assert curve == sorted(curve), key


def test_heldout_fmr_is_recorded_per_level(smoke_config):
    report = run_experiment(smoke_config)
    for detail in report.details:
        assert set(detail.heldout_fmr) == {"0.01", "0.001"}
        assert all(0.0 <= v <= 1.0 for v in detail.heldout_fmr.values())


@slow
def test_default_run_orders_strategies_and_generalizes():
    config = ExperimentConfig(fmr_levels=[0.01])
    first = run_experiment(config, jobs=settings.JOBS)
    means = {(c.split, c.strategy): c.mean for c in first.cells}
    assert means[("train", "random")] + 0.05 <= means[("train", "single")]
    assert means[("train", "single")] + 0.05 <= means[("train", "diversity")]
    assert means[("train", "single")] + 0.05 <= means[("train", "novelty")]
    assert means[("test", "diversity")] >= means[("test", "single")] + 0.05
    assert means[("test", "novelty")] >= means[("test", "single")] + 0.05
    assert not first.failed

    second = run_experiment(config, jobs=settings.JOBS)
    assert render_csv(first) == render_csv(second)
    assert np.isfinite([c.std for c in first.cells]).all()
