import math

import numpy as np
import pandas as pd
import pytest

from src import cmaes
from src.errors import ConfigurationError, UsageError


def sphere(x):
    return -float(np.sum(x ** 2))


def test_default_population_size_for_sixteen_dimensions():
    assert cmaes.default_population_size(16) == 12
    state = cmaes.init(16)
    assert state.population_size == 12
    assert state.parent_count == 6


def test_weights_are_positive_decreasing_and_normalized():
    w = cmaes.recombination_weights(2)
    assert w[0] > w[1] > 0
    assert w.sum() == pytest.approx(1.0, abs=1e-15)


def test_same_seed_gives_identical_first_batch():
    a = cmaes.ask(cmaes.init(5, seed=3))
    b = cmaes.ask(cmaes.init(5, seed=3))
    assert np.array_equal(a, b)
    assert a.shape == (cmaes.default_population_size(5), 5)


@pytest.mark.parametrize("sigma0", [0.0, -1.0, float("nan")])
def test_non_positive_step_size_is_rejected(sigma0):
    with pytest.raises(ConfigurationError):
        cmaes.init(4, sigma0=sigma0)


def test_equal_fitness_keeps_index_order():
    state = cmaes.init(3, seed=1)
    candidates = cmaes.ask(state)
    expected = state.weights @ candidates[: state.parent_count]
    cmaes.tell(state, candidates, np.zeros(state.population_size))
    assert np.allclose(state.mean, expected, atol=1e-15)
    assert state.generation == 1


def test_mean_after_one_hand_computed_update():
    state = cmaes.init(2, sigma0=1.0, lam=4, seed=0)
    candidates = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [-1.0, -1.0]])
    fitnesses = np.array([0.1, 0.5, 0.3, -1.0])
    a = math.log(2.5) - math.log(1)
    b = math.log(2.5) - math.log(2)
    w1, w2 = a / (a + b), b / (a + b)
    cmaes.tell(state, candidates, fitnesses)
    assert np.allclose(state.mean, [2 * w2, w1 + 2 * w2], atol=1e-12)


def test_shifting_all_fitnesses_leaves_the_update_unchanged():
    a = cmaes.init(4, seed=7)
    b = cmaes.init(4, seed=7)
    xs = cmaes.ask(a)
    cmaes.ask(b)
    f = np.array([sphere(x) for x in xs])
    cmaes.tell(a, xs, f)
    cmaes.tell(b, xs, f + 5.0)
    assert np.array_equal(a.mean, b.mean)
    assert np.array_equal(a.covariance, b.covariance)
    assert a.sigma == b.sigma


def test_tell_rejects_nan_and_bad_shapes():
    state = cmaes.init(3, seed=0)
    xs = cmaes.ask(state)
    f = np.zeros(len(xs))
    f[2] = np.nan
    with pytest.raises(UsageError):
        cmaes.tell(state, xs, f)
    with pytest.raises(UsageError):
        cmaes.tell(state, xs[:-1], np.zeros(len(xs) - 1))
    with pytest.raises(UsageError):
        cmaes.tell(state, xs, np.zeros(len(xs) + 1))


def test_identical_fitness_sequence_gives_identical_trajectory():
    def run():
        state = cmaes.init(6, mean0=1.0, sigma0=0.3, seed=4)
        for _ in range(20):
            xs = cmaes.ask(state)
            cmaes.tell(state, xs, [sphere(x) for x in xs])
        return state

    a, b = run(), run()
    assert np.array_equal(a.mean, b.mean)
    assert np.array_equal(a.covariance, b.covariance)


@pytest.mark.parametrize("seed", range(10))
def test_sphere_converges_and_covariance_stays_positive_definite(seed):
    state = cmaes.init(10, mean0=3.0, sigma0=1.0, seed=seed)
    best, evaluations = -math.inf, 0
    while evaluations + state.population_size <= 20_000 and best < -1e-10:
        xs = cmaes.ask(state)
        fs = np.array([sphere(x) for x in xs])
        evaluations += len(xs)
        best = max(best, float(fs.max()))
        cmaes.tell(state, xs, fs)
        assert cmaes.is_positive_definite(state.covariance)
    assert best >= -1e-10


def test_parameters_are_reported():
    params = cmaes.init(16).parameters()
    assert params["lambda"] == 12
    assert set(params) >= {"mu_eff", "c_sigma", "d_sigma", "c_c", "c_1", "c_mu"}


def test_trace_collects_labelled_runs_and_replaces_the_file(tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text("stale\n")
    trace = cmaes.CmaesTrace(path)
    for label in ("a", "b"):
        state = cmaes.init(3, seed=0)
        for _ in range(3):
            xs = cmaes.ask(state)
            fs = [sphere(x) for x in xs]
            cmaes.tell(state, xs, fs)
            trace.record(state, max(fs), label)
    assert trace.flush() == path
    frame = pd.read_csv(path)
    assert list(frame.columns) == cmaes.CmaesTrace.COLUMNS
    assert frame["label"].tolist() == ["a"] * 3 + ["b"] * 3
    assert frame["generation"].tolist() == [1, 2, 3] * 2
    assert not list(tmp_path.glob(".*.tmp"))


def test_empty_trace_writes_nothing(tmp_path):
    assert cmaes.CmaesTrace(tmp_path / "trace.csv").flush() is None
    assert not (tmp_path / "trace.csv").exists()
