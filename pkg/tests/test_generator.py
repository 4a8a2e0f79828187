import numpy as np
import pytest

from src.data_models import GalleryConfig
from src.errors import ConfigurationError, DegenerateOutputError, UsageError
from src.generator import build_generator, generate, generate_batch, load_generator, save_generator
from src.matcher import match_matrix
from src.population import generate_gallery
from src.utils import STREAM_GENERATOR, normalize, spawn_rng


@pytest.fixture
def gallery():
    return generate_gallery(GalleryConfig(feature_dim=32, cluster_count=5, user_count=40), seed=1)


def test_same_seed_gives_identical_params(gallery):
    a = build_generator(32, 16, seed=8, gallery=gallery)
    b = build_generator(32, 16, seed=8, gallery=gallery)
    assert np.array_equal(a.projection, b.projection)
    assert np.array_equal(a.offset, b.offset)
    assert a.full_rank_checked


def test_single_column_is_the_blended_cluster_center():
    gallery = generate_gallery(GalleryConfig(feature_dim=6, cluster_count=1, user_count=2), seed=4)
    params = build_generator(6, 1, seed=13, gallery=gallery)
    g = spawn_rng(13, STREAM_GENERATOR, 0).standard_normal((1, 6))[0]
    expected = normalize(0.7 * gallery.cluster_centers[0] + 0.3 * g)
    assert np.allclose(params.projection[:, 0], expected, atol=1e-12)


def test_columns_are_unit_norm_and_offset_is_zero(gallery):
    params = build_generator(32, 16, seed=2, gallery=gallery)
    assert np.allclose(np.linalg.norm(params.projection, axis=0), 1.0, atol=1e-12)
    assert np.all(params.offset == 0)
    assert np.linalg.matrix_rank(params.projection) == 16


def test_latent_larger_than_template_is_rejected(gallery):
    with pytest.raises(ConfigurationError):
        build_generator(32, 33, seed=0, gallery=gallery)


def test_zero_latent_is_degenerate(gallery):
    params = build_generator(32, 16, seed=0, gallery=gallery)
    with pytest.raises(DegenerateOutputError):
        generate(params, np.zeros(16))


def test_saturated_entry_points_along_its_column(gallery):
    params = build_generator(32, 16, seed=0, gallery=gallery)
    z = np.zeros(16)
    z[3] = 40.0
    column = normalize(params.projection[:, 3])
    assert float(generate(params, z) @ column) >= 0.99


def test_output_is_unit_norm(gallery):
    params = build_generator(32, 16, seed=0, gallery=gallery)
    rng = np.random.default_rng(0)
    for _ in range(20):
        t = generate(params, rng.standard_normal(16) * 2)
        assert abs(np.linalg.norm(t) - 1.0) <= 1e-9


def test_wrong_latent_shape_is_a_usage_error(gallery):
    params = build_generator(32, 16, seed=0, gallery=gallery)
    with pytest.raises(UsageError):
        generate(params, np.ones(15))
    with pytest.raises(UsageError):
        generate(params, np.full(16, np.nan))


def test_small_steps_move_the_output_a_bounded_amount(gallery):
    params = build_generator(32, 16, seed=0, gallery=gallery)
    rng = np.random.default_rng(1)
    eps = 1e-3
    ratios = []
    for _ in range(10):
        z = rng.standard_normal(16)
        base = generate(params, z)
        for i in range(16):
            step = np.zeros(16)
            step[i] = eps
            ratios.append(np.linalg.norm(generate(params, z + step) - base) / eps)
    assert np.all(np.isfinite(ratios))
    assert max(ratios) < 50.0


def test_batch_agrees_with_single_calls_and_flags_degenerate_rows(gallery):
    params = build_generator(32, 16, seed=0, gallery=gallery)
    latents = np.random.default_rng(2).standard_normal((5, 16))
    latents[2] = 0.0
    templates, valid = generate_batch(params, latents)
    assert valid.tolist() == [True, True, False, True, True]
    assert np.all(templates[2] == 0)
    for i in (0, 1, 3, 4):
        assert np.allclose(templates[i], generate(params, latents[i]), atol=1e-15)


def test_saved_generator_loads_identically(gallery, tmp_path):
    params = build_generator(32, 16, seed=6, gallery=gallery)
    loaded = load_generator(save_generator(params, tmp_path / "generator.json"))
    assert np.array_equal(loaded.projection, params.projection)
    assert loaded.seed == 6


def test_some_small_latent_matches_a_train_user(default_world):
    train, _, params, cal = default_world
    rng = np.random.default_rng(0)
    z = rng.standard_normal((10_000, params.latent_dim))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    z = np.where(norms > 3.0, z * (3.0 / norms), z)
    templates, valid = generate_batch(params, z)
    bits = match_matrix(templates, train, cal.threshold, valid)
    assert bits.any()
    # 每个出现在训练集中的簇都能被某个模板匹配到
    matched_clusters = set(train.cluster_ids[bits.any(axis=0)].tolist())
    assert matched_clusters == set(train.cluster_ids.tolist())
