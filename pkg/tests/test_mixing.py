import csv
import math

import numpy as np
import pytest
from scipy.stats import kstest

from imabench.acceptance import identity_mixing
from imabench.contrast import cima_local
from imabench.errors import QuadratureError
from imabench.mixing import (
    MixingFunction,
    SourcePrior,
    build_darmois_grid,
    darmois_2d,
    leaky_tanh,
    leaky_tanh_inverse,
    load_mixing,
    mix_forward,
    mix_inverse,
    mixing_jacobian,
    sample_dataset,
    sample_mixing,
    save_mixing,
    true_log_density,
)

NORMAL2 = SourcePrior("standard_normal", 2)


def test_leaky_tanh_values():
    assert leaky_tanh(0.0) == 0.0
    assert leaky_tanh(1.0, 0.1) == pytest.approx(0.8615941559557649, abs=1e-12)
    assert leaky_tanh_inverse(0.8615941559557649, 0.1) == pytest.approx(1.0, abs=1e-10)


def test_leaky_tanh_inverse_round_trip():
    x = np.linspace(-50.0, 50.0, 2001)
    assert np.max(np.abs(leaky_tanh_inverse(leaky_tanh(x)) - x)) < 1e-10


def test_leaky_tanh_rejects_nonpositive_slope():
    with pytest.raises(ValueError):
        leaky_tanh(1.0, 0.0)


@pytest.mark.parametrize("n", [2, 5])
def test_orthogonal_init_layers_are_orthogonal(n):
    m = sample_mixing(n, 4, "orthogonal", seed=3)
    for w in m.weights:
        assert np.max(np.abs(w.T @ w - np.eye(n))) < 1e-10


def test_uniform_init_ranges_and_zero_bias():
    m = sample_mixing(3, 3, "uniform", seed=1)
    bound = 1.0 / math.sqrt(3)
    for w, b in zip(m.weights, m.biases):
        assert np.all(np.abs(w) <= bound)
        assert np.all(b == 0.0)


def test_sample_mixing_is_deterministic():
    a = sample_mixing(4, 5, "orthogonal", seed=7)
    b = sample_mixing(4, 5, "orthogonal", seed=7)
    c = sample_mixing(4, 5, "orthogonal", seed=8)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert all(np.array_equal(x, y) for x, y in zip(a.biases, b.biases))
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_sample_mixing_rejects_bad_shapes():
    with pytest.raises(ValueError):
        sample_mixing(1, 2)
    with pytest.raises(ValueError):
        sample_mixing(2, 0)


def test_singular_layer_is_rejected():
    with pytest.raises(ValueError):
        MixingFunction((np.zeros((2, 2)),), (np.zeros(2),))


def test_mixing_keeps_private_read_only_copies():
    w, b = np.eye(2), np.zeros(2)
    m = MixingFunction((w,), (b,))
    assert w.flags.writeable and b.flags.writeable
    w[0, 0] = 5.0
    assert m.weights[0][0, 0] == 1.0
    with pytest.raises(ValueError):
        m.weights[0][0, 0] = 2.0


def test_single_identity_layer_is_identity():
    s = np.random.default_rng(0).standard_normal((10, 3))
    assert np.array_equal(mix_forward(identity_mixing(3), s), s)


def test_two_identity_layers_fix_origin():
    m = MixingFunction((np.eye(2), np.eye(2)), (np.zeros(2), np.zeros(2)))
    assert np.array_equal(mix_forward(m, np.zeros(2)), np.zeros(2))


def test_single_orthogonal_layer_has_zero_contrast():
    m = sample_mixing(4, 1, "orthogonal", seed=2)
    s = np.random.default_rng(1).standard_normal((50, 4))
    assert float(cima_local(mixing_jacobian(m, s)).abs().max()) < 1e-12


@pytest.mark.parametrize("n,L,init", [(2, 1, "orthogonal"), (2, 4, "orthogonal"), (5, 4, "orthogonal"), (2, 2, "uniform")])
def test_mixing_round_trip(n, L, init):
    m = sample_mixing(n, L, init, seed=11)
    s = np.random.default_rng(4).standard_normal((1000, n))
    assert np.max(np.abs(mix_inverse(m, mix_forward(m, s)) - s)) < 1e-8


def test_mixing_jacobian_matches_finite_differences():
    m = sample_mixing(3, 3, "orthogonal", seed=5)
    s = np.random.default_rng(2).standard_normal(3)
    J = mixing_jacobian(m, s[None])[0]
    step = 1e-6
    numeric = np.stack(
        [(mix_forward(m, s + step * e) - mix_forward(m, s - step * e)) / (2 * step) for e in np.eye(3)], axis=1
    )
    assert np.max(np.abs(J - numeric)) < 1e-6


def test_true_log_density_closed_forms():
    assert true_log_density(identity_mixing(2), NORMAL2, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)

    w = sample_mixing(2, 1, "orthogonal", seed=9).weights[0]
    rotation = MixingFunction((w.copy(),), (np.zeros(2),))
    x = np.random.default_rng(3).standard_normal((20, 2))
    expected = -0.5 * np.sum(x * x, axis=1) - math.log(2 * math.pi)
    assert np.max(np.abs(true_log_density(rotation, NORMAL2, x) - expected)) < 1e-10


def test_true_density_integrates_to_one():
    m = sample_mixing(2, 3, "orthogonal", seed=0)
    grid = build_darmois_grid(m, NORMAL2, nodes=512, mass_tol=1e-2)
    assert abs(grid.mass - 1.0) < 1e-2


def test_sample_dataset_rules():
    m = sample_mixing(2, 2, "orthogonal", seed=0)
    with pytest.raises(ValueError):
        sample_dataset(m, NORMAL2, 0, seed=0)
    with pytest.raises(ValueError):
        sample_dataset(m, SourcePrior("standard_normal", 3), 10, seed=0)
    a = sample_dataset(m, NORMAL2, 100_000, seed=4)
    b = sample_dataset(m, NORMAL2, 100_000, seed=4)
    assert np.array_equal(a.observations, b.observations)
    assert np.all(np.abs(a.sources.mean(axis=0)) < 0.02)
    assert np.allclose(mix_forward(m, a.sources[:5]), a.observations[:5])


def test_dataset_csv_layout(tmp_path):
    data = sample_dataset(sample_mixing(2, 2, seed=0), NORMAL2, 5, seed=0)
    path = data.to_csv(tmp_path / "data.csv")
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["s1", "s2", "x1", "x2"]
    assert len(rows) == 6
    assert float(rows[1][2]) == data.observations[0, 0]


def test_mixing_serialization_round_trip(tmp_path):
    m = sample_mixing(3, 4, "uniform", seed=6)
    loaded = load_mixing(save_mixing(m, tmp_path / "mixing.json"))
    assert (loaded.n, loaded.L, loaded.alpha, loaded.init_kind, loaded.seed) == (3, 4, m.alpha, "uniform", 6)
    assert all(np.array_equal(x, y) for x, y in zip(m.weights, loaded.weights))
    assert all(np.array_equal(x, y) for x, y in zip(m.biases, loaded.biases))


def test_darmois_identity_uniform_is_identity():
    prior = SourcePrior("uniform01", 2)
    u = darmois_2d(identity_mixing(2), prior, np.array([[0.3, 0.7], [0.5, 0.5]]), nodes=257)
    assert np.max(np.abs(u - np.array([[0.3, 0.7], [0.5, 0.5]]))) < 1e-6


def test_uniform_prior_grid_meets_default_mass_tolerance():
    prior = SourcePrior("uniform01", 2)
    for seed in (0, 1):
        grid = build_darmois_grid(sample_mixing(2, 2, "uniform", seed=seed), prior, nodes=1024)
        assert abs(grid.mass - 1.0) <= 1e-3


def test_darmois_identity_normal_maps_origin_to_center():
    u = darmois_2d(identity_mixing(2), NORMAL2, np.zeros(2), nodes=513)
    assert np.max(np.abs(u - 0.5)) < 1e-4


def test_darmois_pushforward_is_uniform():
    m = sample_mixing(2, 2, "orthogonal", seed=0)
    data = sample_dataset(m, NORMAL2, 10_000, seed=1)
    grid = build_darmois_grid(m, NORMAL2, nodes=1024)
    u = darmois_2d(m, NORMAL2, data.observations, grid=grid)
    assert np.all((u > 0.0) & (u < 1.0))
    for i in range(2):
        assert kstest(u[:, i], "uniform").statistic < 0.03


def test_darmois_rejects_other_dimensions_and_narrow_grids():
    with pytest.raises(ValueError):
        build_darmois_grid(sample_mixing(3, 2, seed=0), SourcePrior("standard_normal", 3))
    with pytest.raises(QuadratureError):
        build_darmois_grid(identity_mixing(2), NORMAL2, nodes=128, width=1.0)
