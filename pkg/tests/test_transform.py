import math

import numpy as np
from numpy.testing import assert_allclose
import pytest

from functions.attack.transform import (
    TransformParams,
    apply_transform,
    power_normalize,
    psr_to_epsilon,
    random_params,
    rotate,
    scale_to_budget,
    shuffle_permutation,
    symbol_extend,
    symbol_shuffle,
    symbol_unshuffle,
    transform_graph,
)
from functions.phy.helpers import complex_gaussian, signal_energy
from shared import autodiff as ad
from shared.autodiff import Graph, Tensor, finite_diff_check
from shared.errors import AttackError


def perturbation(rng, rows: int = 2) -> np.ndarray:
    return complex_gaussian(rng, (rows, 64), 1.0)


class TestShuffle:
    def test_is_a_permutation(self):
        for zeta in range(20):
            assert sorted(shuffle_permutation(zeta, 64)) == list(range(64))

    def test_seeded(self):
        assert_allclose(shuffle_permutation(11, 64), shuffle_permutation(11, 64))
        assert not np.array_equal(shuffle_permutation(11, 64), shuffle_permutation(12, 64))

    def test_identity_without_seed(self, rng):
        grid = perturbation(rng)
        assert_allclose(symbol_shuffle(grid, None), grid)

    def test_unshuffle_inverts(self, rng):
        grid = perturbation(rng, 3)
        assert_allclose(symbol_unshuffle(symbol_shuffle(grid, 99), 99), grid)

    def test_empty_grid(self):
        with pytest.raises(AttackError):
            symbol_shuffle(np.zeros((0, 0)), 1)


class TestExtendAndRotate:
    def test_extension_is_periodic(self, rng):
        delta = perturbation(rng, 2)
        extended = symbol_extend(delta, 3)
        assert extended.shape == (6, 64)
        for i in range(6):
            assert_allclose(extended[i], delta[i % 2])

    def test_extension_factor_validated(self, rng):
        with pytest.raises(AttackError):
            symbol_extend(perturbation(rng), 0)

    def test_rotation_preserves_magnitude(self, rng):
        grid = perturbation(rng)
        rotated = rotate(grid, 1.3, 17)
        assert_allclose(np.abs(rotated), np.abs(grid))

    def test_zero_rotation_is_identity(self, rng):
        grid = perturbation(rng)
        assert_allclose(rotate(grid, 0.0, 0), grid)

    def test_sample_offset_is_time_shift(self, rng):
        grid = perturbation(rng, 1)
        shifted = np.fft.ifft(rotate(grid, 0.0, 5), axis=-1)
        assert_allclose(shifted, np.roll(np.fft.ifft(grid, axis=-1), 5, axis=-1), atol=1e-12)


class TestPowerBudget:
    def test_epsilon_from_psr(self):
        victim = np.ones(100)
        assert psr_to_epsilon(victim, -10.0) == pytest.approx(10.0)

    def test_over_budget_lands_on_sphere(self, rng):
        grid = 10 * perturbation(rng)
        assert signal_energy(power_normalize(grid, 2.0)) == pytest.approx(2.0)

    def test_under_budget_unchanged(self, rng):
        grid = 0.01 * perturbation(rng)
        assert_allclose(power_normalize(grid, 100.0), grid)

    def test_scale_to_budget_is_exact(self, rng):
        assert signal_energy(scale_to_budget(perturbation(rng), 0.5)) == pytest.approx(0.5)

    def test_zero_grid_cannot_be_scaled(self):
        with pytest.raises(AttackError):
            scale_to_budget(np.zeros((1, 64)), 1.0)


class TestTransform:
    def test_params_validated(self):
        with pytest.raises(AttackError):
            TransformParams(mu=0)
        with pytest.raises(AttackError):
            TransformParams(phi=7.0)
        with pytest.raises(AttackError):
            TransformParams(epsilon=0.0)

    def test_random_params_ranges(self, rng):
        for _ in range(50):
            tau = random_params(rng, mu=2, epsilon=1.0)
            assert 0.0 <= tau.phi < 2 * math.pi
            assert 0 <= tau.delta_t < 80

    def test_energy_never_exceeds_budget(self, rng):
        for _ in range(30):
            tau = random_params(rng, mu=3, epsilon=float(rng.uniform(0.1, 5.0)))
            out = apply_transform(perturbation(rng), tau)
            assert out.shape == (6, 64)
            assert signal_energy(out) <= tau.epsilon * (1 + 1e-9)

    def test_composition_order(self, rng):
        delta = perturbation(rng)
        tau = TransformParams(mu=2, zeta=5, epsilon=1.0, phi=0.4, delta_t=3)
        expected = rotate(power_normalize(symbol_shuffle(symbol_extend(delta, 2), 5), 1.0), 0.4, 3)
        assert_allclose(apply_transform(delta, tau), expected)

    def test_graph_matches_numpy(self, rng):
        delta = perturbation(rng)
        tau = TransformParams(mu=2, zeta=8, phi=2.0, delta_t=9)
        budgets = np.array([0.5, 1e6])
        out = ad.to_complex(transform_graph(Tensor(ad.to_pair(delta)), tau, budgets))
        for b, epsilon in enumerate(budgets):
            assert_allclose(out[b], apply_transform(delta, tau.with_epsilon(float(epsilon))), atol=1e-12)

    def test_graph_gradients(self, rng):
        tau = TransformParams(mu=2, zeta=3, phi=1.0, delta_t=4)
        graph = Graph(lambda d: transform_graph(d, tau, np.array([0.3, 1e6])) * np.arange(64.0)[:, None], ["d"])
        d = Tensor(ad.to_pair(perturbation(rng)), requires_grad=True)
        assert finite_diff_check(graph, {"d": d}) < 1e-5
