import numpy as np
from numpy.testing import assert_allclose
import pytest

from functions.phy.helpers import (
    SCHEMES,
    ChannelRealization,
    OfdmConfig,
    allocate_symbols,
    apply_channel,
    apply_channel_time,
    complex_gaussian,
    constellation_points,
    equalize,
    extract_symbols,
    ls_estimate,
    map_constellation,
    map_data_subcarriers,
    measure_psr,
    noise_variance_from_snr,
    ofdm_demodulate,
    ofdm_modulate,
    payload_samples,
    power_delay_profile,
    rows_for_symbols,
    sample_channel,
    signal_energy,
    with_preamble,
)
from shared.errors import PhyError


def random_grid(rng, rows: int, n_fft: int = 64) -> np.ndarray:
    return complex_gaussian(rng, (rows, n_fft), 1.0)


class TestOfdmConfig:
    def test_default_layout(self, cfg):
        assert cfg.n_data == 48
        assert len(cfg.pilot_subcarriers) == 4
        assert len(cfg.null_subcarriers) == 12
        assert 0 in cfg.null_subcarriers
        assert cfg.symbol_len == 80

    def test_overlapping_pilots_rejected(self):
        with pytest.raises(PhyError):
            OfdmConfig(pilot_subcarriers=(1, 7, 21, 43))

    def test_cp_longer_than_symbol_rejected(self):
        with pytest.raises(PhyError):
            OfdmConfig(cp_len=64)


class TestConstellations:
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_unit_average_power(self, scheme):
        points = constellation_points(scheme)
        assert_allclose(np.mean(np.abs(points) ** 2), 1.0, atol=1e-12)

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_points_are_fixed_points(self, scheme):
        points = constellation_points(scheme)
        assert_allclose(map_constellation(points, scheme), points)

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_mapping_is_idempotent(self, scheme, rng):
        grid = random_grid(rng, 3)
        once = map_constellation(grid, scheme)
        assert_allclose(map_constellation(once, scheme), once)

    def test_qpsk_quadrants(self):
        mapped = map_constellation(np.array([0.9 + 0.2j, -0.1 - 3j]), "QPSK")
        s = 1 / np.sqrt(2)
        assert_allclose(mapped, [s + 1j * s, -s - 1j * s])

    def test_tie_goes_to_lowest_index(self):
        # 0 is equidistant from all four QPSK points
        assert map_constellation(np.array([0j]), "QPSK")[0] == constellation_points("QPSK")[0]

    def test_unknown_scheme(self):
        with pytest.raises(PhyError):
            constellation_points("8PSK")

    def test_data_only_mapping_leaves_pilots(self, cfg, rng):
        grid = random_grid(rng, 2)
        mapped = map_data_subcarriers(grid, "16QAM", cfg)
        pilots = list(cfg.pilot_subcarriers)
        assert_allclose(mapped[:, pilots], grid[:, pilots])


class TestModulation:
    def test_round_trip(self, cfg, rng):
        for _ in range(50):
            grid = random_grid(rng, int(rng.integers(1, 6)))
            assert_allclose(ofdm_demodulate(ofdm_modulate(grid, cfg), cfg), grid, atol=1e-9)

    def test_batch_round_trip(self, cfg, rng):
        grid = complex_gaussian(rng, (4, 3, 64), 1.0)
        signal = ofdm_modulate(grid, cfg)
        assert signal.shape == (4, 3 * cfg.symbol_len)
        assert_allclose(ofdm_demodulate(signal, cfg), grid, atol=1e-9)

    def test_cyclic_prefix_copies_tail(self, cfg, rng):
        signal = ofdm_modulate(random_grid(rng, 1), cfg)
        assert_allclose(signal[: cfg.cp_len], signal[-cfg.cp_len :])

    def test_parseval_on_payload(self, cfg, rng):
        grid = random_grid(rng, 4)
        payload = payload_samples(ofdm_modulate(grid, cfg), cfg)
        assert signal_energy(payload) == pytest.approx(signal_energy(grid), rel=1e-9)

    def test_wrong_width(self, cfg):
        with pytest.raises(PhyError):
            ofdm_modulate(np.zeros((2, 32)), cfg)

    def test_ragged_signal(self, cfg):
        with pytest.raises(PhyError):
            ofdm_demodulate(np.zeros(81), cfg)


class TestAllocation:
    def test_round_trip_with_padding(self, cfg, rng):
        symbols = complex_gaussian(rng, (100,), 1.0)
        grid = allocate_symbols(symbols, cfg)
        assert grid.shape == (rows_for_symbols(100, cfg), 64) == (3, 64)
        assert_allclose(extract_symbols(grid, cfg, 100), symbols)
        assert_allclose(grid[:, list(cfg.pilot_subcarriers)], 1.0)
        assert_allclose(grid[:, list(cfg.null_subcarriers)], 0.0)

    def test_overflow(self, cfg):
        with pytest.raises(PhyError):
            allocate_symbols(np.ones(97), cfg, n_rows=2)


class TestChannel:
    def test_profile_normalised(self):
        profile = power_delay_profile(8, 0.5)
        assert profile.sum() == pytest.approx(1.0)
        assert np.all(np.diff(profile) < 0)

    def test_flat_profile(self):
        assert_allclose(power_delay_profile(4, 1.0), 0.25)

    def test_noise_variance_from_snr(self):
        assert noise_variance_from_snr(10.0) == pytest.approx(0.1)
        assert noise_variance_from_snr(0.0) == pytest.approx(1.0)

    def test_sample_channel_is_seeded(self):
        a = sample_channel(np.random.default_rng(5))
        b = sample_channel(np.random.default_rng(5))
        assert_allclose(a.taps, b.taps)
        assert a.freq_response.shape == (64,)

    def test_unit_gain_is_identity(self, rng):
        grid = random_grid(rng, 3)
        assert_allclose(apply_channel(grid, ChannelRealization.flat()), grid)

    def test_noisy_channel_needs_stream(self, rng):
        with pytest.raises(PhyError):
            apply_channel(random_grid(rng, 1), ChannelRealization.flat(noise_variance=0.1))

    def test_time_domain_matches_frequency_model(self, cfg, rng):
        # CP removal turns linear convolution into per-subcarrier multiplication
        for _ in range(20):
            channel = sample_channel(rng, n_taps=8)
            grid = random_grid(rng, 3)
            through_time = ofdm_demodulate(apply_channel_time(ofdm_modulate(grid, cfg), channel), cfg)
            assert_allclose(through_time, apply_channel(grid, channel), atol=1e-9)


class TestReceiver:
    def test_noiseless_estimation_is_exact(self, cfg, rng):
        for _ in range(50):
            channel = sample_channel(rng)
            rx = apply_channel(cfg.preamble[None], channel)[0]
            estimate = ls_estimate(rx, cfg)
            idx = list(cfg.estimated_subcarriers)
            assert_allclose(estimate[idx], channel.freq_response[idx], atol=1e-9)
            assert_allclose(estimate[list(cfg.null_subcarriers)], 0.0)

    def test_noiseless_equalisation_recovers_data(self, cfg, rng):
        for _ in range(50):
            channel = sample_channel(rng)
            grid = with_preamble(random_grid(rng, 2), cfg)
            rx = apply_channel(grid, channel)
            equalized = equalize(rx[1:], ls_estimate(rx[0], cfg), cfg)
            data = list(cfg.data_subcarriers)
            assert_allclose(equalized[:, data], grid[1:, data], atol=1e-9)

    def test_deep_fade_zeroed(self, cfg, rng):
        h = np.ones(64, dtype=np.complex128)
        h[cfg.data_subcarriers[0]] = 0.0
        out = equalize(random_grid(rng, 2), h, cfg)
        assert_allclose(out[:, cfg.data_subcarriers[0]], 0.0)


class TestPsr:
    def test_known_ratio(self):
        victim = np.ones(100)
        assert measure_psr(victim, 0.1 * np.ones(100)) == pytest.approx(-20.0)

    def test_zero_perturbation(self):
        assert measure_psr(np.ones(10), np.zeros(10)) == float("-inf")

    def test_silent_victim(self):
        with pytest.raises(PhyError):
            measure_psr(np.zeros(10), np.ones(10))
