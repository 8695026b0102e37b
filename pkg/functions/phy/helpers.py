"""
OFDM physical layer: constellation mapping, (de)modulation with cyclic prefix,
multipath channel sampling and application, LS estimation, zero-forcing equalisation
and PSR measurement.

Grids are complex arrays of shape (..., N_s, n_fft); leading axes are batch axes and
every operation broadcasts over them.
"""

from dataclasses import dataclass, field
from functools import cache
import logging
import math

import numpy as np
from scipy.signal import lfilter

from shared.errors import PhyError


logger = logging.getLogger(__name__)

SymbolGrid = np.ndarray
TimeSignal = np.ndarray

SCHEMES = ("QPSK", "16QAM", "64QAM")
_ORDERS = {"QPSK": 4, "16QAM": 16, "64QAM": 64}

# 802.11a long training field on subcarriers -26..26
_LTF = np.array(
    [1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 0,
     1, -1, -1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, -1, 1, 1, -1, -1, 1, -1, 1, -1, 1, 1, 1, 1],
    dtype=np.complex128,
)  # fmt: skip


def _default_pilots() -> tuple[int, ...]:
    return (7, 21, 43, 57)


def _default_data() -> tuple[int, ...]:
    used = [k % 64 for k in range(-26, 27) if k != 0]
    return tuple(sorted(k for k in used if k not in _default_pilots()))


def _default_preamble() -> np.ndarray:
    preamble = np.zeros(64, dtype=np.complex128)
    for offset, value in enumerate(_LTF):
        preamble[(offset - 26) % 64] = value
    return preamble


@dataclass(frozen=True)
class OfdmConfig:
    n_fft: int = 64
    cp_len: int = 16
    data_subcarriers: tuple[int, ...] = field(default_factory=_default_data)
    pilot_subcarriers: tuple[int, ...] = field(default_factory=_default_pilots)
    preamble: np.ndarray = field(default_factory=_default_preamble, compare=False)

    def __post_init__(self):
        data, pilots = set(self.data_subcarriers), set(self.pilot_subcarriers)
        if data & pilots:
            raise PhyError(f"data and pilot subcarriers overlap: {sorted(data & pilots)}")
        if any(k < 0 or k >= self.n_fft for k in data | pilots):
            raise PhyError("subcarrier index outside [0, n_fft)")
        if self.preamble.shape != (self.n_fft,):
            raise PhyError(f"preamble must have {self.n_fft} entries")
        if not 0 <= self.cp_len < self.n_fft:
            raise PhyError(f"cyclic prefix length {self.cp_len} invalid for n_fft={self.n_fft}")

    @property
    def null_subcarriers(self) -> tuple[int, ...]:
        used = set(self.data_subcarriers) | set(self.pilot_subcarriers)
        return tuple(k for k in range(self.n_fft) if k not in used)

    @property
    def estimated_subcarriers(self) -> tuple[int, ...]:
        return tuple(sorted(self.data_subcarriers + self.pilot_subcarriers))

    @property
    def n_data(self) -> int:
        return len(self.data_subcarriers)

    @property
    def symbol_len(self) -> int:
        return self.n_fft + self.cp_len


@dataclass(frozen=True)
class ChannelRealization:
    taps: np.ndarray
    freq_response: np.ndarray
    noise_variance: float = 0.0

    @classmethod
    def from_taps(cls, taps: np.ndarray, n_fft: int = 64, noise_variance: float = 0.0) -> "ChannelRealization":
        taps = np.asarray(taps, dtype=np.complex128)
        return cls(taps=taps, freq_response=np.fft.fft(taps, n_fft), noise_variance=noise_variance)

    @classmethod
    def flat(cls, gain: complex = 1.0, n_fft: int = 64, noise_variance: float = 0.0) -> "ChannelRealization":
        return cls.from_taps(np.array([gain]), n_fft, noise_variance)


# ---------------------------------------------------------------------------
# Constellations
# ---------------------------------------------------------------------------


@cache
def constellation_points(scheme: str) -> np.ndarray:
    """Square QAM points with unit average power, indexed row-major over ascending (I, Q)."""
    if scheme not in _ORDERS:
        raise PhyError(f"unknown constellation '{scheme}', expected one of {SCHEMES}")
    side = int(math.isqrt(_ORDERS[scheme]))
    levels = 2.0 * np.arange(side) - side + 1
    i_rep, q_rep = np.meshgrid(levels, levels, indexing="ij")
    points = (i_rep + 1j * q_rep).reshape(-1)
    points = points / np.sqrt(np.mean(np.abs(points) ** 2))
    points.setflags(write=False)
    return points


def nearest_point_indices(symbols: np.ndarray, scheme: str) -> np.ndarray:
    """Index of the nearest constellation point per entry; ties go to the lowest index."""
    points = constellation_points(scheme)
    symbols = np.asarray(symbols, dtype=np.complex128)
    distances = np.abs(symbols[..., None] - points) ** 2
    return np.argmin(distances, axis=-1)


def map_constellation(grid: SymbolGrid, scheme: str) -> SymbolGrid:
    return constellation_points(scheme)[nearest_point_indices(grid, scheme)]


def map_constellation_pairs(pairs: np.ndarray, scheme: str) -> np.ndarray:
    """``map_constellation`` for real (..., 2) arrays; used by the straight-through primitive."""
    mapped = map_constellation(pairs[..., 0] + 1j * pairs[..., 1], scheme)
    return np.stack([mapped.real, mapped.imag], axis=-1)


# ---------------------------------------------------------------------------
# OFDM modulation
# ---------------------------------------------------------------------------


def ofdm_modulate(grid: SymbolGrid, cfg: OfdmConfig) -> TimeSignal:
    grid = np.asarray(grid, dtype=np.complex128)
    if grid.ndim < 2 or grid.shape[-1] != cfg.n_fft:
        raise PhyError(f"grid has {grid.shape[-1] if grid.ndim else 0} columns, expected n_fft={cfg.n_fft}")
    payload = np.fft.ifft(grid, axis=-1, norm="ortho")
    with_cp = np.concatenate([payload[..., cfg.n_fft - cfg.cp_len :], payload], axis=-1)
    return with_cp.reshape(*grid.shape[:-2], -1)


def ofdm_demodulate(signal: TimeSignal, cfg: OfdmConfig) -> SymbolGrid:
    signal = np.asarray(signal, dtype=np.complex128)
    if signal.shape[-1] % cfg.symbol_len:
        raise PhyError(f"signal length {signal.shape[-1]} is not a multiple of {cfg.symbol_len}")
    symbols = signal.reshape(*signal.shape[:-1], -1, cfg.symbol_len)[..., cfg.cp_len :]
    return np.fft.fft(symbols, axis=-1, norm="ortho")


def payload_samples(signal: TimeSignal, cfg: OfdmConfig) -> TimeSignal:
    """Time signal with every cyclic prefix removed."""
    signal = np.asarray(signal, dtype=np.complex128)
    if signal.shape[-1] % cfg.symbol_len:
        raise PhyError(f"signal length {signal.shape[-1]} is not a multiple of {cfg.symbol_len}")
    symbols = signal.reshape(*signal.shape[:-1], -1, cfg.symbol_len)[..., cfg.cp_len :]
    return symbols.reshape(*signal.shape[:-1], -1)


def rows_for_symbols(n_symbols: int, cfg: OfdmConfig) -> int:
    return max(1, -(-n_symbols // cfg.n_data))


def allocate_symbols(symbols: np.ndarray, cfg: OfdmConfig, n_rows: int | None = None) -> SymbolGrid:
    """Place a symbol stream on the data subcarriers (zero padded); pilots carry 1+0j, nulls 0."""
    symbols = np.asarray(symbols, dtype=np.complex128)
    n_rows = rows_for_symbols(symbols.shape[-1], cfg) if n_rows is None else n_rows
    capacity = n_rows * cfg.n_data
    if symbols.shape[-1] > capacity:
        raise PhyError(f"{symbols.shape[-1]} symbols do not fit in {n_rows} OFDM symbols")
    padded = np.zeros((*symbols.shape[:-1], capacity), dtype=np.complex128)
    padded[..., : symbols.shape[-1]] = symbols
    grid = np.zeros((*symbols.shape[:-1], n_rows, cfg.n_fft), dtype=np.complex128)
    grid[..., list(cfg.data_subcarriers)] = padded.reshape(*symbols.shape[:-1], n_rows, cfg.n_data)
    grid[..., list(cfg.pilot_subcarriers)] = 1.0
    return grid


def extract_symbols(grid: SymbolGrid, cfg: OfdmConfig, n_symbols: int) -> np.ndarray:
    data = np.asarray(grid)[..., list(cfg.data_subcarriers)]
    return data.reshape(*data.shape[:-2], -1)[..., :n_symbols]


def map_data_subcarriers(grid: SymbolGrid, scheme: str, cfg: OfdmConfig) -> SymbolGrid:
    """``map_constellation`` restricted to data subcarriers; pilots and nulls pass through."""
    out = np.array(grid, dtype=np.complex128)
    idx = list(cfg.data_subcarriers)
    out[..., idx] = map_constellation(out[..., idx], scheme)
    return out


def with_preamble(grid: SymbolGrid, cfg: OfdmConfig) -> SymbolGrid:
    grid = np.asarray(grid, dtype=np.complex128)
    preamble = np.broadcast_to(cfg.preamble, (*grid.shape[:-2], 1, cfg.n_fft))
    return np.concatenate([preamble, grid], axis=-2)


# ---------------------------------------------------------------------------
# Channel
# ---------------------------------------------------------------------------


def complex_gaussian(rng: np.random.Generator, shape: tuple[int, ...], variance: float | np.ndarray) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples, E|w|^2 = variance."""
    scale = np.sqrt(np.asarray(variance, dtype=np.float64) / 2.0)
    real = rng.standard_normal(shape)
    imag = rng.standard_normal(shape)
    return scale * (real + 1j * imag)


def noise_variance_from_snr(snr_db: float, signal_power: float = 1.0) -> float:
    return signal_power * 10.0 ** (-snr_db / 10.0)


def power_delay_profile(n_taps: int, decay: float = 0.5) -> np.ndarray:
    if n_taps < 1:
        raise PhyError(f"tap count must be at least 1, got {n_taps}")
    profile = decay ** np.arange(n_taps, dtype=np.float64)
    return profile / profile.sum()


def sample_channel(
    rng: np.random.Generator,
    n_taps: int = 8,
    decay: float = 0.5,
    noise_variance: float = 0.0,
    n_fft: int = 64,
) -> ChannelRealization:
    """Rayleigh multipath taps with an exponentially decaying profile summing to 1 in expectation."""
    profile = power_delay_profile(n_taps, decay)
    taps = complex_gaussian(rng, (n_taps,), profile)
    return ChannelRealization.from_taps(taps, n_fft, noise_variance)


def apply_channel(grid: SymbolGrid, channel: ChannelRealization, rng: np.random.Generator | None = None) -> SymbolGrid:
    """Y_hat[i, k] = H[k] Y[i, k] + W[i, k]."""
    grid = np.asarray(grid, dtype=np.complex128)
    if grid.shape[-1] != channel.freq_response.shape[-1]:
        raise PhyError(f"grid width {grid.shape[-1]} does not match channel response {channel.freq_response.shape[-1]}")
    received = channel.freq_response * grid
    if channel.noise_variance > 0:
        if rng is None:
            raise PhyError("a random stream is required for a noisy channel")
        received = received + complex_gaussian(rng, grid.shape, channel.noise_variance)
    return received


def apply_channel_time(signal: TimeSignal, channel: ChannelRealization, rng: np.random.Generator | None = None) -> TimeSignal:
    """Linear convolution with the taps (truncated to the input length) plus AWGN."""
    received = lfilter(channel.taps, [1.0], np.asarray(signal, dtype=np.complex128), axis=-1)
    if channel.noise_variance > 0:
        if rng is None:
            raise PhyError("a random stream is required for a noisy channel")
        received = received + complex_gaussian(rng, received.shape, channel.noise_variance)
    return received


# ---------------------------------------------------------------------------
# Receiver
# ---------------------------------------------------------------------------


def ls_estimate(rx_preamble: np.ndarray, cfg: OfdmConfig) -> np.ndarray:
    """Least-squares response on data and pilot subcarriers; null subcarriers stay 0."""
    rx_preamble = np.asarray(rx_preamble, dtype=np.complex128)
    if rx_preamble.shape[-1] != cfg.n_fft:
        raise PhyError(f"preamble row has {rx_preamble.shape[-1]} entries, expected {cfg.n_fft}")
    idx = list(cfg.estimated_subcarriers)
    if np.any(cfg.preamble[idx] == 0):
        raise PhyError("preamble has a zero entry on an estimated subcarrier")
    estimate = np.zeros_like(rx_preamble)
    estimate[..., idx] = rx_preamble[..., idx] / cfg.preamble[idx]
    return estimate


def deep_fade_mask(h_est: np.ndarray, cfg: OfdmConfig, floor: float = 1e-8) -> np.ndarray:
    """Boolean mask over data subcarriers whose estimate is below ``floor`` in magnitude."""
    return np.abs(np.asarray(h_est)[..., list(cfg.data_subcarriers)]) <= floor


def equalizer_taps(h_est: np.ndarray, cfg: OfdmConfig, floor: float = 1e-8) -> np.ndarray:
    """1/H_hat on data subcarriers, 0 on deep fades."""
    h_data = np.asarray(h_est, dtype=np.complex128)[..., list(cfg.data_subcarriers)]
    faded = np.abs(h_data) <= floor
    return np.where(faded, 0.0, 1.0 / np.where(faded, 1.0, h_data))


def equalize(received: SymbolGrid, h_est: np.ndarray, cfg: OfdmConfig, floor: float = 1e-8) -> SymbolGrid:
    """Zero-forcing division on data subcarriers; deep-fade subcarriers are zeroed and logged."""
    received = np.asarray(received, dtype=np.complex128)
    faded = deep_fade_mask(h_est, cfg, floor)
    if np.any(faded):
        subcarriers = np.asarray(cfg.data_subcarriers)[np.any(faded.reshape(-1, cfg.n_data), axis=0)]
        logger.warning(f"Deep fade on subcarrier(s) {subcarriers.tolist()}; entries zeroed")
    taps = equalizer_taps(h_est, cfg, floor)
    out = received.copy()
    idx = list(cfg.data_subcarriers)
    out[..., idx] = received[..., idx] * taps[..., None, :]
    return out


def signal_energy(signal: np.ndarray) -> float:
    return float(np.sum(np.abs(np.asarray(signal)) ** 2))


def measure_psr(victim: TimeSignal, perturbation: TimeSignal) -> float:
    """Perturbation-to-signal ratio in dB."""
    victim_power = signal_energy(victim)
    if victim_power <= 0:
        raise PhyError("victim signal has zero power")
    perturbation_power = signal_energy(perturbation)
    if perturbation_power == 0:
        return float("-inf")
    return 10.0 * math.log10(perturbation_power / victim_power)
