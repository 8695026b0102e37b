"""
The attacker's transformation function: symbol extension, subcarrier shuffling, power
remapping and time/frequency rotation, applied in that order.

numpy versions act on complex (rows, n_fft) grids; ``transform_graph`` is the
differentiable counterpart used while training generators.
"""

from dataclasses import dataclass, replace
from functools import lru_cache
import math

import numpy as np

from functions.phy.helpers import OfdmConfig, signal_energy
from shared import autodiff as ad
from shared.autodiff import Tensor
from shared.errors import AttackError


@dataclass(frozen=True)
class TransformParams:
    """mu: extension factor, zeta: shuffle seed (None = identity), epsilon: power budget, phi: phase, delta_t: sample offset."""

    mu: int = 3
    zeta: int | None = None
    epsilon: float = math.inf
    phi: float = 0.0
    delta_t: int = 0

    def __post_init__(self):
        if self.mu < 1:
            raise AttackError(f"extension factor must be >= 1, got {self.mu}")
        if not self.epsilon > 0:
            raise AttackError(f"power budget must be positive, got {self.epsilon}")
        if not 0.0 <= self.phi < 2 * math.pi:
            raise AttackError(f"phase offset {self.phi} outside [0, 2pi)")

    def with_epsilon(self, epsilon: float) -> "TransformParams":
        return replace(self, epsilon=epsilon)

    def with_offsets(self, phi: float, delta_t: int) -> "TransformParams":
        return replace(self, phi=phi, delta_t=delta_t)


def random_params(rng: np.random.Generator, mu: int, cfg: OfdmConfig = OfdmConfig(), epsilon: float = math.inf) -> TransformParams:
    """tau drawn uniformly: fresh shuffle seed, phi in [0, 2pi), integer delta_t in [0, n_fft + cp_len)."""
    return TransformParams(
        mu=mu,
        zeta=int(rng.integers(0, 2**63 - 1)),
        epsilon=epsilon,
        phi=float(rng.uniform(0.0, 2 * math.pi)),
        delta_t=int(rng.integers(0, cfg.n_fft + cfg.cp_len)),
    )


@lru_cache(maxsize=4096)
def shuffle_permutation(zeta: int | None, n: int) -> np.ndarray:
    """Seeded Fisher-Yates permutation of range(n); ``None`` gives the identity."""
    perm = np.arange(n)
    if zeta is not None:
        rng = np.random.Generator(np.random.PCG64(zeta))
        for i in range(n - 1, 0, -1):
            j = int(rng.integers(0, i + 1))
            perm[i], perm[j] = perm[j], perm[i]
    perm.setflags(write=False)
    return perm


def symbol_extend(delta: np.ndarray, mu: int) -> np.ndarray:
    if mu < 1:
        raise AttackError(f"extension factor must be >= 1, got {mu}")
    return np.concatenate([np.asarray(delta)] * mu, axis=-2)


def symbol_shuffle(grid: np.ndarray, zeta: int | None) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.size == 0:
        raise AttackError("cannot shuffle an empty grid")
    return grid[..., shuffle_permutation(zeta, grid.shape[-1])]


def symbol_unshuffle(grid: np.ndarray, zeta: int | None) -> np.ndarray:
    grid = np.asarray(grid)
    return grid[..., np.argsort(shuffle_permutation(zeta, grid.shape[-1]))]


def rotation_factors(phi: float, delta_t: int, n_fft: int) -> np.ndarray:
    k = np.arange(n_fft)
    return np.exp(1j * phi) * np.exp(-2j * np.pi * k * delta_t / n_fft)


def rotate(grid: np.ndarray, phi: float, delta_t: int) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.complex128)
    return grid * rotation_factors(phi, delta_t, grid.shape[-1])


def psr_to_epsilon(victim: np.ndarray, psr_db: float) -> float:
    """epsilon = ||victim||^2 * 10^(PSR/10)."""
    energy = signal_energy(victim)
    if energy <= 0:
        raise AttackError("victim signal has zero power")
    return energy * 10.0 ** (psr_db / 10.0)


def power_normalize(grid: np.ndarray, epsilon: float) -> np.ndarray:
    """Rescale onto the sphere of squared norm ``epsilon`` when above budget; unchanged otherwise."""
    if not epsilon > 0:
        raise AttackError(f"power budget must be positive, got {epsilon}")
    grid = np.asarray(grid, dtype=np.complex128)
    energy = signal_energy(grid)
    if energy > epsilon:
        return grid * (math.sqrt(epsilon) / math.sqrt(energy))
    return grid


def apply_transform(delta: np.ndarray, tau: TransformParams) -> np.ndarray:
    extended = symbol_extend(delta, tau.mu)
    shuffled = symbol_shuffle(extended, tau.zeta)
    scaled = power_normalize(shuffled, tau.epsilon)
    return rotate(scaled, tau.phi, tau.delta_t)


def scale_to_budget(grid: np.ndarray, epsilon: float) -> np.ndarray:
    """Scale to squared norm exactly ``epsilon`` (random-noise baseline)."""
    energy = signal_energy(grid)
    if energy == 0:
        raise AttackError("cannot scale a zero grid to a power budget")
    return np.asarray(grid, dtype=np.complex128) * math.sqrt(epsilon / energy)


# ---------------------------------------------------------------------------
# Graph form
# ---------------------------------------------------------------------------


def transform_graph(delta: Tensor, tau: TransformParams, epsilon: np.ndarray) -> Tensor:
    """
    Differentiable transform of one generator output ``delta`` (N_g, n_fft, 2) for a
    batch of victims with per-victim budgets ``epsilon`` (B,). Returns (B, mu*N_g, n_fft, 2).
    ``tau.epsilon`` is ignored in favour of ``epsilon``.
    """
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if np.any(epsilon <= 0):
        raise AttackError("power budgets must be positive")
    extended = ad.concat([delta] * tau.mu, axis=0) if tau.mu > 1 else delta
    shuffled = ad.take(extended, shuffle_permutation(tau.zeta, delta.shape[1]), axis=1)
    energy = ad.tsum(shuffled * shuffled)
    over = (energy.data > epsilon).astype(np.float64)
    # over budget: sqrt(eps) / ||gamma||; under budget: 1
    factor = ad.pow_scalar(energy + 1e-300, -0.5) * np.sqrt(epsilon) * over + (1.0 - over)
    scaled = ad.reshape(shuffled, (1, *shuffled.shape)) * ad.reshape(factor, (-1, 1, 1, 1))
    rotation = ad.to_pair(rotation_factors(tau.phi, tau.delta_t, delta.shape[1]))
    return ad.complex_mul(scaled, rotation)


def received_interference(transformed: Tensor, h_a: np.ndarray, n_rows: int, cfg: OfdmConfig = OfdmConfig()) -> Tensor:
    """H_a P(delta) on the data subcarriers of the first ``n_rows`` rows, as (B, n_rows, 48, 2)."""
    if transformed.shape[1] < n_rows:
        raise AttackError(f"perturbation has {transformed.shape[1]} rows, victim needs {n_rows}")
    rows = ad.getitem(transformed, (slice(None), slice(0, n_rows)))
    data = ad.take(rows, list(cfg.data_subcarriers), axis=2)
    h_pairs = ad.to_pair(np.asarray(h_a)[..., list(cfg.data_subcarriers)])
    return ad.complex_mul(data, h_pairs.reshape(-1, 1, cfg.n_data, 2) if h_pairs.ndim == 3 else h_pairs)
