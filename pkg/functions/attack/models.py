"""Perturbation generator and discriminator networks."""

import numpy as np

from shared import autodiff as ad
from shared.autodiff import Tensor
from shared.errors import AttackError, NonFiniteError
from shared.nn import Conv2d, Linear, Mlp, Module, ResidualBlock


class Pgm(Module):
    """Residual conv generator: latent z -> (N_g, n_fft) complex grid as (B, N_g, n_fft, 2)."""

    def __init__(self, rng: np.random.Generator, latent_dim: int = 128, n_rows: int = 4, n_fft: int = 64, channels: int = 8, blocks: int = 3):
        self.latent_dim = latent_dim
        self.n_rows = n_rows
        self.n_fft = n_fft
        self.channels = channels
        self.project = Linear(latent_dim, channels * n_rows * n_fft, rng, scale=np.sqrt(2.0 / latent_dim))
        self.blocks = [ResidualBlock(channels, rng) for _ in range(blocks)]
        self.head = Conv2d(channels, 2, rng)

    def descriptor(self) -> dict:
        return {"latent_dim": self.latent_dim, "n_rows": self.n_rows, "n_fft": self.n_fft, "channels": self.channels, "blocks": len(self.blocks)}

    def forward(self, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise AttackError(f"latent batch has shape {z.shape}, expected (B, {self.latent_dim})")
        h = ad.relu(self.project(z))
        h = ad.reshape(h, (z.shape[0], self.channels, self.n_rows, self.n_fft))
        for block in self.blocks:
            h = block(h)
        return ad.transpose(self.head(h), (0, 2, 3, 1))


def build_pgm(descriptor: dict, rng: np.random.Generator) -> Pgm:
    return Pgm(rng, descriptor["latent_dim"], descriptor["n_rows"], descriptor["n_fft"], descriptor["channels"], descriptor["blocks"])


def sample_latent(rng: np.random.Generator, latent_dim: int, batch: int = 1) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(batch, latent_dim))


def generate(pgm: Pgm, z: np.ndarray) -> np.ndarray:
    """delta = G(z) as a complex (N_g, n_fft) grid (or (B, N_g, n_fft) for a latent batch)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    with ad.no_grad():
        out = pgm(z[None] if single else z).data
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("generator produced a non-finite perturbation", op="pgm")
    grid = ad.to_complex(out)
    return grid[0] if single else grid


class Discriminator(Module):
    """Per-OFDM-symbol MLP over mapped equalised data subcarriers, averaged over symbols, then a sigmoid."""

    def __init__(self, rng: np.random.Generator, n_data: int = 48, hidden: tuple[int, ...] = (64,)):
        self.n_data = n_data
        self.hidden = tuple(hidden)
        self.mlp = Mlp(2 * n_data, list(hidden), 1, rng)

    def descriptor(self) -> dict:
        return {"n_data": self.n_data, "hidden": list(self.hidden)}

    def forward(self, grid: Tensor) -> Tensor:
        """(B, N_s, n_data, 2) -> (B,) probabilities."""
        grid = ad.as_tensor(grid)
        batch, rows = grid.shape[0], grid.shape[1]
        logits = self.mlp(ad.reshape(grid, (batch, rows, 2 * self.n_data)))
        return ad.sigmoid(ad.mean(ad.reshape(logits, (batch, rows)), axis=1))
