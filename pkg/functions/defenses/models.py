"""Perturbation detector network."""

import numpy as np

from shared import autodiff as ad
from shared.autodiff import Tensor
from shared.errors import ShapeError
from shared.nn import Mlp, Module


class DetectorModel(Module):
    """
    Binary classifier over constellation-mapped equalised data subcarriers of one
    codec's payload grid, flattened. Scores are clamped into (0, 1); a score at or
    above ``threshold`` flags the transmission as perturbed.
    """

    def __init__(self, rng: np.random.Generator, n_rows: int, n_data: int = 48, hidden: tuple[int, ...] = (64, 32), threshold: float = 0.5):
        if not 0.0 <= threshold <= 1.0:
            raise ShapeError(f"detector threshold {threshold} outside [0, 1]")
        self.n_rows = n_rows
        self.n_data = n_data
        self.hidden = tuple(hidden)
        self.threshold = threshold
        self.mlp = Mlp(2 * n_rows * n_data, list(hidden), 1, rng)

    def descriptor(self) -> dict:
        return {"n_rows": self.n_rows, "n_data": self.n_data, "hidden": list(self.hidden), "threshold": self.threshold}

    @classmethod
    def from_descriptor(cls, descriptor: dict) -> "DetectorModel":
        return cls(np.random.default_rng(0), descriptor["n_rows"], descriptor["n_data"], tuple(descriptor["hidden"]), descriptor["threshold"])

    def forward(self, grids) -> Tensor:
        """(B, N_s, n_data, 2) pairs -> (B,) probabilities of 'perturbed'."""
        grids = ad.as_tensor(grids)
        if grids.shape[1:] != (self.n_rows, self.n_data, 2):
            raise ShapeError(f"detector expects (B, {self.n_rows}, {self.n_data}, 2), got {grids.shape}")
        logits = self.mlp(ad.reshape(grids, (grids.shape[0], -1)))
        return ad.clip(ad.sigmoid(ad.reshape(logits, (grids.shape[0],))), 1e-7, 1.0 - 1e-7)
