"""Small layer library on top of the tensor engine."""

from collections.abc import Mapping

import numpy as np

from shared import autodiff as ad
from shared.autodiff import Tensor
from shared.errors import ShapeError


class Module:
    """Parameter container. Parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                key = f"{prefix}{attr}"
                value.name = key
                params[key] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{prefix}{attr}."))
            elif isinstance(value, list | tuple):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{prefix}{attr}.{index}."))
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {key: param.data.copy() for key, param in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for key, param in params.items():
            value = np.asarray(state[key], dtype=np.float64)
            if value.shape != param.shape:
                raise ShapeError(f"parameter '{key}' has shape {param.shape}, state has {value.shape}")
            param.data[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, scale: float | None = None):
        scale = np.sqrt(2.0 / in_features) if scale is None else scale
        self.weight = _param(rng.standard_normal((in_features, out_features)) * scale)
        self.bias = _param(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        kernel: int = 3,
        stride: int = 1,
        padding: str = "same",
    ):
        fan_in = in_channels * kernel * kernel
        self.weight = _param(rng.standard_normal((out_channels, in_channels, kernel, kernel)) * np.sqrt(2.0 / fan_in))
        self.bias = _param(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        self.weight = _param(rng.standard_normal((num_embeddings, dim)) / np.sqrt(dim))

    def forward(self, ids: np.ndarray) -> Tensor:
        return ad.take(self.weight, np.asarray(ids, dtype=np.int64), axis=0)


class SelfAttention(Module):
    """Single-head self-attention with a residual connection over (batch, length, dim)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.query = Linear(dim, dim, rng, scale=1.0 / np.sqrt(dim))
        self.key = Linear(dim, dim, rng, scale=1.0 / np.sqrt(dim))
        self.value = Linear(dim, dim, rng, scale=1.0 / np.sqrt(dim))
        self.proj = Linear(dim, dim, rng, scale=1.0 / np.sqrt(dim))
        self.dim = dim

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = self.query(x), self.key(x), self.value(x)
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(self.dim))
        attended = ad.matmul(ad.softmax(scores, axis=-1), v)
        return x + self.proj(attended)


class ResidualBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, rng)
        self.conv2 = Conv2d(channels, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(x + self.conv2(ad.relu(self.conv1(x))))


class Mlp(Module):
    """ReLU MLP; ``widths`` lists hidden widths, the last layer is linear."""

    def __init__(self, in_features: int, widths: list[int], out_features: int, rng: np.random.Generator):
        sizes = [in_features, *widths]
        self.hidden = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:], strict=True)]
        self.head = Linear(sizes[-1], out_features, rng)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.hidden:
            x = ad.relu(layer(x))
        return self.head(x)
