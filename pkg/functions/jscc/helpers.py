"""
JSCC link: encode/decode over OFDM grids, the differentiable channel used for training
and attack optimisation, reconstruction losses and end-to-end codec training.

Two renditions of the same link exist. The numpy one (``transmit`` / ``receive``)
works on full complex grids and is what evaluation uses. The graph one
(``forward_link``) works on data-subcarrier pairs, quantises with a straight-through
estimator and is what the optimisers differentiate.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from datetime import datetime
import logging
import math

import numpy as np
import pytz

from functions.jscc.models import (
    MODALITIES,
    CodecArch,
    CodecKey,
    GopBuffer,
    JsccCodec,
    TextVocab,
    sequential_structure,
    speech_frame,
    template_arch,
    text_greedy_decode,
)
from functions.metrics.helpers import bleu, mse_metric, psnr
from functions.phy.helpers import (
    ChannelRealization,
    OfdmConfig,
    SymbolGrid,
    allocate_symbols,
    apply_channel,
    complex_gaussian,
    equalize,
    equalizer_taps,
    extract_symbols,
    ls_estimate,
    map_constellation_pairs,
    map_data_subcarriers,
    noise_variance_from_snr,
    sample_channel,
)
from shared import autodiff as ad
from shared.autodiff import Tensor
from shared.errors import CodecError, DatasetError, DivergenceError
from shared.optim import Adam
from shared.rng import stream


logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Channel draws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelSettings:
    n_taps: int = 8
    decay: float = 0.5
    snr_db: float = 10.0

    @property
    def noise_variance(self) -> float:
        return noise_variance_from_snr(self.snr_db)


@dataclass(frozen=True)
class LinkDraw:
    """One transmission's randomness for a batch: H_t, payload noise W and the receiver's LS estimate."""

    channel: ChannelRealization  # taps (B, 1, L), freq_response (B, 1, n_fft)
    noise: np.ndarray  # (B, N_s, n_fft)
    h_est: np.ndarray  # (B, n_fft)

    @property
    def batch(self) -> int:
        return self.noise.shape[0]

    @property
    def n_rows(self) -> int:
        return self.noise.shape[1]


def sample_channels(rng: np.random.Generator, batch: int, settings: ChannelSettings, n_fft: int = 64) -> ChannelRealization:
    """One independent realization per batch entry, stacked so it broadcasts over (B, N_s, n_fft) grids."""
    taps = np.stack([sample_channel(rng, settings.n_taps, settings.decay, n_fft=n_fft).taps for _ in range(batch)])
    return ChannelRealization.from_taps(taps[:, None, :], n_fft, settings.noise_variance)


def draw_link(
    rng: np.random.Generator,
    batch: int,
    n_rows: int,
    settings: ChannelSettings,
    cfg: OfdmConfig = OfdmConfig(),
    taps: np.ndarray | None = None,
) -> LinkDraw:
    """Fresh H_t per batch entry, or the given ``taps`` shared by the whole batch."""
    if taps is None:
        channel = sample_channels(rng, batch, settings, cfg.n_fft)
    else:
        shared = np.broadcast_to(np.asarray(taps, dtype=np.complex128), (batch, 1, len(taps)))
        channel = ChannelRealization.from_taps(shared, cfg.n_fft, settings.noise_variance)
    preamble = np.broadcast_to(cfg.preamble, (batch, 1, cfg.n_fft))
    rx_preamble = apply_channel(preamble, channel, rng)[:, 0]
    noise = complex_gaussian(rng, (batch, n_rows, cfg.n_fft), channel.noise_variance)
    return LinkDraw(channel=channel, noise=noise, h_est=ls_estimate(rx_preamble, cfg))


def link_draws(
    rng: np.random.Generator,
    codec: JsccCodec,
    batch: int,
    settings: ChannelSettings,
    cfg: OfdmConfig = OfdmConfig(),
    gop_size: int = 1,
    taps: np.ndarray | None = None,
) -> list[LinkDraw]:
    """One draw per transmission; a video GOP transmits ``gop_size`` times."""
    steps = gop_size if codec.modality == "video" else 1
    return [draw_link(rng, batch, codec.n_rows(cfg.n_data), settings, cfg, taps) for _ in range(steps)]


def channel_output(grid: SymbolGrid, draw: LinkDraw) -> SymbolGrid:
    """H_t Y + W over a batch, with the draw's own noise."""
    return draw.channel.freq_response * np.asarray(grid, dtype=np.complex128) + draw.noise


# ---------------------------------------------------------------------------
# numpy link
# ---------------------------------------------------------------------------


def _check_buffer(codec: JsccCodec, buffer: GopBuffer | None) -> None:
    if codec.modality != "video" and buffer is not None and len(buffer):
        raise CodecError(f"{codec.modality} codec does not use a GOP buffer")


def _symbols(codec: JsccCodec, x, ref: Tensor | None) -> Tensor:
    return normalize_power(codec.network.encode(x, ref))


def encode(codec: JsccCodec, x, buffer: GopBuffer | None = None, cfg: OfdmConfig = OfdmConfig()) -> SymbolGrid:
    """
    Encoder output placed on an N_s-row grid, before constellation mapping.

    For video the transmitter also decodes its own (noise-free, mapped) symbols
    and appends the result to ``buffer``.
    """
    _check_buffer(codec, buffer)
    if codec.modality == "video" and buffer is None:
        raise CodecError("video encoding needs a GOP buffer")
    if buffer is not None:
        buffer.check_capacity()
    with ad.no_grad():
        ref = buffer.reference if buffer is not None else None
        pairs = _symbols(codec, x, ref)
        if codec.modality == "video":
            buffer.append(codec.network.decode(quantize(pairs, codec.constellation), ref))
    return allocate_symbols(ad.to_complex(pairs), cfg, codec.n_rows(cfg.n_data))


def transmit(codec: JsccCodec, x, buffer: GopBuffer | None = None, cfg: OfdmConfig = OfdmConfig()) -> SymbolGrid:
    """Y = M_C(E(x, B)) on the data subcarriers."""
    return map_data_subcarriers(encode(codec, x, buffer, cfg), codec.constellation, cfg)


def decode(codec: JsccCodec, equalized: SymbolGrid, buffer: GopBuffer | None = None, cfg: OfdmConfig = OfdmConfig()) -> np.ndarray:
    """D(M_C(R(Y_hat)), B_hat). Video reconstructions are appended to the receiver buffer."""
    _check_buffer(codec, buffer)
    equalized = np.asarray(equalized)
    if equalized.shape[-2] != codec.n_rows(cfg.n_data):
        raise CodecError(f"grid has {equalized.shape[-2]} rows, {codec.key.slug} expects {codec.n_rows(cfg.n_data)}")
    if codec.modality == "video" and buffer is None:
        raise CodecError("video decoding needs a GOP buffer")
    symbols = extract_symbols(map_data_subcarriers(equalized, codec.constellation, cfg), cfg, codec.n_symbols)
    with ad.no_grad():
        ref = buffer.reference if buffer is not None else None
        out = codec.network.decode(Tensor(ad.to_pair(symbols)), ref)
        if codec.modality == "video":
            buffer.append(out)
    return out.data


def receive(codec: JsccCodec, received: SymbolGrid, h_est: np.ndarray, buffer: GopBuffer | None = None, cfg: OfdmConfig = OfdmConfig()) -> np.ndarray:
    return decode(codec, equalize(received, h_est, cfg), buffer, cfg)


def coding_steps(structure: Sequence[int]) -> list[int]:
    """Zero-based frame indices in coding order."""
    return [frame - 1 for frame in structure]


def run_link(
    codec: JsccCodec,
    x: np.ndarray,
    draws: Sequence[LinkDraw],
    cfg: OfdmConfig = OfdmConfig(),
    structure: Sequence[int] | None = None,
    channel: Callable[[int, SymbolGrid, LinkDraw], SymbolGrid] | None = None,
) -> np.ndarray:
    """
    Full numpy transmission of a batch. ``channel(step, Y, draw)`` returns the received
    payload grid (defaults to ``channel_output``); attacks and defenses hook in there.
    """
    channel = channel or (lambda step, grid, draw: channel_output(grid, draw))
    if codec.modality != "video":
        grid = transmit(codec, x, None, cfg)
        return receive(codec, channel(0, grid, draws[0]), draws[0].h_est, None, cfg)

    structure = tuple(structure or sequential_structure(x.shape[1]))
    tx_buffer, rx_buffer = GopBuffer(len(structure), structure), GopBuffer(len(structure), structure)
    out = np.zeros_like(x, dtype=np.float64)
    for step, frame in enumerate(coding_steps(structure)):
        grid = transmit(codec, x[:, frame], tx_buffer, cfg)
        out[:, frame] = receive(codec, channel(step, grid, draws[step]), draws[step].h_est, rx_buffer, cfg)
    return out


# ---------------------------------------------------------------------------
# Graph link
# ---------------------------------------------------------------------------


def normalize_power(z: Tensor) -> Tensor:
    """Scale each batch entry to unit average complex-symbol power."""
    power = ad.mean(z * z, axis=(1, 2), keepdims=True) * 2.0
    return z / ad.sqrt(power + 1e-12)


def quantize(pairs: Tensor, constellation: str) -> Tensor:
    return ad.straight_through(pairs, lambda data: map_constellation_pairs(data, constellation), op="constellation")


def to_grid_pairs(symbols: Tensor, n_rows: int, n_data: int) -> Tensor:
    batch, count = symbols.shape[0], symbols.shape[1]
    padding = n_rows * n_data - count
    if padding < 0:
        raise CodecError(f"{count} symbols do not fit in {n_rows} OFDM symbols")
    if padding:
        symbols = ad.concat([symbols, np.zeros((batch, padding, 2))], axis=1)
    return ad.reshape(symbols, (batch, n_rows, n_data, 2))


def from_grid_pairs(grid: Tensor, n_symbols: int) -> Tensor:
    batch = grid.shape[0]
    return ad.getitem(ad.reshape(grid, (batch, -1, 2)), (slice(None), slice(0, n_symbols)))


@dataclass(frozen=True)
class LinkConstants:
    """A LinkDraw restricted to data subcarriers as (real, imag) pairs."""

    h_t: np.ndarray  # (B, 1, 48, 2)
    noise: np.ndarray  # (B, N_s, 48, 2)
    equalizer: np.ndarray  # (B, 1, 48, 2)

    @classmethod
    def from_draw(cls, draw: LinkDraw, cfg: OfdmConfig = OfdmConfig()) -> "LinkConstants":
        data = list(cfg.data_subcarriers)
        return cls(
            h_t=ad.to_pair(draw.channel.freq_response[..., data]),
            noise=ad.to_pair(draw.noise[..., data]),
            equalizer=ad.to_pair(equalizer_taps(draw.h_est, cfg))[:, None],
        )


def transmit_graph(codec: JsccCodec, x, ref: Tensor | None = None, cfg: OfdmConfig = OfdmConfig()) -> Tensor:
    """Mapped data-subcarrier pairs (B, N_s, 48, 2)."""
    symbols = quantize(normalize_power(codec.network.encode(x, ref)), codec.constellation)
    return to_grid_pairs(symbols, codec.n_rows(cfg.n_data), cfg.n_data)


def channel_graph(y: Tensor, constants: LinkConstants, interference: Tensor | None = None) -> Tensor:
    """Equalised received pairs: (H_t Y + [H_a P] + W) / H_hat on the data subcarriers."""
    received = ad.complex_mul(y, constants.h_t) + constants.noise
    if interference is not None:
        received = received + interference
    return ad.complex_mul(received, constants.equalizer)


def receive_graph(codec: JsccCodec, equalized: Tensor, ref: Tensor | None = None) -> Tensor:
    symbols = quantize(from_grid_pairs(equalized, codec.n_symbols), codec.constellation)
    return codec.network.decode(symbols, ref)


@dataclass
class LinkOutput:
    """Reconstruction plus, per transmission, the equalised grid and its constellation-mapped copy."""

    reconstruction: Tensor
    equalized: list[Tensor] = field(default_factory=list)
    mapped: list[Tensor] = field(default_factory=list)


def _stack_frames(frames: list[Tensor]) -> Tensor:
    return ad.concat([ad.reshape(f, (f.shape[0], 1, *f.shape[1:])) for f in frames], axis=1)


Interference = Callable[[int, Tensor], Tensor | None]


def forward_link(
    codec: JsccCodec,
    x: np.ndarray,
    draws: Sequence[LinkDraw],
    cfg: OfdmConfig = OfdmConfig(),
    structure: Sequence[int] | None = None,
    interference: Interference | None = None,
) -> LinkOutput:
    """
    Differentiable transmission of a batch. ``interference(step, y)`` receives the
    transmitted pairs of transmission ``step`` and returns the H_a P(delta) pairs added
    at the receiver (or None).

    Video runs the GOP loop with separate transmitter and receiver buffers; the
    transmitter's local reconstructions are constants, the receiver's carry gradients.
    """
    interference = interference or (lambda step, y: None)
    if codec.modality != "video":
        y = transmit_graph(codec, x, None, cfg)
        equalized = channel_graph(y, LinkConstants.from_draw(draws[0], cfg), interference(0, y))
        return LinkOutput(receive_graph(codec, equalized), [equalized], [quantize(equalized, codec.constellation)])

    structure = tuple(structure or sequential_structure(x.shape[1]))
    tx_buffer, rx_buffer = GopBuffer(len(structure), structure), GopBuffer(len(structure), structure)
    frames: dict[int, Tensor] = {}
    output = LinkOutput(reconstruction=Tensor(0.0))
    for step, frame in enumerate(coding_steps(structure)):
        tx_ref = tx_buffer.reference
        y = transmit_graph(codec, x[:, frame], tx_ref, cfg)
        with ad.no_grad():
            tx_buffer.append(codec.network.decode(quantize(Tensor(_unpadded(y, codec)), codec.constellation), tx_ref))
        equalized = channel_graph(y, LinkConstants.from_draw(draws[step], cfg), interference(step, y))
        decoded = receive_graph(codec, equalized, rx_buffer.reference)
        rx_buffer.append(decoded)
        frames[frame] = decoded
        output.equalized.append(equalized)
        output.mapped.append(quantize(equalized, codec.constellation))
    output.reconstruction = _stack_frames([frames[i] for i in range(len(structure))])
    return output


def _unpadded(y: Tensor, codec: JsccCodec) -> np.ndarray:
    return y.data.reshape(y.shape[0], -1, 2)[:, : codec.n_symbols]


# ---------------------------------------------------------------------------
# Losses and quality
# ---------------------------------------------------------------------------


def reconstruction_loss(modality: str, x: np.ndarray, x_hat: Tensor) -> Tensor:
    """Distortion per modality: MSE (video summed over the GOP, speech on frames) or token cross-entropy."""
    if modality == "image":
        return ad.mse(x_hat, x)
    if modality == "video":
        if x_hat.ndim != 5:
            raise CodecError(f"video reconstruction needs (B, P, C, H, W), got {x_hat.shape}")
        total = None
        for frame in range(x_hat.shape[1]):
            term = ad.mse(ad.getitem(x_hat, (slice(None), frame)), x[:, frame])
            total = term if total is None else total + term
        return total
    if modality == "speech":
        frames = speech_frame(np.asarray(x))
        return ad.mse(ad.reshape(x_hat, frames.shape), frames)
    if modality == "text":
        return ad.cross_entropy(x_hat, np.asarray(x, dtype=np.int64))
    raise CodecError(f"unknown modality '{modality}'")


QUALITY_METRICS = {"image": "psnr", "video": "psnr", "speech": "mse", "text": "bleu"}
HIGHER_IS_BETTER = {"psnr": True, "mse": False, "bleu": True}


def quality_scores(modality: str, x: np.ndarray, x_hat: np.ndarray, vocab: TextVocab = TextVocab()) -> tuple[str, np.ndarray]:
    """Per-sample reconstruction quality: PSNR (image, video clip), MSE (speech) or BLEU (text)."""
    metric = QUALITY_METRICS.get(modality)
    if metric is None:
        raise CodecError(f"unknown modality '{modality}'")
    if modality == "text":
        scores = []
        for reference_ids, logits in zip(np.asarray(x), np.asarray(x_hat), strict=True):
            candidate = text_greedy_decode(logits, vocab)
            scores.append(bleu(candidate, vocab.words(reference_ids)) if candidate else 0.0)
        return metric, np.asarray(scores)
    if metric == "psnr":
        return metric, np.asarray([psnr(a, b) for a, b in zip(x, x_hat, strict=True)])
    return metric, np.asarray([mse_metric(a, b) for a, b in zip(x, x_hat, strict=True)])


def degradation(metric: str, clean: np.ndarray, attacked: np.ndarray) -> np.ndarray:
    """Positive when the attacked reconstruction is worse."""
    clean, attacked = np.asarray(clean), np.asarray(attacked)
    return clean - attacked if HIGHER_IS_BETTER[metric] else attacked - clean


# ---------------------------------------------------------------------------
# Construction and training
# ---------------------------------------------------------------------------


def build_codec(key: CodecKey, seed: int, role: str = "target", width_delta: int = 0, depth_delta: int = 0, hidden_delta: int = 0) -> JsccCodec:
    """Template architecture for targets; surrogates shift layer widths/depth by the given deltas."""
    arch = template_arch(key.modality).derive(width_delta, depth_delta, hidden_delta)
    return JsccCodec(key, arch, stream(seed, "init", role, key.slug), role=role)


def restore_codec(descriptor: dict, state: dict[str, np.ndarray]) -> JsccCodec:
    key = CodecKey(descriptor["modality"], descriptor["constellation"], descriptor["rate"])
    codec = JsccCodec(key, CodecArch.from_dict(descriptor["arch"]), np.random.default_rng(0), role=descriptor.get("role", "target"))
    codec.network.load_state_dict(state)
    return codec


@dataclass
class TrainingResult:
    codec: JsccCodec
    epoch_losses: list[float]
    initial_val_loss: float
    final_val_loss: float
    duration_seconds: float = 0.0


def validation_loss(codec: JsccCodec, dataset, settings: ChannelSettings, seed: int, cfg: OfdmConfig = OfdmConfig(), batch_size: int = 16) -> float:
    """Mean loss over ``dataset`` with channel draws fixed by ``seed``."""
    rng = stream(seed, "jscc-val", codec.key.slug)
    total, count = 0.0, 0
    with ad.no_grad():
        for indices in dataset.batches(batch_size):
            x = dataset.inputs[indices]
            gop = x.shape[1] if codec.modality == "video" else 1
            output = forward_link(codec, x, link_draws(rng, codec, len(indices), settings, cfg, gop), cfg)
            total += reconstruction_loss(codec.modality, x, output.reconstruction).item() * len(indices)
            count += len(indices)
    return total / count


def train_jscc(
    codec: JsccCodec,
    dataset,
    settings: ChannelSettings = ChannelSettings(),
    epochs: int = 10,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 1e-3,
    val_fraction: float = 0.2,
    cfg: OfdmConfig = OfdmConfig(),
) -> TrainingResult:
    """End-to-end training through the differentiable channel at ``settings.snr_db``."""
    if len(dataset) == 0:
        raise DatasetError("cannot train a codec on an empty dataset")
    if codec.modality not in MODALITIES:
        raise CodecError(f"unknown modality '{codec.modality}'")
    start_time = datetime.now(pytz.UTC)
    train_set, val_set = dataset.split(val_fraction)
    rng = stream(seed, "jscc-train", codec.key.slug)
    optimizer = Adam(codec.network.named_parameters(), lr=lr)

    initial = validation_loss(codec, val_set, settings, seed, cfg, batch_size)
    logger.info(f"Training {codec.key.slug} ({codec.network.num_parameters()} params), initial val loss {initial:.5f}")
    epoch_losses = []
    for epoch in range(epochs):
        batch_losses = []
        for batch_index, indices in enumerate(train_set.batches(batch_size, rng)):
            x = train_set.inputs[indices]
            gop = x.shape[1] if codec.modality == "video" else 1
            output = forward_link(codec, x, link_draws(rng, codec, len(indices), settings, cfg, gop), cfg)
            loss = reconstruction_loss(codec.modality, x, output.reconstruction)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"{codec.key.slug}: loss became {loss.item()} at epoch {epoch + 1}, batch {batch_index + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(loss.item())
            logger.debug(f"{codec.key.slug} epoch {epoch + 1} batch {batch_index + 1}: {loss.item():.5f}")
        epoch_losses.append(float(np.mean(batch_losses)))
        logger.info(f"{codec.key.slug} epoch {epoch + 1}/{epochs}: train loss {epoch_losses[-1]:.5f}")

    final = validation_loss(codec, val_set, settings, seed, cfg, batch_size)
    duration = (datetime.now(pytz.UTC) - start_time).total_seconds()
    logger.info(f"✓ {codec.key.slug}: val loss {initial:.5f} -> {final:.5f} in {duration:.1f}s")
    return TrainingResult(codec, epoch_losses, initial, final, duration)
