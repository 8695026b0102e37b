"""
Toy JSCC encoder/decoder networks, GOP buffers, speech framing and the text vocabulary.

Every encoder maps a batch of sources to (batch, n_symbols, 2) real pairs (complex
symbols before power normalisation); every decoder maps such pairs back to the source
space (text decoders return per-position logits).
"""

from dataclasses import dataclass, field, replace
from fractions import Fraction
import math

import numpy as np

from shared import autodiff as ad
from shared.autodiff import Tensor
from shared.errors import CodecError
from shared.nn import Conv2d, Embedding, Linear, Module, SelfAttention


MODALITIES = ("image", "video", "speech", "text")
MODALITY_CODES = {"image": "I", "video": "V", "speech": "S", "text": "T"}
RATES = ("1/6", "1/12")

IMAGE_SHAPE = (3, 32, 32)
SPEECH_SAMPLES = 1024
TEXT_SEQUENCE_LENGTH = 13
TEXT_EMBED_DIM = 32
TEXT_VOCAB_SIZE = 64
GOP_SIZE = 4


def parse_rate(rate: str | Fraction) -> Fraction:
    value = Fraction(rate)
    if value <= 0 or value > 1:
        raise CodecError(f"coding rate must be in (0, 1], got {rate}")
    return value


def source_dimension(modality: str) -> int:
    if modality in ("image", "video"):
        return int(np.prod(IMAGE_SHAPE))
    if modality == "speech":
        return SPEECH_SAMPLES
    if modality == "text":
        return TEXT_SEQUENCE_LENGTH * TEXT_EMBED_DIM
    raise CodecError(f"unknown modality '{modality}'")


def symbol_budget(modality: str, rate: str | Fraction) -> int:
    """round(lambda * n_source) complex symbols, halves rounded up."""
    return math.floor(parse_rate(rate) * source_dimension(modality) + Fraction(1, 2))


# ---------------------------------------------------------------------------
# Architecture descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CodecArch:
    """Layer/width descriptor. ``widths`` are conv widths, ``depth`` extra stride-1 layers, ``hidden`` attention width."""

    widths: tuple[int, ...] = (16, 32)
    depth: int = 0
    hidden: int = 32

    def derive(self, width_delta: int = 0, depth_delta: int = 0, hidden_delta: int = 0) -> "CodecArch":
        """Surrogate variant: each width shifted by ``width_delta``, depth and hidden width by their deltas ("n1 => n2")."""
        widths = tuple(max(2, w + width_delta) for w in self.widths)
        return replace(self, widths=widths, depth=max(0, self.depth + depth_delta), hidden=max(4, self.hidden + hidden_delta))

    def as_dict(self) -> dict:
        return {"widths": list(self.widths), "depth": self.depth, "hidden": self.hidden}

    @classmethod
    def from_dict(cls, data: dict) -> "CodecArch":
        return cls(widths=tuple(data["widths"]), depth=int(data["depth"]), hidden=int(data["hidden"]))


def template_arch(modality: str) -> CodecArch:
    if modality in ("image", "video"):
        return CodecArch(widths=(16, 32), depth=0, hidden=0)
    if modality == "speech":
        return CodecArch(widths=(8,), depth=0, hidden=32)
    if modality == "text":
        return CodecArch(widths=(), depth=0, hidden=32)
    raise CodecError(f"unknown modality '{modality}'")


# ---------------------------------------------------------------------------
# Framing and vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FramingConfig:
    frame_count: int = 16
    frame_length: int = 64

    @property
    def samples(self) -> int:
        return self.frame_count * self.frame_length


def speech_frame(x: np.ndarray, cfg: FramingConfig = FramingConfig()) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != cfg.samples:
        raise CodecError(f"speech clip has {x.shape[-1]} samples, framing expects {cfg.samples}")
    return x.reshape(*x.shape[:-1], cfg.frame_count, cfg.frame_length)


def speech_deframe(frames: np.ndarray, cfg: FramingConfig = FramingConfig()) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.shape[-2:] != (cfg.frame_count, cfg.frame_length):
        raise CodecError(f"frame matrix {frames.shape[-2:]} does not match {cfg.frame_count}x{cfg.frame_length}")
    return frames.reshape(*frames.shape[:-2], cfg.samples)


@dataclass(frozen=True)
class TextVocab:
    tokens: tuple[str, ...] = field(default_factory=lambda: ("<pad>", "<start>", "<end>", *(f"w{i}" for i in range(3, TEXT_VOCAB_SIZE))))
    embed_dim: int = TEXT_EMBED_DIM
    sequence_length: int = TEXT_SEQUENCE_LENGTH

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise CodecError("vocabulary tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.tokens.index("<pad>")

    @property
    def start_id(self) -> int:
        return self.tokens.index("<start>")

    @property
    def end_id(self) -> int:
        return self.tokens.index("<end>")

    def token_id(self, token: str) -> int:
        return self.tokens.index(token)

    def encode_sentence(self, word_ids: list[int]) -> np.ndarray:
        """``[w1 .. wn, <end>, <pad> ...]`` of fixed length."""
        if len(word_ids) + 1 > self.sequence_length:
            raise CodecError(f"sentence of {len(word_ids)} words exceeds the {self.sequence_length - 1}-word limit")
        ids = np.full(self.sequence_length, self.pad_id, dtype=np.int64)
        ids[: len(word_ids)] = word_ids
        ids[len(word_ids)] = self.end_id
        return ids

    def words(self, ids: np.ndarray | list[int]) -> list[int]:
        """Word ids up to (excluding) the first end token."""
        out = []
        for token in np.asarray(ids).tolist():
            if token == self.end_id:
                break
            out.append(int(token))
        return out


def text_greedy_decode(logits: np.ndarray, vocab: TextVocab, max_length: int | None = None) -> list[int]:
    """Per-position argmax (lowest id on ties), stopping at the end token or ``max_length``."""
    logits = np.asarray(logits, dtype=np.float64)
    max_length = logits.shape[0] if max_length is None else min(max_length, logits.shape[0])
    decoded = []
    for position in range(max_length):
        token = int(np.argmax(logits[position]))
        if token == vocab.end_id:
            break
        decoded.append(token)
    return decoded


# ---------------------------------------------------------------------------
# GOP structure
# ---------------------------------------------------------------------------


def sequential_structure(gop_size: int = GOP_SIZE) -> tuple[int, ...]:
    return tuple(range(1, gop_size + 1))


def hierarchical_structure(gop_size: int = GOP_SIZE) -> tuple[int, ...]:
    """First frame, then odd positions from the back half inward: (1, 3, 2, 4) for P=4."""
    if gop_size == 4:
        return (1, 3, 2, 4)
    order = [1]
    remaining = list(range(2, gop_size + 1))
    while remaining:
        middle = remaining.pop(len(remaining) // 2)
        order.append(middle)
    return tuple(order)


def _check_structure(structure: tuple[int, ...]) -> None:
    if sorted(structure) != list(range(1, len(structure) + 1)):
        raise CodecError(f"GOP structure {structure} is not a permutation of 1..{len(structure)}")


def gop_order(structure: tuple[int, ...], t: int) -> int:
    """Frame index m_sigma(t) coded at step ``t`` (both 1-based)."""
    _check_structure(structure)
    if not 1 <= t <= len(structure):
        raise CodecError(f"coding step {t} outside 1..{len(structure)}")
    return structure[t - 1]


def gop_inverse(structure: tuple[int, ...]) -> tuple[int, ...]:
    _check_structure(structure)
    inverse = [0] * len(structure)
    for step, frame in enumerate(structure, start=1):
        inverse[frame - 1] = step
    return tuple(inverse)


@dataclass
class GopBuffer:
    """Previously decoded frames of the current GOP, in coding order."""

    gop_size: int = GOP_SIZE
    structure: tuple[int, ...] = field(default_factory=sequential_structure)
    frames: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if len(self.structure) != self.gop_size:
            raise CodecError(f"structure length {len(self.structure)} does not match GOP size {self.gop_size}")
        _check_structure(self.structure)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def reference(self) -> Tensor | None:
        return self.frames[-1] if self.frames else None

    def check_capacity(self) -> None:
        if len(self.frames) >= self.gop_size:
            raise CodecError(f"GOP buffer overflow: already holds {len(self.frames)} of {self.gop_size} frames")

    def append(self, frame: Tensor) -> None:
        self.check_capacity()
        self.frames.append(frame)

    def clear(self) -> None:
        self.frames.clear()


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


def _pairs(latent: Tensor, n_symbols: int) -> Tensor:
    return ad.reshape(latent, (latent.shape[0], n_symbols, 2))


class ConvCodec(Module):
    """Conv autoencoder for 3x32x32 frames. ``cond_channels`` > 0 conditions both sides on a reference frame."""

    def __init__(self, arch: CodecArch, n_symbols: int, rng: np.random.Generator, cond_channels: int = 0):
        if (2 * n_symbols) % 64:
            raise CodecError(f"{n_symbols} symbols do not tile an 8x8 latent")
        w1, w2 = arch.widths
        self.latent_channels = 2 * n_symbols // 64
        self.n_symbols = n_symbols
        self.cond_channels = cond_channels
        self.enc1 = Conv2d(IMAGE_SHAPE[0] + cond_channels, w1, rng, stride=2)
        self.enc2 = Conv2d(w1, w2, rng, stride=2)
        self.enc_extra = [Conv2d(w2, w2, rng) for _ in range(arch.depth)]
        self.enc_out = Conv2d(w2, self.latent_channels, rng)
        self.dec_in = Conv2d(self.latent_channels, w2, rng)
        self.dec_extra = [Conv2d(w2, w2, rng) for _ in range(arch.depth)]
        self.dec_up1 = Conv2d(w2, w1, rng)
        self.dec_up2 = Conv2d(w1, w1, rng)
        self.dec_out = Conv2d(w1 + cond_channels, IMAGE_SHAPE[0], rng)

    def encode(self, x, ref: Tensor | None = None) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[1:] != IMAGE_SHAPE:
            raise CodecError(f"frame batch has shape {x.shape[1:]}, expected {IMAGE_SHAPE}")
        if self.cond_channels:
            if ref is None:
                raise CodecError("conditional codec needs a reference frame")
            x = ad.concat([x, ref], axis=1)
        h = ad.relu(self.enc2(ad.relu(self.enc1(x))))
        for layer in self.enc_extra:
            h = ad.relu(layer(h))
        latent = self.enc_out(h)
        return _pairs(ad.reshape(latent, (latent.shape[0], -1)), self.n_symbols)

    def decode(self, pairs: Tensor, ref: Tensor | None = None) -> Tensor:
        batch = pairs.shape[0]
        h = ad.relu(self.dec_in(ad.reshape(pairs, (batch, self.latent_channels, 8, 8))))
        for layer in self.dec_extra:
            h = ad.relu(layer(h))
        h = ad.relu(self.dec_up1(ad.upsample2x(h)))
        h = ad.relu(self.dec_up2(ad.upsample2x(h)))
        if self.cond_channels:
            if ref is None:
                raise CodecError("conditional codec needs a reference frame")
            h = ad.concat([h, ref], axis=1)
        return ad.sigmoid(self.dec_out(h))


class VideoCodec(Module):
    """
    The first coded frame goes through an image codec (``intra``, the image network at the
    video arch); later frames use a reference-conditioned codec.
    """

    def __init__(self, arch: CodecArch, n_symbols: int, rng: np.random.Generator):
        self.intra = build_network("image", arch, n_symbols, rng)
        self.inter = ConvCodec(arch, n_symbols, rng, cond_channels=IMAGE_SHAPE[0])

    def encode(self, x, ref: Tensor | None = None) -> Tensor:
        return self.intra.encode(x) if ref is None else self.inter.encode(x, ref)

    def decode(self, pairs: Tensor, ref: Tensor | None = None) -> Tensor:
        return self.intra.decode(pairs) if ref is None else self.inter.decode(pairs, ref)


class SpeechCodec(Module):
    """Conv front end over the 16x64 frame matrix followed by one self-attention layer."""

    def __init__(self, arch: CodecArch, n_symbols: int, rng: np.random.Generator, framing: FramingConfig = FramingConfig()):
        (width,) = arch.widths
        self.framing = framing
        self.n_symbols = n_symbols
        self.width = width
        self.hidden = arch.hidden
        self.conv = Conv2d(1, width, rng)
        self.frame_proj = Linear(width * framing.frame_length, arch.hidden, rng)
        self.enc_attention = SelfAttention(arch.hidden, rng)
        self.enc_out = Linear(framing.frame_count * arch.hidden, 2 * n_symbols, rng, scale=1.0 / np.sqrt(framing.frame_count * arch.hidden))
        self.dec_in = Linear(2 * n_symbols, framing.frame_count * arch.hidden, rng)
        self.dec_attention = SelfAttention(arch.hidden, rng)
        self.dec_out = Linear(arch.hidden, framing.frame_length, rng, scale=1.0 / np.sqrt(arch.hidden))

    def encode(self, x, ref: Tensor | None = None) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[1:] != (self.framing.samples,):
            raise CodecError(f"speech batch has shape {x.shape[1:]}, expected ({self.framing.samples},)")
        batch, frames, length = x.shape[0], self.framing.frame_count, self.framing.frame_length
        h = ad.relu(self.conv(ad.reshape(x, (batch, 1, frames, length))))
        h = ad.reshape(ad.transpose(h, (0, 2, 1, 3)), (batch, frames, self.width * length))
        h = self.enc_attention(ad.relu(self.frame_proj(h)))
        return _pairs(self.enc_out(ad.reshape(h, (batch, frames * self.hidden))), self.n_symbols)

    def decode(self, pairs: Tensor, ref: Tensor | None = None) -> Tensor:
        batch = pairs.shape[0]
        h = ad.relu(self.dec_in(ad.reshape(pairs, (batch, 2 * self.n_symbols))))
        h = self.dec_attention(ad.reshape(h, (batch, self.framing.frame_count, self.hidden)))
        frames = ad.tanh(self.dec_out(h))
        return ad.reshape(frames, (batch, self.framing.samples))


class TextCodec(Module):
    """Embedding + self-attention encoder; self-attention decoder with a per-token classifier."""

    def __init__(self, arch: CodecArch, n_symbols: int, rng: np.random.Generator, vocab: TextVocab = TextVocab()):
        self.vocab = vocab
        self.n_symbols = n_symbols
        self.hidden = arch.hidden
        length, dim = vocab.sequence_length, vocab.embed_dim
        self.embedding = Embedding(vocab.size, dim, rng)
        self.position = Tensor(rng.standard_normal((length, dim)) * 0.1, requires_grad=True)
        self.enc_attention = SelfAttention(dim, rng)
        self.enc_out = Linear(length * dim, 2 * n_symbols, rng, scale=1.0 / np.sqrt(length * dim))
        self.dec_in = Linear(2 * n_symbols, length * arch.hidden, rng)
        self.dec_attention = SelfAttention(arch.hidden, rng)
        self.classifier = Linear(arch.hidden, vocab.size, rng, scale=1.0 / np.sqrt(arch.hidden))

    def encode(self, ids, ref: Tensor | None = None) -> Tensor:
        ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids).astype(np.int64)
        if ids.shape[1:] != (self.vocab.sequence_length,):
            raise CodecError(f"token batch has shape {ids.shape[1:]}, expected ({self.vocab.sequence_length},)")
        batch = ids.shape[0]
        h = self.enc_attention(self.embedding(ids) + self.position)
        return _pairs(self.enc_out(ad.reshape(h, (batch, -1))), self.n_symbols)

    def decode(self, pairs: Tensor, ref: Tensor | None = None) -> Tensor:
        batch = pairs.shape[0]
        h = ad.relu(self.dec_in(ad.reshape(pairs, (batch, 2 * self.n_symbols))))
        h = self.dec_attention(ad.reshape(h, (batch, self.vocab.sequence_length, self.hidden)))
        return self.classifier(h)


def build_network(modality: str, arch: CodecArch, n_symbols: int, rng: np.random.Generator) -> Module:
    if modality == "image":
        return ConvCodec(arch, n_symbols, rng)
    if modality == "video":
        return VideoCodec(arch, n_symbols, rng)
    if modality == "speech":
        return SpeechCodec(arch, n_symbols, rng)
    if modality == "text":
        return TextCodec(arch, n_symbols, rng)
    raise CodecError(f"unknown modality '{modality}'")


@dataclass(frozen=True)
class CodecKey:
    modality: str
    constellation: str
    rate: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise CodecError(f"unknown modality '{self.modality}'")
        parse_rate(self.rate)

    @property
    def slug(self) -> str:
        return f"{self.modality}-{self.constellation}-{self.rate.replace('/', '_')}"


class JsccCodec:
    """Encoder/decoder parameter set for one (modality, constellation, rate) with its architecture descriptor."""

    def __init__(self, key: CodecKey, arch: CodecArch, rng: np.random.Generator, role: str = "target"):
        self.key = key
        self.arch = arch
        self.role = role
        self.n_symbols = symbol_budget(key.modality, key.rate)
        self.network = build_network(key.modality, arch, self.n_symbols, rng)

    @property
    def modality(self) -> str:
        return self.key.modality

    @property
    def constellation(self) -> str:
        return self.key.constellation

    def n_rows(self, n_data: int = 48) -> int:
        return max(1, -(-self.n_symbols // n_data))

    def descriptor(self) -> dict:
        return {
            "modality": self.key.modality,
            "constellation": self.key.constellation,
            "rate": self.key.rate,
            "role": self.role,
            "n_symbols": self.n_symbols,
            "arch": self.arch.as_dict(),
        }

    def __repr__(self) -> str:
        return f"JsccCodec({self.key.slug}, role={self.role}, arch={self.arch.as_dict()})"
