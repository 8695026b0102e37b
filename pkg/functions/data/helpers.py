"""Procedural desk-scale datasets standing in for image, video, speech, text and the two downstream tasks."""

from collections.abc import Iterator
from dataclasses import dataclass
import logging
from pathlib import Path

import numpy as np

from functions.jscc.models import GOP_SIZE, IMAGE_SHAPE, SPEECH_SAMPLES, TextVocab
from shared.errors import DatasetError
from shared.rng import stream


logger = logging.getLogger(__name__)

KINDS = ("image", "video", "speech", "text", "vc", "ave")
VC_FRAMES = 8
VC_DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0))  # right, left, down, up (row, col steps)
AVE_CLASSES = 4
TEXT_LENGTH_RANGE = (4, 12)


@dataclass
class SyntheticDataset:
    """``inputs`` is the primary modality; ``audio`` carries the AVE speech branch."""

    kind: str
    inputs: np.ndarray
    labels: np.ndarray | None = None
    audio: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def subset(self, indices: np.ndarray) -> "SyntheticDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return SyntheticDataset(
            self.kind,
            self.inputs[indices],
            None if self.labels is None else self.labels[indices],
            None if self.audio is None else self.audio[indices],
        )

    def split(self, val_fraction: float = 0.2) -> tuple["SyntheticDataset", "SyntheticDataset"]:
        """Trailing ``val_fraction`` held out; a single-item set validates on itself."""
        n = len(self)
        if n < 2:
            return self, self
        n_val = min(n - 1, max(1, round(n * val_fraction)))
        return self.subset(np.arange(n - n_val)), self.subset(np.arange(n - n_val, n))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            yield order[start : start + batch_size]

    def extend(self, other: "SyntheticDataset") -> "SyntheticDataset":
        def join(a, b):
            return None if a is None or b is None else np.concatenate([a, b])

        inputs = np.concatenate([self.inputs, other.inputs])
        return SyntheticDataset(self.kind, inputs, join(self.labels, other.labels), join(self.audio, other.audio))

    def save(self, path: Path) -> Path:
        arrays = {"inputs": self.inputs}
        if self.labels is not None:
            arrays["labels"] = self.labels
        if self.audio is not None:
            arrays["audio"] = self.audio
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, kind=np.array(self.kind), **arrays)
        return path

    @classmethod
    def load(cls, path: Path) -> "SyntheticDataset":
        if not Path(path).exists():
            raise DatasetError(f"dataset file {path} does not exist")
        with np.load(path) as data:
            return cls(str(data["kind"]), data["inputs"], data["labels"] if "labels" in data else None, data["audio"] if "audio" in data else None)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _background(rng: np.random.Generator) -> np.ndarray:
    _, height, width = IMAGE_SHAPE
    base = rng.uniform(0.1, 0.5, size=(3, 1, 1))
    slope = rng.uniform(-0.2, 0.2, size=(3, 1, 1))
    ramp = np.linspace(0.0, 1.0, width)[None, None, :] * np.ones((1, height, 1))
    return np.clip(base + slope * ramp, 0.0, 1.0)


def _paint(canvas: np.ndarray, top: int, left: int, size: int, color: np.ndarray, disk: bool = False) -> None:
    _, height, width = canvas.shape
    rows, cols = np.ogrid[:height, :width]
    if disk:
        radius = size / 2.0
        mask = (rows - top - radius + 0.5) ** 2 + (cols - left - radius + 0.5) ** 2 <= radius**2
    else:
        mask = (rows >= top) & (rows < top + size) & (cols >= left) & (cols < left + size)
    canvas[:, mask] = color[:, None]


def _image(rng: np.random.Generator) -> np.ndarray:
    canvas = _background(rng)
    for _ in range(rng.integers(1, 4)):
        size = int(rng.integers(6, 14))
        top, left = rng.integers(0, IMAGE_SHAPE[1] - size, size=2)
        _paint(canvas, int(top), int(left), size, rng.uniform(0.4, 1.0, size=3), disk=bool(rng.integers(0, 2)))
    return canvas


def _moving_clip(rng: np.random.Generator, frames: int, direction: tuple[int, int], speed: int = 2, size: int = 6) -> np.ndarray:
    background = _background(rng)
    color = rng.uniform(0.6, 1.0, size=3)
    span = IMAGE_SHAPE[1] - size
    travel = speed * (frames - 1)
    start = []
    for step in direction:
        low, high = (0, span - travel) if step > 0 else (travel, span) if step < 0 else (0, span)
        start.append(int(rng.integers(low, high + 1)))
    clip = np.empty((frames, *IMAGE_SHAPE))
    for t in range(frames):
        frame = background.copy()
        _paint(frame, start[0] + direction[0] * speed * t, start[1] + direction[1] * speed * t, size, color)
        clip[t] = frame
    return clip


def _tone(rng: np.random.Generator, base_frequencies: tuple[float, ...]) -> np.ndarray:
    t = np.arange(SPEECH_SAMPLES) / SPEECH_SAMPLES
    signal = np.zeros(SPEECH_SAMPLES)
    for frequency in base_frequencies:
        signal += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * frequency * t + rng.uniform(0, 2 * np.pi))
    envelope = 0.5 + 0.5 * np.sin(np.pi * t) ** rng.uniform(0.5, 2.0)
    signal *= envelope
    return 0.9 * signal / np.max(np.abs(signal))


def _speech(rng: np.random.Generator) -> np.ndarray:
    count = int(rng.integers(2, 4))
    return _tone(rng, tuple(rng.uniform(4.0, 60.0, size=count)))


def _sentence(rng: np.random.Generator, vocab: TextVocab) -> np.ndarray:
    length = int(rng.integers(TEXT_LENGTH_RANGE[0], TEXT_LENGTH_RANGE[1] + 1))
    first_word = vocab.end_id + 1
    n_words = vocab.size - first_word
    stride = int(rng.integers(1, 6))
    word = int(rng.integers(0, n_words))
    words = []
    for _ in range(length):
        words.append(first_word + word)
        word = (word + stride + int(rng.integers(0, 2))) % n_words
    return vocab.encode_sentence(words)


def balanced_labels(rng: np.random.Generator, size: int, classes: int) -> np.ndarray:
    """Each class appears floor or ceil of size/classes times, in shuffled order."""
    return rng.permutation(np.arange(size) % classes)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def synth_dataset(kind: str, size: int, seed: int, gop_size: int = GOP_SIZE, vocab: TextVocab = TextVocab()) -> SyntheticDataset:
    """Deterministic procedural dataset of ``size`` items for ``kind``."""
    if kind not in KINDS:
        raise DatasetError(f"unknown dataset kind '{kind}', expected one of {KINDS}")
    if size < 1:
        raise DatasetError(f"dataset size must be at least 1, got {size}")
    rng = stream(seed, "data", kind)

    if kind == "image":
        return SyntheticDataset(kind, np.stack([_image(rng) for _ in range(size)]))
    if kind == "video":
        directions = rng.integers(0, len(VC_DIRECTIONS), size=size)
        return SyntheticDataset(kind, np.stack([_moving_clip(rng, gop_size, VC_DIRECTIONS[d], speed=1) for d in directions]))
    if kind == "speech":
        return SyntheticDataset(kind, np.stack([_speech(rng) for _ in range(size)]))
    if kind == "text":
        return SyntheticDataset(kind, np.stack([_sentence(rng, vocab) for _ in range(size)]))
    if kind == "vc":
        labels = balanced_labels(rng, size, len(VC_DIRECTIONS))
        clips = np.stack([_moving_clip(rng, VC_FRAMES, VC_DIRECTIONS[label]) for label in labels])
        return SyntheticDataset(kind, clips, labels)

    labels = balanced_labels(rng, size, AVE_CLASSES)
    images, audio = [], []
    for label in labels:
        shape, tone = divmod(int(label), 2)
        canvas = _background(rng)
        size_px = int(rng.integers(10, 16))
        top, left = rng.integers(0, IMAGE_SHAPE[1] - size_px, size=2)
        _paint(canvas, int(top), int(left), size_px, rng.uniform(0.6, 1.0, size=3), disk=bool(shape))
        images.append(canvas)
        audio.append(_tone(rng, (rng.uniform(6.0, 12.0),) if tone == 0 else (rng.uniform(40.0, 60.0),)))
    return SyntheticDataset(kind, np.stack(images), labels, np.stack(audio))


def synth_all(sizes: dict[str, int], seed: int, out_dir: Path) -> dict[str, dict]:
    """Generate and store every configured kind; returns a per-kind result payload."""
    results = {}
    for kind, size in sizes.items():
        dataset = synth_dataset(kind, size, seed)
        path = dataset.save(Path(out_dir) / f"{kind}.npz")
        results[kind] = {"status": "success", "records": len(dataset), "path": str(path)}
        logger.info(f"✓ {kind}: {len(dataset)} items -> {path}")
    return results
