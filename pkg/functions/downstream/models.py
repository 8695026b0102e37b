"""Toy receiver-side classifiers: motion-direction video classification and audio-visual event recognition."""

import numpy as np

from functions.jscc.models import IMAGE_SHAPE, SPEECH_SAMPLES, FramingConfig
from shared import autodiff as ad
from shared.autodiff import Tensor
from shared.errors import ShapeError
from shared.nn import Conv2d, Linear, Module


TASKS = ("vc", "ave")
CLASS_COUNTS = {"vc": 4, "ave": 4}
VC_FRAMES = 8


class VideoClassifier(Module):
    """Frames stacked on the channel axis, two strided convs, two dense layers."""

    def __init__(self, rng: np.random.Generator, frames: int = VC_FRAMES, widths: tuple[int, int] = (16, 16), hidden: int = 32, classes: int = 4):
        self.frames = frames
        self.conv1 = Conv2d(frames * IMAGE_SHAPE[0], widths[0], rng, stride=2)
        self.conv2 = Conv2d(widths[0], widths[1], rng, stride=2)
        self.dense = Linear(widths[1] * 8 * 8, hidden, rng)
        self.head = Linear(hidden, classes, rng, scale=1.0 / np.sqrt(hidden))

    def forward(self, clip) -> Tensor:
        clip = ad.as_tensor(clip)
        if clip.shape[1:] != (self.frames, *IMAGE_SHAPE):
            raise ShapeError(f"clip batch has shape {clip.shape[1:]}, expected ({self.frames}, {IMAGE_SHAPE})")
        batch = clip.shape[0]
        h = ad.reshape(clip, (batch, self.frames * IMAGE_SHAPE[0], *IMAGE_SHAPE[1:]))
        h = ad.relu(self.conv2(ad.relu(self.conv1(h))))
        return self.head(ad.relu(self.dense(ad.reshape(h, (batch, -1)))))


class AudioVisualClassifier(Module):
    """Image branch and framed-audio branch fused by concatenation. Disabled branches contribute zeros."""

    def __init__(
        self,
        rng: np.random.Generator,
        widths: tuple[int, int] = (8, 8),
        hidden: int = 32,
        classes: int = 4,
        use_image: bool = True,
        use_audio: bool = True,
        framing: FramingConfig = FramingConfig(),
    ):
        self.use_image = use_image
        self.use_audio = use_audio
        self.framing = framing
        self.hidden = hidden
        self.conv1 = Conv2d(IMAGE_SHAPE[0], widths[0], rng, stride=2)
        self.conv2 = Conv2d(widths[0], widths[1], rng, stride=2)
        self.image_dense = Linear(widths[1] * 8 * 8, hidden, rng)
        self.frame_dense = Linear(framing.frame_length, 16, rng)
        self.audio_dense = Linear(16 * framing.frame_count, hidden, rng)
        self.head = Linear(2 * hidden, classes, rng, scale=1.0 / np.sqrt(2 * hidden))

    def forward(self, image, audio) -> Tensor:
        image, audio = ad.as_tensor(image), ad.as_tensor(audio)
        if image.shape[1:] != IMAGE_SHAPE or audio.shape[1:] != (SPEECH_SAMPLES,):
            raise ShapeError(f"AVE inputs have shapes {image.shape[1:]} and {audio.shape[1:]}")
        batch = image.shape[0]
        if self.use_image:
            h = ad.relu(self.conv2(ad.relu(self.conv1(image))))
            image_features = ad.relu(self.image_dense(ad.reshape(h, (batch, -1))))
        else:
            image_features = Tensor(np.zeros((batch, self.hidden)))
        if self.use_audio:
            frames = ad.reshape(audio, (batch, self.framing.frame_count, self.framing.frame_length))
            h = ad.relu(self.frame_dense(frames))
            audio_features = ad.relu(self.audio_dense(ad.reshape(h, (batch, -1))))
        else:
            audio_features = Tensor(np.zeros((batch, self.hidden)))
        return self.head(ad.concat([image_features, audio_features], axis=1))


class Classifier:
    """Task network plus the descriptor needed to rebuild it."""

    def __init__(
        self,
        task: str,
        rng: np.random.Generator,
        role: str = "target",
        width_delta: int = 0,
        hidden_delta: int = 0,
        use_image: bool = True,
        use_audio: bool = True,
    ):
        if task not in TASKS:
            raise ShapeError(f"unknown downstream task '{task}', expected one of {TASKS}")
        self.task = task
        self.role = role
        self.width_delta = width_delta
        self.hidden_delta = hidden_delta
        self.use_image = use_image
        self.use_audio = use_audio
        if task == "vc":
            self.network = VideoClassifier(rng, widths=(16 + width_delta, 16 + width_delta), hidden=32 + hidden_delta)
        else:
            widths = (8 + width_delta, 8 + width_delta)
            self.network = AudioVisualClassifier(rng, widths=widths, hidden=32 + hidden_delta, use_image=use_image, use_audio=use_audio)

    @property
    def classes(self) -> int:
        return CLASS_COUNTS[self.task]

    def logits(self, inputs: tuple) -> Tensor:
        return self.network(*inputs)

    def descriptor(self) -> dict:
        return {
            "task": self.task,
            "role": self.role,
            "width_delta": self.width_delta,
            "hidden_delta": self.hidden_delta,
            "use_image": self.use_image,
            "use_audio": self.use_audio,
        }

    @classmethod
    def from_descriptor(cls, descriptor: dict) -> "Classifier":
        return cls(
            descriptor["task"],
            np.random.default_rng(0),
            descriptor.get("role", "target"),
            descriptor.get("width_delta", 0),
            descriptor.get("hidden_delta", 0),
            descriptor.get("use_image", True),
            descriptor.get("use_audio", True),
        )
