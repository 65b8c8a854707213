"""
Seeded synthetic shapes dataset.

Each sample paints one to four rectangles, disks and triangles over a noisy
grey background. Class c ≥ 1 always has the same shape kind and colour, so
a nearest-colour rule recovers the label from the image. Samples depend only
on (seed, index).
"""

from typing import Iterator, NamedTuple, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from canseg.core.errors import ConfigError, ShapeError
from canseg.tensor.tensor import Tensor

BACKGROUND = (0.5, 0.5, 0.5)
BASE_COLOURS = [
    (0.90, 0.10, 0.10),
    (0.10, 0.80, 0.20),
    (0.10, 0.20, 0.90),
    (0.95, 0.90, 0.10),
    (0.85, 0.10, 0.85),
    (0.10, 0.85, 0.85),
]
SHAPE_KINDS = ("rectangle", "disk", "triangle")
SCALES = (0.75, 1.0, 1.5, 1.75, 2.0)
NOISE_STD = 0.04
JITTER = 0.1


class SynthSample(NamedTuple):
    image: Tensor  # 1×3×H×W in [0, 1]
    label: np.ndarray  # H×W int64


def class_colours(num_classes: int) -> np.ndarray:
    """Row 0 is the background; extra classes beyond the base table get evenly spaced hues."""
    colours = [BACKGROUND] + BASE_COLOURS[: num_classes - 1]
    extra = num_classes - len(colours)
    for i in range(extra):
        hue = i / extra
        colours.append(tuple(0.5 + 0.4 * np.cos(2 * np.pi * (hue + k / 3)) for k in range(3)))
    return np.asarray(colours, dtype=np.float32)


def shape_kind(cls: int) -> str:
    return SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)]


def _check(height: int, width: int, num_classes: int) -> None:
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}", path="num_classes")
    if height <= 0 or width <= 0 or height % 16 or width % 16:
        raise ShapeError(f"synthetic extents must be positive multiples of 16, got {height}x{width}")


def _draw_labels(rng: np.random.Generator, height: int, width: int, num_classes: int) -> np.ndarray:
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    short = min(height, width)
    for _ in range(int(rng.integers(1, 5))):
        cls = int(rng.integers(1, num_classes))
        size = int(rng.integers(max(4, short // 6), max(5, short // 2) + 1))
        x0 = int(rng.integers(-size // 4, width - 3 * size // 4))
        y0 = int(rng.integers(-size // 4, height - 3 * size // 4))
        box = [x0, y0, x0 + size, y0 + size]
        kind = shape_kind(cls)
        if kind == "rectangle":
            draw.rectangle(box, fill=cls)
        elif kind == "disk":
            draw.ellipse(box, fill=cls)
        else:
            draw.polygon([(x0 + size // 2, y0), (x0, y0 + size), (x0 + size, y0 + size)], fill=cls)
    return np.asarray(canvas, dtype=np.int64)


def _resize(image: np.ndarray, label: np.ndarray, h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    channels = [np.asarray(Image.fromarray(c).resize((w, h), Image.BILINEAR)) for c in image]
    resized_label = Image.fromarray(label.astype(np.uint8)).resize((w, h), Image.NEAREST)
    return np.stack(channels).astype(np.float32), np.asarray(resized_label, dtype=np.int64)


def augment(rng: np.random.Generator, image: np.ndarray, label: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Horizontal flip (p = 0.5), scale jitter with crop/pad back to H×W, per-channel colour jitter."""
    _, H, W = image.shape
    if rng.random() < 0.5:
        image, label = image[:, :, ::-1], label[:, ::-1]
    s = SCALES[int(rng.integers(len(SCALES)))]
    h, w = max(1, round(H * s)), max(1, round(W * s))
    if (h, w) != (H, W):
        image, label = _resize(np.ascontiguousarray(image), np.ascontiguousarray(label), h, w)
    canvas = np.empty((3, max(h, H), max(w, W)), dtype=np.float32)
    canvas[:] = np.asarray(BACKGROUND, dtype=np.float32)[:, None, None]
    canvas_label = np.zeros(canvas.shape[1:], dtype=np.int64)
    py, px = int(rng.integers(0, max(H - h, 0) + 1)), int(rng.integers(0, max(W - w, 0) + 1))
    canvas[:, py:py + h, px:px + w] = image
    canvas_label[py:py + h, px:px + w] = label
    cy, cx = int(rng.integers(0, max(h - H, 0) + 1)), int(rng.integers(0, max(w - W, 0) + 1))
    image = canvas[:, cy:cy + H, cx:cx + W]
    label = canvas_label[cy:cy + H, cx:cx + W]
    image = image + rng.uniform(-JITTER, JITTER, size=(3, 1, 1)).astype(np.float32)
    return np.clip(image, 0.0, 1.0), np.ascontiguousarray(label)


def generate_sample(seed: int, index: int, height: int, width: int, num_classes: int, augmented: bool = False) -> SynthSample:
    _check(height, width, num_classes)
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    label = _draw_labels(rng, height, width, num_classes)
    image = class_colours(num_classes)[label].transpose(2, 0, 1)
    image = image + rng.normal(0.0, NOISE_STD, size=image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    if augmented:
        image, label = augment(rng, image, label)
    return SynthSample(Tensor(np.ascontiguousarray(image)[None]), label)


def synth_dataset(
    seed: int, count: int, height: int, width: int, num_classes: int, augmented: bool = False, start: int = 0
) -> Iterator[SynthSample]:
    for index in range(start, start + count):
        yield generate_sample(seed, index, height, width, num_classes, augmented)


def make_batch(
    seed: int, indices: Sequence[int], height: int, width: int, num_classes: int, augmented: bool = False
) -> Tuple[Tensor, np.ndarray]:
    samples = [generate_sample(seed, i, height, width, num_classes, augmented) for i in indices]
    images = np.concatenate([s.image.data for s in samples], axis=0)
    return Tensor(images), np.stack([s.label for s in samples])


def decode_labels(image: np.ndarray, num_classes: int) -> np.ndarray:
    """Nearest class colour per pixel of a (1×)3×H×W image."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 4:
        image = image[0]
    colours = class_colours(num_classes)
    dist = ((image[None] - colours[:, :, None, None]) ** 2).sum(axis=1)
    return dist.argmin(axis=0).astype(np.int64)
