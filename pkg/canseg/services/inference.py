"""Inference: pad to the model's /16 grid, predict, crop back, write label and colour maps."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from canseg.core.config import settings
from canseg.core.errors import ShapeError
from canseg.nn.can import CanModel
from canseg.services import imageio
from canseg.tensor.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

GRID = 16


def pad_to_grid(images: np.ndarray, grid: int = GRID) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Reflect-pad the bottom and right edges of N×C×H×W up to multiples of `grid`."""
    if images.ndim != 4:
        raise ShapeError(f"expected N×C×H×W images, got {images.shape}")
    H, W = images.shape[2:]
    ph, pw = -H % grid, -W % grid
    if ph or pw:
        images = np.pad(images, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return images, (H, W)


def predict_logits(model: CanModel, images: np.ndarray) -> np.ndarray:
    """Inference-mode logits for N×3×H×W images of any extent, cropped back to H×W."""
    padded, (H, W) = pad_to_grid(np.asarray(images))
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            logits = model(Tensor(padded)).primary_logits.data
    finally:
        model.train(was_training)
    return logits[:, :, :H, :W]


def predict_labels(model: CanModel, images: np.ndarray) -> np.ndarray:
    return predict_logits(model, images).argmax(axis=1).astype(np.int64)


def output_paths(prefix: Path, image: Path, many: bool) -> Tuple[Path, Path]:
    base = Path(f"{prefix}-{image.stem}") if many else Path(prefix)
    return base.with_name(base.name + ".labels.pgm"), base.with_name(base.name + ".color.ppm")


def infer_file(model: CanModel, image_path: Path, prefix: Path, many: bool = False) -> Tuple[Path, Path]:
    image = imageio.read_ppm(image_path)
    label = predict_labels(model, imageio.to_chw_float(image).astype(model.dtype))[0]
    label_path, color_path = output_paths(prefix, Path(image_path), many)
    label_path.parent.mkdir(parents=True, exist_ok=True)
    imageio.write_label_pgm(label_path, label.astype(np.uint8))
    imageio.write_color_map(color_path, label, num_classes=model.config.num_classes)
    logger.info("%s: %dx%d → %s, %s", image_path, image.shape[1], image.shape[0], label_path, color_path)
    return label_path, color_path


def infer_files(model: CanModel, images: Sequence[Path], prefix: Path, threads: Optional[int] = None) -> List[Tuple[Path, Path]]:
    """Run several images concurrently over the shared, read-only model."""
    model.eval()
    many = len(images) > 1
    workers = threads or settings.threads or min(len(images), os.cpu_count() or 1)
    workers = max(1, min(workers, len(images)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda p: infer_file(model, Path(p), Path(prefix), many), images))
