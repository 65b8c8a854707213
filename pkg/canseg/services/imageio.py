"""Binary PPM (P6) / PGM (P5) io and palette rendering of label maps."""

import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from canseg.core.errors import ConfigError, ImageFormatError, ShapeError

logger = logging.getLogger(__name__)

CITYSCAPES_PALETTE = np.array(
    [
        (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
        (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
        (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
        (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
    ],
    dtype=np.uint8,
)
IGNORE_COLOUR = (0, 0, 0)


def palette(num_classes: int) -> np.ndarray:
    """The 19-colour Cityscapes palette for K = 19, otherwise bit-interleaved VOC-style colours."""
    if num_classes == len(CITYSCAPES_PALETTE):
        return CITYSCAPES_PALETTE.copy()
    if not 1 <= num_classes <= 256:
        raise ConfigError(f"palette needs 1..256 classes, got {num_classes}", path="num_classes")
    colours = np.zeros((num_classes, 3), dtype=np.uint8)
    for i in range(num_classes):
        c, rgb = i, [0, 0, 0]
        for j in range(8):
            for k in range(3):
                rgb[k] |= ((c >> k) & 1) << (7 - j)
            c >>= 3
        colours[i] = rgb
    return colours


def color_map(label: np.ndarray, colours: np.ndarray, ignore_index: int = 255) -> np.ndarray:
    label = np.asarray(label)
    out = np.empty(label.shape + (3,), dtype=np.uint8)
    out[...] = IGNORE_COLOUR
    valid = (label >= 0) & (label < len(colours)) & (label != ignore_index)
    out[valid] = colours[label[valid]]
    return out


def _header(magic: bytes, width: int, height: int) -> bytes:
    return magic + f"\n{width} {height}\n255\n".encode("ascii")


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"PPM image must be H×W×3, got {image.shape}")
    return _header(b"P6", image.shape[1], image.shape[0]) + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def encode_pgm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"PGM image must be H×W, got {image.shape}")
    header = _header(b"P5", image.shape[1], image.shape[0])
    bad = np.flatnonzero((image < 0) | (image > 255))
    if bad.size:
        raise ImageFormatError(f"PGM values must lie in [0, 255], got {image.reshape(-1)[bad[0]]}", offset=len(header) + int(bad[0]))
    return header + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def _parse_header(data: bytes, magic: bytes) -> Tuple[int, int, int]:
    """Return (width, height, payload offset)."""
    if data[:2] != magic:
        raise ImageFormatError(f"expected magic {magic.decode()}, found {data[:2]!r}", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed header, expected an unsigned integer", offset=start)
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("header must end with a single whitespace byte", offset=pos)
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}", offset=pos)
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"extents must be positive, got {width}x{height}", offset=pos)
    return width, height, pos + 1


def _decode(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    width, height, offset = _parse_header(data, magic)
    need = width * height * channels
    if len(data) - offset < need:
        raise ImageFormatError(f"short payload, need {need} bytes, have {len(data) - offset}", offset=len(data))
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return pixels.reshape(shape).copy()


def decode_ppm(data: bytes) -> np.ndarray:
    return _decode(data, b"P6", 3)


def decode_pgm(data: bytes) -> np.ndarray:
    return _decode(data, b"P5", 1)


PathLike = Union[str, Path]


def read_ppm(path: PathLike) -> np.ndarray:
    logger.debug("reading %s", path)
    return decode_ppm(Path(path).read_bytes())


def read_pgm(path: PathLike) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))
    logger.debug("wrote %s", path)


def write_label_pgm(path: PathLike, label: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(label))
    logger.debug("wrote %s", path)


def write_color_map(path: PathLike, label: np.ndarray, colours: Optional[np.ndarray] = None, num_classes: int = 19) -> None:
    colours = palette(num_classes) if colours is None else colours
    write_ppm(path, color_map(label, colours))


def to_chw_float(image: np.ndarray) -> np.ndarray:
    """H×W×3 uint8 → 1×3×H×W float32 in [0, 1]."""
    return (np.asarray(image, dtype=np.float32) / 255.0).transpose(2, 0, 1)[None].copy()


def to_hwc_uint8(image: np.ndarray) -> np.ndarray:
    """(1×)3×H×W float in [0, 1] → H×W×3 uint8."""
    image = np.asarray(image)
    if image.ndim == 4:
        image = image[0]
    return np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
