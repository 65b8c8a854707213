"""
CANW weight container.

Layout (little-endian): magic b"CANW", u16 version, u32 tensor count; per
tensor a u16 name length, UTF-8 name, u8 dtype code (0 = float32,
1 = float64), u8 rank, rank × u32 dims and the raw payload; a trailing
CRC32 covers every preceding byte.
"""

import json
import logging
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np

from canseg.core.errors import ChecksumError, ContainerError, TruncatedContainerError
from canseg.models.schemas import ModelConfig
from canseg.nn.can import CanModel
from canseg.nn.module import Module
from canseg.services.optim import SGD

logger = logging.getLogger(__name__)

MAGIC = b"CANW"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}

WEIGHTS_FILE = "weights.canw"
OPTIMIZER_FILE = "optimizer.canw"
STATE_FILE = "state.json"


def encode_container(arrays: Mapping[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(arrays))
    for name, array in arrays.items():
        array = np.asarray(array)
        dtype = array.dtype.newbyteorder("<")
        if dtype not in DTYPE_CODES:
            raise ContainerError(f"unsupported dtype {array.dtype}", tensor=name)
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<BB", DTYPE_CODES[dtype], array.ndim)
        out += struct.pack(f"<{array.ndim}I", *array.shape)
        out += np.ascontiguousarray(array, dtype=dtype).tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.end = end
        self.offset = 0
        self.tensor: Optional[str] = None

    def take(self, n: int) -> bytes:
        if self.offset + n > self.end:
            raise TruncatedContainerError(
                f"stream ends at byte {self.end}, needed {n} bytes at offset {self.offset}", tensor=self.tensor
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_container(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise ContainerError("bad magic, not a CANW container")
    reader = _Reader(data, max(len(data) - 4, 0))
    reader.take(len(MAGIC))
    version, count = reader.unpack("<HI")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (length,) = reader.unpack("<H")
        name = reader.take(length).decode("utf-8")
        reader.tensor = name
        if name in arrays:
            raise ContainerError("duplicate tensor name", tensor=name)
        code, rank = reader.unpack("<BB")
        if code not in CODE_DTYPES:
            raise ContainerError(f"unknown dtype code {code}", tensor=name)
        dims = reader.unpack(f"<{rank}I") if rank else ()
        dtype = CODE_DTYPES[code]
        payload = reader.take(int(np.prod(dims, dtype=np.int64)) * dtype.itemsize)
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if len(data) < reader.offset + 4:
        raise TruncatedContainerError("missing trailing CRC32", tensor=reader.tensor)
    if reader.offset + 4 != len(data):
        raise ContainerError(f"{len(data) - reader.offset - 4} unexpected bytes after the last tensor")
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored:
        raise ChecksumError(f"CRC32 mismatch: stored {stored:08x}, computed {zlib.crc32(data[:-4]):08x}")
    return arrays


def save_weights(model: Module) -> bytes:
    """Every parameter and buffer, in parameter-walk order."""
    return encode_container({name: t.data for name, t in model.state_dict().items()})


def load_weights(data: bytes, config: ModelConfig) -> CanModel:
    model = CanModel(config)
    model.load_state_dict(decode_container(data))
    return model


def write_weights(model: Module, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = save_weights(model)
    path.write_bytes(payload)
    logger.debug("wrote %d bytes of weights to %s", len(payload), path)


def read_weights(path: Path, config: ModelConfig) -> CanModel:
    path = Path(path)
    logger.debug("reading weights from %s", path)
    return load_weights(path.read_bytes(), config)


def save_checkpoint(directory: Path, model: Module, optimizer: SGD, iteration: int, seed: int) -> Path:
    """Weights, optimiser velocities and the next iteration, enough to resume bit-identically."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / WEIGHTS_FILE).write_bytes(save_weights(model))
    (directory / OPTIMIZER_FILE).write_bytes(encode_container(optimizer.state_dict()))
    (directory / STATE_FILE).write_text(json.dumps({"iteration": iteration, "seed": seed}))
    logger.debug("checkpoint at iteration %d written to %s", iteration, directory)
    return directory


def load_checkpoint(directory: Path, model: Module, optimizer: SGD) -> Dict[str, int]:
    directory = Path(directory)
    model.load_state_dict(decode_container((directory / WEIGHTS_FILE).read_bytes()))
    optimizer.load_state_dict(decode_container((directory / OPTIMIZER_FILE).read_bytes()))
    state = json.loads((directory / STATE_FILE).read_text())
    logger.debug("resumed from %s at iteration %d", directory, state["iteration"])
    return state
