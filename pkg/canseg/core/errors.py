"""Exception hierarchy shared by every canseg package."""

from typing import Optional


class CansegError(Exception):
    """Base class for all errors raised by canseg."""


class ShapeError(CansegError):
    """Tensor extents do not satisfy an operation's contract."""


class PrecisionError(CansegError):
    """Operands of one operation carry different precisions."""


class NumericError(CansegError):
    """A non-finite value appeared where finite values are required."""

    def __init__(self, message: str, param_index: Optional[int] = None):
        super().__init__(message)
        self.param_index = param_index


class BackwardError(CansegError):
    """Reverse sweep requested on something that is not a tracked scalar."""


class ConfigError(CansegError):
    """Invalid configuration; `path` is the dotted location of the first bad field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class ContainerError(CansegError):
    """Weight container cannot be decoded or does not match the model."""

    def __init__(self, message: str, tensor: Optional[str] = None):
        super().__init__(f"{message} (tensor '{tensor}')" if tensor else message)
        self.tensor = tensor


class ChecksumError(ContainerError):
    pass


class TruncatedContainerError(ContainerError):
    pass


class ImageFormatError(CansegError):
    """Malformed PPM/PGM stream; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset
