"""Module base class with hierarchical parameter naming, plus the conv and batch-norm layers."""

import math
from collections import OrderedDict
from typing import Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from canseg.core.errors import ContainerError
from canseg.tensor import ops
from canseg.tensor.tensor import Precision, Tensor


class Module:
    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_parameter(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        object.__setattr__(self, name, t)
        return t

    def register_buffer(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data)
        self._buffers[name] = t
        object.__setattr__(self, name, t)
        return t

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for path, module in self.named_modules(prefix):
            for name, t in module._params.items():
                yield (f"{path}.{name}" if path else name), t

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for path, module in self.named_modules(prefix):
            for name, t in module._buffers.items():
                yield (f"{path}.{name}" if path else name), t

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, Tensor]":
        """Parameters followed by buffers, keyed by hierarchical name."""
        state = OrderedDict(self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        state = self.state_dict()
        for name in arrays:
            if name not in state:
                raise ContainerError("unknown tensor", tensor=name)
        for name, t in state.items():
            if name not in arrays:
                raise ContainerError("missing tensor", tensor=name)
            src = np.asarray(arrays[name])
            if src.shape != t.shape:
                raise ContainerError(f"shape {src.shape} does not match expected {t.shape}", tensor=name)
        for name, t in state.items():
            t.data = np.ascontiguousarray(np.asarray(arrays[name]), dtype=t.data.dtype).copy()

    def num_parameters(self, include_buffers: bool = True) -> int:
        tensors = self.state_dict().values() if include_buffers else self.parameters()
        return int(np.sum([t.size for t in tensors], dtype=np.int64))

    @property
    def dtype(self) -> np.dtype:
        params = self.parameters()
        return params[0].data.dtype if params else np.dtype(np.float32)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, precision: Precision) -> "Module":
        for t in self.state_dict().values():
            t.data = t.data.astype(precision.dtype)
        return self


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()) -> None:
        super().__init__()
        self._items: List[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


def kaiming_fan_out(rng: np.random.Generator, shape: Tuple[int, int, int, int], groups: int = 1) -> np.ndarray:
    fan_out = shape[0] * shape[2] * shape[3] // groups
    return rng.normal(0.0, math.sqrt(2.0 / fan_out), size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding: Optional[int] = None,
        groups: int = 1,
        bias: bool = False,
        rng: Optional[np.random.Generator] = None,
        zero_init: bool = False,
    ) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups
        shape = (out_channels, in_channels // groups, kernel, kernel)
        w = np.zeros(shape, np.float32) if zero_init else kaiming_fan_out(rng, shape, groups)
        self.register_parameter("weight", w)
        self.bias = self.register_parameter("bias", np.zeros((1, out_channels, 1, 1), np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> None:
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        shape = (1, channels, 1, 1)
        self.register_parameter("gamma", np.ones(shape, np.float32))
        self.register_parameter("beta", np.zeros(shape, np.float32))
        self.register_buffer("running_mean", np.zeros(shape, np.float32))
        self.register_buffer("running_var", np.ones(shape, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps, self.training, self.momentum
        )


class ConvBNAct(Module):
    """Bias-free conv, batch norm, then an optional activation."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        groups: int = 1,
        act: Optional[str] = "relu",
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, stride, groups=groups, rng=rng)
        self.bn = BatchNorm2d(out_channels)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return ops.activation(y, self.act) if self.act else y
