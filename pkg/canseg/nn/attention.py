"""Context aggregation: reduced global attention and local attention."""

from typing import Tuple

from canseg.models.schemas import GhostConvConfig, SPPConfig
from canseg.nn.blocks import GhostConv, flatten_levels, spp_levels
from canseg.nn.module import Conv2d, ConvBNAct, Module
from canseg.tensor import ops
from canseg.tensor.tensor import Tensor


class ReducedGlobalAttention(Module):
    """Query over every position, keys and values over SPP-sampled positions.

    With `use_spp=False` keys and values cover the full grid, which is the
    dense non-local block. The block is residual, and its output projection
    starts at zero so a fresh block is the identity.
    """

    def __init__(
        self,
        channels: int,
        embed: int,
        value: int,
        spp: SPPConfig,
        ghost: GhostConvConfig,
        groups: int = 1,
        use_spp: bool = True,
        use_cheap_ops: bool = True,
        rng=None,
    ) -> None:
        super().__init__()
        self.channels = channels
        self.embed = embed
        self.value_channels = value
        self.spp = spp
        self.groups = groups
        self.use_spp = use_spp
        self.use_cheap_ops = use_cheap_ops

        def projection(out_channels: int) -> Module:
            if use_cheap_ops:
                return GhostConv(channels, ghost.with_out(out_channels), rng=rng)
            return Conv2d(channels, out_channels, 1, rng=rng)

        self.query = projection(embed)
        self.key = projection(embed)
        self.value = projection(value)
        self.out_proj = Conv2d(value, channels, 1, rng=rng, zero_init=True)

    def _keys_values(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        N, _, h, w = x.shape
        if not self.use_spp:
            k = ops.reshape(self.key(x), (N, self.embed, 1, h * w))
            v = ops.reshape(self.value(x), (N, self.value_channels, 1, h * w))
            return k, v
        levels = spp_levels(x, self.spp)
        k = flatten_levels([self.key(t) for t in levels])
        v = flatten_levels([self.value(t) for t in levels])
        return k, v

    def attend(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """Return (aggregated values as N×V×h×w, affinity as N×G×A×M)."""
        N, _, h, w = x.shape
        G, A = self.groups, h * w
        E, V = self.embed // G, self.value_channels // G
        q = ops.permute(ops.reshape(self.query(x), (N, G, E, A)), (0, 1, 3, 2))
        k, v = self._keys_values(x)
        M = k.shape[3]
        k = ops.reshape(k, (N, G, E, M))
        v = ops.permute(ops.reshape(v, (N, G, V, M)), (0, 1, 3, 2))
        affinity = ops.softmax(ops.matmul(q, k))
        aggregated = ops.permute(ops.matmul(affinity, v), (0, 1, 3, 2))
        return ops.reshape(aggregated, (N, self.value_channels, h, w)), affinity

    def forward(self, x: Tensor) -> Tensor:
        aggregated, _ = self.attend(x)
        return ops.add(x, self.out_proj(aggregated))


class LocalAttention(Module):
    """Three depthwise 3×3 convs predict a per-position gate; out = x + x * gate."""

    def __init__(self, channels: int, rng=None) -> None:
        super().__init__()
        self.dw1 = ConvBNAct(channels, channels, 3, groups=channels, act="relu", rng=rng)
        self.dw2 = ConvBNAct(channels, channels, 3, groups=channels, act="relu", rng=rng)
        self.dw3 = Conv2d(channels, channels, 3, groups=channels, bias=True, rng=rng)

    def gate(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.dw3(self.dw2(self.dw1(x))))

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(x, ops.mul(x, self.gate(x)))

