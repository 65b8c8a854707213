from canseg.nn.attention import LocalAttention, ReducedGlobalAttention
from canseg.nn.blocks import DSConv, GhostConv, InvertedResidual, SqueezeExcite, spp_flatten
from canseg.nn.can import CanModel, ForwardOutput, build_model
from canseg.nn.module import BatchNorm2d, Conv2d, ConvBNAct, Module, ModuleList

__all__ = [
    "BatchNorm2d",
    "CanModel",
    "Conv2d",
    "ConvBNAct",
    "DSConv",
    "ForwardOutput",
    "GhostConv",
    "InvertedResidual",
    "LocalAttention",
    "Module",
    "ModuleList",
    "ReducedGlobalAttention",
    "SqueezeExcite",
    "build_model",
    "spp_flatten",
]
