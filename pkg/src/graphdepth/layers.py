"""Channel-attention skip gate, decoder stages and the depth/uncertainty heads."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, UsageError
from .gnn import SageLayerParams, sage_forward
from .graphbuild import BatchedGraph, KnnParams, build_batched
from .tensorcore import Tensor

LOG_VAR_BOUNDS = (-10.0, 10.0)


def _param(arr, name):
    return Tensor(arr, requires_grad=True, name=name)


@dataclass
class ConvParams:
    kernel: Tensor
    bias: Tensor

    @classmethod
    def init(cls, c_in, c_out, rng, name, k=3, scale=None):
        # He-uniform unless an explicit bound is given
        bound = math.sqrt(6.0 / (c_in * k * k)) if scale is None else scale
        return cls(_param(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)), f"{name}.kernel"),
                   _param(np.zeros(c_out), f"{name}.bias"))


def conv_relu(x: Tensor, p: ConvParams, stride: int = 1) -> Tensor:
    return tc.relu(tc.conv2d(x, p.kernel, p.bias, stride=stride, padding=p.kernel.shape[2] // 2))


@dataclass
class AttentionParams:
    w1: Tensor  # hidden x C
    b1: Tensor
    w2: Tensor  # C x hidden
    b2: Tensor
    reduction: int = 16

    @staticmethod
    def hidden_width(channels: int, reduction: int = 16) -> int:
        return max(1, math.ceil(channels / reduction))

    @classmethod
    def init(cls, channels, rng, name, reduction=16):
        h = cls.hidden_width(channels, reduction)
        b = math.sqrt(6.0 / (channels + h))
        return cls(_param(rng.uniform(-b, b, size=(h, channels)), f"{name}.w1"), _param(np.zeros(h), f"{name}.b1"),
                   _param(rng.uniform(-b, b, size=(channels, h)), f"{name}.w2"),
                   _param(np.zeros(channels), f"{name}.b2"), reduction)

    @property
    def channels(self) -> int:
        return self.w1.shape[1]


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    z = tc.matmul(x, tc.permute(w, (1, 0)))
    return tc.add(z, tc.broadcast_to(tc.reshape(b, (1, b.shape[0])), z.shape))


def attention_gate(X: Tensor, p: AttentionParams) -> Tensor:
    """Per-channel gate ``sigmoid(W2 relu(W1 GAP(X)))``, shape BxCx1x1."""
    B, C = X.shape[:2]
    if C != p.channels:
        raise ConfigurationError(f"attention expects {p.channels} channels, got {C}")
    pooled = tc.reshape(tc.global_avg_pool(X), (B, C))
    hidden = tc.relu(_affine(pooled, p.w1, p.b1))
    return tc.reshape(tc.sigmoid(_affine(hidden, p.w2, p.b2)), (B, C, 1, 1))


def channel_attention(X: Tensor, p: AttentionParams) -> Tensor:
    gate = attention_gate(X, p)
    return tc.mul(tc.broadcast_to(gate, X.shape), X)


@dataclass
class StageParams:
    attention: AttentionParams | None
    sage: SageLayerParams | None
    conv: ConvParams | None


@lru_cache(maxsize=32)
def _grid_batch(kind: str, H: int, W: int, B: int) -> BatchedGraph:
    return build_batched(kind, H, W, B)


def graph_for(X: Tensor, kind: str, knn: KnnParams) -> BatchedGraph:
    """Flat-batch graph for a feature map; k is capped at ``H*W - 1`` on tiny maps."""
    B, _, H, W = X.shape
    if kind != "knn":
        return _grid_batch(kind, H, W, B)
    k = min(knn.k, H * W - 1)
    if k < 1:
        return _grid_batch("grid8", H, W, B)  # single node: no neighbours either way
    return build_batched("knn", H, W, B, X.data, KnnParams(k, knn.alpha, knn.beta, knn.normalize))


def decoder_stage(g_prev: Tensor, skip: Tensor, stage: int, params: StageParams, graph_kind: str = "grid8",
                  knn: KnnParams = KnnParams(), aggregator: str = "mean", counter: Counter | None = None) -> Tensor:
    """Upsample, concat the skip, gate, then GraphSAGE (stages 1-2) or conv+ReLU."""
    d = tc.upsample2x(g_prev)
    if d.shape[0] != skip.shape[0] or d.shape[2:] != skip.shape[2:]:
        raise UsageError(f"decoder stage {stage}: upsampled {d.shape} does not match skip {skip.shape}")
    s = tc.concat_channels([d, skip])
    if params.attention is not None:
        s = channel_attention(s, params.attention)
    if stage <= 2 and params.sage is not None:
        if counter is not None:
            counter[stage] += 1
        return sage_forward(s, graph_for(s, graph_kind, knn), params.sage, aggregator)
    if params.conv is None:
        raise ConfigurationError(f"decoder stage {stage} has neither GraphSAGE nor conv parameters")
    return conv_relu(s, params.conv)


@dataclass
class HeadParams:
    depth: ConvParams
    uncertainty: ConvParams | None
    max_depth: float = 10.0
    log_var_bounds: tuple = LOG_VAR_BOUNDS

    def __post_init__(self):
        if self.max_depth <= 0:
            raise ConfigurationError("max_depth must be positive")


@dataclass
class Prediction:
    depth: Tensor  # B x H x W, in (0, max_depth)
    log_var: Tensor | None  # B x H x W log sigma^2, or None without the uncertainty head

    def sigma(self) -> np.ndarray | None:
        """Predicted standard deviation ``exp(S / 2)``."""
        return None if self.log_var is None else np.exp(self.log_var.data / 2)


def heads(g3: Tensor, params: HeadParams, factor: int = 4) -> Prediction:
    B, _, h, w = g3.shape
    z = tc.conv2d(g3, params.depth.kernel, params.depth.bias, padding=1)
    depth = tc.upsample_bilinear(tc.scale(tc.sigmoid(z), params.max_depth), factor)
    depth = tc.reshape(depth, (B, h * factor, w * factor))
    log_var = None
    if params.uncertainty is not None:
        s = tc.conv2d(g3, params.uncertainty.kernel, params.uncertainty.bias, padding=1)
        s = tc.upsample_bilinear(tc.clamp(s, *params.log_var_bounds), factor)
        log_var = tc.reshape(s, (B, h * factor, w * factor))
    return Prediction(depth, log_var)
