"""Flat-batch GraphSAGE: mean neighbour aggregation, self-concat, linear map, ReLU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, UsageError
from .graphbuild import BatchedGraph
from .tensorcore import Tensor


@dataclass
class SageLayerParams:
    weight: Tensor  # Cout x 2*Cin, columns [self | neighbour mean]
    bias: Tensor  # Cout

    @classmethod
    def init(cls, c_in: int, c_out: int, rng: np.random.Generator, name: str = "sage") -> "SageLayerParams":
        bound = np.sqrt(6.0 / (2 * c_in + c_out))
        w = rng.uniform(-bound, bound, size=(c_out, 2 * c_in))
        return cls(Tensor(w, requires_grad=True, name=f"{name}.weight"),
                   Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.bias"))

    @property
    def c_in(self) -> int:
        return self.weight.shape[1] // 2

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]


def scatter_mean(x: Tensor, graph: BatchedGraph) -> Tensor:
    """Row ``v`` becomes the mean of ``x`` over v's in-neighbours (zero if none)."""
    if x.data.ndim != 2 or x.shape[0] != graph.n_nodes:
        raise ConfigurationError(f"scatter_mean: features {x.shape} vs graph with {graph.n_nodes} nodes")
    M = graph.mean_operator(x.dtype)
    return tc._emit("scatter_mean", M @ x.data, (x,), lambda g: (M.T @ g,))


def scatter_max(x: Tensor, graph: BatchedGraph) -> Tensor:
    """Elementwise max over in-neighbours; zero for isolated nodes."""
    if x.data.ndim != 2 or x.shape[0] != graph.n_nodes:
        raise ConfigurationError(f"scatter_max: features {x.shape} vs graph with {graph.n_nodes} nodes")
    deg = np.diff(graph.indptr)
    has = deg > 0
    out = np.zeros_like(x.data)
    gathered = x.data[graph.indices]
    # argmax over each CSR segment; first occurrence wins on ties
    arg = np.zeros(x.shape, dtype=np.int64)
    if graph.n_edges:
        starts = graph.indptr[:-1][has]
        out[has] = np.maximum.reduceat(gathered, starts, axis=0)
        seg = np.repeat(np.arange(graph.n_nodes), deg)
        hit = gathered == out[seg]
        pos = np.where(hit, np.arange(graph.n_edges)[:, None], graph.n_edges)
        first = np.full(x.shape, graph.n_edges, dtype=np.int64)
        np.minimum.at(first, seg, pos)
        arg = np.where(has[:, None], graph.indices[np.minimum(first, graph.n_edges - 1)], 0)

    def vjp(g):
        gx = np.zeros_like(x.data)
        cols = np.broadcast_to(np.arange(x.shape[1]), x.shape)
        np.add.at(gx, (arg[has], cols[has]), g[has])
        return (gx,)

    return tc._emit("scatter_max", out, (x,), vjp, kink=arg.astype(np.uint8))


AGGREGATORS = {"mean": scatter_mean, "max": scatter_max}


def to_nodes(X: Tensor) -> Tensor:
    """BxCxHxW -> (B*H*W) x C, node-major within each image."""
    B, C, H, W = X.shape
    return tc.reshape(tc.permute(X, (0, 2, 3, 1)), (B * H * W, C))


def from_nodes(Y: Tensor, B: int, H: int, W: int) -> Tensor:
    return tc.permute(tc.reshape(Y, (B, H, W, Y.shape[1])), (0, 3, 1, 2))


def sage_nodes(h: Tensor, graph: BatchedGraph, params: SageLayerParams, aggregator: str = "mean") -> Tensor:
    """The node update on an N x Cin matrix; returns N x Cout."""
    agg = AGGREGATORS[aggregator](h, graph)
    z = tc.matmul(tc.concat_channels([h, agg]), tc.permute(params.weight, (1, 0)))
    z = tc.add(z, tc.broadcast_to(tc.reshape(params.bias, (1, params.c_out)), z.shape))
    return tc.relu(z)


def sage_forward(X: Tensor, graph: BatchedGraph, params: SageLayerParams, aggregator: str = "mean") -> Tensor:
    """Apply one GraphSAGE layer to a whole batch at once.

    The batch is flattened to ``B*H*W`` nodes, aggregated over the disjoint
    flat-batch graph, transformed, and reshaped back to ``B x Cout x H x W``.
    """
    if X.data.ndim != 4:
        raise ConfigurationError(f"sage_forward expects BxCxHxW, got {X.shape}")
    B, C, H, W = X.shape
    if graph.batch_size != B or graph.nodes_per_image != H * W:
        raise UsageError(f"graph built for B={graph.batch_size}, {graph.nodes_per_image} nodes/image; "
                         f"features are B={B}, {H}x{W}")
    if C != params.c_in:
        raise ConfigurationError(f"SAGE layer expects {params.c_in} channels, got {C}")
    if aggregator not in AGGREGATORS:
        raise ConfigurationError(f"unknown aggregator {aggregator!r}")
    return from_nodes(sage_nodes(to_nodes(X), graph, params, aggregator), B, H, W)
