"""Grid and adaptive k-NN adjacency over feature-map nodes.

Node ``i`` of an ``H x W`` map sits at row ``i // W``, column ``i % W``.
Topologies are stored CSR-by-destination: the in-neighbours of node ``v``
are ``indices[indptr[v]:indptr[v + 1]]`` in ascending source order, which
fixes the summation order of every aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, UsageError

GRID_KINDS = {4: "grid4", 8: "grid8"}


@dataclass(frozen=True)
class KnnParams:
    k: int = 16
    alpha: float = 0.7  # feature-distance weight
    beta: float = 0.3  # spatial-distance weight
    normalize: bool = True  # L2-normalise features, scale coords to [0, 1]

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"k must be positive, got {self.k}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be non-negative")


@dataclass(frozen=True, eq=False)
class GraphTopology:
    n_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    kind: str
    k: int | None = None

    def __post_init__(self):
        for arr in (self.indptr, self.indices):
            arr.flags.writeable = False

    @property
    def n_edges(self) -> int:
        return int(self.indices.size)

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed ``(src, dst)`` arrays in CSR order."""
        dst = np.repeat(np.arange(self.n_nodes), self.degrees())
        return self.indices.copy(), dst

    def edge_set(self) -> set[tuple[int, int]]:
        src, dst = self.edges()
        return set(zip(src.tolist(), dst.tolist()))

    def to_edge_list(self) -> str:
        """Plain-text ``"src dst\\n"`` export for external inspection."""
        src, dst = self.edges()
        return "".join(f"{s} {d}\n" for s, d in zip(src.tolist(), dst.tolist()))

    def same_as(self, other: "GraphTopology") -> bool:
        return (self.n_nodes == other.n_nodes and self.kind == other.kind and self.k == other.k
                and np.array_equal(self.indptr, other.indptr) and np.array_equal(self.indices, other.indices))


def from_edges(n_nodes: int, src, dst, kind: str, k: int | None = None) -> GraphTopology:
    """Build a canonical CSR topology from unsorted directed edges."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if src.size and (src.min() < 0 or dst.min() < 0 or src.max() >= n_nodes or dst.max() >= n_nodes):
        raise ConfigurationError("edge index out of range")
    if np.any(src == dst):
        raise ConfigurationError("self-loops are not allowed")
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(dst, minlength=n_nodes), out=indptr[1:])
    return GraphTopology(n_nodes, indptr, src, kind, k)


@lru_cache(maxsize=64)
def build_grid(H: int, W: int, connectivity: int = 8) -> GraphTopology:
    """8-connected (Chebyshev 1) or 4-connected (Manhattan 1) pixel grid."""
    if H < 1 or W < 1:
        raise ConfigurationError(f"grid extents must be positive, got {H}x{W}")
    if connectivity not in GRID_KINDS:
        raise ConfigurationError(f"connectivity must be 4 or 8, got {connectivity}")
    offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        offsets += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    rows, cols = np.divmod(np.arange(H * W), W)
    src_parts, dst_parts = [], []
    for dr, dc in offsets:
        r, c = rows + dr, cols + dc
        ok = (r >= 0) & (r < H) & (c >= 0) & (c < W)
        src_parts.append(r[ok] * W + c[ok])
        dst_parts.append(rows[ok] * W + cols[ok])
    return from_edges(H * W, np.concatenate(src_parts), np.concatenate(dst_parts), GRID_KINDS[connectivity])


def grid_edge_count(H: int, W: int, connectivity: int = 8) -> int:
    """Closed-form number of directed edges in a grid topology."""
    straight = H * (W - 1) + (H - 1) * W
    if connectivity == 4:
        return 2 * straight
    return 2 * (straight + 2 * (H - 1) * (W - 1))


def grid_coords(H: int, W: int) -> np.ndarray:
    """Per-node ``(row, col)`` pixel coordinates, row-major."""
    rows, cols = np.divmod(np.arange(H * W), W)
    return np.stack([rows, cols], axis=1).astype(np.float64)


def _normalized(features: np.ndarray, coords: np.ndarray, normalize: bool):
    f = np.asarray(features, dtype=np.float64)
    p = np.asarray(coords, dtype=np.float64)
    if not normalize:
        return f, p
    norms = np.sqrt((f * f).sum(axis=1, keepdims=True))
    f = np.divide(f, norms, out=np.zeros_like(f), where=norms > 0)
    lo, hi = p.min(axis=0), p.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return f, (p - lo) / span


def knn_distances(features, coords, params: KnnParams, rows=None) -> np.ndarray:
    """Combined distance ``alpha*|f_i - f_j| + beta*|p_i - p_j|`` for the requested rows."""
    f, p = _normalized(features, coords, params.normalize)
    rows = np.arange(len(f)) if rows is None else rows
    df = f[rows, None, :] - f[None, :, :]
    dp = p[rows, None, :] - p[None, :, :]
    return params.alpha * np.sqrt((df * df).sum(axis=2)) + params.beta * np.sqrt((dp * dp).sum(axis=2))


def build_knn(features, coords, params: KnnParams = KnnParams(), chunk: int = 128) -> GraphTopology:
    """Each node receives in-edges from its ``k`` nearest other nodes.

    Exact O(N^2) search, processed ``chunk`` rows at a time. Ties go to the
    smaller node index (stable sort).
    """
    features = np.asarray(features)
    coords = np.asarray(coords)
    n = features.shape[0]
    if coords.shape != (n, 2):
        raise ConfigurationError(f"coords must be ({n}, 2), got {coords.shape}")
    if n <= params.k:
        raise ConfigurationError(f"k-NN needs more than k={params.k} nodes, got {n}")
    f, p = _normalized(features, coords, params.normalize)
    raw = KnnParams(params.k, params.alpha, params.beta, normalize=False)
    src = np.empty((n, params.k), dtype=np.int64)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        d = knn_distances(f, p, raw, rows)
        d[np.arange(rows.size), rows] = np.inf
        src[rows] = np.argsort(d, axis=1, kind="stable")[:, : params.k]
    dst = np.repeat(np.arange(n), params.k)
    return from_edges(n, src.ravel(), dst, "knn", params.k)


@dataclass(eq=False)
class BatchedGraph:
    """Disjoint union of per-image topologies with node ids offset per image."""

    topologies: tuple
    batch_size: int
    nodes_per_image: int
    indptr: np.ndarray
    indices: np.ndarray
    batch_vector: np.ndarray
    _mean_ops: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.batch_size * self.nodes_per_image

    @property
    def n_edges(self) -> int:
        return int(self.indices.size)

    @property
    def kind(self) -> str:
        return self.topologies[0].kind

    def block(self, m: int) -> GraphTopology:
        """Recover the topology of image ``m``."""
        lo, hi = m * self.nodes_per_image, (m + 1) * self.nodes_per_image
        ptr = self.indptr[lo: hi + 1] - self.indptr[lo]
        idx = self.indices[self.indptr[lo]: self.indptr[hi]] - lo
        t = self.topologies[0] if len(self.topologies) == 1 else self.topologies[m]
        return GraphTopology(self.nodes_per_image, ptr.copy(), idx.copy(), t.kind, t.k)

    def mean_operator(self, dtype=np.float64) -> sp.csr_matrix:
        """Row-normalised adjacency: ``(M @ X)[v]`` is the mean of v's in-neighbours."""
        key = np.dtype(dtype).str
        if key not in self._mean_ops:
            deg = np.diff(self.indptr)
            w = np.repeat(np.divide(1.0, deg, out=np.zeros(deg.size), where=deg > 0), deg)
            self._mean_ops[key] = sp.csr_matrix((w.astype(dtype), self.indices, self.indptr),
                                                shape=(self.n_nodes, self.n_nodes))
        return self._mean_ops[key]


def broadcast_batch(topologies, batch_size: int, nodes_per_image: int | None = None) -> BatchedGraph:
    """Offset per-image CSR blocks into one flat-batch graph.

    Pass a single shared topology (grid) or exactly ``batch_size`` topologies (k-NN).
    """
    if isinstance(topologies, GraphTopology):
        topologies = (topologies,)
    topologies = tuple(topologies)
    if batch_size < 1:
        raise UsageError(f"batch size must be >= 1, got {batch_size}")
    if len(topologies) not in (1, batch_size) or (topologies[0].kind == "knn" and len(topologies) != batch_size):
        raise UsageError(f"expected 1 shared or {batch_size} per-image topologies, got {len(topologies)}")
    n = topologies[0].n_nodes if nodes_per_image is None else nodes_per_image
    if any(t.n_nodes != n for t in topologies):
        raise UsageError("all topologies must cover nodes_per_image nodes")
    per_image = [topologies[0] if len(topologies) == 1 else topologies[m] for m in range(batch_size)]
    indptr = [np.zeros(1, dtype=np.int64)]
    indices = []
    offset = 0
    for m, t in enumerate(per_image):
        indptr.append(t.indptr[1:] + offset)
        indices.append(t.indices + m * n)
        offset += t.n_edges
    return BatchedGraph(
        topologies=topologies,
        batch_size=batch_size,
        nodes_per_image=n,
        indptr=np.concatenate(indptr),
        indices=np.concatenate(indices),
        batch_vector=np.repeat(np.arange(batch_size), n),
    )


def build_batched(kind: str, H: int, W: int, batch_size: int, features=None,
                  knn: KnnParams = KnnParams()) -> BatchedGraph:
    """Build the flat-batch graph for a ``B x C x H x W`` feature map.

    ``features`` (an array of that shape) is only needed for ``kind="knn"``.
    """
    if kind in ("grid4", "grid8"):
        return broadcast_batch(build_grid(H, W, int(kind[-1])), batch_size)
    if kind != "knn":
        raise ConfigurationError(f"unknown graph kind {kind!r}")
    if features is None:
        raise UsageError("k-NN graphs need the feature map")
    feats = np.asarray(features)
    coords = grid_coords(H, W)
    tops = [build_knn(feats[m].reshape(feats.shape[1], -1).T, coords, knn) for m in range(batch_size)]
    return broadcast_batch(tops, batch_size)
