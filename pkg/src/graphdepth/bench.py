"""Scaling benchmarks: grid/k-NN message passing against dense softmax attention.

Times are medians over ``repeats`` measurements after one discarded warmup
call. When a single call is too fast for the clock, each measurement loops
the call enough times to last ``min_measure_s`` and divides.
"""

from __future__ import annotations

import csv
import io
import os
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import UsageError
from .gnn import SageLayerParams, sage_forward
from .graphbuild import KnnParams, build_batched, build_knn, grid_coords
from .tensorcore import Tensor

PUBLISHED_KNN_OVERHEAD = "15-20%"
DEFAULT_MP_RESOLUTIONS = ((32, 32), (64, 64), (128, 128), (256, 256))
DEFAULT_ATTN_RESOLUTIONS = ((8, 8), (16, 16), (32, 32), (48, 48), (64, 64))
DEFAULT_KNN_RESOLUTIONS = ((16, 16), (32, 32), (48, 48), (64, 64))
DEFAULT_BATCH_RESOLUTIONS = ((8, 8), (16, 16), (32, 32), (64, 64))


@dataclass
class TimingPoint:
    kind: str
    n: int
    c: int
    median_s: float
    repeats: int
    inner_loops: int = 1


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    residual: float  # RMS of log-time residuals
    points: int


@dataclass
class ScalingReport:
    series: dict[str, list[TimingPoint]] = field(default_factory=dict)
    fits: dict[str, ScalingFit] = field(default_factory=dict)
    knn_overhead_pct: dict[int, float] = field(default_factory=dict)
    batch_speedup: dict[int, float] = field(default_factory=dict)  # per-image node count -> loop / flat
    notes: list[str] = field(default_factory=list)
    environment: dict[str, str] = field(default_factory=dict)

    def points(self) -> list[TimingPoint]:
        return [p for pts in self.series.values() for p in pts]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "N", "C", "median_s", "repeats"])
        for p in self.points():
            w.writerow([p.kind, p.n, p.c, repr(p.median_s), p.repeats])
        return buf.getvalue()

    def summary(self) -> str:
        lines = ["scaling summary"]
        lines += [f"  {k}={v}" for k, v in self.environment.items()]
        for kind, fit in self.fits.items():
            lines.append(f"  slope[{kind}] = {fit.slope:.3f} (residual {fit.residual:.3f}, {fit.points} points)")
        for n, pct in sorted(self.knn_overhead_pct.items()):
            lines.append(f"  k-NN overhead at N={n}: {pct:.1f}% (published GPU figure: {PUBLISHED_KNN_OVERHEAD})")
        for n, ratio in sorted(self.batch_speedup.items()):
            lines.append(f"  flat-batch speedup over per-sample loop at N={n} per image: {ratio:.2f}x")
        lines += [f"  note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def time_call(fn, repeats: int = 5, min_measure_s: float = 2e-3) -> tuple[float, int]:
    """Median seconds per call and the number of inner loops used per measurement."""
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    fn()  # warmup
    t0 = time.perf_counter()
    fn()
    once = time.perf_counter() - t0
    loops = 1 if once >= min_measure_s else int(np.ceil(min_measure_s / max(once, 1e-9)))
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(loops):
            fn()
        samples.append((time.perf_counter() - t0) / loops)
    return statistics.median(samples), loops


def fit_scaling(ns, times) -> ScalingFit:
    """Least-squares line through ``(log N, log t)``; non-positive times are dropped."""
    ns = np.asarray(ns, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    keep = (times > 0) & (ns > 0)
    if keep.sum() < 3:
        raise UsageError("need at least 3 positive timing points to fit a slope")
    x, y = np.log(ns[keep]), np.log(times[keep])
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    return ScalingFit(float(slope), float(intercept), float(np.sqrt(np.mean(resid ** 2))), int(keep.sum()))


def _sage_params(c: int, dtype, seed: int) -> SageLayerParams:
    p = SageLayerParams.init(c, c, np.random.default_rng(seed))
    return SageLayerParams(Tensor(p.weight.data.astype(dtype)), Tensor(p.bias.data.astype(dtype)))


def _check_resolutions(resolutions):
    ns = sorted({h * w for h, w in resolutions})
    if len(ns) < 3:
        raise UsageError("need at least 3 distinct node counts")
    return ns


def time_message_passing(resolutions=DEFAULT_MP_RESOLUTIONS, c: int = 32, kind: str = "grid8",
                         repeats: int = 5, batch: int = 1, dtype=np.float32, seed: int = 0,
                         knn: KnnParams = KnnParams()) -> dict[str, list[TimingPoint]]:
    """Median ``sage_forward`` time per resolution.

    For ``kind="knn"`` two series come back: ``knn_build`` (graph construction)
    and ``knn_mp`` (message passing on the built graph).
    """
    _check_resolutions(resolutions)
    rng = np.random.default_rng(seed)
    params = _sage_params(c, dtype, seed)
    out: dict[str, list[TimingPoint]] = {}
    for H, W in resolutions:
        X = Tensor(rng.standard_normal((batch, c, H, W)).astype(dtype))
        n = H * W
        if kind == "knn":
            feats = X.data[0].reshape(c, -1).T
            coords = grid_coords(H, W)
            t, loops = time_call(lambda: build_knn(feats, coords, knn), repeats)
            out.setdefault("knn_build", []).append(TimingPoint("knn_build", n, c, t, repeats, loops))
            graph = build_batched("knn", H, W, batch, X.data, knn)
            label = "knn_mp"
        else:
            graph = build_batched(kind, H, W, batch)
            label = f"{kind}_mp"
        graph.mean_operator(dtype)
        t, loops = time_call(lambda: sage_forward(X, graph, params), repeats)
        out.setdefault(label, []).append(TimingPoint(label, n, c, t, repeats, loops))
    return out


def time_batch_vs_loop(H: int = 64, W: int = 64, c: int = 32, batch: int = 8, repeats: int = 5,
                       dtype=np.float32, seed: int = 0) -> tuple[TimingPoint, TimingPoint]:
    """Flat-batch SAGE on ``batch`` images versus a Python loop over single images."""
    rng = np.random.default_rng(seed)
    params = _sage_params(c, dtype, seed)
    X = Tensor(rng.standard_normal((batch, c, H, W)).astype(dtype))
    singles = [Tensor(X.data[m:m + 1]) for m in range(batch)]
    flat_graph = build_batched("grid8", H, W, batch)
    one_graph = build_batched("grid8", H, W, 1)
    flat_graph.mean_operator(dtype)
    one_graph.mean_operator(dtype)
    t_flat, lf = time_call(lambda: sage_forward(X, flat_graph, params), repeats)
    t_loop, ll = time_call(lambda: [sage_forward(s, one_graph, params) for s in singles], repeats)
    n = batch * H * W
    return (TimingPoint("flat_batch", n, c, t_flat, repeats, lf), TimingPoint("per_sample_loop", n, c, t_loop, repeats, ll))


def dense_attention(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray) -> np.ndarray:
    """Single-head softmax attention over all ``N`` rows of ``x`` (N x C)."""
    q, k, v = x @ wq, x @ wk, x @ wv
    scores = (q @ k.T) / np.sqrt(q.shape[1]).astype(x.dtype)
    scores -= scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=1, keepdims=True)
    return scores @ v


def attention_baseline(resolutions=DEFAULT_ATTN_RESOLUTIONS, c: int = 32, repeats: int = 5,
                       max_nodes: int = 64 * 64, dtype=np.float32, seed: int = 0,
                       notes: list[str] | None = None) -> list[TimingPoint]:
    """Dense-attention timings; points above ``max_nodes`` are skipped with a note."""
    _check_resolutions(resolutions)
    rng = np.random.default_rng(seed)
    wq, wk, wv = (rng.standard_normal((c, c)).astype(dtype) / np.sqrt(c) for _ in range(3))
    pts = []
    for H, W in resolutions:
        n = H * W
        if n > max_nodes:
            if notes is not None:
                notes.append(f"attention point N={n} skipped (cap {max_nodes})")
            continue
        x = rng.standard_normal((n, c)).astype(dtype)
        t, loops = time_call(lambda: dense_attention(x, wq, wk, wv), repeats)
        pts.append(TimingPoint("dense_attention", n, c, t, repeats, loops))
    return pts


def _fit(points: list[TimingPoint]) -> ScalingFit:
    return fit_scaling([p.n for p in points], [p.median_s for p in points])


def run_benchmarks(mp_resolutions=DEFAULT_MP_RESOLUTIONS, attn_resolutions=DEFAULT_ATTN_RESOLUTIONS,
                   knn_resolutions=DEFAULT_KNN_RESOLUTIONS, c: int = 32, repeats: int = 5,
                   threads: int = 1, dtype=np.float32, knn: KnnParams = KnnParams(),
                   batch_resolutions=DEFAULT_BATCH_RESOLUTIONS, batch_size: int = 8, seed: int = 0) -> ScalingReport:
    """Collect every series, fit slopes, and derive overhead and speedup figures."""
    if repeats < 5:
        raise UsageError("repeats must be >= 5")
    report = ScalingReport()
    report.environment = {"threads": str(threads), "dtype": np.dtype(dtype).name, "repeats": str(repeats),
                          "python": platform.python_version(), "numpy": np.__version__,
                          "cpu_count": str(os.cpu_count())}
    with threadpool_limits(limits=threads):
        report.series.update(time_message_passing(mp_resolutions, c, "grid8", repeats, dtype=dtype, seed=seed))
        report.series["dense_attention"] = attention_baseline(attn_resolutions, c, repeats, dtype=dtype, seed=seed,
                                                              notes=report.notes)
        grid_small = time_message_passing(knn_resolutions, c, "grid8", repeats, dtype=dtype, seed=seed)["grid8_mp"]
        report.series["grid8_mp_knnrange"] = grid_small
        report.series.update(time_message_passing(knn_resolutions, c, "knn", repeats, dtype=dtype, seed=seed,
                                                  knn=knn))
        for H, W in batch_resolutions or ():
            flat, loop = time_batch_vs_loop(H, W, c, batch_size, repeats, dtype, seed)
            report.series.setdefault("flat_batch", []).append(flat)
            report.series.setdefault("per_sample_loop", []).append(loop)
            report.batch_speedup[H * W] = loop.median_s / flat.median_s
    for kind in ("grid8_mp", "dense_attention", "knn_build", "knn_mp"):
        pts = report.series.get(kind, [])
        if len(pts) >= 3:
            report.fits[kind] = _fit(pts)
    for g, b, m in zip(report.series["grid8_mp_knnrange"], report.series["knn_build"], report.series["knn_mp"]):
        report.knn_overhead_pct[g.n] = 100.0 * ((b.median_s + m.median_s) / g.median_s - 1.0)
    loops = {p.inner_loops for p in report.points()}
    if max(loops) > 1:
        report.notes.append("fast cases were looped per measurement to exceed the clock resolution")
    return report
