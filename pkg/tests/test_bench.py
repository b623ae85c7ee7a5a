import math

import numpy as np
import pytest

from graphdepth.bench import (attention_baseline, dense_attention, fit_scaling, run_benchmarks, time_batch_vs_loop,
                              time_call, time_message_passing)
from graphdepth.errors import UsageError


def attention_oracle(x, wq, wk, wv):
    """Three nested loops: scores, softmax, weighted sum."""
    n = x.shape[0]
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.zeros_like(v)
    for i in range(n):
        s = [sum(q[i, c] * k[j, c] for c in range(q.shape[1])) / math.sqrt(q.shape[1]) for j in range(n)]
        top = max(s)
        e = [math.exp(t - top) for t in s]
        z = sum(e)
        for j in range(n):
            out[i] += e[j] / z * v[j]
    return out


class TestFit:
    def test_linear_and_quadratic(self):
        ns = np.array([16, 64, 256, 1024, 4096], dtype=float)
        assert abs(fit_scaling(ns, 3e-6 * ns).slope - 1.0) < 1e-9
        assert abs(fit_scaling(ns, 2e-9 * ns ** 2).slope - 2.0) < 1e-9
        assert fit_scaling(ns, 2e-9 * ns ** 2).residual < 1e-9

    def test_drops_non_positive(self):
        fit = fit_scaling([1, 2, 4, 8, 16], [0.0, 2.0, 4.0, 8.0, 16.0])
        assert fit.points == 4 and abs(fit.slope - 1.0) < 1e-9
        with pytest.raises(UsageError):
            fit_scaling([1, 2, 3], [1.0, -1.0, 0.0])


class TestAttention:
    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((7, 4))
        w = [rng.standard_normal((4, 4)) for _ in range(3)]
        np.testing.assert_allclose(dense_attention(x, *w), attention_oracle(x, *w), atol=1e-10)

    def test_single_node_returns_value_row(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 3))
        wq, wk, wv = (rng.standard_normal((3, 3)) for _ in range(3))
        np.testing.assert_allclose(dense_attention(x, wq, wk, wv), x @ wv, rtol=1e-15)

    def test_memory_cap_skips_with_note(self):
        notes = []
        pts = attention_baseline(((2, 2), (4, 4), (8, 8), (16, 16)), c=4, repeats=1, max_nodes=64, notes=notes)
        assert [p.n for p in pts] == [4, 16, 64]
        assert notes and "256" in notes[0]


class TestTiming:
    def test_time_call_loops_fast_functions(self):
        t, loops = time_call(lambda: None, repeats=3, min_measure_s=1e-3)
        assert t > 0 and loops > 1

    def test_message_passing_points(self):
        series = time_message_passing(((4, 4), (8, 8), (16, 16)), c=4, repeats=2)
        pts = series["grid8_mp"]
        assert [p.n for p in pts] == [16, 64, 256] and all(p.median_s > 0 for p in pts)
        knn = time_message_passing(((8, 8), (12, 12), (16, 16)), c=4, kind="knn", repeats=2)
        assert set(knn) == {"knn_build", "knn_mp"}

    def test_needs_three_node_counts(self):
        with pytest.raises(UsageError):
            time_message_passing(((4, 4), (4, 4)), c=4)

    def test_batch_vs_loop(self):
        flat, loop = time_batch_vs_loop(8, 8, c=8, batch=4, repeats=3)
        assert flat.n == loop.n == 256 and flat.median_s > 0 and loop.median_s > 0

    def test_run_small(self):
        report = run_benchmarks(mp_resolutions=((8, 8), (16, 16), (32, 32)), attn_resolutions=((4, 4), (8, 8), (16, 16)),
                                knn_resolutions=((8, 8), (12, 12), (16, 16)), c=8, repeats=5,
                                batch_resolutions=((8, 8),), batch_size=4)
        assert {"grid8_mp", "dense_attention", "knn_build", "knn_mp"} <= set(report.fits)
        assert all(np.isfinite(v) for v in report.knn_overhead_pct.values())
        assert set(report.batch_speedup) == {64}
        csv_text = report.to_csv()
        assert csv_text.splitlines()[0] == "kind,N,C,median_s,repeats"
        assert "threads=1" in report.summary() and "slope[grid8_mp]" in report.summary()
        with pytest.raises(UsageError):
            run_benchmarks(repeats=4)
