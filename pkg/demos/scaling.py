"""
Message passing versus dense attention
======================================

Time a GraphSAGE layer on grid graphs and a dense softmax-attention layer on
the same node counts, then fit log-log slopes. Grid message passing grows
linearly with the node count, attention quadratically.
"""

from threadpoolctl import threadpool_limits

from graphdepth.bench import attention_baseline, fit_scaling, time_message_passing

# one BLAS thread so the slopes are not bent by parallel speedup at large N;
# below ~32x32 fixed per-call overhead dominates and flattens the grid curve
with threadpool_limits(limits=1):
    grid = time_message_passing(((32, 32), (64, 64), (128, 128), (256, 256)), c=16, repeats=5)["grid8_mp"]
    attn = attention_baseline(((8, 8), (16, 16), (32, 32), (48, 48)), c=16, repeats=5)

for label, pts in (("grid8 message passing", grid), ("dense attention", attn)):
    fit = fit_scaling([p.n for p in pts], [p.median_s for p in pts])
    print(f"{label:>22}: slope {fit.slope:.2f}")
    for p in pts:
        print(f"{'':>24}N={p.n:6d}  {p.median_s * 1e3:8.3f} ms")
