"""Dense tensors with a reverse-mode differentiation tape.

Only the primitives the depth network needs are provided. Every primitive
checks its output for NaN/Inf and, when a :class:`Tape` is active and any
input requires a gradient, appends a record holding the vector-Jacobian
product closure. :func:`backward` replays the records in exact reverse order.

Broadcasting is deliberately absent except for scalar-with-tensor arithmetic
and the explicit :func:`broadcast_to` primitive.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, NumericError, UsageError

_ids = itertools.count(1)
_tape_stack: list["Tape"] = []


class Tensor:
    """A shaped float array, optionally participating in a :class:`Tape`.

    Data is float64 unless a float32 array is passed (benchmark mode).
    ``tape_id`` is the index of the record that produced the tensor on the
    active tape, or ``None`` for leaves and untracked values.
    """

    __slots__ = ("data", "requires_grad", "id", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float32 if arr.dtype == np.float32 else np.float64
        self.data = np.asarray(arr, dtype=dtype)
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        out = Tensor(self.data, dtype=self.data.dtype)
        return out

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives evaluated inside the ``with`` block
    are recorded when at least one input requires a gradient. With
    ``track_kinks`` set, relu/abs/clamp/max ops also store the sign pattern of
    their inputs so finite-difference checks can skip points that straddle a
    kink.
    """

    def __init__(self, track_kinks: bool = False):
        self.records: list[Record] = []
        self.track_kinks = track_kinks
        self.kinks: list[tuple[str, bytes]] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> "GradientStore":
        return backward(self, loss)


def current_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class GradientStore(dict):
    """Leaf gradients keyed by tensor id; also indexable by the tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return dict.__getitem__(self, key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return dict.__contains__(self, key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.id
        return dict.get(self, key, default)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, kink=None) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if not np.isfinite(out.data).all():
        raise NumericError(f"{op} produced non-finite values in tensor {out.id}", op=op, tensor_id=out.id)
    out.data.flags.writeable = False
    tape = current_tape()
    if tape is not None:
        if kink is not None and tape.track_kinks:
            tape.kinks.append((op, np.packbits(kink).tobytes()))
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.tape_id = len(tape.records)
            tape.records.append(Record(op, tuple(inputs), out, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> GradientStore:
    """Propagate d(loss)/d(.) to every leaf that requires a gradient.

    The seed gradient is 1. Fan-out gradients are summed. Only leaf
    gradients are kept in the returned store.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape_id is None or loss.tape_id >= len(tape.records) or tape.records[loss.tape_id].output is not loss:
        raise UsageError("loss tensor is not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves = GradientStore()
    for rec in reversed(tape.records[: loss.tape_id + 1]):
        g = grads.pop(rec.output.id, None)
        if g is None:
            continue
        in_grads = rec.vjp(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if not np.isfinite(gi).all():
                raise NumericError(f"non-finite gradient produced by {rec.op} for tensor {inp.id}",
                                   op=rec.op, tensor_id=inp.id)
            store = grads if inp.tape_id is not None else leaves
            prev = dict.get(store, inp.id)
            dict.__setitem__(store, inp.id, gi.copy() if prev is None else prev + gi)
    return leaves


# -- pointwise -------------------------------------------------------------

def _pair(op, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return None
    if a.shape == () or b.shape == ():
        return "scalar"
    raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    return np.asarray(g.sum()).reshape(shape) if shape == () and g.shape != () else g


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.maximum(x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,), kink=mask)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def softplus(x: Tensor) -> Tensor:
    return _emit("softplus", np.logaddexp(0, x.data), (x,), lambda g: (g * expit(x.data),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _emit("exp", e, (x,), lambda g: (g * e,))


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _pair("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _pair("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _pair("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def abs_(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)  # subgradient 0 at 0
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * sgn,), kink=x.data >= 0)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    kink = np.concatenate([(x.data < lo).ravel(), (x.data > hi).ravel()])
    return _emit("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), kink=kink)


_POINTWISE = {
    "relu": relu, "sigmoid": sigmoid, "softplus": softplus, "exp": exp, "neg": neg,
    "add": add, "sub": sub, "mul": mul, "scale": scale, "abs": abs_, "clamp": clamp,
}


def pointwise(kind: str, *args) -> Tensor:
    """Dispatch an elementwise primitive by name (``relu``, ``mul``, ...)."""
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ConfigurationError(f"unknown pointwise kind {kind!r}") from None
    return fn(*args)


# -- pooling / resizing ----------------------------------------------------

def _check_nchw(op, x: Tensor):
    if x.data.ndim != 4:
        raise ConfigurationError(f"{op} expects a BxCxHxW tensor, got shape {x.shape}")
    if x.shape[2] == 0 or x.shape[3] == 0:
        raise ConfigurationError(f"{op}: zero spatial extent in {x.shape}")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_nchw("global_avg_pool", x)
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _emit("global_avg_pool", out, (x,),
                 lambda g: (np.broadcast_to(g / (H * W), x.shape).copy(),))


@lru_cache(maxsize=None)
def interp_matrix(n: int, factor: int) -> np.ndarray:
    """Row ``i`` holds the bilinear weights of output sample ``i`` over ``n`` inputs.

    Half-pixel centres: output ``i`` sits at input coordinate
    ``(i + 0.5) / factor - 0.5``, clamped to ``[0, n - 1]``.
    """
    m = n * factor
    src = np.clip((np.arange(m) + 0.5) / factor - 0.5, 0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = src - i0
    A = np.zeros((m, n))
    np.add.at(A, (np.arange(m), i0), 1 - w1)
    np.add.at(A, (np.arange(m), i1), w1)
    A.flags.writeable = False
    return A


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    _check_nchw("upsample_bilinear", x)
    Ah = interp_matrix(x.shape[2], factor).astype(x.dtype)
    Aw = interp_matrix(x.shape[3], factor).astype(x.dtype)
    out = Ah @ x.data @ Aw.T
    return _emit("upsample_bilinear", out, (x,), lambda g: (Ah.T @ g @ Aw,))


def upsample2x(x: Tensor) -> Tensor:
    return upsample_bilinear(x, 2)


def pool_resize(kind: str, x: Tensor) -> Tensor:
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    if kind == "upsample2x_bilinear":
        return upsample2x(x)
    raise ConfigurationError(f"unknown pool_resize kind {kind!r}")


# -- structural ------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s < 0 for s in shape):
        raise ConfigurationError(f"reshape: cannot view {x.shape} as {shape}")
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ConfigurationError(f"permute: {axes} is not a permutation of {x.data.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _emit("permute", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ConfigurationError(f"concat: extents {t.shape} do not match {ref} off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1 (channels of NCHW, columns of NxC)."""
    return concat(tensors, axis=1)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _emit("slice", x.data[index], (x,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def _axes(x: Tensor, axes):
    if axes is None:
        return tuple(range(x.data.ndim))
    return tuple(a % x.data.ndim for a in ((axes,) if isinstance(axes, int) else axes))


def sum_over(x: Tensor, axes=None) -> Tensor:
    ax = _axes(x, axes)
    kept = tuple(1 if i in ax else s for i, s in enumerate(x.shape))
    return _emit("sum", x.data.sum(axis=ax), (x,),
                 lambda g: (np.broadcast_to(g.reshape(kept), x.shape).copy(),))


def mean_over(x: Tensor, axes=None) -> Tensor:
    ax = _axes(x, axes)
    n = int(np.prod([x.shape[i] for i in ax]))
    if n == 0:
        raise ConfigurationError("mean over an empty extent")
    kept = tuple(1 if i in ax else s for i, s in enumerate(x.shape))
    return _emit("mean", x.data.mean(axis=ax), (x,),
                 lambda g: (np.broadcast_to(g.reshape(kept) / n, x.shape).copy(),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicitly expand size-1 axes; the only non-scalar broadcast available."""
    shape = tuple(shape)
    if len(shape) != x.data.ndim or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ConfigurationError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    ax = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)
    return _emit("broadcast_to", np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (g.sum(axis=ax, keepdims=True),))


def structural(kind: str, *args, **kwargs) -> Tensor:
    table = {"reshape": reshape, "concat_channels": concat_channels, "matmul": matmul,
             "mean_over": mean_over, "sum_over": sum_over, "permute": permute,
             "broadcast_to": broadcast_to, "slice": slice_axis}
    try:
        fn = table[kind]
    except KeyError:
        raise ConfigurationError(f"unknown structural kind {kind!r}") from None
    return fn(*args, **kwargs)


# -- convolution -----------------------------------------------------------

def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a BxCinxHxW input with a CoutxCinxKxK kernel (K in {1, 3})."""
    _check_nchw("conv2d", x)
    if kernel.data.ndim != 4:
        raise ConfigurationError(f"conv2d: kernel must be 4-D, got {kernel.shape}")
    B, Cin, H, W = x.shape
    Cout, Ck, Kh, Kw = kernel.shape
    if Ck != Cin:
        raise ConfigurationError(f"conv2d: kernel expects {Ck} input channels, input has {Cin}")
    if Kh != Kw or Kh not in (1, 3):
        raise ConfigurationError(f"conv2d: unsupported kernel size {Kh}x{Kw}")
    if bias.shape != (Cout,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({Cout},)")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride must be >= 1 and padding >= 0")
    Ho, Wo = conv_output_extent(H, Kh, stride, padding), conv_output_extent(W, Kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ConfigurationError(f"conv2d: empty output for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (Kh, Kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1: stride, : (Wo - 1) * stride + 1: stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cin * Kh * Kw)
    kmat = kernel.data.reshape(Cout, -1)
    out = (cols @ kmat.T + bias.data).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gm.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ kmat).reshape(B, Ho, Wo, Cin, Kh, Kw)
            gxp = np.zeros_like(xp)
            for i in range(Kh):
                for j in range(Kw):
                    gxp[:, :, i: i + (Ho - 1) * stride + 1: stride, j: j + (Wo - 1) * stride + 1: stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding: padding + H, padding: padding + W] if padding else gxp
        return gx, gk, gb

    return _emit("conv2d", np.ascontiguousarray(out), (x, kernel, bias), vjp)


# -- finite-difference checking -------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    excluded: int


def grad_check_report(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                      samples: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of ``fn(*inputs)`` with central differences.

    ``samples`` limits the check to that many randomly chosen elements across
    all inputs. Elements whose +/-eps evaluations flip the sign pattern of any
    relu/abs/clamp input are counted as excluded rather than checked.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise UsageError(f"eps {eps} outside [1e-7, 1e-4]")
    inputs = list(inputs)
    if any(t.dtype != np.float64 for t in inputs):
        raise UsageError("grad_check requires float64 inputs")
    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
    try:
        with Tape() as tape:
            loss = fn(*inputs)
        grads = backward(tape, loss)
        sizes = np.array([t.size for t in inputs])
        total = int(sizes.sum())
        flat = np.arange(total) if samples is None or samples >= total else \
            np.sort(np.random.default_rng(seed).choice(total, size=samples, replace=False))
        bounds = np.cumsum(sizes)

        def evaluate(t, j, value):
            t.data = base.copy()
            t.data.flat[j] = value
            with Tape(track_kinks=True) as probe:
                val = fn(*inputs).item()
            return val, probe.kinks

        worst, checked, excluded = 0.0, 0, 0
        for f in flat:
            i = int(np.searchsorted(bounds, f, side="right"))
            j = int(f - (bounds[i - 1] if i else 0))
            t = inputs[i]
            base = t.data.copy()
            x0 = base.flat[j]
            fp, kp = evaluate(t, j, x0 + eps)
            fm, km = evaluate(t, j, x0 - eps)
            t.data = base
            if kp != km:
                excluded += 1
                continue
            num = (fp - fm) / (2 * eps)
            g = grads.get(t)
            ana = float(g.flat[j]) if g is not None else 0.0
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
            worst = max(worst, rel)
            checked += 1
        return GradCheckReport(worst, checked, excluded)
    finally:
        for t, r in zip(inputs, saved):
            t.requires_grad = r


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               samples: int | None = None, seed: int = 0) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return grad_check_report(fn, inputs, eps, samples, seed).max_rel_error
