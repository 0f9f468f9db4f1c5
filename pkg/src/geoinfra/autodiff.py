"""Dense tensors with reverse-mode automatic differentiation.

The engine is tape-based: ops executed while a :class:`Tape` is active
append one record each (kind, inputs, output, backward closure). The tape
is therefore already in topological order, and :func:`backward` is a single
reverse sweep that visits every record once and accumulates gradients into
the leaf tensors that requested them.

Ops run on plain numpy arrays. float32 is the training precision; build
tensors as float64 when running gradient checks. Outside a tape every op
is a pure function with no recording overhead, which is what evaluation
uses. A tape must stay on one logical thread; tensors themselves are
treated as immutable after construction and are safe to share for reading.
"""

from __future__ import annotations

import itertools
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_node_counter = itertools.count(1)

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-d float array that can participate in differentiation.

    grad is populated by :func:`backward` on tensors with
    ``requires_grad=True`` that are leaves (not produced by a recorded op).
    """

    __slots__ = ("data", "grad", "node_id", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_counter)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


def assert_all_finite(t: Tensor, name: str = "tensor") -> Tensor:
    """Validation op: raise if NaN or Inf crept into a value."""
    if not np.all(np.isfinite(t.data)):
        bad = int(np.size(t.data) - np.count_nonzero(np.isfinite(t.data)))
        raise ValueError(f"{name} contains {bad} non-finite value(s)")
    return t


class OpRecord(NamedTuple):
    kind: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of ops for one forward pass. Not thread-safe."""

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes closed out of order"
        return False


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def emit(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
         backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap op output in a Tensor, recording it if a tape is active.

    backward_fn maps the output gradient to a tuple of input gradients
    aligned with ``inputs`` (None for inputs that take no gradient).
    """
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    tape = _active_tape()
    if tape is not None and needs_grad:
        tape.records.append(OpRecord(kind, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad on every leaf tensor the loss depends on.

    The tape is consumed in reverse creation order; because outputs are
    always created after their inputs this is a valid topological order,
    checked below as a cycle guard. Reused tensors accumulate (a diamond
    adds both path contributions).
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    produced = set()
    for rec in tape.records:
        if any(t.node_id >= rec.output.node_id for t in rec.inputs):
            raise ValueError(f"cycle detected at op '{rec.kind}'")
        produced.add(rec.output.node_id)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and loss.node_id not in produced:
        leaves[loss.node_id] = loss

    for rec in reversed(tape.records):
        g_out = grads.pop(rec.output.node_id, None)
        if g_out is None:
            continue
        in_grads = rec.backward_fn(g_out)
        for t, g in zip(rec.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + g
            else:
                grads[t.node_id] = g
            if t.node_id not in produced:
                leaves[t.node_id] = t

    for node_id, t in leaves.items():
        t.grad = grads.get(node_id)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _check_same_dtype(*tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"mixed dtypes in op: {sorted(d.name for d in dtypes)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)
    return emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return emit("scale", (x,), x.data * np.asarray(c, dtype=x.dtype),
                lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype, copy=False),
                lambda g: (g * mask,))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_stable(x.data)
    return emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return emit("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype), bwd)


def tmean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.size)


def flatten(x: Tensor) -> Tensor:
    n = x.shape[0]
    shape = x.shape
    return emit("flatten", (x,), x.data.reshape(n, -1),
                lambda g: (g.reshape(shape),))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x:(N,d_in) @ weight:(d_out,d_in).T + bias:(d_out,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(f"linear expects 2-d input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear shape mismatch: input dim {x.shape[1]} != weight in-dim {weight.shape[1]}")
    _check_same_dtype(x, weight, *([bias] if bias is not None else []))
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

    def bwd(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return emit("linear", inputs, out, bwd)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    # xp already padded; windows then stride-subsampled
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input against (F,C,kh,kw) filters.

    Zero padding; output spatial size floor((S + 2p - k)/stride) + 1.
    Implemented as im2col + one GEMM; the nested-loop semantics are pinned
    by the test oracle.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input/weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(
            f"conv2d channel mismatch: input axis 1 has {c} channels, weight axis 1 has {cw}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"conv2d kernel ({kh}x{kw}) larger than padded input "
            f"({h + 2 * padding}x{w + 2 * padding}) on spatial axes")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({f},)")
    _check_same_dtype(x, weight, *([bias] if bias is not None else []))

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    w_mat = weight.data.reshape(f, -1)
    out = cols @ w_mat.T  # (n*ho*wo, f)
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    hp, wp = xp.shape[2], xp.shape[3]

    def bwd(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        gw = (g_mat.T @ cols).reshape(weight.shape)
        d_cols = (g_mat @ w_mat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None:
            return gx, gw, g_mat.sum(axis=0)
        return gx, gw

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return emit("conv2d", inputs, out, bwd)


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1,
                 epsilon: float = 1e-5) -> Tensor:
    """Per-channel batch norm over (N,H,W).

    Train mode normalizes by batch statistics (biased variance) and folds
    them into the running buffers in place; eval mode reads the buffers.
    Buffer updates are a documented side effect, the only one in this
    module.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must be ({c},), got {gamma.shape}, {beta.shape}")
    _check_same_dtype(x, gamma, beta)
    m = n * h * w
    if training and m < 2:
        raise ValueError(f"batch_norm2d train mode needs >= 2 values per channel, got {m}")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype)
    xhat = (x.data - mu.reshape(1, c, 1, 1).astype(x.dtype)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        g_gamma = (g * xhat).sum(axis=(0, 2, 3))
        g_beta = g.sum(axis=(0, 2, 3))
        g_xhat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            # gradient flows through the batch statistics as well
            gx = (inv_std.reshape(1, c, 1, 1) / m) * (
                m * g_xhat
                - g_xhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                - xhat * (g_xhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            )
        else:
            gx = g_xhat * inv_std.reshape(1, c, 1, 1)
        return gx, g_gamma, g_beta

    return emit("batch_norm2d", (x, gamma, beta), out.astype(x.dtype, copy=False), bwd)


# ---------------------------------------------------------------------------
# pooling


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None,
               padding: int = 0) -> Tensor:
    """Max pooling; padding cells count as -inf so they never win."""
    if x.data.ndim != 4:
        raise ValueError(f"max_pool2d expects 4-d input, got {x.shape}")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ValueError(f"max_pool2d kernel {kernel} larger than padded input")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n_, c_, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=4)  # first max wins ties: deterministic
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    hp, wp = xp.shape[2], xp.shape[3]

    def bwd(g):
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        u, v = np.divmod(arg, kernel)
        ni, ci, hi, wi = np.ogrid[:n, :c, :ho, :wo]
        np.add.at(gxp, (ni, ci, hi * stride + u, wi * stride + v), g)
        return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

    return emit("max_pool2d", (x,), np.ascontiguousarray(out), bwd)


def global_avg_pool2d(x: Tensor) -> Tensor:
    """Mean over spatial axes: (N,C,H,W) -> (N,C)."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).astype(g.dtype, copy=True),)

    return emit("global_avg_pool2d", (x,), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(f: Callable[[Tensor], Tensor], point: Tensor,
              epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must map a tensor to a scalar tensor. The point is promoted to
    float64; error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    x = Tensor(point.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        out = f(x)
    if out.size != 1:
        raise ValueError(f"gradcheck needs a scalar-valued function, got shape {out.shape}")
    backward(tape, out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = f(Tensor(x.data.copy(), dtype=np.float64)).item()
        flat[i] = orig - epsilon
        f_minus = f(Tensor(x.data.copy(), dtype=np.float64)).item()
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * epsilon)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))
