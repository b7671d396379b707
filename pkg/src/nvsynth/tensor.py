"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Layout convention for images is [batch, channel, height, width], row-major.
Operations record onto the innermost active ``Tape``; with no active tape
the same functions run in plain inference mode.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[float, int, list, tuple, np.ndarray]


class Tensor:
    """Dense float64 array with an optional accumulated gradient.

    Tensors that appear on a tape must not be mutated in place; ``grad`` is
    the only field written after construction (by ``backward``).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all dispatch to module-level ops
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended in execution order, so every node's inputs precede it
    on the tape (topological order by construction). Activate with ``with``.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out: Tensor, inputs: tuple, fn: Callable):
        self.out = out
        self.inputs = inputs
        self.fn = fn


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    """Wrap ``out_data``, recording a backward rule if anything needs grad.

    ``fn(grad_out) -> tuple`` returns one gradient array (or None) per input.
    """
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    tape = _active_tape()
    if req and tape is not None:
        tape._nodes.append(_Node(out, tuple(inputs), fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/dx into ``x.grad`` for every requires_grad tensor.

    Repeated calls without ``zero_grad`` accumulate. Only nodes reachable
    from ``loss`` contribute; unrelated nodes on the tape are skipped.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise ValueError("backward expects a finite loss")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape._nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        holders.pop(id(node.out), None)
        if node.out.requires_grad:
            node.out.accumulate_grad(g)
        for inp, gi in zip(node.inputs, node.fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = np.asarray(gi, dtype=np.float64)
                holders[key] = inp
    # leftovers were never produced by a node on this tape: graph leaves
    for key, g in pending.items():
        t = holders[key]
        if t.requires_grad:
            t.accumulate_grad(g)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a: Tensor) -> Tensor:
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    out = np.maximum(a.data, lo)
    mask = a.data > lo
    return _record(out, (a,), lambda g: (g * mask,))


def scale_where(a: Tensor, keep: np.ndarray) -> Tensor:
    """Zero out entries where ``keep`` is False; gradient passes only where kept."""
    k = keep.astype(np.float64)
    return _record(a.data * k, (a,), lambda g: (g * k,))


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, alpha: float) -> Tensor:
    if not alpha > 0:
        raise ValueError(f"leaky_relu slope must be positive, got {alpha}")
    slope = np.where(a.data > 0, 1.0, alpha)
    return _record(a.data * slope, (a,), lambda g: (g * slope,))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    pos = a.data > 0
    out = np.where(pos, a.data, neg_part)
    dslope = np.where(pos, 1.0, neg_part + alpha)
    return _record(out, (a,), lambda g: (g * dslope,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    p = x >= 0
    out[p] = 1.0 / (1.0 + np.exp(-x[p]))
    ex = np.exp(x[~p])
    out[~p] = ex / (1.0 + ex)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


_ACTIVATIONS = {"relu", "leaky_relu", "elu", "sigmoid", "tanh"}


def activation(a: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    """Element-wise nonlinearity. ``alpha`` applies to leaky_relu only."""
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, alpha)
    if kind == "elu":
        return elu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g_exp = np.expand_dims(g, axes)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return _record(out, (a,), fn)


def tmean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing; gradient scatters back into the source positions."""
    out = a.data[key].copy()

    def fn(g):
        ga = np.zeros(a.shape)
        ga[key] = g
        return (ga,)

    return _record(out, (a,), fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along channel axis, ``a`` first; spatial/batch dims must match."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError(f"concat_channels expects 4-d tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}"
        )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _record(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), fn)


# ---------------------------------------------------------------------------
# network primitives


def linear(inp: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map [B,N] @ [M,N]^T + [M]."""
    if inp.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ValueError(
            f"linear expects input [B,N], weight [M,N], bias [M]; got "
            f"{inp.shape}, {weight.shape}, {bias.shape}"
        )
    if inp.shape[1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise ValueError(
            f"linear dimension mismatch: input N={inp.shape[1]}, "
            f"weight {weight.shape}, bias M={bias.shape[0]}"
        )
    out = inp.data @ weight.data.T + bias.data

    def fn(g):
        gi = g @ weight.data if inp.requires_grad else None
        gw = g.T @ inp.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gi, gw, gb

    return _record(out, (inp, weight, bias), fn)


def conv2d(inp: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of [B,Cin,H,W] with [Cout,Cin,k,k] plus bias.

    Output size (H + 2*padding - k) / stride + 1 must be a positive integer.
    """
    if inp.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input/weight, got {inp.shape}, {weight.shape}")
    B, Cin, H, W = inp.shape
    Cout, Cw, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv2d expects square kernels, got {kh}x{kw}")
    k, s, p = kh, stride, padding
    if k < 1 or s < 1 or p < 0:
        raise ValueError(f"conv2d invalid hyperparameters k={k} stride={s} padding={p}")
    if Cw != Cin:
        raise ValueError(f"conv2d channel mismatch: input Cin={Cin}, weight Cin={Cw}")
    if bias.shape != (Cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match Cout={Cout}")
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    if H + 2 * p - k < 0 or W + 2 * p - k < 0:
        raise ValueError(
            f"conv2d kernel k={k} larger than padded input {H + 2 * p}x{W + 2 * p}"
        )

    xp = np.pad(inp.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else inp.data
    out = np.empty((B, Cout, Ho, Wo))
    out[:] = bias.data[None, :, None, None]
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s]
            # [Cout,Cin] x [B,Cin,Ho,Wo] -> [Cout,B,Ho,Wo]
            out += np.tensordot(weight.data[:, :, i, j], patch, axes=([1], [1])).transpose(1, 0, 2, 3)

    def fn(g):
        gi = gw = gb = None
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(k):
                for j in range(k):
                    patch = xp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s]
                    gw[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if inp.requires_grad:
            gxp = np.zeros((B, Cin, H + 2 * p, W + 2 * p))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += (
                        np.tensordot(weight.data[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
                    )
            gi = gxp[:, :, p : p + H, p : p + W] if p else gxp
        return gi, gw, gb

    return _record(out, (inp, weight, bias), fn)


def _interp_matrix(n_in: int, n_out: int, align_corners: bool) -> np.ndarray:
    """Row-stochastic 1-d linear interpolation matrix [n_out, n_in]."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if align_corners:
        src = np.linspace(0.0, n_in - 1.0, n_out) if n_out > 1 else np.zeros(1)
    else:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 2)
    f = src - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - f
    m[rows, i0 + 1] += f
    return m


def resize_bilinear(inp: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    """Bilinear resize of [B,C,H,W] to [B,C,out_h,out_w]."""
    if inp.ndim != 4:
        raise ValueError(f"resize_bilinear expects a 4-d tensor, got shape {inp.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize_bilinear target size must be >= 1, got {out_h}x{out_w}")
    _, _, H, W = inp.shape
    mh = _interp_matrix(H, out_h, align_corners)
    mw = _interp_matrix(W, out_w, align_corners)
    out = np.einsum("oy,px,bcyx->bcop", mh, mw, inp.data, optimize=True)

    def fn(g):
        return (np.einsum("oy,px,bcop->bcyx", mh, mw, g, optimize=True),)

    return _record(out, (inp,), fn)
