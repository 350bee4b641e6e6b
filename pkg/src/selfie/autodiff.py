"""Dense float32 tensors with reverse-mode differentiation over a recorded tape.

Values are numpy arrays in row-major order. Every differentiable operation
is a free function that computes its result eagerly and, when a Tape is
active and some input participates in gradients, records a node holding the
input/output references and a backward rule. ``backward(loss, tape)`` then
walks the tape once in exact reverse recording order, which is reverse
topological order because an operation can only be recorded after the
operations that produced its inputs.

Conventions:
  * float32 everywhere; a non-finite value is an error condition, never a
    silent state.
  * images and feature maps are NHWC; weights for conv2d are (kh, kw, Cin,
    Cout); normalization parameters index the last axis.
  * train/eval behavior is selected by the explicit ``mode`` argument, and
    stochastic ops take the numpy Generator they should draw from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

DTYPE = np.float32
TRAIN = "train"
EVAL = "eval"

_GELU_C = DTYPE(math.sqrt(2.0 / math.pi))
_GELU_A = DTYPE(0.044715)


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ConfigError(f"mode must be '{TRAIN}' or '{EVAL}', got {mode!r}")


class Tensor:
    """A dense float32 array, optionally accumulating a gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        # note: ascontiguousarray would promote 0-d scalars to shape (1,)
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(DTYPE, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    """One recorded operation: inputs, output, and its backward rule.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, aligned with ``inputs``.
    """

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


@dataclass
class Tape:
    """Ordered record of operations; inputs of a node always precede it."""

    nodes: list[TapeNode] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def max_abs_by_op(self) -> list[tuple[str, float]]:
        """Per-node max |activation|, for divergence diagnostics."""
        return [(n.op, float(np.max(np.abs(n.output.data))) if n.output.size else 0.0)
                for n in self.nodes]


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    assert out_data.dtype == DTYPE, f"{op} produced {out_data.dtype}"
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(TapeNode(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape, visit_hook=None) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Visits tape nodes in exact reverse recording order (``visit_hook``, when
    given, is called with each visited node). A tape can be walked once;
    repeated calls raise.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by backward; record a fresh tape")
    if not any(node.output is loss for node in tape.nodes):
        raise ValueError("loss is not an output recorded on this tape (detached loss)")
    tape.consumed = True
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if node.output.grad is None:
            continue
        if visit_hook is not None:
            visit_hook(node)
        grads = node.backward_fn(node.output.grad)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            inp.accumulate_grad(np.asarray(g, dtype=DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.astype(DTYPE, copy=False)


# ---------------------------------------------------------------------------
# Arithmetic


def add(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", (a, b), out, bwd)


def sub(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", (a, b), out, bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a Tensor, array, or python scalar."""
    if isinstance(b, (int, float)):
        s = DTYPE(b)
        out = a.data * s

        def bwd_scalar(g):
            return (g * s,)

        return _record("mul_scalar", (a,), out, bwd_scalar)

    b = as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", (a, b), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports 2D x 2D, batched (..., m, k) x (..., k, n) with identical batch
    dims, and (..., m, k) x (k, n) where the 2D right operand is shared
    across the batch.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} x {bd.shape}")
    if ad.ndim > 2 and bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {ad.shape} x {bd.shape}")
    out = np.matmul(ad, bd)

    def bwd(g):
        if bd.ndim == 2 and ad.ndim > 2:
            da = np.matmul(g, bd.T)
            db = np.matmul(ad.reshape(-1, ad.shape[-1]).T, g.reshape(-1, g.shape[-1]))
        else:
            da = np.matmul(g, np.swapaxes(bd, -1, -2))
            db = np.matmul(np.swapaxes(ad, -1, -2), g)
        return da, db

    return _record("matmul", (a, b), out.astype(DTYPE, copy=False), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, DTYPE(0))
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _record("relu", (x,), out, bwd)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GeLU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd * xd * xd)
    t = np.tanh(inner)
    out = DTYPE(0.5) * xd * (1 + t)

    def bwd(g):
        sech2 = 1 - t * t
        dinner = _GELU_C * (1 + 3 * _GELU_A * xd * xd)
        return (g * (DTYPE(0.5) * (1 + t) + DTYPE(0.5) * xd * sech2 * dinner),)

    return _record("gelu", (x,), out.astype(DTYPE, copy=False), bwd)


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.data.shape
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _record("reshape", (x,), out, bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _record("transpose", (x,), out, bwd)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        splits = np.cumsum(sizes[:-1])
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _record("concat", tuple(parts), out, bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= start and start + length <= x.data.shape[axis]):
        raise ShapeError(f"narrow [{start}:{start + length}) out of range for axis {axis} "
                         f"of shape {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = np.ascontiguousarray(x.data[index])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record("narrow", (x,), out, bwd)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    orig = x.data.shape

    def bwd(g):
        return (_unbroadcast(g, orig),)

    return _record("broadcast_to", (x,), out, bwd)


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (V, D) at integer ``indices`` (any shape)."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.data.shape[0]}): "
                         f"min={idx.min()}, max={idx.max()}")
    out = np.ascontiguousarray(table.data[idx])
    dim = table.data.shape[1]

    def bwd(g):
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, idx.reshape(-1), g.reshape(-1, dim))
        return (dtable,)

    return _record("embedding", (table,), out, bwd)


# ---------------------------------------------------------------------------
# Reductions


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=DTYPE)
    shape = x.data.shape

    def bwd(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
        return (np.broadcast_to(g, shape).astype(DTYPE, copy=False),)

    return _record("reduce_sum", (x,), np.asarray(out, dtype=DTYPE), bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.data.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def spatial_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes of an (N, H, W, C) tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"spatial_avg_pool expects NHWC input, got shape {x.shape}")
    n, h, w, c = x.data.shape
    out = x.data.mean(axis=(1, 2), dtype=DTYPE)

    def bwd(g):
        return (np.broadcast_to(g[:, None, None, :] / DTYPE(h * w), (n, h, w, c)).astype(DTYPE),)

    return _record("spatial_avg_pool", (x,), out, bwd)


# ---------------------------------------------------------------------------
# Normalization, softmax, dropout


def softmax(x: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, stabilized by max shift."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", (x,), y.astype(DTYPE, copy=False), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine must have shape ({d},), got "
                         f"gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True, dtype=DTYPE)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=DTYPE)
    istd = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = xc * istd
    out = gamma.data * xhat + beta.data

    def bwd(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes, dtype=DTYPE)
        dbeta = g.sum(axis=reduce_axes, dtype=DTYPE)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True, dtype=DTYPE)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=DTYPE)
        dx = istd * (dxhat - m1 - xhat * m2)
        return dx.astype(DTYPE, copy=False), dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), out.astype(DTYPE, copy=False), bwd)


@dataclass
class BatchNormState:
    """Running statistics of one batch_norm site (mutated in train mode)."""

    mean: Tensor
    var: Tensor
    count: Tensor  # (1,) number of train batches folded in; 0 = uninitialized

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(Tensor(np.zeros(channels)), Tensor(np.ones(channels)),
                   Tensor(np.zeros(1)))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over all leading axes (channels last).

    Train mode normalizes by batch statistics and folds them into the
    running state with the given momentum; eval mode uses the running state
    and raises if no train batch was ever seen.
    """
    _check_mode(mode)
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm affine must have shape ({c},), got "
                         f"gamma {gamma.shape}, beta {beta.shape}")
    if state.mean.data.shape != (c,):
        raise ShapeError(f"batch_norm running stats have {state.mean.data.shape[0]} channels, "
                         f"input has {c}")
    axes = tuple(range(x.data.ndim - 1))
    n = x.data.size // c

    if mode == TRAIN:
        mu = x.data.mean(axis=axes, dtype=DTYPE)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, dtype=DTYPE)
        m = DTYPE(momentum)
        state.mean.data[...] = m * state.mean.data + (1 - m) * mu
        state.var.data[...] = m * state.var.data + (1 - m) * var
        state.count.data[...] += 1
        istd = 1.0 / np.sqrt(var + DTYPE(eps))
        xhat = xc * istd
        out = gamma.data * xhat + beta.data

        def bwd(g):
            dgamma = (g * xhat).sum(axis=axes, dtype=DTYPE)
            dbeta = g.sum(axis=axes, dtype=DTYPE)
            dxhat = g * gamma.data
            # gradient through the batch statistics
            dvar = (dxhat * xc).sum(axis=axes, dtype=DTYPE) * DTYPE(-0.5) * istd ** 3
            dmu = -(dxhat.sum(axis=axes, dtype=DTYPE)) * istd \
                + dvar * (-2.0 / n) * xc.sum(axis=axes, dtype=DTYPE)
            dx = dxhat * istd + dvar * (2.0 / n) * xc + dmu / DTYPE(n)
            return dx.astype(DTYPE, copy=False), dgamma, dbeta

        return _record("batch_norm", (x, gamma, beta), out.astype(DTYPE, copy=False), bwd)

    if float(state.count.data[0]) == 0:
        raise RuntimeError("batch_norm in eval mode before any train step "
                           "(running statistics are uninitialized)")
    istd = 1.0 / np.sqrt(state.var.data + DTYPE(eps))
    xhat = (x.data - state.mean.data) * istd
    out = gamma.data * xhat + beta.data

    def bwd_eval(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes, dtype=DTYPE)
        dbeta = g.sum(axis=reduce_axes, dtype=DTYPE)
        dx = g * (gamma.data * istd)
        return dx.astype(DTYPE, copy=False), dgamma, dbeta

    return _record("batch_norm_eval", (x, gamma, beta), out.astype(DTYPE, copy=False), bwd_eval)


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: train zeroes with prob ``rate`` and rescales survivors."""
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == EVAL or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode with rate > 0 needs an rng")
    keep = (rng.random(x.data.shape) >= rate)
    scale = DTYPE(1.0 / (1.0 - rate))
    mask = keep.astype(DTYPE) * scale
    out = x.data * mask

    def bwd(g):
        return (g * mask,)

    return _record("dropout", (x,), out, bwd)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits)[target], stabilized by row max."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, K) logits, got {logits.shape}")
    b, k = logits.data.shape
    t = np.asarray(targets)
    if t.shape != (b,):
        raise ShapeError(f"targets must have shape ({b},), got {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise IndexError(f"target out of range [0, {k}): min={t.min()}, max={t.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, dtype=DTYPE))
    losses = lse - z[np.arange(b), t]
    out = np.asarray(losses.mean(dtype=DTYPE), dtype=DTYPE)
    probs = np.exp(z - lse[:, None])

    def bwd(g):
        d = probs.copy()
        d[np.arange(b), t] -= 1
        return (d * (g / DTYPE(b)),)

    return _record("softmax_cross_entropy", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# Convolution


def _out_size(n: int, k: int, stride: int, pad: str) -> tuple[int, int, int]:
    """Output length plus (before, after) zero padding for one spatial axis."""
    if pad == "same":
        out = -(-n // stride)  # ceil division
        total = max((out - 1) * stride + k - n, 0)
        return out, total // 2, total - total // 2
    if pad == "valid":
        out = (n - k) // stride + 1
        return out, 0, 0
    raise ConfigError(f"pad must be 'same' or 'valid', got {pad!r}")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: str = "same") -> Tensor:
    """Cross-correlation of NHWC ``x`` with (kh, kw, Cin, Cout) weights.

    Lowered to a single matmul per call by gathering kh*kw strided views
    of the padded input; the backward pass scatters through the same views.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weights, got {x.shape} and {w.shape}")
    n, h, wd, cin = x.data.shape
    kh, kw, wcin, cout = w.data.shape
    if cin != wcin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} has Cin={cin}, "
                         f"weights {w.shape} expect Cin={wcin}")
    hout, ptop, pbot = _out_size(h, kh, stride, pad)
    wout, plft, prgt = _out_size(wd, kw, stride, pad)
    if hout < 1 or wout < 1:
        raise ShapeError(f"conv2d output would be empty: input {x.shape}, kernel "
                         f"({kh}, {kw}), stride {stride}, pad {pad!r}")

    if ptop or pbot or plft or prgt:
        xp = np.pad(x.data, ((0, 0), (ptop, pbot), (plft, prgt), (0, 0)))
    else:
        xp = x.data
    cols = np.empty((n, hout, wout, kh, kw, cin), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (hout - 1) + 1:stride,
                                        j:j + stride * (wout - 1) + 1:stride, :]
    cols2 = cols.reshape(n * hout * wout, kh * kw * cin)
    out = cols2 @ w.data.reshape(kh * kw * cin, cout)
    out = out.reshape(n, hout, wout, cout)

    def bwd(g):
        g2 = g.reshape(n * hout * wout, cout)
        dw = (cols2.T @ g2).reshape(kh, kw, cin, cout)
        dcols = (g2 @ w.data.reshape(kh * kw * cin, cout).T).reshape(
            n, hout, wout, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * (hout - 1) + 1:stride,
                    j:j + stride * (wout - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, ptop:ptop + h, plft:plft + wd, :] if (ptop or pbot or plft or prgt) else dxp
        return np.ascontiguousarray(dx), dw

    return _record("conv2d", (x, w), out.astype(DTYPE, copy=False), bwd)
