"""Dense-tensor reverse-mode automatic differentiation on top of numpy.

Tensors are thin wrappers around ``np.ndarray``. Operations executed while a
:class:`GradientTape` is active are appended to that tape whenever one of their
inputs is tracked (trainable or produced by an earlier recorded op);
:func:`backward` then sweeps the tape in reverse to accumulate gradients.

Tapes are thread-local, so independent (model, tape) pairs may run on separate
threads.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, TapeError

_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Optional["GradientTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional real array with optional gradient tracking."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a Python scalar")
        return mul(self, 1.0 / other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> "Tensor":
        return relu(self)


def _as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else np.float64))


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: BackwardFn
    op: str


class GradientTape:
    """Records primitive operations for a later reverse sweep.

    Use as a context manager::

        with GradientTape() as tape:
            loss = f(w)
        grads = backward(tape, loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.watched: list[Tensor] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            stack.remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self.watched.append(t)

    def _track(self, t: Tensor) -> bool:
        if id(t) in self._tracked:
            return True
        if t.requires_grad:
            self.watch(t)
            return True
        return False

    def is_recorded(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def __len__(self) -> int:
        return len(self.nodes)


def record(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn, op: str = "") -> Tensor:
    """Wrap ``out`` in a Tensor and put it on the active tape if any input is tracked.

    ``backward_fn`` maps the upstream gradient to one gradient (or None) per input.
    """
    result = Tensor(out)
    tape = active_tape()
    if tape is None:
        return result
    tracked = [tape._track(t) for t in inputs]
    if any(tracked):
        tape.nodes.append(_Node(result, tuple(inputs), backward_fn, op))
        tape._tracked.add(id(result))
    return result


def backward(tape: GradientTape, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> dict:
    """Reverse sweep over ``tape`` starting from the scalar ``loss``.

    Returns a dict keyed by Tensor (identity) holding numpy gradients. With
    ``wrt=None`` every trainable tensor the tape saw is included; trainables
    the loss does not depend on get zero gradients.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise TapeError("loss must be a scalar Tensor")
    if not tape.is_recorded(loss):
        raise TapeError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not tape.is_recorded(inp):
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = gi if acc is None else acc + gi
    targets = tape.watched if wrt is None else list(wrt)
    out = {}
    for t in targets:
        g = grads.get(id(t))
        out[t] = np.zeros_like(t.data) if g is None else np.asarray(g).reshape(t.shape)
    return out


# elementwise / reduction primitives --------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record(a.data + b.data, (a, b), _bw, "add")


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def _bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record(ad * bd, (a, b), _bw, "mul")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return record(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),), "mean")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def _bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return record(np.array(a.data[index]), (a,), _bw, "getitem")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul shapes {ad.shape} and {bd.shape} are incompatible")
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# layer primitives ------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.dtype, copy=False)
    return record(out, (x,), lambda g: (g * mask,), "relu")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"linear: input {xd.shape} incompatible with weight {wd.shape}")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, _bw, "linear")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (B, C, H', W', kh, kw) strided view, no copy
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    x: (B, Cin, H, W); kernel: (Cout, Cin, kh, kw); bias: (Cout,).
    """
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {xd.shape} and {kd.shape}")
    b, cin, h, w = xd.shape
    cout, kcin, kh, kw = kd.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    win = _windows(xp, kh, kw, stride)
    oh, ow = win.shape[2], win.shape[3]
    out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _bw(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(xp.shape, dtype=np.result_type(g, kd))
        hspan = stride * (oh - 1) + 1
        wspan = stride * (ow - 1) + 1
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kd[:, :, i, j], axes=([1], [0]))  # B, oh, ow, Cin
                gxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record(out, inputs, _bw, "conv2d")


def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max over (window x window) patches; gradient goes to the first argmax in row-major order."""
    stride = window if stride is None else stride
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {xd.shape}")
    b, c, h, w = xd.shape
    if h < window or w < window:
        raise ShapeError(f"maxpool2d: window {window} larger than input {h}x{w}")
    win = _windows(xd, window, window, stride)
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, oh, ow, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        hspan = stride * (oh - 1) + 1
        wspan = stride * (ow - 1) + 1
        for t in range(window * window):
            i, j = divmod(t, window)
            gx[:, :, i:i + hspan:stride, j:j + wspan:stride] += g * (arg == t)
        return (gx,)

    return record(out, (x,), _bw, "maxpool2d")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-subtracted for stability."""
    z = logits.data
    labels = np.asarray(labels)
    if z.ndim != 2:
        raise ShapeError(f"logits must be 2-D (batch, classes), got {z.shape}")
    bsz, ncls = z.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {bsz}")
    if labels.size and (labels.min() < 0 or labels.max() >= ncls):
        raise ValueError(f"labels must lie in [0, {ncls})")
    labels = labels.astype(np.intp)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(bsz)
    loss = np.mean(lse - shifted[rows, labels])

    def _bw(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, labels] -= 1.0
        return (probs * (g / bsz),)

    return record(np.asarray(loss, dtype=z.dtype), (logits,), _bw, "softmax_cross_entropy")


# gradient checking -----------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-6,
    signature: Optional[Callable[[np.ndarray], object]] = None,
) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    Per coordinate the error is ``|a - c| / max(|a|, |c|, 1e-12)``. When
    ``signature`` is given, coordinates whose +/-eps perturbation changes
    ``signature(x)`` (e.g. a ReLU mask or pooling argmax) are skipped as kink-adjacent.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with GradientTape() as tape:
        y = f(x)
    analytic = backward(tape, y, [x])[x].reshape(-1)

    ref_sig = signature(base) if signature is not None else None
    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus_sig = signature(base) if signature is not None else None
        fp = float(f(Tensor(base)).data)
        flat[i] = orig - eps
        minus_sig = signature(base) if signature is not None else None
        fm = float(f(Tensor(base)).data)
        flat[i] = orig
        if signature is not None and not (_same(plus_sig, ref_sig) and _same(minus_sig, ref_sig)):
            continue
        central = (fp - fm) / (2.0 * eps)
        a = float(analytic[i])
        err = abs(a - central) / max(abs(a), abs(central), 1e-12)
        if np.isnan(err):
            return float("nan")
        worst = max(worst, err)
    return worst


def _same(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(a, b)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(u, v) for u, v in zip(a, b))
    return a == b
