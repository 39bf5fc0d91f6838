"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded together with
their backward rules. :func:`backward` replays the tape in reverse and writes
gradients into every leaf tensor that has ``requires_grad=True``.

    >>> x = Tensor([3.0], requires_grad=True, dtype=np.float64)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(x, x))
    >>> backward(tape, loss)
    >>> x.grad
    array([6.])

Convolutions use cross-correlation semantics (no kernel flip) with "same"
zero padding; when the total padding is odd the extra row/column goes on the
bottom/right.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float32

ArrayLike = Union[np.ndarray, Sequence, float, int]

_debug = False
_tapes: list[Optional["Tape"]] = []


class StructuralError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_debug(enabled: bool) -> None:
    """Toggle non-finite value detection on every recorded op output."""
    global _debug
    _debug = bool(enabled)


@contextlib.contextmanager
def debug_mode() -> Iterator[None]:
    prev = _debug
    set_debug(True)
    try:
        yield
    finally:
        set_debug(prev)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(x: Union[Tensor, ArrayLike], dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]
    op: str = ""


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    A tape is single-threaded; use one per training thread.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)

    def reset(self) -> None:
        self.nodes.clear()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, even inside an active tape."""
    _tapes.append(None)
    try:
        yield
    finally:
        _tapes.pop()


def _active_tape() -> Optional[Tape]:
    return _tapes[-1] if _tapes else None


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    if _debug and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    tape = _active_tape()
    if requires and tape is not None:
        tape.nodes.append(Node(inputs, out, backward_fn, op))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf that feeds ``loss``.

    Leaf gradients are reset at the start of each call, so calling this twice
    on the same tape yields the same gradients rather than doubled ones.
    Gradients from fan-out are summed.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    end = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].output is loss:
            end = i
            break
    if end is None:
        raise ValueError("loss was not produced on this tape")

    nodes = tape.nodes[: end + 1]
    produced = {id(n.output) for n in nodes}
    for n in nodes:
        for t in n.inputs:
            if t.requires_grad and id(t) not in produced:
                t.grad = np.zeros_like(t.data)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for n in reversed(nodes):
        g = grads.pop(id(n.output), None)
        if g is None:
            continue
        for t, gi in zip(n.inputs, n.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in produced:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            else:
                t.grad += gi


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise StructuralError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype).reshape(()),
                 lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit("mean", (x,), np.asarray(x.data.mean(), dtype=x.dtype).reshape(()),
                 lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    out = x.data.reshape(tuple(shape))
    return _emit("reshape", (x,), out, lambda g: (g.reshape(orig),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    y = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise StructuralError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(ref, t.shape)) if i != axis % len(ref)
        ):
            raise StructuralError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise StructuralError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for x [B,I], weight [I,O], bias [O]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise StructuralError(f"linear: incompatible shapes {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise StructuralError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data
    return _emit("linear", (x, weight, bias), xd @ wd + bias.data,
                 lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def max_pool2d(x: Tensor, window: tuple[int, int] = (2, 2)) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    ph, pw = window
    if ph < 1 or pw < 1:
        raise ValueError("max_pool2d: window must be positive")
    B, C, H, W = x.shape
    Ho, Wo = H // ph, W // pw
    if Ho == 0 or Wo == 0:
        raise StructuralError(f"max_pool2d: window {window} larger than input {x.shape[2:]}")
    blocks = (x.data[:, :, : Ho * ph, : Wo * pw]
              .reshape(B, C, Ho, ph, Wo, pw)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(B, C, Ho, Wo, ph * pw))
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def _back(g):
        gb = np.zeros((B, C, Ho, Wo, ph * pw), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = np.zeros((B, C, H, W), dtype=g.dtype)
        gx[:, :, : Ho * ph, : Wo * pw] = (gb.reshape(B, C, Ho, Wo, ph, pw)
                                          .transpose(0, 1, 2, 4, 3, 5)
                                          .reshape(B, C, Ho * ph, Wo * pw))
        return (gx,)

    return _emit("max_pool2d", (x,), out, _back)


# convolutions


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def same_padding(size: int, kernel: int, stride: int, dilation: int) -> tuple[int, int, int]:
    """Return ``(out_size, pad_before, pad_after)`` for same padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + (kernel - 1) * dilation + 1 - size, 0)
    return out, total // 2, total - total // 2


def _geometry(H, W, kh, kw, stride, dilation):
    sh, sw = stride
    Ho, pt, pb = same_padding(H, kh, sh, dilation)
    Wo, pl, pr = same_padding(W, kw, sw, dilation)
    return Ho, Wo, (pt, pb, pl, pr)


def _im2col(xp: np.ndarray, kh, kw, stride, dilation, Ho, Wo) -> np.ndarray:
    B, C = xp.shape[:2]
    sh, sw = stride
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=xp.dtype)
    for u in range(kh):
        r0 = u * dilation
        for v in range(kw):
            c0 = v * dilation
            cols[:, :, u, v] = xp[:, :, r0: r0 + sh * (Ho - 1) + 1: sh, c0: c0 + sw * (Wo - 1) + 1: sw]
    return cols


def _col2im(cols: np.ndarray, padded_hw, stride, dilation) -> np.ndarray:
    B, C, kh, kw, Ho, Wo = cols.shape
    sh, sw = stride
    xp = np.zeros((B, C) + tuple(padded_hw), dtype=cols.dtype)
    for u in range(kh):
        r0 = u * dilation
        for v in range(kw):
            c0 = v * dilation
            xp[:, :, r0: r0 + sh * (Ho - 1) + 1: sh, c0: c0 + sw * (Wo - 1) + 1: sw] += cols[:, :, u, v]
    return xp


def _pad(x: np.ndarray, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _unpad(xp: np.ndarray, pads, H, W) -> np.ndarray:
    pt, _, pl, _ = pads
    return xp[:, :, pt: pt + H, pl: pl + W]


def _check_conv_args(op, x, kernel, in_axis, dilation, stride):
    if dilation < 1:
        raise ValueError(f"{op}: dilation must be >= 1, got {dilation}")
    if min(stride) < 1:
        raise ValueError(f"{op}: stride must be >= 1, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise StructuralError(f"{op}: expected 4-d input and kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[in_axis]:
        raise StructuralError(
            f"{op}: input has {x.shape[1]} channels but kernel expects {kernel.shape[in_axis]}")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride=1, dilation: int = 1) -> Tensor:
    """Dilated cross-correlation with same padding.

    ``x`` is [B,Ci,H,W], ``kernel`` is [Co,Ci,kh,kw]; output is
    [B,Co,ceil(H/sh),ceil(W/sw)].
    """
    stride = _pair(stride)
    _check_conv_args("conv2d", x, kernel, 1, dilation, stride)
    B, Ci, H, W = x.shape
    Co, _, kh, kw = kernel.shape
    if bias is not None and bias.shape != (Co,):
        raise StructuralError(f"conv2d: bias shape {bias.shape} != ({Co},)")
    Ho, Wo, pads = _geometry(H, W, kh, kw, stride, dilation)
    xp = _pad(x.data, pads)
    cols = _im2col(xp, kh, kw, stride, dilation, Ho, Wo)
    wd = kernel.data
    out = np.tensordot(cols, wd, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _back(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gcols = np.tensordot(g, wd, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        gx = _unpad(_col2im(gcols, xp.shape[2:], stride, dilation), pads, H, W)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _emit("conv2d", inputs, out, _back)


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
                      stride=1, dilation: int = 1) -> Tensor:
    """Fractionally strided convolution, the exact adjoint of :func:`conv2d`.

    ``x`` is [B,Ci,H,W], ``kernel`` is [Ci,Co,kh,kw]; output is
    [B,Co,H*sh,W*sw]. With a shared kernel and zero bias,
    ``<conv2d(z, k, stride=s), x> == <z, transposed_conv2d(x, k, stride=s)>``.
    """
    stride = _pair(stride)
    _check_conv_args("transposed_conv2d", x, kernel, 0, dilation, stride)
    B, Ci, H, W = x.shape
    _, Co, kh, kw = kernel.shape
    if bias is not None and bias.shape != (Co,):
        raise StructuralError(f"transposed_conv2d: bias shape {bias.shape} != ({Co},)")
    Hout, Wout = H * stride[0], W * stride[1]
    Ho, Wo, pads = _geometry(Hout, Wout, kh, kw, stride, dilation)
    assert (Ho, Wo) == (H, W)
    padded_hw = (Hout + pads[0] + pads[1], Wout + pads[2] + pads[3])
    xd, wd = x.data, kernel.data
    cols = np.tensordot(xd, wd, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
    out = _unpad(_col2im(cols, padded_hw, stride, dilation), pads, Hout, Wout)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _back(g):
        gcols = _im2col(_pad(g, pads), kh, kw, stride, dilation, H, W)
        gx = np.tensordot(gcols, wd, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(xd, gcols, axes=([0, 2, 3], [0, 4, 5]))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _emit("transposed_conv2d", inputs, out, _back)


# loss


BCE_EPS = 1e-7


def bce_loss(pred: Tensor, target: Union[Tensor, np.ndarray], eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to ``[eps, 1-eps]``."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise StructuralError(f"bce_loss: shape mismatch {pred.shape} vs {t.shape}")
    p64 = pred.data.astype(np.float64)
    t64 = t.astype(np.float64)
    p = np.clip(p64, eps, 1.0 - eps)
    n = p.size
    loss = -(t64 * np.log(p) + (1.0 - t64) * np.log1p(-p)).mean()
    inside = (p64 > eps) & (p64 < 1.0 - eps)

    def _back(g):
        gp = (p - t64) / (p * (1.0 - p)) / n * inside * g
        return (gp.astype(pred.dtype),)

    # targets are labels, never differentiated
    return _emit("bce_loss", (pred,), np.asarray(loss, dtype=pred.dtype).reshape(()), _back)


# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place and advance ``state.t``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise StructuralError("adam_step: params, grads and state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise StructuralError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data -= step.astype(p.dtype)


class Adam:
    """Convenience wrapper pairing a parameter list with its :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
