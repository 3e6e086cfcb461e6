"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records a closure that maps the output gradient to input gradients.
``Tensor.backward`` walks the recorded graph once in reverse topological
order, accumulating into ``.grad`` of leaves created with ``requires_grad``.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    else:
        out._parents = ()
        out._backward = None
        out._op = "const"
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss._consumed:
        raise RuntimeError("backward already ran through this graph; rebuild it first")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any requires_grad tensor")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None
        node._consumed = True


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "hadamard")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def amax(a: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximiser."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), bw, "amax")


def l2_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at an all-zero input is taken as zero."""
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    if keepdims:
        out = n
    elif axis is None:
        out = n.reshape(())
    else:
        out = np.squeeze(n, axis)
    unit = np.where(n > 0, a.data / np.where(n > 0, n, 1.0), 0.0)

    def bw(g):
        return (unit * np.reshape(g, n.shape),)

    return _make(out, (a,), bw, "l2_norm")


def normalize(a: Tensor, axis: int, eps: float = 1e-12) -> Tensor:
    """Unit-normalise along ``axis``; vectors with norm below ``eps`` map to zero."""
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    inv = np.where(n < eps, 0.0, 1.0 / np.where(n < eps, 1.0, n))
    u = a.data * inv

    def bw(g):
        return ((g - u * np.sum(u * g, axis=axis, keepdims=True)) * inv,)

    return _make(u, (a,), bw, "normalize")


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), bw, "index")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


# ---------------------------------------------------------------- linear maps

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def conv1x1(x: Tensor, weight: Tensor) -> Tensor:
    """Per-pixel channel mixing. ``x`` is (..., C, H, W), ``weight`` (Co, Ci, 1, 1)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ValueError(f"conv1x1 weight must be (Co, Ci, 1, 1), got {weight.shape}")
    if x.ndim < 3 or x.shape[-3] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape}, weight {weight.shape}")
    lead, (c, h, w) = x.shape[:-3], x.shape[-3:]
    co = weight.shape[0]
    flat = reshape(x, lead + (c, h * w))
    wm = reshape(weight, (co, c))
    return reshape(matmul(wm, flat), lead + (co, h, w))


def _conv_valid(xp: np.ndarray, wmat: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Valid cross-correlation of padded (B, Ci, H', W') input; returns (out, cols)."""
    b, ci, hp, wp = xp.shape
    h, w = hp - k + 1, wp - k + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))  # b,ci,h,w,k,k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, ci * k * k)
    out = (cols @ wmat.T).reshape(b, h, w, -1).transpose(0, 3, 1, 2)
    return out, cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad_mode: str = "zeros") -> Tensor:
    """Same-padded stride-1 convolution with an odd square kernel.

    ``x`` is (B, Ci, H, W) and ``weight`` is (Co, Ci, k, k).  ``pad_mode`` is
    ``"zeros"`` or ``"edge"`` (replicate border pixels).
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    b, ci, h, w = x.shape
    co, ci2, k, k2 = weight.shape
    if ci != ci2 or k != k2 or k % 2 == 0:
        raise ValueError(f"bad conv2d shapes: input {x.shape}, weight {weight.shape}")
    if pad_mode not in ("zeros", "edge"):
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="constant" if pad_mode == "zeros" else "edge")
    wmat = weight.data.reshape(co, -1)
    out, cols = _conv_valid(xp, wmat, k)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
        parents = parents + (bias,)

    def bw(g):
        gw = None
        if weight.requires_grad:
            g2 = g.transpose(0, 2, 3, 1).reshape(b * h * w, co)
            gw = (g2.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            # gradient w.r.t. the padded input is a full correlation with the flipped kernel
            gpad = np.pad(g, ((0, 0), (0, 0), (2 * p, 2 * p), (2 * p, 2 * p)))
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(ci, -1)
            gxp, _ = _conv_valid(gpad, wflip, k)
            if pad_mode == "edge" and p:
                gxp = gxp.copy()
                gxp[:, :, p, :] += gxp[:, :, :p, :].sum(axis=2)
                gxp[:, :, p + h - 1, :] += gxp[:, :, p + h:, :].sum(axis=2)
                gxp[:, :, :, p] += gxp[:, :, :, :p].sum(axis=3)
                gxp[:, :, :, p + w - 1] += gxp[:, :, :, p + w:].sum(axis=3)
            gx = gxp[:, :, p:p + h, p:p + w]
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out, parents, bw, "conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling over the last two axes (even sizes only)."""
    *lead, h, w = x.shape
    d = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return _make(d, (x,), bw, "avg_pool2")


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    if n_in < 1 or n_out < 1:
        raise ValueError("resize dimensions must be >= 1")
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear resize of the last two axes."""
    x = _as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ry = resize_matrix(h, out_h)
    rx = resize_matrix(w, out_w)
    return matmul(matmul(ry, x), rx.T)


# ---------------------------------------------------------------- losses

def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on logits, via the softplus form."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape}, targets {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("targets must be binary")
    z = logits.data
    softplus = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    val = np.sum(softplus - y * z) / n
    return _make(np.asarray(val), (logits,),
                 lambda g: (g * (_stable_sigmoid(z) - y) / n,), "bce")


# ---------------------------------------------------------------- checking

def numeric_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-6, entries=None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param.data``.

    ``entries`` restricts the probe to those flat indices (others stay 0).
    """
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    g = out.reshape(-1)
    with no_grad():
        for i in (range(flat.size) if entries is None else entries):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
    return out


def gradcheck(fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-6,
              rtol: float = 1e-5, atol: float = 1e-8, max_entries: int | None = None, seed: int = 0) -> float:
    """Compare autodiff against central differences; return the worst relative error.

    The error for each parameter is ``|a - n| / max(|a|, |n|)`` in the 2-norm,
    falling back to the absolute error when both norms are below ``atol``.
    With ``max_entries`` only that many random coordinates per parameter are
    probed (and compared).  Raises AssertionError when any parameter exceeds
    ``rtol``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    rng = np.random.default_rng(seed)
    for p in params:
        a = np.zeros_like(p.data) if p.grad is None else p.grad
        idx = None
        if max_entries is not None and p.data.size > max_entries:
            idx = np.sort(rng.choice(p.data.size, size=max_entries, replace=False))
        n = numeric_grad(fn, p, h, idx)
        if idx is not None:
            a, n = a.reshape(-1)[idx], n.reshape(-1)[idx]
        diff = np.linalg.norm(a - n)
        scale_ = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale_ < atol:
            if diff > atol:
                raise AssertionError(f"absolute gradient error {diff:.3g} > {atol}")
            continue
        rel = diff / scale_
        worst = max(worst, rel)
        if rel > rtol:
            raise AssertionError(f"relative gradient error {rel:.3g} > {rtol} for shape {p.shape}")
    return worst
