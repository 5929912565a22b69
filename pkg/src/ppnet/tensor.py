"""Dense tensors and a minimal reverse-mode autodiff engine.

Only the operations the network needs are provided. Every operation takes
and returns :class:`Tensor` objects; when any input requires gradients the
result records its parents and a closure mapping the output gradient to
input gradients. :func:`backward` walks that graph in reverse topological
order.

Arrays are laid out as (batch, channels, height, width). Training runs in
float32; gradient checks run in float64.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, DimensionError, NumericFault

__all__ = [
    "Tensor",
    "GraphNode",
    "no_grad",
    "is_grad_enabled",
    "conv2d",
    "maxpool2d",
    "upsample_nearest",
    "relu",
    "sigmoid",
    "tanh",
    "add",
    "sub",
    "mul",
    "scale",
    "clamp01",
    "concat_channels",
    "slice_channels",
    "mean_all",
    "backward",
    "grad_check",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An array value plus the provenance needed for reverse-mode gradients.

    Leaves are created directly; interior nodes come from the operations in
    this module. ``grad`` is filled in on leaves by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"


# A graph node is a tensor that remembers its producing op and parents.
GraphNode = Tensor


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericFault(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
    return out


def _check_same_shape(op, *tensors):
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"{op}: shape mismatch {shape} vs {t.shape}")


# ---------------------------------------------------------------------------
# convolution, pooling, resampling


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip), stride 1, zero padding.

    x: (B, Cin, H, W), kernel: (Cout, Cin, k, k), bias: (Cout,).
    Output spatial size is ``H + 2*padding - k + 1``.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-D (B,C,H,W), got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv2d: kernel must be (Cout,Cin,k,k), got {kernel.shape}")
    cout, cin, k, _ = kernel.shape
    if k % 2 != 1:
        raise DimensionError(f"conv2d: kernel size must be odd, got {k}")
    B, C, H, W = x.shape
    if C != cin:
        raise DimensionError(f"conv2d: input has {C} channels but kernel expects {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")
    if padding < 0:
        raise DimensionError("conv2d: padding must be non-negative")
    Ho, Wo = H + 2 * padding - k + 1, W + 2 * padding - k + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {H}x{W}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # channel-major im2col: rows (Cin, k, k), columns (B, Ho, Wo)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # B,C,Ho,Wo,k,k
    cols = cols.transpose(1, 4, 5, 0, 2, 3).reshape(C * k * k, B * Ho * Wo)
    wmat = kernel.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, B, Ho, Wo)
    out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def _backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (gm @ cols.T).reshape(kernel.shape)
        if bias.requires_grad:
            gb = gm.sum(axis=1)
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(C, k, k, B, Ho, Wo)
            dxp = np.zeros((C, B, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + Ho, j:j + Wo] += dcols[:, i, j]
            gx = dxp[:, :, padding:padding + H, padding:padding + W].transpose(1, 0, 2, 3)
        return gx, gk, gb

    return _result(out, "conv2d", (x, kernel, bias), _backward)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first maximum in
    row-major window order."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: input must be 4-D, got shape {x.shape}")
    B, C, H, W = x.shape
    if window < 1 or H % window or W % window:
        raise DimensionError(f"maxpool2d: spatial dims {H}x{W} not divisible by window {window}")
    Ho, Wo = H // window, W // window
    blocks = x.data.reshape(B, C, Ho, window, Wo, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, Ho, Wo, window * window)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        onehot = np.zeros((B, C, Ho, Wo, window * window), dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(B, C, Ho, Wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(B, C, H, W),)

    return _result(out, "maxpool2d", (x,), _backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest: input must be 4-D, got shape {x.shape}")
    if factor < 1:
        raise ContractError("upsample_nearest: factor must be >= 1")
    if factor == 1:
        return x
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def _backward(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _result(out, "upsample_nearest", (x,), _backward)


# ---------------------------------------------------------------------------
# pointwise family


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _result(out, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, "tanh", (x,), lambda g: (g * (1 - out * out),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * x.dtype.type(c), "scale", (x,), lambda g: (g * g.dtype.type(c),))


def clamp01(x: Tensor) -> Tensor:
    d = x.data
    out = np.clip(d, 0, 1)
    inside = (d > 0) & (d < 1)
    return _result(out, "clamp01", (x,), lambda g: (g * inside,))


def concat_channels(*xs: Tensor) -> Tensor:
    if not xs:
        raise ContractError("concat_channels needs at least one input")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for t in xs:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in xs], axis=1)

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _result(out, "concat_channels", xs, _backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` along axis 1 (also used on kernels' Cin axis)."""
    n = x.shape[1]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice_channels: [{start}:{stop}] out of range for {n} channels")
    out = x.data[:, start:stop]
    shape, dtype = x.shape, x.dtype

    def _backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return _result(out, "slice_channels", (x,), _backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    shape, dtype = x.shape, x.dtype
    return _result(out, "mean_all", (x,), lambda g: (np.full(shape, g / n, dtype=dtype),))


# ---------------------------------------------------------------------------
# gradients


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Reverse accumulation from a scalar ``loss``.

    Sets ``.grad`` on every reachable leaf. Returns a map from each tensor in
    ``params`` (default: every reachable leaf) to its gradient; parameters the
    loss does not depend on map to zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar-shaped, got shape {loss.shape}")
    params = list(params) if params is not None else None
    if params is not None:
        for p in params:
            p.grad = None
    leaves = []
    if loss.requires_grad:
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                leaves.append(node)
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is None:
        return {leaf: leaf.grad for leaf in leaves}
    out = {}
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[p] = p.grad
    return out


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, indices=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor. ``indices`` optionally restricts
    the numeric check to a subset of flat element positions.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x, requires_grad=True)
    analytic = backward(f(xt), [xt])[xt].reshape(-1)
    flat = x.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(x)).item()
            flat[i] = orig - eps
            fm = f(Tensor(x)).item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
