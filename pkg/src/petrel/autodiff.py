"""Define-by-run reverse-mode differentiation over dense numpy tensors.

Only the operators a valid-convolution U-Net needs are provided. Every op
accepts either a single image ``(C, H, W)`` or a batch ``(N, C, H, W)``.
Values are held in float64 so reductions accumulate in double precision.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Callable | None = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward_fn if needs else None, op=op)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Intermediate gradients live only for the duration of the call, so calling
    twice on the same graph adds the leaf gradients twice.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


# ---------------------------------------------------------------- convolution

def conv2d_valid(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 (or any odd/even kxk) cross-correlation without padding."""
    xb, single = _as_batch(x.data)
    n, c, h, w = xb.shape
    if weight.data.ndim != 4 or weight.shape[1] != c:
        raise ValueError(f"weight shape {weight.shape} incompatible with input channels {c}")
    o, _, kh, kw = weight.shape
    if bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} != ({o},)")
    if h < kh or w < kw:
        raise ValueError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
    ho, wo = h - kh + 1, w - kw + 1

    # im2col: rows ordered (n, y, x), columns ordered (c, i, j)
    windows = sliding_window_view(xb, (kh, kw), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = cols @ wmat.T + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def _backward(g):
        gb = g[None] if single else g
        g2 = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gbias = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gx = np.zeros_like(xb)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if single:
                gx = gx[0]
        return gx, gw, gbias

    return make_op(out[0] if single else out, (x, weight, bias), _backward, "conv2d_valid")


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Pointwise channel mixing; ``weight`` has shape (C_out, C_in, 1, 1)."""
    return conv2d_valid(x, weight, bias)


# -------------------------------------------------------------- pooling / up

def maxpool2(x: Tensor) -> Tensor:
    xb, single = _as_batch(x.data)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum; window cells are in row-major order
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        gb = g[None] if single else g
        gblocks = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gblocks, arg[..., None], gb[..., None], axis=-1)
        gx = gblocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gx = gx.reshape(n, c, h, w)
        return (gx[0] if single else gx,)

    return make_op(out[0] if single else out, (x,), _backward, "maxpool2")


def _up1d(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],))
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up1d_transpose(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def upsample_bilinear2(x: Tensor) -> Tensor:
    """Factor-2 bilinear upsampling, half-pixel (align-corners=false) sampling."""
    out = _up1d(_up1d(x.data, -2), -1)

    def _backward(g):
        return (_up1d_transpose(_up1d_transpose(g, -1), -2),)

    return make_op(out, (x,), _backward, "upsample_bilinear2")


def crop_concat(high_res: Tensor, low_res: Tensor) -> Tensor:
    """Center-crop ``high_res`` to ``low_res``'s size and stack channels (high first)."""
    hb, single = _as_batch(high_res.data)
    lb, single_l = _as_batch(low_res.data)
    if single != single_l or hb.shape[0] != lb.shape[0]:
        raise ValueError("crop_concat operands differ in batch layout")
    h1, w1 = hb.shape[2:]
    h2, w2 = lb.shape[2:]
    dh, dw = h1 - h2, w1 - w2
    if dh < 0 or dw < 0:
        raise ValueError(f"cannot crop {h1}x{w1} down to larger {h2}x{w2}")
    if dh % 2 or dw % 2:
        raise ValueError(f"odd crop margin ({dh}, {dw})")
    top, left = dh // 2, dw // 2
    c1 = hb.shape[1]
    out = np.concatenate([hb[:, :, top:top + h2, left:left + w2], lb], axis=1)

    def _backward(g):
        gb = g[None] if single else g
        gh = None
        if high_res.requires_grad:
            gh = np.zeros_like(hb)
            gh[:, :, top:top + h2, left:left + w2] = gb[:, :c1]
            gh = gh[0] if single else gh
        gl = gb[:, c1:]
        return gh, (gl[0] if single else gl)

    return make_op(out[0] if single else out, (high_res, low_res), _backward, "crop_concat")


# ----------------------------------------------------------------- pointwise

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def sum_all(x: Tensor) -> Tensor:
    return make_op(np.array(x.data.sum()), (x,),
                   lambda g: (np.full(x.shape, float(g)),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return make_op(np.array(x.data.sum() / n), (x,),
                   lambda g: (np.full(x.shape, float(g) / n),), "mean")
