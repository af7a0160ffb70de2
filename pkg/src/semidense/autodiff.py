"""Small reverse-mode autodiff over dense float64 arrays.

Feature maps are ``(channels, height, width)`` arrays; kernels are
``(out, in, kh, kw)`` and biases are vectors. Only the handful of ops the
refinement network needs are provided.

Operations are recorded on the innermost active :class:`Tape`::

    with Tape() as tape:
        y = leaky_relu(conv2d(x, w, b), 0.3)
        loss = sum_all(y)
    grads = backward(tape, loss, [w, b])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError

__all__ = [
    "Tensor",
    "Tape",
    "VariationalWeights",
    "backward",
    "conv2d",
    "pool",
    "upsample_nearest",
    "pad_edge",
    "leaky_relu",
    "leaky_hardswish",
    "sigmoid",
    "softplus",
    "dropout",
    "variational_conv1x1",
    "kl_gaussian",
    "concat",
    "add",
    "sub",
    "mul",
    "div",
    "log",
    "square",
    "sum_all",
    "masked_mean",
]


class Tensor:
    """An array plus the bookkeeping needed for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        self.grad = g.copy() if self.grad is None else self.grad + g


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as they are created, so inputs always precede outputs.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = fn
        _TAPES[-1].record(out)
    return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
    """Backpropagate from a scalar ``loss`` through ``tape``.

    Returns one gradient array per entry of ``params``; parameters the loss
    does not depend on get zeros. Gradients are also left on ``.grad``.
    """
    if loss.data.size != 1:
        raise ConfigError(f"backward needs a scalar loss, got shape {loss.shape}")
    for node in tape.nodes:
        node.grad = None
        for p in node.parents:
            p.grad = None
    for p in params:
        p.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node.backward_fn is not None:
            node.backward_fn(node.grad)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise arithmetic ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def fn(g):
        a.accumulate(_unbroadcast(g / b.data, a.shape))
        b.accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), fn)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ConfigError("log of a non-positive value")

    def fn(g):
        x.accumulate(g / x.data)

    return _node(np.log(x.data), (x,), fn)


def square(x: Tensor) -> Tensor:
    def fn(g):
        x.accumulate(2.0 * g * x.data)

    return _node(x.data * x.data, (x,), fn)


def sum_all(x: Tensor) -> Tensor:
    def fn(g):
        x.accumulate(np.broadcast_to(g.reshape(()), x.shape).copy())

    return _node(np.array(x.data.sum()), (x,), fn)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` over the entries where the constant ``mask`` is true."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    n = int(mask.sum())
    if n == 0:
        raise ConfigError("masked_mean over an empty mask")
    w = mask / n

    def fn(g):
        x.accumulate(g.reshape(()) * w)

    return _node(np.array((x.data * w).sum()), (x,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            t.accumulate(part)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


# activations -----------------------------------------------------------------


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if not 0.0 <= slope <= 1.0:
        raise ConfigError(f"leaky slope must be in [0, 1], got {slope}")
    out = x.data * slope
    np.maximum(x.data, out, out=out)

    def fn(g):
        # right-derivative at 0
        x.accumulate(np.where(x.data >= 0, g, slope * g))

    return _node(out, (x,), fn)


def leaky_hardswish(x: Tensor, lambda_act: float) -> Tensor:
    """``x * clip((x + 1) / 2, 0, 1) + lambda_act * x``."""
    if lambda_act <= 0:
        raise ConfigError("lambda_act must be positive")
    v = x.data
    gate = v + 1.0
    gate *= 0.5
    np.clip(gate, 0.0, 1.0, out=gate)
    out = gate + lambda_act
    out *= v

    def fn(g):
        # right-derivative at the kinks x = -1 and x = 1
        quad = (v >= -1.0) & (v < 1.0)
        x.accumulate(g * (gate + np.where(quad, 0.5 * v, 0.0) + lambda_act))

    return _node(out, (x,), fn)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def fn(g):
        x.accumulate(g * s * (1.0 - s))

    return _node(s, (x,), fn)


def softplus(x: Tensor) -> Tensor:
    def fn(g):
        x.accumulate(g * _sigmoid(x.data))

    return _node(np.logaddexp(0.0, x.data), (x,), fn)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], mode: str = "train") -> Tensor:
    """Inverted dropout; ``mode="mean"`` is the identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "mean" or p == 0.0:
        return x
    if mode != "train":
        raise ConfigError(f"unknown dropout mode {mode!r}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def fn(g):
        x.accumulate(g * keep)

    return _node(x.data * keep, (x,), fn)


# spatial ops -----------------------------------------------------------------


def conv2d(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None, padding: str = "same") -> Tensor:
    """Cross-correlation of a ``(C, H, W)`` map with an ``(O, C, kh, kw)`` kernel."""
    x, weights = _as_tensor(x), _as_tensor(weights)
    if x.data.ndim != 3 or weights.data.ndim != 4:
        raise ConfigError("conv2d expects a (C,H,W) input and an (O,C,kh,kw) kernel")
    c, h, w = x.shape
    o, ci, kh, kw = weights.shape
    if ci != c:
        raise ConfigError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError("conv2d: kernel sizes must be odd")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ConfigError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
        oh, ow = h, w
    elif padding == "valid":
        ph = pw = 0
        xp = x.data
        oh, ow = h - kh + 1, w - kw + 1
        if oh < 1 or ow < 1:
            raise ConfigError("conv2d: input smaller than kernel under valid padding")
    else:
        raise ConfigError(f"unknown padding {padding!r}")

    wd = weights.data
    if kh == 1 and kw == 1:
        x2 = xp.reshape(c, -1)
        out = (wd[:, :, 0, 0] @ x2).reshape(o, oh, ow)
    else:
        # multiply the whole padded map once per tap and shift the result,
        # which avoids copying a strided input window per tap
        hp, wp = xp.shape[1:]
        flat = xp.reshape(c, -1)
        taps = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))
        out = np.zeros((o, oh, ow))
        for i in range(kh):
            for j in range(kw):
                out += (taps[i, j] @ flat).reshape(o, hp, wp)[:, i:i + oh, j:j + ow]
    if bias is not None:
        out += bias.data[:, None, None]

    parents = (x, weights) if bias is None else (x, weights, bias)

    def fn(g):
        g2 = g.reshape(o, -1)
        if bias is not None:
            bias.accumulate(g2.sum(axis=1))
        if kh == 1 and kw == 1:
            x2 = xp.reshape(c, -1)
            weights.accumulate((g2 @ x2.T)[:, :, None, None])
            if x.requires_grad:
                x.accumulate((wd[:, :, 0, 0].T @ g2).reshape(c, oh, ow))
            return
        gw = np.empty_like(wd)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, i:i + oh, j:j + ow].reshape(c, -1)
                gw[:, :, i, j] = g2 @ xs.T
                if gxp is not None:
                    gxp[:, i:i + oh, j:j + ow] += (taps[i, j].T @ g2).reshape(c, oh, ow)
        weights.accumulate(gw)
        if gxp is not None:
            x.accumulate(gxp[:, ph:ph + h, pw:pw + w])

    return _node(out, parents, fn)


def _edge_index(n: int, factor: int) -> np.ndarray:
    m = -(-n // factor) * factor
    return np.minimum(np.arange(m), n - 1)


def _scatter_edges(gp: np.ndarray, rows: np.ndarray, cols: np.ndarray, h: int, w: int) -> np.ndarray:
    gr = np.zeros((gp.shape[0], h, gp.shape[2]))
    np.add.at(gr, (slice(None), rows), gp)
    gx = np.zeros((gp.shape[0], h, w))
    np.add.at(gx, (slice(None), slice(None), cols), gr)
    return gx


def pool(x: Tensor, kind: str, factor: int) -> Tensor:
    """Min/max/average pooling with edge replication up to a multiple of ``factor``."""
    if factor < 1:
        raise ConfigError(f"pool factor must be >= 1, got {factor}")
    if kind not in ("min", "max", "avg"):
        raise ConfigError(f"unknown pool kind {kind!r}")
    if factor == 1:
        return x
    c, h, w = x.shape
    rows, cols = _edge_index(h, factor), _edge_index(w, factor)
    padded = rows.size != h or cols.size != w
    xp = x.data[:, rows][:, :, cols] if padded else x.data
    oh, ow = rows.size // factor, cols.size // factor
    blocks = xp.reshape(c, oh, factor, ow, factor).transpose(0, 1, 3, 2, 4).reshape(c, oh, ow, factor * factor)

    if kind == "avg":
        out = blocks.mean(axis=-1)
        sel = None
    else:
        sel = blocks.argmax(axis=-1) if kind == "max" else blocks.argmin(axis=-1)
        out = np.take_along_axis(blocks, sel[..., None], axis=-1)[..., 0]

    def fn(g):
        if sel is None:
            gb = np.repeat(g[..., None] / (factor * factor), factor * factor, axis=-1)
        else:
            gb = np.zeros_like(blocks)
            np.put_along_axis(gb, sel[..., None], g[..., None], axis=-1)
        gp = gb.reshape(c, oh, ow, factor, factor).transpose(0, 1, 3, 2, 4).reshape(c, oh * factor, ow * factor)
        x.accumulate(_scatter_edges(gp, rows, cols, h, w) if padded else gp)

    return _node(out, (x,), fn)


def pad_edge(x: Tensor, ph: int, pw: int) -> Tensor:
    """Pad rows by ``ph`` and columns by ``pw`` by repeating the border."""
    if ph < 0 or pw < 0:
        raise ConfigError("padding must be non-negative")
    if ph == 0 and pw == 0:
        return x
    c, h, w = x.shape
    rows = np.clip(np.arange(-ph, h + ph), 0, h - 1)
    cols = np.clip(np.arange(-pw, w + pw), 0, w - 1)

    def fn(g):
        x.accumulate(_scatter_edges(g, rows, cols, h, w))

    return _node(x.data[:, rows][:, :, cols], (x,), fn)


def upsample_nearest(x: Tensor, factor: int, target_h: int, target_w: int) -> Tensor:
    """Replicate each pixel into a ``factor`` block, then crop to the target size."""
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    c, h, w = x.shape
    if -(-target_h // factor) != h or -(-target_w // factor) != w:
        raise ConfigError(
            f"upsample: {h}x{w} map cannot produce {target_h}x{target_w} at factor {factor}"
        )
    up = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)[:, :target_h, :target_w]

    def fn(g):
        gp = np.zeros((c, h * factor, w * factor))
        gp[:, :target_h, :target_w] = g
        x.accumulate(gp.reshape(c, h, factor, w, factor).sum(axis=(2, 4)))

    return _node(up, (x,), fn)


# variational layers ----------------------------------------------------------


@dataclass
class VariationalWeights:
    """Gaussian weights: mean ``mu`` and pre-softplus deviation ``rho``."""

    mu: Tensor
    rho: Tensor

    def __post_init__(self):
        if self.mu.shape != self.rho.shape:
            raise ConfigError(f"mu shape {self.mu.shape} != rho shape {self.rho.shape}")

    @property
    def std(self) -> np.ndarray:
        return np.logaddexp(0.0, self.rho.data)

    def sample(self, rng: np.random.Generator) -> Tensor:
        eps = rng.standard_normal(self.mu.shape)
        return add(self.mu, mul(softplus(self.rho), eps))

    @property
    def size(self) -> int:
        return self.mu.data.size


def variational_conv1x1(
    x: Tensor,
    vw: VariationalWeights,
    bias_vw: Optional[VariationalWeights],
    rng: Optional[np.random.Generator],
    mode: str = "sample",
) -> Tensor:
    """1x1 convolution with reparameterized Gaussian weights.

    ``mode="mean"`` uses the weight means exactly; ``mode="sample"`` draws
    ``mu + softplus(rho) * eps`` with ``eps ~ N(0, 1)`` per weight.
    """
    if vw.mu.data.ndim != 4 or vw.mu.shape[2:] != (1, 1):
        raise ConfigError("variational_conv1x1 needs an (O, C, 1, 1) kernel")
    if mode == "mean":
        return conv2d(x, vw.mu, None if bias_vw is None else bias_vw.mu)
    if mode != "sample":
        raise ConfigError(f"unknown variational mode {mode!r}")
    w = vw.sample(rng)
    b = None if bias_vw is None else bias_vw.sample(rng)
    return conv2d(x, w, b)


def kl_gaussian(vw: VariationalWeights, sigma_prior: float) -> Tensor:
    """KL( N(mu, s^2) || N(0, sigma_prior^2) ) summed over all weights."""
    if sigma_prior <= 0:
        raise ConfigError("sigma_prior must be positive")
    mu, rho = vw.mu, vw.rho
    s = np.logaddexp(0.0, rho.data)
    var_p = sigma_prior * sigma_prior
    kl = np.sum(np.log(sigma_prior / s) + (s * s + mu.data * mu.data) / (2.0 * var_p) - 0.5)

    def fn(g):
        g = g.reshape(())
        mu.accumulate(g * mu.data / var_p)
        rho.accumulate(g * (-1.0 / s + s / var_p) * _sigmoid(rho.data))

    return _node(np.array(kl), (mu, rho), fn)
