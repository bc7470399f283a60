"""Minimal float32 tensor type with reverse-mode automatic differentiation.

Every operation builds a node graph; `backward` on a scalar node walks the
graph in reverse topological order and accumulates gradients into the `.grad`
buffer of every tensor that requires them. All arithmetic is float32 with
numpy's deterministic reduction order, so identical inputs give bit-identical
results.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericalError


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


class Tensor:
    """N-dimensional float32 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() requires a scalar tensor")
        return float(self.data.reshape(-1)[0])

    def assert_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values in {context}")
        return self

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # scalar/elementwise arithmetic, enough to compose losses
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(-self, float(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result; `backward_fn(g)` must return one gradient per parent."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def topo_order(root: Tensor) -> list:
    """Nodes of the trace rooted at `root`, inputs before the ops using them."""
    order: list = []
    seen: set = set()
    stack: list = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dT into `.grad` of every tensor reachable from `loss`.

    Calling twice without zeroing the grads sums the two passes. Propagation
    uses transient per-call storage so repeated calls cannot compound through
    intermediate nodes.
    """
    if loss.data.size != 1:
        raise DimensionError("backward requires a scalar loss node")
    order = topo_order(loss)
    flowing: dict = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad or loss._backward is not None:
        loss._accumulate(flowing[id(loss)])
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg
            parent._accumulate(pg)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise DimensionError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    c = np.float32(b)
    return _node(a.data + c, (a,), lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise DimensionError(f"mul shape mismatch {a.data.shape} vs {b.data.shape}")
        return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    c = np.float32(b)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def reshape(t: Tensor, shape: tuple) -> Tensor:
    in_shape = t.data.shape
    return _node(t.data.reshape(shape), (t,), lambda g: (g.reshape(in_shape),))


def flatten_batch(t: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(...))."""
    n = t.data.shape[0]
    return reshape(t, (n, -1))


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate 4D tensors along the channel axis."""
    parts = list(parts)
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def back(g):
        grads = []
        start = 0
        for w in widths:
            grads.append(g[:, start:start + w])
            start += w
        return tuple(grads)

    return _node(out, parts, back)


def sum_all(t: Tensor) -> Tensor:
    return _node(np.float32(t.data.sum()), (t,), lambda g: (np.full_like(t.data, g),))


def pick(t: Tensor, index: tuple) -> Tensor:
    """Select one element as a scalar node."""
    val = t.data[index]

    def back(g):
        out = np.zeros_like(t.data)
        out[index] = g
        return (out,)

    return _node(np.float32(val), (t,), back)


# ---------------------------------------------------------------------------
# branch-decision capture / high-accuracy evaluation
# ---------------------------------------------------------------------------

_ROUTING_LOG: Optional[list] = None
_PRECISE = False


class precise_mode:
    """Accumulate reductions in float64 while the block is active.

    Node data stays float32 (each op rounds its result once), so shapes,
    dtypes and branch decisions are unchanged; what drops is the rounding
    error folded into the loss value. A central difference divides that
    error by 2h, so at h=1e-3 plain float32 accumulation alone can cost a
    quotient ~1e-3 on deep nets — the same order as the tolerance a checker
    wants to enforce. Measurement accuracy only; never used in training.
    """

    def __enter__(self) -> "precise_mode":
        global _PRECISE
        self._outer = _PRECISE
        _PRECISE = True
        return self

    def __exit__(self, *exc) -> None:
        global _PRECISE
        _PRECISE = self._outer


class capture_routing:
    """Record which branch every piecewise op takes during forwards.

    A central difference only measures a derivative when both evaluation
    points sit on the same smooth piece of the loss; if a relu flips sign or
    a pool window changes its argmax somewhere in the stencil, the quotient
    mixes two pieces and disagrees with the (correct) analytic gradient at
    the center. Comparing captures from perturbed forwards against a baseline
    lets a checker reject exactly those stencils.
    """

    def __init__(self):
        self.records: list = []

    def __enter__(self) -> "capture_routing":
        global _ROUTING_LOG
        self._outer = _ROUTING_LOG
        _ROUTING_LOG = self.records
        return self

    def __exit__(self, *exc) -> None:
        global _ROUTING_LOG
        _ROUTING_LOG = self._outer

    def matches(self, other: "capture_routing") -> bool:
        return (len(self.records) == len(other.records)
                and all(np.array_equal(a, b)
                        for a, b in zip(self.records, other.records)))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    if _ROUTING_LOG is not None:
        _ROUTING_LOG.append(np.packbits(mask.reshape(-1)))
    return _node(np.where(mask, t.data, np.float32(0.0)), (t,), lambda g: (g * mask,))


def leaky_relu(t: Tensor, slope: float = 0.01) -> Tensor:
    s = np.float32(slope)
    mask = t.data > 0
    if _ROUTING_LOG is not None:
        _ROUTING_LOG.append(np.packbits(mask.reshape(-1)))
    out = np.where(mask, t.data, t.data * s)
    return _node(out, (t,), lambda g: (g * np.where(mask, np.float32(1.0), s),))


def activation(t: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    if kind == "relu":
        return relu(t)
    if kind == "leaky_relu":
        return leaky_relu(t, slope)
    raise ValueError(f"unknown activation kind: {kind!r}")


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (t,), lambda g: (g * out * (1.0 - out),))


def softmax(t: Tensor, axis: int = 1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _node(s, (t,), back)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """out = x @ weight.T + bias, shapes (N,d_in) x (d_out,d_in) -> (N,d_out)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError("linear expects 2D input and weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise DimensionError(
            f"linear inner dims disagree: input {x.data.shape} weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[0],):
        raise DimensionError("linear bias must have shape (d_out,)")
    if _PRECISE:
        out = (x.data.astype(np.float64) @ weight.data.T.astype(np.float64)
               + bias.data).astype(np.float32)
    else:
        out = x.data @ weight.data.T + bias.data

    def back(g):
        return (g @ weight.data, g.T @ x.data, g.sum(axis=0))

    return _node(out, (x, weight, bias), back)


def _with_batch_dim(t: Tensor) -> tuple[Tensor, bool]:
    if t.data.ndim == 3:
        return reshape(t, (1,) + t.data.shape), True
    if t.data.ndim == 4:
        return t, False
    raise DimensionError(f"expected 3D or 4D tensor, got shape {t.data.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2D cross-correlation over (N,C,H,W) or (C,H,W) input.

    Output spatial size is floor((H + 2*padding - kh)/stride) + 1; implemented
    by gathering sliding windows and contracting them against the kernel.
    """
    x4, squeeze = _with_batch_dim(x)
    out = _conv2d_4d(x4, kernel, bias, stride, padding)
    if squeeze:
        return reshape(out, out.data.shape[1:])
    return out


def _conv2d_4d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int, padding: int) -> Tensor:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding < 0:
        raise ValueError("padding must be >= 0")
    n, c, h, w = x.data.shape
    if kernel.data.ndim != 4:
        raise DimensionError("kernel must be (C_out, C_in, kh, kw)")
    c_out, c_in, kh, kw = kernel.data.shape
    if c != c_in:
        raise DimensionError(f"input has {c} channels but kernel expects {c_in}")
    if bias.data.shape != (c_out,):
        raise DimensionError("bias must have shape (C_out,)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    if _PRECISE:
        out = np.tensordot(cols.astype(np.float64), kernel.data.astype(np.float64),
                           axes=([1, 2, 3], [1, 2, 3]))
        out = (out.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]).astype(np.float32)
    else:
        out = np.tensordot(cols, kernel.data, axes=([1, 2, 3], [1, 2, 3]))  # (N,OH,OW,Cout)
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data[None, :, None, None]

    def back(g):
        db = g.sum(axis=(0, 2, 3))
        dk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        dcols = np.tensordot(g, kernel.data, axes=([1], [0]))  # (N,OH,OW,C,kh,kw)
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((n, c, hp, wp), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
        if padding > 0:
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        else:
            dx = dxp
        return (dx, dk.astype(np.float32, copy=False), db)

    return _node(out, (x, kernel, bias), back)


def max_pool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max over window x window patches; backward routes to the argmax only."""
    if stride is None:
        stride = window
    x4, squeeze = _with_batch_dim(x)
    out = _max_pool2d_4d(x4, window, stride)
    if squeeze:
        return reshape(out, out.data.shape[1:])
    return out


def _max_pool2d_4d(x: Tensor, window: int, stride: int) -> Tensor:
    n, c, h, w = x.data.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} larger than input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    patches = np.empty((n, c, oh, ow, window * window), dtype=np.float32)
    for i in range(window):
        for j in range(window):
            patches[..., i * window + j] = \
                x.data[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    arg = patches.argmax(axis=-1)  # first max in row-major window order
    if _ROUTING_LOG is not None:
        _ROUTING_LOG.append(arg.reshape(-1).astype(np.uint16))
    out = np.take_along_axis(patches, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gp = np.zeros_like(patches)
        np.put_along_axis(gp, arg[..., None], g[..., None], axis=-1)
        dx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    gp[..., i * window + j]
        return (dx,)

    return _node(out, (x,), back)


def upsample_nearest2x(x: Tensor) -> Tensor:
    x4, squeeze = _with_batch_dim(x)
    n, c, h, w = x4.data.shape
    out_data = x4.data.repeat(2, axis=2).repeat(2, axis=3)

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    out = _node(out_data, (x4,), back)
    if squeeze:
        return reshape(out, out.data.shape[1:])
    return out


def upsample_block(x: Tensor, skip: Tensor, kernel: Tensor, bias: Tensor,
                   padding: int = 1, kind: str = "relu", slope: float = 0.01) -> Tensor:
    """Nearest-neighbor 2x upsample, channel-concat with skip, conv, activation."""
    x4, _ = _with_batch_dim(x)
    skip4, _ = _with_batch_dim(skip)
    up = upsample_nearest2x(x4)
    if up.data.shape[2:] != skip4.data.shape[2:]:
        raise DimensionError(
            f"skip spatial {skip4.data.shape[2:]} != upsampled {up.data.shape[2:]}")
    cat = concat_channels([up, skip4])
    out = conv2d(cat, kernel, bias, stride=1, padding=padding)
    return activation(out, kind, slope)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5,
                 update_running: bool = True) -> Tensor:
    """Per-channel normalization over (N,H,W).

    Train mode uses batch statistics and updates the running buffers by
    exponential moving average; eval mode normalizes with the running stats.
    """
    if x.data.ndim != 4:
        raise DimensionError("batch_norm2d expects (N,C,H,W)")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("gamma/beta must have shape (C,)")

    if training:
        m = n * h * w
        if m < 2:
            raise NumericalError("batch norm needs >= 2 values per channel in train mode")
        if _PRECISE:
            x64 = x.data.astype(np.float64)
            mu64 = x64.mean(axis=(0, 2, 3))
            var64 = x64.var(axis=(0, 2, 3))
            inv64 = 1.0 / np.sqrt(var64 + eps)
            xhat64 = (x64 - mu64[None, :, None, None]) * inv64[None, :, None, None]
            out = (gamma.data[None, :, None, None] * xhat64
                   + beta.data[None, :, None, None]).astype(np.float32)
            mu = mu64.astype(np.float32)
            var = var64.astype(np.float32)
            inv = inv64.astype(np.float32)
            xhat = xhat64.astype(np.float32)
        else:
            mu = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            inv = (1.0 / np.sqrt(var + np.float32(eps))).astype(np.float32)
            xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
            out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
        if update_running:
            mom = np.float32(momentum)
            running_mean *= 1.0 - mom
            running_mean += mom * mu
            running_var *= 1.0 - mom
            running_var += mom * var * (m / (m - 1.0))

        def back(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * gamma.data[None, :, None, None]
            t1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            t2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv[None, :, None, None] / m) * (m * dxhat - t1 - xhat * t2)
            return (dx.astype(np.float32, copy=False), dgamma, dbeta)

        return _node(out, (x, gamma, beta), back)

    inv = (1.0 / np.sqrt(running_var + np.float32(eps))).astype(np.float32)
    xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back_eval(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dx = g * (gamma.data * inv)[None, :, None, None]
        return (dx, dgamma, dbeta)

    return _node(out, (x, gamma, beta), back_eval)


def dropout(x: Tensor, rate: float, training: bool,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return _node(x.data, (x,), lambda g: (g,))
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    keep = (rng.random(x.data.shape) >= rate)
    scale = np.float32(1.0 / (1.0 - rate))
    factor = keep.astype(np.float32) * scale
    return _node(x.data * factor, (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood with log-sum-exp stabilization.

    Gradient w.r.t. logits is (softmax - onehot) / N.
    """
    if logits.data.ndim != 2:
        raise DimensionError("logits must be (N, K)")
    n, k = logits.data.shape
    if k < 2:
        raise DimensionError("need at least 2 classes")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},)")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    src = logits.data.astype(np.float64) if _PRECISE else logits.data
    z = src - src.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = np.float32(-logp[np.arange(n), y].mean())
    p = np.exp(logp).astype(np.float32, copy=False)

    def back(g):
        d = p.copy()
        d[np.arange(n), y] -= 1.0
        return (d * (g / np.float32(n)),)

    out = _node(loss, (logits,), back)
    return out.assert_finite("cross-entropy loss")


def mse_loss(reconstruction: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if reconstruction.data.shape != target.data.shape:
        raise DimensionError(
            f"mse shapes differ: {reconstruction.data.shape} vs {target.data.shape}")
    diff = reconstruction.data - target.data
    count = np.float32(diff.size)
    if _PRECISE:
        loss = np.float32(np.mean(diff.astype(np.float64) ** 2))
    else:
        loss = np.float32(np.mean(diff * diff))

    def back(g):
        d = diff * (np.float32(2.0) * g / count)
        return (d, -d)

    out = _node(loss, (reconstruction, target), back)
    return out.assert_finite("mse loss")


# ---------------------------------------------------------------------------
# numeric gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-3,
               coords: Optional[Sequence[int]] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a deterministic scalar-valued function of `point`. The error
    per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|);
    `coords` restricts the sweep to the given flat indices.
    """
    point.requires_grad = True
    point.grad = None
    out = f(point)
    if out.data.size != 1:
        raise DimensionError("grad_check requires a scalar-valued function")
    out.assert_finite("grad_check evaluation")
    backward(out)
    analytic = (point.grad if point.grad is not None else np.zeros_like(point.data))
    analytic = analytic.reshape(-1).astype(np.float64)

    flat = point.data.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + np.float32(h)
        xp = float(flat[i])
        fp = float(f(point).data)
        flat[i] = orig - np.float32(h)
        xm = float(flat[i])
        fm = float(f(point).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite evaluation at coordinate {i}")
        numeric = (fp - fm) / (xp - xm)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
        worst = max(worst, err)
    return worst
