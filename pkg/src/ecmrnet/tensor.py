"""Dense tensors with reverse-mode differentiation.

Only the operations used by the restoration network, the mining module and
the losses are provided. Every op records its parents and a closure that
maps the output adjoint to input adjoints; ``backward`` replays them in
reverse topological order.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DEFAULT_DTYPE = np.float64


class Tensor:
    """An immutable n-d array that optionally tracks its computation history."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None, copy: bool = True):
        arr = np.array(data, dtype=dtype, copy=copy or None)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim and min(arr.shape) < 1:
            raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result; the graph edge is only kept when some parent needs it."""
    out = Tensor(np.asarray(data), copy=False)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def tabs(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    s = tsum(x, axis, keepdims)
    return mul(s, 1.0 / count)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat needs at least one part")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
                p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat extent mismatch: {ref} vs {p.shape}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=ax), parts, backward)


def channel_concat(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors along axis 1 in argument order."""
    return concat(parts, axis=1)


def channel_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    c = x.shape[1]
    if not (0 <= lo < hi <= c):
        raise IndexError(f"channel range [{lo}, {hi}) outside [0, {c})")

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, lo:hi] = g
        return (full,)

    return _make(x.data[:, lo:hi], (x,), backward)


def take_last(x: Tensor, lo: int, hi: int) -> Tensor:
    """Slice ``[lo, hi)`` of the last axis."""

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., lo:hi] = g
        return (full,)

    return _make(x.data[..., lo:hi], (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    out = matmul(x, transpose(weight, (1, 0)))
    return add(out, bias) if bias is not None else out


# ---------------------------------------------------------------------------
# activations


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# image ops


def _cols(x: np.ndarray, g: int, kh: int, kw: int, pad_h: int, pad_w: int | None = None) -> np.ndarray:
    """im2col: (B, C, H, W) -> (B, g, C/g * kh * kw, H' * W')."""
    pad_w = pad_h if pad_w is None else pad_w
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    b, c, hp, wp = x.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # B, C, H', W', kh, kw
    cols = win.reshape(b, g, c // g, ho, wo, kh, kw).transpose(0, 1, 2, 5, 6, 3, 4)
    return np.ascontiguousarray(cols).reshape(b, g, (c // g) * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1,
           padding: int = 0) -> Tensor:
    """Stride-1 grouped cross-correlation with zero padding.

    ``weight`` has shape (Cout, Cin // groups, kh, kw).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    b, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if cin_g != cin // groups:
        raise ValueError(f"weight expects {cin_g * groups} input channels, got {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    g = groups
    cout_g = cout // g
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")

    wmat = weight.data.reshape(g, cout_g, cin_g * kh * kw)
    if kh == kw == 1 and padding == 0:
        cols = x.data.reshape(b, g, cin_g, h * w)
    else:
        cols = _cols(x.data, g, kh, kw, padding)
    out = np.matmul(wmat[None], cols).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(gout):
        go = gout.reshape(b, g, cout_g, ho * wo)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(go, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            if kh == kw == 1 and padding == 0:
                gx = np.matmul(np.swapaxes(wmat, -1, -2)[None], go).reshape(x.shape)
            else:
                # transposed conv: correlate the adjoint with the flipped,
                # in/out-swapped kernel
                wt = weight.data.reshape(g, cout_g, cin_g, kh, kw)[..., ::-1, ::-1]
                wt = wt.transpose(0, 2, 1, 3, 4).reshape(g, cin_g, cout_g * kh * kw)
                gcols = _cols(gout, g, kh, kw, kh - 1 - padding, kw - 1 - padding)
                gx = np.matmul(wt[None], gcols).reshape(x.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gout.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, backward)


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    b, c, h, w = x.shape
    if num_groups < 1 or c % num_groups:
        raise ValueError(f"num_groups={num_groups} must divide channels={c}")
    xr = x.data.reshape(b, num_groups, -1)
    mu = xr.mean(axis=2, keepdims=True)
    xc = xr - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(b, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    n = xr.shape[2]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = (g * gamma.data[None, :, None, None]).reshape(b, num_groups, n)
            xh = xhat.reshape(b, num_groups, n)
            gx = inv * (gxhat - gxhat.mean(axis=2, keepdims=True)
                        - xh * (gxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all axes after the second: (B, C, ...) -> (B, C)."""
    axes = tuple(range(2, x.ndim))
    return mean(x, axis=axes)


def avg_pool2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


def l1_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return mean(tabs(sub(pred, target)))


# ---------------------------------------------------------------------------
# reverse pass


def tape(loss: Tensor) -> list[Tensor]:
    """Topologically ordered list of graph nodes ending at ``loss``."""
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
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Propagate adjoints from a scalar loss.

    Leaf gradients are stored on ``Tensor.grad``; the returned map holds the
    accumulated gradient of every named leaf (parameters are named by id).
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[str, np.ndarray] = {}
    if not loss.requires_grad:
        return grads
    order = tape(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            if node.name is not None:
                grads[node.name] = grads[node.name] + g if node.name in grads else g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adj[key] = adj[key] + pg if key in adj else pg
    return grads


def finite_diff_check(f: Callable[..., Tensor], inputs: Iterable, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the input tensors to a scalar tensor. Relative error uses the
    denominator ``max(|a|, |b|, 1e-12)``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    arrays = [np.array(np.asarray(a.data if isinstance(a, Tensor) else a), dtype=np.float64)
              for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(f(*leaves))
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        flat = arr.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = f(*[Tensor(a.copy()) for a in arrays]).item()
            flat[k] = orig - eps
            fm = f(*[Tensor(a.copy()) for a in arrays]).item()
            flat[k] = orig
            num = (fp - fm) / (2.0 * eps)
            ana = analytic.reshape(-1)[k]
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-12)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# binary record format: magic, u32 rank, u32 extents, u8 dtype code, payload

MAGIC = b"ECMRTNS1"
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class TensorFormatError(ValueError):
    pass


def tensor_to_bytes(arr) -> bytes:
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + np.uint32(arr.ndim).astype("<u4").tobytes()
    header += np.asarray(arr.shape, dtype="<u4").tobytes()
    header += bytes([_DTYPE_CODES[dt]])
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, end offset)."""
    view = memoryview(buf)
    if len(view) < offset + 13 or bytes(view[offset:offset + 8]) != MAGIC:
        raise TensorFormatError(f"bad tensor magic at offset {offset}")
    rank = int(np.frombuffer(view[offset + 8:offset + 12], dtype="<u4")[0])
    pos = offset + 12
    if len(view) < pos + 4 * rank + 1:
        raise TensorFormatError("truncated tensor header")
    shape = tuple(int(e) for e in np.frombuffer(view[pos:pos + 4 * rank], dtype="<u4"))
    pos += 4 * rank
    code = view[pos]
    pos += 1
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(view) < pos + nbytes:
        raise TensorFormatError("truncated tensor payload")
    arr = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes
