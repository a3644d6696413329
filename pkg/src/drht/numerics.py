"""Dense tensors with reverse-mode differentiation.

Only the layer set the two encoder-decoder networks need is provided:
cross-correlation conv and its transpose, ELU, batch normalization, the
halved MSE loss, a handful of elementwise ops, and clamp.

Precision is a process-wide mode: 64-bit for oracles and gradient checks,
32-bit for training. Mixing dtypes inside one graph raises ``TypeError``.
"""

import contextlib
import os
from dataclasses import dataclass

import numpy as np

_state = {
    "dtype": np.dtype(np.float32),
    "grad_enabled": True,
    "check_finite": False,
}


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_precision(bits):
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")
    _state["dtype"] = np.dtype(np.float64 if bits == 64 else np.float32)


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(bits):
    """Temporarily switch the global precision mode."""
    saved = _state["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _state["dtype"] = saved


@contextlib.contextmanager
def no_grad():
    saved = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = saved


def set_check_finite(flag):
    """Enable the NaN/Inf assertion that runs after every op."""
    _state["check_finite"] = bool(flag)


def configure_threads(env=None):
    """Apply ``DRHT_THREADS`` to the BLAS pool; 0 means deterministic single-thread mode.

    Returns the thread count in effect.
    """
    env = os.environ if env is None else env
    n = int(env.get("DRHT_THREADS", "0") or 0)
    if n < 0:
        raise ValueError("DRHT_THREADS must be >= 0")
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=max(n, 1))
    return max(n, 1)


def deterministic_mode(env=None):
    env = os.environ if env is None else env
    return int(env.get("DRHT_THREADS", "0") or 0) == 0


class Tensor:
    """An n-d array plus the bookkeeping needed to backpropagate into it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=default_dtype(), copy=True)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward_fn is None

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._backward_fn is None:
            raise GraphError("backward() called on a tensor with no recorded forward graph")

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_dtypes(*tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"mixed precision in one graph: {sorted(str(d) for d in dtypes)}")


def _make(data, parents, backward_fn, op):
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._parents = ()
    out._backward_fn = None
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b):
    """a + b for equal shapes, or a tensor plus a python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add")
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(a, c):
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def log(a):
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value; add a floor first")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def power(a, p):
    """Elementwise a**p for a scalar exponent; negative bases are rejected for fractional p."""
    p = float(p)
    x = a.data
    if p != int(p) and np.any(x < 0):
        raise ValueError("fractional power of a negative value")
    pt = x.dtype.type(p)
    out = np.power(x, pt)

    def backward(g):
        return (g * pt * np.power(x, x.dtype.type(p - 1.0)),)

    return _make(out, (a,), backward, "power")


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; the gradient is 0 wherever the input was outside the range."""
    x = a.data
    out = x
    keep = np.ones(x.shape, dtype=bool)
    if lo is not None:
        out = np.maximum(out, x.dtype.type(lo))
        keep &= x >= lo
    if hi is not None:
        out = np.minimum(out, x.dtype.type(hi))
        keep &= x <= hi
    if out is x:
        out = x.copy()
    return _make(out, (a,), lambda g: (np.where(keep, g, 0).astype(g.dtype),), "clamp")


def elu(a):
    x = a.data
    out = np.where(x > 0, x, np.expm1(np.minimum(x, 0)))

    def backward(g):
        return (g * np.where(x > 0, 1, out + 1).astype(x.dtype),)

    return _make(out, (a,), backward, "elu")


def mse(a, b):
    """Halved mean squared error, (1/2N) * sum((a - b)**2)."""
    b = as_tensor(b)
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size
    value = np.asarray(0.5 * np.sum(d * d) / n, dtype=d.dtype)

    def backward(g):
        ga = d * (g / n)
        return ga, -ga

    return _make(value, (a, b), backward, "mse")


def total(*terms):
    """Sum of scalar tensors, added left to right."""
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


# ---------------------------------------------------------------- convolution


def _check_conv(x, w, b, stride, transpose):
    _check_dtypes(x, w, b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv expects 4-d input and weight, got {x.shape} and {w.shape}")
    kh, kw = w.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel must be odd-sized, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    in_ch = w.shape[0] if transpose else w.shape[1]
    out_ch = w.shape[1] if transpose else w.shape[0]
    if x.shape[1] != in_ch:
        kind = "conv2d_transpose" if transpose else "conv2d"
        raise ShapeError(
            f"{kind}: input has {x.shape[1]} channels but weight {w.shape} expects {in_ch}"
        )
    if b.shape != (out_ch,):
        raise ShapeError(f"bias shape {b.shape} does not match {out_ch} output channels")


def _out_size(size, k, stride):
    return (size + 2 * (k // 2) - k) // stride + 1


def _im2col(x, kh, kw, stride):
    """Columns laid out as (Cin*kH*kW, N*Ho*Wo), built from kH*kW strided slice copies."""
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    ho, wo = _out_size(h, kh, stride), _out_size(w, kw, stride)
    xp = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + hs:stride, j:j + ws:stride]
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, ho, wo):
    """Adjoint of ``_im2col``: scatter-add column gradients back onto the input grid."""
    n, c, h, w = x_shape
    ph, pw = kh // 2, kw // 2
    dcols = dcols.reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, i, j]
    return np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3))


def _cnhw_to_nchw(flat, c, n, h, w):
    return np.ascontiguousarray(flat.reshape(c, n, h, w).transpose(1, 0, 2, 3))


def _nchw_to_cnhw(t):
    return np.ascontiguousarray(t.transpose(1, 0, 2, 3)).reshape(t.shape[1], -1)


def conv2d(x, w, b, stride=1):
    """Cross-correlation with zero padding k//2 per side.

    x: (N, Cin, H, W), w: (Cout, Cin, kH, kW), b: (Cout,).
    """
    _check_conv(x, w, b, stride, transpose=False)
    cout, cin, kh, kw = w.shape
    n = x.shape[0]
    cols, ho, wo = _im2col(x.data, kh, kw, stride)
    wmat = w.data.reshape(cout, -1)
    out = _cnhw_to_nchw(wmat @ cols, cout, n, ho, wo) + b.data[None, :, None, None]

    def backward(g):
        gt = _nchw_to_cnhw(g)
        gw = (gt @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = _col2im(wmat.T @ gt, x.shape, kh, kw, stride, ho, wo) if x.requires_grad else None
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, (x, w, b), backward, "conv2d")


def conv2d_transpose(x, w, b, stride=1):
    """Linear transpose of ``conv2d`` at the same stride and padding.

    x: (N, Cin, H, W), w: (Cin, Cout, kH, kW), b: (Cout,); output is
    (N, Cout, H*stride, W*stride).
    """
    _check_conv(x, w, b, stride, transpose=True)
    cin, cout, kh, kw = w.shape
    n, _, h, wd = x.shape
    out_shape = (n, cout, h * stride, wd * stride)
    wmat = w.data.reshape(cin, -1)
    xt = _nchw_to_cnhw(x.data)
    out = _col2im(wmat.T @ xt, out_shape, kh, kw, stride, h, wd) + b.data[None, :, None, None]

    def backward(g):
        cols, _, _ = _im2col(g, kh, kw, stride)
        gx = _cnhw_to_nchw(wmat @ cols, cin, n, h, wd) if x.requires_grad else None
        gw = (xt @ cols.T).reshape(w.shape) if w.requires_grad else None
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, (x, w, b), backward, "conv2d_transpose")


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels):
        dt = default_dtype()
        return cls(np.zeros(channels, dtype=dt), np.ones(channels, dtype=dt))


def batchnorm(x, gamma, beta, state, train):
    """Per-channel normalization over (N, H, W).

    Train mode normalizes by batch statistics and folds them into the
    running averages; infer mode uses the running averages.
    """
    _check_dtypes(x, gamma, beta)
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({c},)")
    xd = x.data
    dt = xd.dtype
    eps = dt.type(state.eps)
    gam = gamma.data[None, :, None, None]

    if train:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if m < 2:
            raise ValueError("batchnorm in train mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        mom = dt.type(state.momentum)
        state.running_mean = (mom * state.running_mean + (1 - mom) * mean).astype(dt)
        state.running_var = (mom * state.running_var + (1 - mom) * var).astype(dt)
    else:
        mean = state.running_mean.astype(dt)
        var = state.running_var.astype(dt)

    inv_std = (1 / np.sqrt(var + eps))[None, :, None, None]
    xhat = (xd - mean[None, :, None, None]) * inv_std
    out = gam * xhat + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gam
        if train:
            m = xd.shape[0] * xd.shape[2] * xd.shape[3]
            gx = inv_std / m * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * inv_std
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "batchnorm")
