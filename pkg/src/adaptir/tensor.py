"""Dense tensors with reverse-mode automatic differentiation.

The engine only needs a small operation set (matmul, grouped 2-D
convolution, spatial softmax, layernorm, elementwise arithmetic, GELU and
a few pointwise trig ops for the frequency branch), so the graph is kept
deliberately simple: every op closes over its inputs and appends nothing
global -- the graph *is* the tape, and ``backward`` walks it once in
reverse topological order.

Conventions fixed here:

* dtypes are float32 (training) or float64 (verification); binary ops
  require matching dtypes, python scalars are coerced.
* conv2d uses the cross-correlation convention (no kernel flip).
* gradients accumulate across ``backward`` calls until explicitly zeroed.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "no_grad",
    "set_debug_checks",
    "matmul",
    "conv2d",
    "depth_to_space",
    "softmax",
    "softmax_spatial",
    "layernorm",
    "gelu",
    "tsum",
    "tmean",
    "tabs",
    "sqrt",
    "cos",
    "sin",
    "atan2",
    "hypot",
    "reshape",
    "transpose",
    "finite_diff_grad",
]

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_debug_checks = False


def set_debug_checks(flag: bool) -> None:
    """Enable NaN/Inf screening after every op (slow; used in tests)."""
    global _debug_checks
    _debug_checks = bool(flag)


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """N-dimensional real array participating in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_scalar(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- grad plumbing ---------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Populate ``grad`` of every reachable leaf with requires_grad."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into .grad
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
            if node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _fail_scalar(t: Tensor):
    raise ContractError(f"item() called on non-scalar tensor of shape {t.shape}")


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op on finite inputs")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------


def _broadcastable(a: tuple, b: tuple) -> bool:
    for x, y in zip(a[::-1], b[::-1]):
        if x != y and x != 1 and y != 1:
            return False
    return True


def _binary(a: Tensor, b, op: str):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    _check_dtypes(a, b, op)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b, "add")
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary(a, b, "sub")
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Hadamard product (or scalar scaling) with broadcasting."""
    a, b = _binary(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), backward)


# -- reductions -----------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _node(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- pointwise nonlinearities ---------------------------------------------


def tabs(x: Tensor) -> Tensor:
    data = np.abs(x.data)

    def backward(g):
        return (g * np.sign(x.data),)

    return _node(data, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def backward(g):
        return (g * (0.5 / np.maximum(data, np.finfo(x.dtype).tiny)),)

    return _node(data, (x,), backward)


def cos(x: Tensor) -> Tensor:
    data = np.cos(x.data)

    def backward(g):
        return (-g * np.sin(x.data),)

    return _node(data, (x,), backward)


def sin(x: Tensor) -> Tensor:
    data = np.sin(x.data)

    def backward(g):
        return (g * np.cos(x.data),)

    return _node(data, (x,), backward)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    """Four-quadrant arctangent; atan2(0, 0) is defined as 0 with zero grad."""
    _check_dtypes(y, x, "atan2")
    data = np.arctan2(y.data, x.data)
    r2 = y.data * y.data + x.data * x.data

    def backward(g):
        safe = np.where(r2 == 0.0, 1.0, r2)
        gy = np.where(r2 == 0.0, 0.0, g * x.data / safe)
        gx = np.where(r2 == 0.0, 0.0, -g * y.data / safe)
        return gy.astype(y.dtype, copy=False), gx.astype(x.dtype, copy=False)

    return _node(data, (y, x), backward)


def hypot(a: Tensor, b: Tensor) -> Tensor:
    """sqrt(a^2 + b^2) with a zero subgradient at the origin."""
    _check_dtypes(a, b, "hypot")
    data = np.hypot(a.data, b.data)

    def backward(g):
        safe = np.where(data == 0.0, 1.0, data)
        ga = np.where(data == 0.0, 0.0, g * a.data / safe)
        gb = np.where(data == 0.0, 0.0, g * b.data / safe)
        return ga.astype(a.dtype, copy=False), gb.astype(b.dtype, copy=False)

    return _node(data, (a, b), backward)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with Phi the standard normal CDF."""
    xd = x.data
    phi = 0.5 * (1.0 + _erf(xd / _SQRT2))
    data = (xd * phi).astype(x.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (phi + xd * pdf)).astype(x.dtype, copy=False),)

    return _node(data, (x,), backward)


# -- shape ops -------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _node(data, (x,), backward)


# -- matmul ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports broadcast leading batch dims like numpy."""
    _check_dtypes(a, b, "matmul")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), backward)


# -- softmax / layernorm -----------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _node(data, (x,), backward)


def softmax_spatial(x: Tensor) -> Tensor:
    """Softmax over all H*W positions of an N x 1 x H x W mask."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"softmax_spatial expects N x 1 x H x W, got {x.shape}")
    n, _, h, w = x.shape
    flat = reshape(x, (n, 1, h * w))
    return reshape(softmax(flat, axis=-1), (n, 1, h, w))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with affine parameters."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        return (gx.astype(x.dtype, copy=False),
                ggamma.astype(x.dtype, copy=False),
                gbeta.astype(x.dtype, copy=False))

    return _node(data.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# -- convolution -------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int):
    # xp: padded N x C x Hp x Wp -> N x C x K x K x Ho x Wo view
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # N x C x Ho x Wo x K x K
    return np.ascontiguousarray(np.moveaxis(win, (4, 5), (2, 3)))


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           groups: int = 1, stride: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation with zero 'same' padding.

    ``x`` is N x Cin x H x W, ``w`` is Cout x (Cin/groups) x K x K,
    ``bias`` is Cout. K must be odd; padding is (K-1)//2 on every side, so
    stride 1 preserves the spatial extent.
    """
    _check_dtypes(x, w, "conv2d")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_g, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d requires odd square kernels, got {k}x{k2}")
    if cin % groups != 0 or cout % groups != 0:
        raise ShapeError(f"conv2d: groups={groups} does not divide Cin={cin}/Cout={cout}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"conv2d: kernel expects Cin/groups={cin_g}, input has Cin={cin} with groups={groups}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, stride)  # N x C x K x K x Ho x Wo
    ho, wo = cols.shape[4], cols.shape[5]
    cols2 = cols.reshape(n, groups, cin_g * k * k, ho * wo)
    w2 = w.data.reshape(groups, cout // groups, cin_g * k * k)
    out = np.matmul(w2, cols2)  # (n, groups, cout/groups, ho*wo)
    out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        gl = g.reshape(n, groups, cout // groups, ho * wo)
        gw = np.matmul(gl, np.swapaxes(cols2, -1, -2)).sum(axis=0)
        gw = gw.reshape(w.shape).astype(w.dtype, copy=False)
        gcols = np.matmul(np.swapaxes(w2, -1, -2), gl)
        gcols = gcols.reshape(n, cin, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd].astype(x.dtype, copy=False)
        gb = None if bias is None else g.sum(axis=(0, 2, 3)).astype(x.dtype, copy=False)
        return (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    if bias is None:
        return _node(out.astype(x.dtype, copy=False), parents, lambda g: backward(g)[:2])
    return _node(out.astype(x.dtype, copy=False), parents, backward)


def depth_to_space(x: Tensor, factor: int) -> Tensor:
    """Pixel shuffle: N x (C*f^2) x H x W -> N x C x (H*f) x (W*f)."""
    n, c, h, w = x.shape
    f = factor
    if c % (f * f) != 0:
        raise ShapeError(f"depth_to_space: channels {c} not divisible by {f * f}")
    co = c // (f * f)
    data = x.data.reshape(n, co, f, f, h, w)
    data = data.transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * f, w * f)

    def backward(g):
        gg = g.reshape(n, co, h, f, w, f).transpose(0, 1, 3, 5, 2, 4)
        return (gg.reshape(x.shape),)

    return _node(np.ascontiguousarray(data), (x,), backward)


# -- verification oracle -------------------------------------------------------


def finite_diff_grad(f, x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued ``f`` at ``x``.

    ``f`` receives a Tensor and must return a scalar Tensor (or float);
    the input is perturbed one element at a time.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.copy()
    grad = np.zeros_like(base, dtype=np.float64)
    flat = grad.reshape(-1)
    with no_grad():
        for i in range(base.size):
            idx = np.unravel_index(i, base.shape)
            x.data = base.copy()
            x.data[idx] += eps
            fp = f(x)
            fp = fp.item() if isinstance(fp, Tensor) else float(fp)
            x.data = base.copy()
            x.data[idx] -= eps
            fm = f(x)
            fm = fm.item() if isinstance(fm, Tensor) else float(fm)
            flat[i] = (fp - fm) / (2.0 * eps)
    x.data = base
    return grad
