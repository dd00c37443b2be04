"""Dense tensors with a reverse-mode tape.

Only the kernels the gait network needs are provided: 3D convolution,
Leaky ReLU, spatial/temporal max pooling, strip-wise GeM pooling, per-strip
linear maps, 1D batch normalization, plus elementwise add/mul, concat and
sum. Every op records a closure on the tape that maps the output gradient to
input gradients.

Feature maps follow the (batch, frames, channels, height, width) layout.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
CHECK_FINITE = os.environ.get("REVMASK_CHECK_FINITE", "") == "1"
CONV_BACKEND = os.environ.get("REVMASK_CONV_BACKEND", "torch")

try:
    import torch as _torch

    _torch.set_num_threads(1)
except ImportError:  # pragma: no cover - numpy fallback
    _torch = None

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible; ``axis`` names the culprit."""

    def __init__(self, axis: str, message: str):
        super().__init__(f"{axis}: {message}")
        self.axis = axis


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other, self.dtype), -1.0))

    def sum(self):
        return sum_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all() and all(np.isfinite(p.data).all() for p in parents):
        raise FloatingPointError(f"{op} produced non-finite output from finite input")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    """Elementwise product; a non-Tensor operand is treated as a constant."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=a.dtype)

        def backward_const(g):
            return (_unbroadcast(g * const, a.shape),)

        return _result(a.data * const, (a,), backward_const, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) for a constant weight array; handy as a probe loss."""
    w = np.asarray(weights, dtype=x.dtype)

    def backward(g):
        return (g * w,)

    return _result(np.asarray((x.data * w).sum(), dtype=x.dtype), (x,), backward, "weighted_sum")


def leaky_relu(x: Tensor, negative_slope: float = 0.01) -> Tensor:
    if not 0.0 <= negative_slope <= 1.0:
        raise ValueError(f"negative_slope must lie in [0, 1], got {negative_slope}")
    slope = x.dtype.type(negative_slope)
    out = np.maximum(x.data, x.data * slope)
    pos = x.data > 0

    def backward(g):
        return (g * (pos * (1 - slope) + slope),)

    return _result(out, (x,), backward, "leaky_relu")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", f"incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------- convolution


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 per-axis values, got {v!r}")
    return t  # type: ignore[return-value]


def _conv_geometry(x: Tensor, weight: Tensor, bias, padding, stride):
    if x.ndim != 5:
        raise ShapeError("rank", f"expected a rank-5 input, got shape {x.shape}")
    if weight.ndim != 5:
        raise ShapeError("rank", f"expected a rank-5 kernel, got shape {weight.shape}")
    b, n, c, h, w = x.shape
    c_out, c_in, kt, kh, kw = weight.shape
    if c_in != c:
        raise ShapeError("channels", f"kernel expects {c_in} input channels, input has {c}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("bias", f"expected shape ({c_out},), got {bias.shape}")
    pad, st = _triple(padding), _triple(stride)
    if min(st) < 1:
        raise ValueError("stride must be >= 1 on every axis")
    out = tuple((size + 2 * p - k) // s + 1 for size, p, k, s in zip((n, h, w), pad, (kt, kh, kw), st))
    for axis, size in zip(("frames", "height", "width"), out):
        if size <= 0:
            raise ShapeError(axis, "output size is not positive; input too small for kernel")
    return pad, st, out


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding=1, stride=1) -> Tensor:
    """Cross-correlate a (b, n, c, h, w) map with a (c_out, c_in, kt, kh, kw) kernel.

    Zero padding, no kernel flip. The arithmetic runs on torch's CPU
    convolution when torch is importable (``REVMASK_CONV_BACKEND=numpy``
    forces :func:`conv3d_reference`); the tape entry is ours either way.
    """
    pad, st, _ = _conv_geometry(x, weight, bias, padding, stride)
    if _torch is None or CONV_BACKEND == "numpy":
        return conv3d_reference(x, weight, bias, padding, stride)
    torch = _torch
    tx = torch.from_numpy(np.ascontiguousarray(x.data.transpose(0, 2, 1, 3, 4)))
    tw = torch.from_numpy(np.ascontiguousarray(weight.data))
    tb = None if bias is None else torch.from_numpy(np.ascontiguousarray(bias.data))
    need = [x.requires_grad, weight.requires_grad, bias is not None and bias.requires_grad]
    record = _grad_enabled and any(need)
    if record:
        tx.requires_grad_(need[0])
        tw.requires_grad_(need[1])
        if tb is not None:
            tb.requires_grad_(need[2])
        ty = torch.nn.functional.conv3d(tx, tw, tb, stride=st, padding=pad)
    else:
        with torch.no_grad():
            ty = torch.nn.functional.conv3d(tx, tw, tb, stride=st, padding=pad)
    out = np.ascontiguousarray(ty.detach().numpy().transpose(0, 2, 1, 3, 4))

    def backward(g):
        tg = torch.from_numpy(np.ascontiguousarray(g.transpose(0, 2, 1, 3, 4)))
        inputs = [t for t, k in zip((tx, tw, tb), need) if k]
        got = iter(torch.autograd.grad(ty, inputs, tg))
        gx, gw, gb = (next(got) if k else None for k in need)
        if gx is not None:
            gx = np.ascontiguousarray(gx.numpy().transpose(0, 2, 1, 3, 4))
        return gx, None if gw is None else gw.numpy(), None if gb is None else gb.numpy()

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv3d")


def conv3d_reference(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding=1, stride=1) -> Tensor:
    """Pure numpy im2col convolution with the same contract as :func:`conv3d`."""
    (pt, ph, pw), (st, sh, sw), (n_out, h_out, w_out) = _conv_geometry(x, weight, bias, padding, stride)
    b, n, c, h, w = x.shape
    c_out, _, kt, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (pt, pt), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kt, kh, kw), axis=(1, 3, 4))
    win = win[:, ::st, :, ::sh, ::sw][:, :n_out, :, :h_out, :w_out]
    # rows: (b, n', h', w'); columns: (c, kt, kh, kw) matching weight layout
    cols = win.transpose(0, 1, 3, 4, 2, 5, 6, 7).reshape(-1, c * kt * kh * kw)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, n_out, h_out, w_out, c_out).transpose(0, 1, 4, 2, 3))

    def backward(g):
        gmat = g.transpose(0, 1, 3, 4, 2).reshape(-1, c_out)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(b, n_out, h_out, w_out, c, kt, kh, kw)
            dcols = dcols.transpose(0, 1, 4, 2, 3, 5, 6, 7)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kt):
                for j in range(kh):
                    for k in range(kw):
                        dxp[
                            :,
                            i : i + st * n_out : st,
                            :,
                            j : j + sh * h_out : sh,
                            k : k + sw * w_out : sw,
                        ] += dcols[..., i, j, k]
            gx = dxp[:, pt : pt + n, :, ph : ph + h, pw : pw + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv3d")


# ---------------------------------------------------------------- pooling


def max_pool_hw(x: Tensor, kh: int, kw: int) -> Tensor:
    """Non-overlapping spatial max pooling per frame; trailing remainders are dropped."""
    b, n, c, h, w = x.shape
    ho, wo = h // kh, w // kw
    if ho == 0 or wo == 0:
        raise ShapeError("height" if ho == 0 else "width", f"pool ({kh}, {kw}) larger than map {h}x{w}")
    blocks = (
        x.data[..., : ho * kh, : wo * kw]
        .reshape(b, n, c, ho, kh, wo, kw)
        .transpose(0, 1, 2, 3, 5, 4, 6)
        .reshape(b, n, c, ho, wo, kh * kw)
    )
    arg = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def backward(g):
        gblocks = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gblocks, arg, g[..., None], axis=-1)
        gfull = np.zeros(x.shape, dtype=x.dtype)
        gfull[..., : ho * kh, : wo * kw] = (
            gblocks.reshape(b, n, c, ho, wo, kh, kw).transpose(0, 1, 2, 3, 5, 4, 6).reshape(b, n, c, ho * kh, wo * kw)
        )
        return (gfull,)

    return _result(out, (x,), backward, "max_pool_hw")


def temporal_max_pool(x: Tensor) -> Tensor:
    """Max over the frame axis: (b, n, c, h, w) -> (b, c, h, w)."""
    if x.ndim != 5:
        raise ShapeError("rank", f"expected a rank-5 input, got shape {x.shape}")
    if x.shape[1] == 0:
        raise ValueError("temporal_max_pool on an empty sequence (n = 0)")
    arg = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, arg, axis=1)[:, 0]

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(gx, arg, g[:, None], axis=1)
        return (gx,)

    return _result(out, (x,), backward, "temporal_max_pool")


def gem_pool_strip(x: Tensor, strips: int, power: float = 6.5, eps: float = 1e-6) -> Tensor:
    """Generalized-mean pooling over horizontal strips: (b, c, h, w) -> (b, s, c)."""
    if x.ndim != 4:
        raise ShapeError("rank", f"expected a rank-4 input, got shape {x.shape}")
    b, c, h, w = x.shape
    if strips < 1 or h % strips:
        raise ShapeError("height", f"height {h} is not divisible into {strips} strips")
    if power < 1:
        raise ValueError(f"GeM power must be >= 1, got {power}")
    p = x.dtype.type(power)
    inside = x.data > eps
    xc = np.maximum(x.data, x.dtype.type(eps))
    count = (h // strips) * w
    xp = xc**p
    m = xp.reshape(b, c, strips, count).mean(axis=-1)
    tiny = np.finfo(x.dtype).tiny
    m = np.maximum(m, tiny)
    y = m ** (1 / p)
    out = np.ascontiguousarray(y.transpose(0, 2, 1))

    def backward(g):
        gm = g.transpose(0, 2, 1) * (y / (p * m))  # d m^(1/p) / dm
        gxp = np.repeat(gm[..., None] / count, count, axis=-1).reshape(b, c, h, w)
        return (gxp * p * xp / xc * inside,)

    return _result(out, (x,), backward, "gem_pool_strip")


# ---------------------------------------------------------------- head layers


def linear_map(x: Tensor, weight: Tensor) -> Tensor:
    """Independent matrix product per strip: (b, s, c_in) x (s, c_in, c_out)."""
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError("rank", f"expected rank-3 operands, got {x.shape} and {weight.shape}")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError("strips", f"weights cover {weight.shape[0]} strips, input has {x.shape[1]}")
    if weight.shape[1] != x.shape[2]:
        raise ShapeError("channels", f"weights expect {weight.shape[1]} inputs, got {x.shape[2]}")
    xs = x.data.transpose(1, 0, 2)  # (s, b, c_in)
    out = np.matmul(xs, weight.data).transpose(1, 0, 2)

    def backward(g):
        gs = g.transpose(1, 0, 2)
        gx = np.matmul(gs, weight.data.transpose(0, 2, 1)).transpose(1, 0, 2)
        gw = np.matmul(xs.transpose(0, 2, 1), gs)
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, weight), backward, "linear_map")


class BatchNormState:
    """Running statistics for :func:`batchnorm_1d`, one entry per (strip, channel)."""

    def __init__(self, shape: tuple[int, ...], momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        self.running_mean = np.zeros(shape, dtype=dtype)
        self.running_var = np.ones(shape, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm_1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    if train:
        bsz = x.shape[0]
        if bsz < 2:
            raise ValueError(f"batch norm in train mode needs a batch of at least 2, got {bsz}")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        unbiased = var * bsz / (bsz - 1)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + x.dtype.type(state.eps))
    xhat = (x.data - mean) * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=0)
        gb = g.sum(axis=0)
        gxhat = g * gamma.data
        if train:
            gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return _result(out.astype(x.dtype), (x, gamma, beta), backward, "batchnorm_1d")


# ---------------------------------------------------------------- verification


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    step: float = 1e-6,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between the taped gradient of ``f`` and central differences.

    ``f`` maps a float64 tensor to a scalar tensor. ``coords`` restricts the
    check to a subset of flat indices (all coordinates by default).
    """
    x = np.array(x, dtype=np.float64)
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"step must lie in [1e-6, 1e-3], got {step}")
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("function value is not finite")
    out.backward()
    analytic = np.zeros_like(x) if xt.grad is None else xt.grad
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        with no_grad():
            flat[i] = orig + step
            fp = float(f(Tensor(x.copy())).data)
            flat[i] = orig - step
            fm = float(f(Tensor(x.copy())).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"function value is not finite at coordinate {i}")
        numeric = (fp - fm) / (2 * step)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def finite_diff_params(
    loss_fn: Callable[[], Tensor],
    params: "dict[str, Tensor]",
    coords: "dict[str, Sequence[int]]",
    step: float = 1e-6,
) -> "dict[str, float]":
    """Max relative gradient error per named parameter, perturbing ``coords`` in place.

    ``loss_fn`` must be deterministic (re-seed any RNG inside it).
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"step must lie in [1e-6, 1e-3], got {step}")
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    loss_fn().backward()
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    out = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in coords.get(name, ()):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = float(loss_fn().data)
                flat[i] = orig - step
                fm = float(loss_fn().data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * step)
            a = float(grads[name].reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
        out[name] = worst
    return out
