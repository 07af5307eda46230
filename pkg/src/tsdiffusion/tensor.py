"""Minimal dense tensors with tape-based reverse-mode differentiation.

Values are float64 numpy arrays. Operations only record themselves when a
:class:`GradTape` is active and at least one input requires gradients, so the
sampling path runs at plain numpy speed.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = (matmul(x, w) ** 2).sum()
    (gw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ComplexSpectrum",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "square",
    "tabs",
    "exp",
    "sigmoid",
    "tanh",
    "gelu",
    "softplus",
    "layer_norm",
    "softmax_attention",
    "rdft",
    "irdft",
    "gru",
]

_TAPES: list["GradTape"] = []


class Tensor:
    """Immutable float64 array node."""

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, power):
        if power != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class GradTape:
    """Records differentiable operations executed inside its context.

    Nodes are appended in creation order, which is a topological order of the
    computation graph; :meth:`gradient` walks them once in reverse.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        self._nodes.append((out, parents, backward))

    def gradient(
        self,
        target: Tensor,
        sources: Sequence[Tensor],
        output_grad: np.ndarray | None = None,
    ) -> list[np.ndarray]:
        """Return d(target)/d(source) for each source.

        ``target`` must be a scalar unless ``output_grad`` is given. Sources that
        do not influence the target get exact zeros.
        """
        if output_grad is None:
            if target.data.size != 1:
                raise ValueError("gradient of a non-scalar target needs output_grad")
            output_grad = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(output_grad, dtype=np.float64)}
        for out, parents, backward in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parent_grads = backward(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [
            grads[id(s)] if id(s) in grads else np.zeros_like(s.data)
            for s in sources
        ]


def _active_tape() -> GradTape | None:
    return _TAPES[-1] if _TAPES else None


def _finite(data: np.ndarray, name: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"{name} produced non-finite values")
    return data


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, name: str) -> Tensor:
    _finite(data, name)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        tape._record(out, parents, backward)
        return out
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def tabs(a) -> Tensor:
    """Absolute value; the subgradient at zero is zero."""
    a = as_tensor(a)
    ad = a.data
    return _node(np.abs(ad), (a,), lambda g: (np.sign(ad) * g,), "abs")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _node(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _node(out, (a,), backward, "gelu")


# --- shape / reduction -----------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _node(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(a.data[idx]), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


# --- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if ad.ndim == 2 and g.ndim > 2:
                # shared left matrix: contract over all batch axes at once
                gm = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
                same = bd.shape[:-2] == g.shape[:-2]
                bm = np.moveaxis(bd, -2, 0).reshape(bd.shape[-2], -1) if same else None
                ga = gm @ bm.T if bm is not None else _unbroadcast(g @ bd.T, ad.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(ad @ bd, (a, b), backward, "matmul")


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an optional affine map."""
    x = as_tensor(x)
    xd = x.data
    n = xd.shape[-1]
    if n == 0:
        raise ValueError("layer_norm over a zero-length axis")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    xhat = xc * inv
    gd = None if gain is None else as_tensor(gain).data
    bd = None if bias is None else as_tensor(bias).data
    out = xhat
    if gd is not None:
        out = out * gd
    if bd is not None:
        out = out + bd

    parents = [x]
    if gain is not None:
        parents.append(as_tensor(gain))
    if bias is not None:
        parents.append(as_tensor(bias))

    def backward(g):
        gx = g if gd is None else g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        res = [dx]
        if gain is not None:
            res.append(_unbroadcast(g * xhat, gd.shape))
        if bias is not None:
            res.append(_unbroadcast(g, bd.shape))
        return tuple(res)

    return _node(out, tuple(parents), backward, "layer_norm")


def softmax_attention(q, k, v, scale: float) -> Tensor:
    """``softmax(q k^T * scale) v`` over the last two axes (leading axes batch)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    qd, kd, vd = q.data, k.data, v.data
    if qd.shape[-1] != kd.shape[-1] or kd.shape[-2] != vd.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{qd.shape} k{kd.shape} v{vd.shape}")
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vd

    def backward(g):
        dv = np.swapaxes(p, -1, -2) @ g
        dp = g @ np.swapaxes(vd, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ kd
        dk = np.swapaxes(ds, -1, -2) @ qd
        return (
            _unbroadcast(dq, qd.shape),
            _unbroadcast(dk, kd.shape),
            _unbroadcast(dv, vd.shape),
        )

    return _node(out, (q, k, v), backward, "softmax_attention")


# --- discrete Fourier transform -------------------------------------------


@dataclass(frozen=True)
class ComplexSpectrum:
    """One-sided DFT of a real signal: bins 0..n//2 along the time axis."""

    re: Tensor
    im: Tensor
    n: int

    @property
    def amplitude(self) -> np.ndarray:
        return np.hypot(self.re.data, self.im.data)

    @property
    def phase(self) -> np.ndarray:
        return np.arctan2(self.im.data, self.re.data)

    def to_complex(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data


@lru_cache(maxsize=32)
def _dft_mats(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    nbins = n // 2 + 1
    k = np.arange(nbins)[:, None]
    t = np.arange(n)[None, :]
    ang = 2.0 * np.pi * ((k * t) % n) / n
    fwd_re = np.cos(ang)
    fwd_im = -np.sin(ang)
    w = np.full(nbins, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    inv_re = (w[:, None] * np.cos(ang)).T / n
    inv_im = (-w[:, None] * np.sin(ang)).T / n
    mats = (fwd_re, fwd_im, inv_re, inv_im)
    for m in mats:
        m.setflags(write=False)
    return mats


def _time_axis(ndim: int) -> int:
    return 0 if ndim == 1 else ndim - 2


def _apply(mat: np.ndarray, x: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, x, axes=([1], [axis])), 0, axis)


def rdft(x) -> ComplexSpectrum:
    """One-sided DFT along the time axis (axis 0 for 1-D input, else axis -2).

    Uses the unnormalized convention ``X_k = sum_n x_n exp(-2 pi i k n / N)``.
    """
    x = as_tensor(x)
    axis = _time_axis(x.ndim)
    n = x.shape[axis]
    if n < 2:
        raise ValueError("rdft needs at least 2 samples")
    fre, fim, _, _ = _dft_mats(n)
    re = _node(_apply(fre, x.data, axis), (x,), lambda g: (_apply(fre.T, g, axis),), "rdft.re")
    im = _node(_apply(fim, x.data, axis), (x,), lambda g: (_apply(fim.T, g, axis),), "rdft.im")
    return ComplexSpectrum(re, im, n)


def irdft(spec: ComplexSpectrum, n: int | None = None) -> Tensor:
    """Inverse of :func:`rdft`, restoring conjugate symmetry implicitly."""
    n = spec.n if n is None else n
    if n < 2:
        raise ValueError("irdft needs n >= 2")
    re, im = spec.re, spec.im
    axis = _time_axis(re.ndim)
    if re.shape[axis] != n // 2 + 1:
        raise ValueError(f"spectrum has {re.shape[axis]} bins, expected {n // 2 + 1}")
    _, _, ire, iim = _dft_mats(n)
    out = _apply(ire, re.data, axis) + _apply(iim, im.data, axis)
    return _node(
        out,
        (re, im),
        lambda g: (_apply(ire.T, g, axis), _apply(iim.T, g, axis)),
        "irdft",
    )


# --- recurrent -------------------------------------------------------------


def gru(x, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """Single GRU layer over a ``(batch, time, features)`` sequence.

    Gate layout along the ``3H`` axis is (reset, update, candidate). The
    initial hidden state is zero. Returns all hidden states ``(batch, time, H)``.
    """
    x, w_ih, w_hh, b_ih, b_hh = (as_tensor(a) for a in (x, w_ih, w_hh, b_ih, b_hh))
    xd, wi, wh, bi, bh = x.data, w_ih.data, w_hh.data, b_ih.data, b_hh.data
    bsz, steps, _ = xd.shape
    hid = wh.shape[0]
    if wi.shape[1] != 3 * hid or wh.shape[1] != 3 * hid:
        raise ValueError("gru weight shapes do not match hidden size")

    gx = xd @ wi + bi  # (B, T, 3H)
    hs = np.zeros((bsz, steps + 1, hid))
    rs = np.empty((bsz, steps, hid))
    zs = np.empty((bsz, steps, hid))
    ns = np.empty((bsz, steps, hid))
    hns = np.empty((bsz, steps, hid))
    for t in range(steps):
        h = hs[:, t]
        gh = h @ wh + bh
        r = _sigmoid(gx[:, t, :hid] + gh[:, :hid])
        z = _sigmoid(gx[:, t, hid : 2 * hid] + gh[:, hid : 2 * hid])
        hn = gh[:, 2 * hid :]
        n = np.tanh(gx[:, t, 2 * hid :] + r * hn)
        hs[:, t + 1] = (1.0 - z) * n + z * h
        rs[:, t], zs[:, t], ns[:, t], hns[:, t] = r, z, n, hn

    def backward(g):
        dgx = np.zeros_like(gx)
        dwh = np.zeros_like(wh)
        dbh = np.zeros_like(bh)
        dh_next = np.zeros((bsz, hid))
        for t in range(steps - 1, -1, -1):
            h = hs[:, t]
            r, z, n, hn = rs[:, t], zs[:, t], ns[:, t], hns[:, t]
            dh = g[:, t] + dh_next
            dn = dh * (1.0 - z)
            dz = dh * (h - n)
            dn_pre = dn * (1.0 - n * n)
            dr = dn_pre * hn
            dr_pre = dr * r * (1.0 - r)
            dz_pre = dz * z * (1.0 - z)
            dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
            dgx[:, t] = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
            dwh += h.T @ dgh
            dbh += dgh.sum(axis=0)
            dh_next = dh * z + dgh @ wh.T
        dx = dgx @ wi.T
        dwi = np.einsum("btf,btg->fg", xd, dgx)
        dbi = dgx.sum(axis=(0, 1))
        return dx, dwi, dwh, dbi, dbh

    return _node(hs[:, 1:].copy(), (x, w_ih, w_hh, b_ih, b_hh), backward, "gru")
