"""Minimal reverse-mode differentiation over flat float64 arrays.

The tape lives for one forward pass: ops build `Node`s whose parents carry
vector-Jacobian closures, `backward` walks the graph once in reverse
topological order, and the graph is discarded afterwards.  Only the
primitives the equivariant layers need are provided.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import threading
from contextlib import contextmanager

import numpy as np

_GRAD_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


@contextmanager
def no_grad():
    """Build values only (no parents, no closures) inside the context.

    The switch is thread-local so concurrent inference workers cannot leak a
    disabled state into each other.
    """
    prev = _grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = prev


class Node:
    __slots__ = ("value", "parents", "requires_grad", "grad")

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = np.asarray(value, dtype=float)
        self.requires_grad = bool(requires_grad) and _grad_enabled()
        self.parents = tuple(parents) if self.requires_grad else ()
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"<Node shape={self.value.shape} requires_grad={self.requires_grad}>"


class Parameter(Node):
    """Named trainable leaf; shape is fixed at creation."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value, (), requires_grad=True)
        self.name = name

    def assign(self, value: np.ndarray):
        value = np.asarray(value, dtype=float)
        if value.shape != self.value.shape:
            raise ValueError(f"parameter {self.name}: shape {value.shape} != {self.value.shape}")
        self.value = value


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents) -> Node:
    needs = any(p.requires_grad for p, _ in parents) and _grad_enabled()
    return Node(value, parents if needs else (), requires_grad=needs)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value + b.value,
        [(a, lambda g: _unbroadcast(g, a.value.shape)),
         (b, lambda g: _unbroadcast(g, b.value.shape))],
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value - b.value,
        [(a, lambda g: _unbroadcast(g, a.value.shape)),
         (b, lambda g: _unbroadcast(-g, b.value.shape))],
    )


def scale(a, s: float) -> Node:
    a = as_node(a)
    s = float(s)
    return _make(a.value * s, [(a, lambda g: g * s)])


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value * b.value,
        [(a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
         (b, lambda g: _unbroadcast(g * a.value, b.value.shape))],
    )


def matmul(a, mat: np.ndarray) -> Node:
    """x [..., i] @ constant matrix [i, j]; the matrix is not differentiated."""
    a = as_node(a)
    mat = np.asarray(mat, dtype=float)
    if a.value.shape[-1] != mat.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {mat.shape}")
    return _make(a.value @ mat, [(a, lambda g: g @ mat.T)])


def channel_mix(x, w) -> Node:
    """Mix channels with a shared weight: x [..., c_in, d], w [c_out, c_in]."""
    x, w = as_node(x), as_node(w)
    if x.value.ndim < 2 or x.value.shape[-2] != w.value.shape[1]:
        raise ValueError(f"channel_mix shape mismatch: x {x.value.shape}, w {w.value.shape}")
    # contract over channels via batched BLAS: [..., d, i] @ [i, o]
    out = np.swapaxes(np.swapaxes(x.value, -1, -2) @ w.value.T, -1, -2)

    def vjp_x(g):
        return np.swapaxes(np.swapaxes(g, -1, -2) @ w.value, -1, -2)

    def vjp_w(g):
        g2 = np.swapaxes(g, -1, -2).reshape(-1, g.shape[-2])
        x2 = np.swapaxes(x.value, -1, -2).reshape(-1, x.value.shape[-2])
        return g2.T @ x2

    return _make(out, [(x, vjp_x), (w, vjp_w)])


def reshape(x, shape) -> Node:
    x = as_node(x)
    orig = x.value.shape
    return _make(x.value.reshape(shape), [(x, lambda g: g.reshape(orig))])


def slice_last(x, lo: int, hi: int) -> Node:
    x = as_node(x)

    def vjp(g):
        out = np.zeros_like(x.value)
        out[..., lo:hi] = g
        return out

    return _make(x.value[..., lo:hi].copy(), [(x, vjp)])


def concat_last(parts) -> Node:
    parts = [as_node(p) for p in parts]
    widths = [p.value.shape[-1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[..., lo:hi]

    return _make(
        np.concatenate([p.value for p in parts], axis=-1),
        [(p, make_vjp(i)) for i, p in enumerate(parts)],
    )


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Node:
    x = as_node(x)
    s = _stable_sigmoid(x.value)
    return _make(s, [(x, lambda g: g * s * (1.0 - s))])


def silu(x) -> Node:
    x = as_node(x)
    s = _stable_sigmoid(x.value)
    return _make(x.value * s, [(x, lambda g: g * (s + x.value * s * (1.0 - s)))])


def vec_norm(x) -> Node:
    """2-norm over the last axis, keepdims; gradient defined as 0 at x = 0."""
    x = as_node(x)
    n = np.linalg.norm(x.value, axis=-1, keepdims=True)

    def vjp(g):
        safe = np.where(n > 0.0, n, 1.0)
        return g * np.where(n > 0.0, x.value / safe, 0.0)

    return _make(n, [(x, vjp)])


def safe_unit(x, eps: float = 1e-12) -> Node:
    """x / ||x|| over the last axis, defined as 0 where ||x|| <= eps."""
    x = as_node(x)
    n = np.linalg.norm(x.value, axis=-1, keepdims=True)
    mask = n > eps
    safe = np.where(mask, n, 1.0)
    u = np.where(mask, x.value / safe, 0.0)

    def vjp(g):
        proj = np.sum(g * u, axis=-1, keepdims=True)
        return np.where(mask, (g - proj * u) / safe, 0.0)

    return _make(u, [(x, vjp)])


def reciprocal_clamped(x, eps: float) -> Node:
    """1 / max(x, eps) elementwise; gradient is 0 on the clamped branch."""
    x = as_node(x)
    clamped = np.maximum(x.value, eps)
    inv = 1.0 / clamped
    active = x.value > eps
    return _make(inv, [(x, lambda g: np.where(active, -g * inv * inv, 0.0))])


def sum_last(x) -> Node:
    """Sum over the last axis, keepdims."""
    x = as_node(x)
    return _make(
        x.value.sum(axis=-1, keepdims=True),
        [(x, lambda g: np.broadcast_to(g, x.value.shape).copy())],
    )


def vec_dot(a, b) -> Node:
    """Dot product over the last axis, keepdims."""
    return sum_last(mul(a, b))


def reduce_sum(x) -> Node:
    x = as_node(x)
    return _make(x.value.sum(), [(x, lambda g: np.broadcast_to(g, x.value.shape).copy())])


def _pad_time(x: np.ndarray, pad_left: int, padded_len: int) -> np.ndarray:
    b, t = x.shape[0], x.shape[1]
    out = np.zeros((b, padded_len) + x.shape[2:])
    out[:, pad_left : pad_left + t] = x
    return out


def _conv_geometry(t_in: int, k: int, stride: int):
    t_out = -(-t_in // stride)  # ceil
    pad_left = k // 2
    padded_len = max(stride * (t_out - 1) + k, pad_left + t_in)
    return t_out, pad_left, padded_len


def _windows(xp: np.ndarray, t_out: int, k: int, stride: int) -> np.ndarray:
    """Read-only [B, T_out, k, C, d] view over the padded time axis, rearranged
    into [B, T_out, d, k*C] (copied) for one BLAS contraction."""
    sb, st, sc, sd = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(xp.shape[0], t_out, k, xp.shape[2], xp.shape[3]),
        strides=(sb, stride * st, st, sc, sd),
        writeable=False,
    )
    b, c, d = xp.shape[0], xp.shape[2], xp.shape[3]
    return view.transpose(0, 1, 4, 2, 3).reshape(b, t_out, d, k * c)


def _scatter_taps(acc: np.ndarray, contrib: np.ndarray, k: int, stride: int) -> None:
    """Add per-tap contributions [B, T_out, k, C, d] back into padded time."""
    t_out = contrib.shape[1]
    for tap in range(k):
        acc[:, tap : tap + stride * t_out : stride] += contrib[:, :, tap]


def time_conv(x, w, stride: int = 1) -> Node:
    """1D cross-correlation along time with channel mixing and zero same-padding.

    x: [T, c_in, d] or [B, T, c_in, d]; w: [k, c_in, c_out].
    Output time length is ceil(T / stride).
    """
    x, w = as_node(x), as_node(w)
    squeeze = x.value.ndim == 3
    xv = x.value[None] if squeeze else x.value
    if xv.ndim != 4 or xv.shape[2] != w.value.shape[1]:
        raise ValueError(f"time_conv shape mismatch: x {x.value.shape}, w {w.value.shape}")
    k, c_in, c_out = w.value.shape
    b, t_in, _, d = xv.shape
    t_out, pl, plen = _conv_geometry(t_in, k, stride)
    xp = _pad_time(xv, pl, plen)
    x2 = _windows(xp, t_out, k, stride)  # [B, T', d, k*c_in]
    wm = w.value.reshape(k * c_in, c_out)
    out = (x2 @ wm).transpose(0, 1, 3, 2)

    def vjp_x(g):
        gv = g[None] if squeeze else g
        dwin = (gv.transpose(0, 1, 3, 2) @ wm.T).reshape(b, t_out, d, k, c_in)
        dxp = np.zeros_like(xp)
        _scatter_taps(dxp, dwin.transpose(0, 1, 3, 4, 2), k, stride)
        dx = dxp[:, pl : pl + t_in]
        return dx[0] if squeeze else dx

    def vjp_w(g):
        gv = g[None] if squeeze else g
        g2 = gv.transpose(0, 1, 3, 2).reshape(-1, c_out)
        return (x2.reshape(-1, k * c_in).T @ g2).reshape(k, c_in, c_out)

    out = out[0] if squeeze else out
    return _make(out, [(x, vjp_x), (w, vjp_w)])


def time_conv_transpose(y, w, stride: int = 1) -> Node:
    """Adjoint of ``time_conv`` with the same weights: c_out -> c_in channels,
    time length T -> T * stride."""
    y, w = as_node(y), as_node(w)
    squeeze = y.value.ndim == 3
    yv = y.value[None] if squeeze else y.value
    if yv.ndim != 4 or yv.shape[2] != w.value.shape[2]:
        raise ValueError(f"time_conv_transpose shape mismatch: y {y.value.shape}, w {w.value.shape}")
    k, c_in, c_out = w.value.shape
    b, t_small, _, d = yv.shape
    t_full = t_small * stride
    t_chk, pl, plen = _conv_geometry(t_full, k, stride)
    if t_chk != t_small:
        raise ValueError(f"inconsistent transpose geometry: {t_small} vs {t_chk}")
    wm = w.value.reshape(k * c_in, c_out)
    win = (yv.transpose(0, 1, 3, 2) @ wm.T).reshape(b, t_small, d, k, c_in)
    zp = np.zeros((b, plen, c_in, d))
    _scatter_taps(zp, win.transpose(0, 1, 3, 4, 2), k, stride)
    out = zp[:, pl : pl + t_full]

    def vjp_y(g):
        gv = g[None] if squeeze else g
        gp = _pad_time(gv, pl, plen)
        g2 = _windows(gp, t_small, k, stride)
        dy = (g2 @ wm).transpose(0, 1, 3, 2)
        return dy[0] if squeeze else dy

    def vjp_w(g):
        gv = g[None] if squeeze else g
        gp = _pad_time(gv, pl, plen)
        g2 = _windows(gp, t_small, k, stride).reshape(-1, k * c_in)
        y2 = yv.transpose(0, 1, 3, 2).reshape(-1, c_out)
        return (g2.T @ y2).reshape(k, c_in, c_out)

    out = out[0] if squeeze else out
    return _make(out, [(y, vjp_y), (w, vjp_w)])


# ---------------------------------------------------------------------------
# fused per-degree primitives
#
# The layers act per degree on a flat feature axis; running each degree as
# its own chain of slice/reshape/matmul nodes makes the tape thousands of
# nodes deep and Python overhead dominates.  These fused ops keep one tape
# node per layer and loop over degree blocks inside the forward/vjp closures.
# Block descriptors are (lo_in, hi_in, lo_out, hi_out, c_in, c_out, d).


def block_linear(x, blocks, out_dim: int, bias=None, bias_lo: int = 0) -> Node:
    """Per-degree channel mixing along the last axis (one node).

    ``blocks``: list of (descriptor, weight Node [c_out, c_in]) pairs; output
    columns not covered by any descriptor stay zero.  ``bias`` (Node [c_b])
    is added to columns bias_lo : bias_lo + c_b (a degree-0 block).
    """
    x = as_node(x)
    lead = x.value.shape[:-1]
    out = np.zeros(lead + (out_dim,))
    for (li, hi_in, lo_o, hi_o, c_in, c_out, d), w in blocks:
        xb = x.value[..., li:hi_in].reshape(lead + (c_in, d))
        yb = np.swapaxes(np.swapaxes(xb, -1, -2) @ w.value.T, -1, -2)
        out[..., lo_o:hi_o] = yb.reshape(lead + (c_out * d,))
    if bias is not None:
        bias = as_node(bias)
        out[..., bias_lo : bias_lo + bias.value.shape[0]] += bias.value

    def vjp_x(g):
        dx = np.zeros_like(x.value)
        for (li, hi_in, lo_o, hi_o, c_in, c_out, d), w in blocks:
            gb = g[..., lo_o:hi_o].reshape(lead + (c_out, d))
            dxb = np.swapaxes(np.swapaxes(gb, -1, -2) @ w.value, -1, -2)
            dx[..., li:hi_in] = dxb.reshape(lead + (c_in * d,))
        return dx

    parents = [(x, vjp_x)]
    for desc, w in blocks:
        def make_vjp(desc=desc):
            li, hi_in, lo_o, hi_o, c_in, c_out, d = desc

            def vjp_w(g):
                gb = g[..., lo_o:hi_o].reshape(lead + (c_out, d))
                g2 = np.swapaxes(gb, -1, -2).reshape(-1, c_out)
                xb = x.value[..., li:hi_in].reshape(lead + (c_in, d))
                x2 = np.swapaxes(xb, -1, -2).reshape(-1, c_in)
                return g2.T @ x2

            return vjp_w

        parents.append((w, make_vjp()))
    if bias is not None:
        c_b = bias.value.shape[0]
        lo_b = bias_lo
        parents.append((bias, lambda g: g[..., lo_b : lo_b + c_b].reshape(-1, c_b).sum(axis=0)))
    return _make(out, parents)


def block_time_conv(
    x, blocks, out_dim: int, kernel: int, stride: int, bias=None, bias_lo: int = 0
) -> Node:
    """Per-degree temporal cross-correlation on flat [.., T, D] features
    (one node); zero same-padding, output length ceil(T / stride)."""
    x = as_node(x)
    squeeze = x.value.ndim == 2
    xv = x.value[None] if squeeze else x.value
    b, t_in, _ = xv.shape
    t_out, pl, plen = _conv_geometry(t_in, kernel, stride)
    xp = _pad_time(xv, pl, plen)
    out = np.zeros((b, t_out, out_dim))
    x2s = {}
    for i, ((li, hi_in, lo_o, hi_o, c_in, c_out, d), w) in enumerate(blocks):
        xb = np.ascontiguousarray(xp[..., li:hi_in]).reshape(b, plen, c_in, d)
        x2 = _windows(xb, t_out, kernel, stride)  # [B, T', d, k*c_in]
        x2s[i] = x2
        wm = w.value.reshape(kernel * c_in, c_out)
        yb = (x2 @ wm).transpose(0, 1, 3, 2)
        out[..., lo_o:hi_o] = yb.reshape(b, t_out, c_out * d)
    if bias is not None:
        bias = as_node(bias)
        out[..., bias_lo : bias_lo + bias.value.shape[0]] += bias.value

    def vjp_x(g):
        gv = g[None] if squeeze else g
        dxp = np.zeros_like(xp)
        for (li, hi_in, lo_o, hi_o, c_in, c_out, d), w in blocks:
            gb = gv[..., lo_o:hi_o].reshape(b, t_out, c_out, d)
            wm = w.value.reshape(kernel * c_in, c_out)
            dwin = (gb.transpose(0, 1, 3, 2) @ wm.T).reshape(b, t_out, d, kernel, c_in)
            dxb = np.zeros((b, plen, c_in, d))
            _scatter_taps(dxb, dwin.transpose(0, 1, 3, 4, 2), kernel, stride)
            dxp[..., li:hi_in] += dxb.reshape(b, plen, c_in * d)
        dx = dxp[:, pl : pl + t_in]
        return dx[0] if squeeze else dx

    parents = [(x, vjp_x)]
    for i, (desc, w) in enumerate(blocks):
        def make_vjp(i=i, desc=desc):
            li, hi_in, lo_o, hi_o, c_in, c_out, d = desc

            def vjp_w(g):
                gv = g[None] if squeeze else g
                gb = gv[..., lo_o:hi_o].reshape(b, t_out, c_out, d)
                g2 = gb.transpose(0, 1, 3, 2).reshape(-1, c_out)
                x2 = x2s[i].reshape(-1, kernel * c_in)
                return (x2.T @ g2).reshape(kernel, c_in, c_out)

            return vjp_w

        parents.append((w, make_vjp()))
    if bias is not None:
        c_b = bias.value.shape[0]
        lo_b = bias_lo
        parents.append((bias, lambda g: g[..., lo_b : lo_b + c_b].reshape(-1, c_b).sum(axis=0)))
    out = out[0] if squeeze else out
    return _make(out, parents)


def block_time_conv_transpose(
    y, blocks, out_dim: int, kernel: int, stride: int
) -> Node:
    """Adjoint of ``block_time_conv`` (same weights, c_out -> c_in, T -> T*stride)."""
    y = as_node(y)
    squeeze = y.value.ndim == 2
    yv = y.value[None] if squeeze else y.value
    b, t_small, _ = yv.shape
    t_full = t_small * stride
    t_chk, pl, plen = _conv_geometry(t_full, kernel, stride)
    if t_chk != t_small:
        raise ValueError(f"inconsistent transpose geometry: {t_small} vs {t_chk}")
    zp = np.zeros((b, plen, out_dim))
    for (li, hi_in, lo_o, hi_o, c_in, c_out, d), w in blocks:
        yb = yv[..., lo_o:hi_o].reshape(b, t_small, c_out, d)
        wm = w.value.reshape(kernel * c_in, c_out)
        win = (yb.transpose(0, 1, 3, 2) @ wm.T).reshape(b, t_small, d, kernel, c_in)
        acc = np.zeros((b, plen, c_in, d))
        _scatter_taps(acc, win.transpose(0, 1, 3, 4, 2), kernel, stride)
        zp[..., li:hi_in] += acc.reshape(b, plen, c_in * d)
    out = zp[:, pl : pl + t_full]

    def vjp_y(g):
        gv = g[None] if squeeze else g
        gp = _pad_time(gv, pl, plen)
        dy = np.zeros_like(yv)
        for (li, hi_in, lo_o, hi_o, c_in, c_out, d), w in blocks:
            gb = np.ascontiguousarray(gp[..., li:hi_in]).reshape(b, plen, c_in, d)
            g2 = _windows(gb, t_small, kernel, stride)
            wm = w.value.reshape(kernel * c_in, c_out)
            dy[..., lo_o:hi_o] += (g2 @ wm).transpose(0, 1, 3, 2).reshape(b, t_small, c_out * d)
        return dy[0] if squeeze else dy

    parents = [(y, vjp_y)]
    for desc, w in blocks:
        def make_vjp(desc=desc):
            li, hi_in, lo_o, hi_o, c_in, c_out, d = desc

            def vjp_w(g):
                gv = g[None] if squeeze else g
                gp = _pad_time(gv, pl, plen)
                gb = np.ascontiguousarray(gp[..., li:hi_in]).reshape(b, plen, c_in, d)
                g2 = _windows(gb, t_small, kernel, stride).reshape(-1, kernel * c_in)
                y2 = yv[..., lo_o:hi_o].reshape(b, t_small, c_out, d)
                y2 = y2.transpose(0, 1, 3, 2).reshape(-1, c_out)
                return (g2.T @ y2).reshape(kernel, c_in, c_out)

            return vjp_w

        parents.append((w, make_vjp()))
    out = out[0] if squeeze else out
    return _make(out, parents)


def block_gate(x, regular: int, gate_lo: int, higher, out_dim: int) -> Node:
    """Fused gate activation on a flat feature axis.

    Degree-0 columns: the first ``regular`` pass through x*sigmoid(x); the
    gate scalars live at columns gate_lo.. (one per higher-degree channel).
    ``higher``: list of (lo_in, lo_out, c, d, gate_offset); each slice is
    scaled by sigmoid(gate + ||slice||).  Gate columns are consumed.
    """
    x = as_node(x)
    lead = x.value.shape[:-1]
    out = np.zeros(lead + (out_dim,))
    cache = []
    if regular > 0:
        reg = x.value[..., :regular]
        s_reg = _stable_sigmoid(reg)
        out[..., :regular] = reg * s_reg
    for lo_in, lo_out, c, d, goff in higher:
        hb = x.value[..., lo_in : lo_in + c * d].reshape(lead + (c, d))
        gates = x.value[..., gate_lo + goff : gate_lo + goff + c]
        n = np.linalg.norm(hb, axis=-1)
        z = gates + n
        s = _stable_sigmoid(z)
        out[..., lo_out : lo_out + c * d] = (hb * s[..., None]).reshape(lead + (c * d,))
        cache.append((lo_in, lo_out, c, d, goff, hb, n, s))

    def vjp(g):
        dx = np.zeros_like(x.value)
        if regular > 0:
            reg = x.value[..., :regular]
            s_reg = _stable_sigmoid(reg)
            dx[..., :regular] = g[..., :regular] * (s_reg + reg * s_reg * (1 - s_reg))
        for lo_in, lo_out, c, d, goff, hb, n, s in cache:
            gb = g[..., lo_out : lo_out + c * d].reshape(lead + (c, d))
            hdotg = np.sum(gb * hb, axis=-1)
            ds = s * (1 - s)
            safe_n = np.where(n > 0, n, 1.0)
            u = np.where(n[..., None] > 0, hb / safe_n[..., None], 0.0)
            dh = s[..., None] * gb + (ds * hdotg)[..., None] * u
            dx[..., lo_in : lo_in + c * d] = dh.reshape(lead + (c * d,))
            dx[..., gate_lo + goff : gate_lo + goff + c] = ds * hdotg
        return dx

    return _make(out, [(x, vjp)])


def block_modulate(h, gamma, beta, ranges, eps: float) -> Node:
    """Fused projection-scale-plus-offset conditioning (one node).

    h: [.., T, D]; gamma, beta: [.., D] broadcast over T.  Per (lo, c, d)
    range: out = (gamma . h) h/||h|| + beta, with the first term zero where
    ||h|| <= eps.
    """
    h, gamma, beta = as_node(h), as_node(gamma), as_node(beta)
    hv = h.value
    lead = hv.shape[:-1]
    out = np.empty_like(hv)
    cache = []
    for lo, c, d in ranges:
        hb = hv[..., lo : lo + c * d].reshape(lead + (c, d))
        gb = gamma.value[..., lo : lo + c * d].reshape(
            gamma.value.shape[:-1] + (1, c, d)
        )
        bb = beta.value[..., lo : lo + c * d].reshape(beta.value.shape[:-1] + (1, c, d))
        n = np.linalg.norm(hb, axis=-1, keepdims=True)
        mask = n > eps
        u = np.where(mask, hb / np.where(mask, n, 1.0), 0.0)
        s = np.sum(gb * hb, axis=-1, keepdims=True)
        out[..., lo : lo + c * d] = (s * u + bb).reshape(lead + (c * d,))
        cache.append((lo, c, d, hb, gb, n, mask, u, s))

    def vjp_h(g):
        dh = np.empty_like(hv)
        for lo, c, d, hb, gb, n, mask, u, s in cache:
            gb_out = g[..., lo : lo + c * d].reshape(lead + (c, d))
            gdotu = np.sum(gb_out * u, axis=-1, keepdims=True)
            safe = np.where(mask, n, 1.0)
            term = gdotu * gb + np.where(mask, s / safe, 0.0) * (gb_out - gdotu * u)
            dh[..., lo : lo + c * d] = term.reshape(lead + (c * d,))
        return dh

    def vjp_gamma(g):
        dg = np.zeros_like(gamma.value)
        for lo, c, d, hb, gb, n, mask, u, s in cache:
            gb_out = g[..., lo : lo + c * d].reshape(lead + (c, d))
            gdotu = np.sum(gb_out * u, axis=-1, keepdims=True)
            contrib = (gdotu * hb).sum(axis=-3)  # reduce the broadcast T axis
            dg[..., lo : lo + c * d] = contrib.reshape(dg[..., lo : lo + c * d].shape)
        return dg

    def vjp_beta(g):
        db = np.zeros_like(beta.value)
        for lo, c, d, *_ in cache:
            contrib = g[..., lo : lo + c * d].reshape(lead + (c, d)).sum(axis=-3)
            db[..., lo : lo + c * d] = contrib.reshape(db[..., lo : lo + c * d].shape)
        return db

    return _make(out, [(h, vjp_h), (gamma, vjp_gamma), (beta, vjp_beta)])


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate gradients of a scalar loss into .grad of reachable leaves.

    Intermediate gradients live only for the duration of the call, so
    repeating backward over the same graph (with leaves zeroed in between)
    reproduces identical leaf gradients.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.value.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any differentiable input")
    order = _topo_order(loss)
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, vjp in node.parents:
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            key = id(parent)
            flow[key] = contrib if key not in flow else flow[key] + contrib


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction, linear warmup, and a cosine learning-rate decay."""

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        total_steps: int | None = None,
        warmup_steps: int = 100,
    ):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.total_steps = total_steps
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def current_lr(self) -> float:
        t = self.step_count
        lr = self.lr
        if self.warmup_steps > 0 and t < self.warmup_steps:
            lr *= (t + 1) / self.warmup_steps
        elif self.total_steps is not None and self.total_steps > self.warmup_steps:
            progress = (t - self.warmup_steps) / (self.total_steps - self.warmup_steps)
            lr *= 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
        return lr

    def step(self, grads: list[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            if g.shape != p.value.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.value.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**t)
            v_hat = self.v[i] / (1 - self.beta2**t)
            p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoint format

CHECKPOINT_VERSION = 1


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict | None = None) -> None:
    """JSON document: header + one base64-encoded float64 blob per parameter."""
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "model_config_hash": config_hash(config or {}),
        "config": config or {},
        "params": {
            name: {
                "shape": list(np.asarray(v).shape),
                "data": base64.b64encode(
                    np.ascontiguousarray(v, dtype="<f8").tobytes()
                ).decode("ascii"),
            }
            for name, v in params.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('format_version')!r}")
    params = {}
    for name, entry in blob["params"].items():
        flat = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8")
        params[name] = flat.reshape(entry["shape"]).astype(float)
    header = {k: blob[k] for k in ("format_version", "model_config_hash", "config")}
    return header, params
