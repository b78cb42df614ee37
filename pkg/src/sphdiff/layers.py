"""Equivariant building blocks over spherical Fourier features.

All layers act per degree: weights are shared across order m inside each
degree, which is exactly the constraint that makes them commute with the
block-diagonal Wigner action.  Features flow as ``CoeffsNode`` values: a
RepLayout plus an autodiff Node whose last axis is the flat coefficient
vector (leading axes are batch/time).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .so3 import RepLayout, Rotation, SphereGrid, SphericalCoeffs, concat_layouts, wigner_block_diag


@dataclass
class CoeffsNode:
    """A RepLayout-typed feature inside the autodiff graph."""

    layout: RepLayout
    node: Node

    def __post_init__(self):
        self.node = ad.as_node(self.node)
        if self.node.value.shape[-1] != self.layout.total_dim:
            raise ValueError(
                f"feature dim {self.node.value.shape[-1]} != layout dim {self.layout.total_dim}"
            )

    @classmethod
    def from_coeffs(cls, x: SphericalCoeffs) -> "CoeffsNode":
        return cls(x.layout, Node(x.data))

    def to_coeffs(self) -> SphericalCoeffs:
        return SphericalCoeffs(self.layout, self.node.value)

    @property
    def leading(self) -> tuple[int, ...]:
        return self.node.value.shape[:-1]

    def block(self, degree: int) -> Node:
        """Degree block shaped [..., c, 2l+1]."""
        lo, hi = self.layout.block_range(degree)
        c = self.layout.multiplicity(degree)
        return ad.reshape(ad.slice_last(self.node, lo, hi), self.leading + (c, 2 * degree + 1))


def from_blocks(layout: RepLayout, blocks: dict[int, Node]) -> CoeffsNode:
    """Assemble a CoeffsNode from per-degree [..., c, 2l+1] blocks."""
    parts = []
    for l, c in layout.entries:
        b = blocks[l]
        lead = b.value.shape[:-2]
        parts.append(ad.reshape(b, lead + (c * (2 * l + 1),)))
    return CoeffsNode(layout, ad.concat_last(parts))


def concat_coeffs(xs: list[CoeffsNode]) -> CoeffsNode:
    """Channel-wise concatenation; multiplicities add per degree."""
    layout = concat_layouts([x.layout for x in xs])
    blocks: dict[int, Node] = {}
    for l, _ in layout.entries:
        parts = [x.block(l) for x in xs if x.layout.multiplicity(l) > 0]
        flats = [ad.reshape(p, p.value.shape[:-2] + (-1,)) for p in parts]
        merged = flats[0] if len(flats) == 1 else ad.concat_last(flats)
        c = layout.multiplicity(l)
        blocks[l] = ad.reshape(merged, merged.value.shape[:-1] + (c, 2 * l + 1))
    return from_blocks(layout, blocks)


def rotate(x: CoeffsNode, rotation: Rotation) -> CoeffsNode:
    """Differentiable Wigner action (constant blocks)."""
    wd = wigner_block_diag(x.layout, rotation)
    blocks = {l: ad.matmul(x.block(l), wd.block(l).T) for l, _ in x.layout.entries}
    return from_blocks(x.layout, blocks)



# ---------------------------------------------------------------------------
# per-degree linear maps


@dataclass
class SphericalLinearParams:
    """One channel-mixing weight per degree; bias on degree 0 only (a bias on
    l >= 1 would break equivariance)."""

    layout_in: RepLayout
    layout_out: RepLayout
    weights: dict[int, Parameter]
    bias: Parameter | None

    def parameters(self) -> list[Parameter]:
        out = [self.weights[l] for l in sorted(self.weights)]
        if self.bias is not None:
            out.append(self.bias)
        return out


def spherical_linear_params(
    prefix: str,
    layout_in: RepLayout,
    layout_out: RepLayout,
    rng: np.random.Generator,
    bias: bool = True,
) -> SphericalLinearParams:
    weights = {}
    for l, c_out in layout_out.entries:
        c_in = layout_in.multiplicity(l)
        if c_in == 0:
            continue
        scale = 1.0 / math.sqrt(c_in * (2 * l + 1))
        weights[l] = Parameter(f"{prefix}.w{l}", rng.standard_normal((c_out, c_in)) * scale)
    b = None
    if bias and layout_out.multiplicity(0) > 0:
        b = Parameter(f"{prefix}.b0", np.zeros(layout_out.multiplicity(0)))
    return SphericalLinearParams(layout_in, layout_out, weights, b)


def _linear_block_descriptors(p) -> list:
    blocks = []
    for l in sorted(p.weights):
        c_in = p.layout_in.multiplicity(l)
        c_out = p.layout_out.multiplicity(l)
        li, hi = p.layout_in.block_range(l)
        lo, ho = p.layout_out.block_range(l)
        blocks.append(((li, hi, lo, ho, c_in, c_out, 2 * l + 1), p.weights[l]))
    return blocks


def spherical_linear(x: CoeffsNode, p: SphericalLinearParams) -> CoeffsNode:
    if x.layout != p.layout_in:
        raise ValueError(f"layout mismatch: input {x.layout.entries} vs {p.layout_in.entries}")
    bias_lo = p.layout_out.block_range(0)[0] if p.bias is not None else 0
    node = ad.block_linear(
        x.node, _linear_block_descriptors(p), p.layout_out.total_dim,
        bias=p.bias, bias_lo=bias_lo,
    )
    return CoeffsNode(p.layout_out, node)


# ---------------------------------------------------------------------------
# activations


def _resolve_nonlinearity(nonlinearity):
    if callable(nonlinearity):
        return nonlinearity
    table = {"silu": ad.silu, "sigmoid": ad.sigmoid, "identity": lambda n: n}
    if nonlinearity not in table:
        raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
    return table[nonlinearity]


def gate_layout(layout: RepLayout) -> RepLayout:
    """Widen degree 0 with one gate channel per higher-degree channel."""
    n_gates = sum(c for l, c in layout.entries if l >= 1)
    entries = [(l, c + n_gates if l == 0 else c) for l, c in layout.entries]
    if layout.multiplicity(0) == 0:
        entries = [(0, n_gates)] + entries
    return RepLayout(tuple(entries))


def gate_activation(x: CoeffsNode) -> CoeffsNode:
    """Exactly equivariant activation.

    The trailing degree-0 channels act as gates, one per higher-degree
    channel (ordered by ascending degree): each degree-l slice is scaled by
    sigmoid(gate + ||slice||), both rotation invariants.  Regular degree-0
    channels pass through x * sigmoid(x).  The gate channels are consumed.
    """
    n_gates = sum(c for l, c in x.layout.entries if l >= 1)
    c0 = x.layout.multiplicity(0)
    if c0 < n_gates:
        raise ValueError(
            f"gate_activation needs {n_gates} degree-0 gate channels, layout has {c0}"
        )
    regular = c0 - n_gates
    out_entries = ([(0, regular)] if regular > 0 else []) + [
        (l, c) for l, c in x.layout.entries if l >= 1
    ]
    out_layout = RepLayout(tuple(sorted(out_entries)))
    higher = []
    goff = 0
    for l, c in x.layout.entries:
        if l == 0:
            continue
        lo_in = x.layout.block_range(l)[0]
        lo_out = out_layout.block_range(l)[0]
        higher.append((lo_in, lo_out, c, 2 * l + 1, goff))
        goff += c
    node = ad.block_gate(x.node, regular, regular, higher, out_layout.total_dim)
    return CoeffsNode(out_layout, node)


def _channel_major_permutation(layout: RepLayout) -> np.ndarray:
    """Flat-index permutation from degree-major storage to per-channel signals."""
    c = layout.entries[0][1]
    L = layout.max_degree
    idx = []
    for ch in range(c):
        for l in range(L + 1):
            lo, hi = layout.channel_range(l, ch)
            idx.extend(range(lo, hi))
    return np.asarray(idx)


def spherical_activation(
    x: CoeffsNode, grid: SphereGrid, nonlinearity="silu"
) -> CoeffsNode:
    """Grid-based activation: synthesize each channel, apply the pointwise
    nonlinearity on the sphere, project back to the same band limit.

    Equivariant only up to grid aliasing; use an oversampled grid
    (``make_grid(L, oversample>=2)``) to keep the error small.
    """
    L = x.layout.max_degree
    if grid.band_limit < L:
        raise ValueError(f"grid band limit {grid.band_limit} < feature band limit {L}")
    cs = {c for _, c in x.layout.entries}
    if len(cs) != 1 or x.layout.degrees != tuple(range(L + 1)):
        raise ValueError("spherical_activation expects uniform multiplicity over degrees 0..L")
    fn = _resolve_nonlinearity(nonlinearity)
    c = x.layout.entries[0][1]
    dim = (L + 1) ** 2

    perm = _channel_major_permutation(x.layout)
    p_mat = np.zeros((x.layout.total_dim, x.layout.total_dim))
    p_mat[np.arange(len(perm)), perm] = 1.0  # y = P x gathers channel-major order

    y = grid.sh_matrix(L)
    signals = ad.reshape(ad.matmul(x.node, p_mat.T), x.leading + (c, dim))
    values = ad.matmul(signals, y.T)
    activated = fn(values)
    coeffs = ad.matmul(activated, y * grid.weights[:, None])
    flat = ad.reshape(coeffs, x.leading + (c * dim,))
    return CoeffsNode(x.layout, ad.matmul(flat, p_mat))


# ---------------------------------------------------------------------------
# spherical FiLM conditioning


@dataclass
class SFiLMParams:
    """Two per-degree linear projections of the condition: a scaling field and
    an offset field, both shaped like the hidden feature."""

    gamma: SphericalLinearParams
    beta: SphericalLinearParams

    def parameters(self) -> list[Parameter]:
        return self.gamma.parameters() + self.beta.parameters()


def sfilm_params(
    prefix: str, layout_cond: RepLayout, layout_hidden: RepLayout, rng: np.random.Generator
) -> SFiLMParams:
    return SFiLMParams(
        gamma=spherical_linear_params(f"{prefix}.gamma", layout_cond, layout_hidden, rng),
        beta=spherical_linear_params(f"{prefix}.beta", layout_cond, layout_hidden, rng),
    )


ZERO_NORM_GUARD = 1e-12


def sfilm(h: CoeffsNode, cond: CoeffsNode, p: SFiLMParams) -> CoeffsNode:
    """Per-degree conditioning: project gamma onto each slice as a scale along
    the slice direction, add beta as an offset.

    The condition has no time axis; it is broadcast over the hidden feature's
    time steps.  Slices with norm <= 1e-12 contribute only the offset.
    """
    if h.layout != p.gamma.layout_out:
        raise ValueError(f"hidden layout {h.layout.entries} != {p.gamma.layout_out.entries}")
    gamma = spherical_linear(cond, p.gamma)
    beta = spherical_linear(cond, p.beta)
    ranges = [
        (h.layout.block_range(l)[0], c, 2 * l + 1) for l, c in h.layout.entries
    ]
    node = ad.block_modulate(h.node, gamma.node, beta.node, ranges, ZERO_NORM_GUARD)
    return CoeffsNode(h.layout, node)


# ---------------------------------------------------------------------------
# mixing-channel temporal convolution


@dataclass
class MCTCParams:
    """Time-axis cross-correlation weights, shared across order m per degree."""

    layout_in: RepLayout
    layout_out: RepLayout
    kernel_size: int
    stride: int
    weights: dict[int, Parameter]  # degree -> [taps, c_in, c_out]
    bias: Parameter | None  # degree 0 only

    def parameters(self) -> list[Parameter]:
        out = [self.weights[l] for l in sorted(self.weights)]
        if self.bias is not None:
            out.append(self.bias)
        return out


def mctc_params(
    prefix: str,
    layout_in: RepLayout,
    layout_out: RepLayout,
    rng: np.random.Generator,
    kernel_size: int = 5,
    stride: int = 1,
    bias: bool = True,
) -> MCTCParams:
    if kernel_size % 2 == 0:
        raise ValueError("kernel size must be odd for same padding")
    weights = {}
    for l, c_out in layout_out.entries:
        c_in = layout_in.multiplicity(l)
        if c_in == 0:
            continue
        scale = 1.0 / math.sqrt(c_in * kernel_size * (2 * l + 1))
        weights[l] = Parameter(
            f"{prefix}.w{l}", rng.standard_normal((kernel_size, c_in, c_out)) * scale
        )
    b = None
    if bias and layout_out.multiplicity(0) > 0:
        b = Parameter(f"{prefix}.b0", np.zeros(layout_out.multiplicity(0)))
    return MCTCParams(layout_in, layout_out, kernel_size, stride, weights, b)


def _conv_block_descriptors(p: "MCTCParams") -> list:
    blocks = []
    for l in sorted(p.weights):
        c_in = p.layout_in.multiplicity(l)
        c_out = p.layout_out.multiplicity(l)
        li, hi = p.layout_in.block_range(l)
        lo, ho = p.layout_out.block_range(l)
        blocks.append(((li, hi, lo, ho, c_in, c_out, 2 * l + 1), p.weights[l]))
    return blocks


def mctc(x: CoeffsNode, p: MCTCParams) -> CoeffsNode:
    """out[o, l, m, t] = sum_j sum_i x[i, l, m, j] w[l, j - t, i, o], with zero
    same-padding and output length ceil(T / stride)."""
    if x.layout != p.layout_in:
        raise ValueError(f"layout mismatch: input {x.layout.entries} vs {p.layout_in.entries}")
    if len(x.leading) not in (1, 2):
        raise ValueError(f"mctc expects [T, dim] or [B, T, dim], got {x.node.value.shape}")
    bias_lo = p.layout_out.block_range(0)[0] if p.bias is not None else 0
    node = ad.block_time_conv(
        x.node, _conv_block_descriptors(p), p.layout_out.total_dim,
        p.kernel_size, p.stride, bias=p.bias, bias_lo=bias_lo,
    )
    return CoeffsNode(p.layout_out, node)


def mctc_transposed(y: CoeffsNode, p: MCTCParams) -> CoeffsNode:
    """Adjoint of the strided ``mctc`` linear map with the same weights:
    maps layout_out -> layout_in and time length T -> T * stride."""
    if y.layout != p.layout_out:
        raise ValueError(f"layout mismatch: input {y.layout.entries} vs {p.layout_out.entries}")
    if len(y.leading) not in (1, 2):
        raise ValueError(f"mctc_transposed expects [T, dim] or [B, T, dim], got {y.node.value.shape}")
    node = ad.block_time_conv_transpose(
        y.node, _conv_block_descriptors(p), p.layout_in.total_dim, p.kernel_size, p.stride
    )
    return CoeffsNode(p.layout_in, node)


# ---------------------------------------------------------------------------
# optional invariant normalization (off by default in the denoiser)


def degree_norm(x: CoeffsNode, eps: float = 1e-8) -> CoeffsNode:
    """Divide each degree block by its RMS over (channels, orders); exactly
    equivariant since the divisor is a rotation invariant."""
    blocks: dict[int, Node] = {}
    for l, c in x.layout.entries:
        d = 2 * l + 1
        flat = ad.reshape(x.block(l), x.leading + (c * d,))
        rms = ad.scale(ad.vec_norm(flat), 1.0 / math.sqrt(c * d))
        inv = ad.reciprocal_clamped(rms, eps)
        blocks[l] = ad.reshape(ad.mul(flat, inv), x.leading + (c, d))
    return from_blocks(x.layout, blocks)
