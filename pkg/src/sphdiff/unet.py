"""Spherical denoising temporal U-net.

A 1D U-net over the action-chunk time axis whose latent features are
multichannel spherical Fourier coefficients.  Every block is a
{temporal conv, spherical FiLM, activation} residual unit; down/up sampling
uses strided and transposed temporal convs.  With the gate activation the
whole network commutes exactly with rotations applied jointly to the
condition and the noisy actions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .autodiff import Node, Parameter
from .canonical import ee_layout
from .layers import CoeffsNode
from .so3 import RepLayout, concat_layouts, make_grid


@dataclass(frozen=True)
class SDTUConfig:
    band_limit: int = 2
    horizon: int = 16
    widths: tuple[int, ...] = (8, 16, 32, 64)
    kernel_size: int = 5
    arms: int = 1
    activation: str = "gate"  # "gate" (exactly equivariant) or "grid"
    grid_oversample: int = 3
    timestep_embed_dim: int = 16

    def __post_init__(self):
        levels = len(self.widths)
        if levels < 2:
            raise ValueError("need at least two levels of widths")
        if self.horizon % 2 ** (levels - 1) != 0:
            raise ValueError(
                f"horizon {self.horizon} must be divisible by {2 ** (levels - 1)}"
            )
        if self.activation not in ("gate", "grid"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.arms not in (1, 2):
            raise ValueError("arms must be 1 or 2")
        if self.timestep_embed_dim % 2 != 0:
            raise ValueError("timestep embedding dimension must be even")

    def to_dict(self) -> dict:
        return {
            "band_limit": self.band_limit,
            "horizon": self.horizon,
            "widths": list(self.widths),
            "kernel_size": self.kernel_size,
            "arms": self.arms,
            "activation": self.activation,
            "grid_oversample": self.grid_oversample,
            "timestep_embed_dim": self.timestep_embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SDTUConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def timestep_embedding(k, dim: int) -> np.ndarray:
    """Sinusoidal embedding of denoising step indices; invariant degree-0 data.

    k may be a scalar or an array of per-sample steps; output [..., dim] with
    sin terms first.  k = 0 gives all sin terms 0 and cos terms 1.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    half = dim // 2
    ks = np.asarray(k, dtype=float)
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    ang = ks[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class ResidualBlock:
    conv: ly.MCTCParams
    film: ly.SFiLMParams
    shortcut: ly.SphericalLinearParams | None

    def parameters(self) -> list[Parameter]:
        out = self.conv.parameters() + self.film.parameters()
        if self.shortcut is not None:
            out += self.shortcut.parameters()
        return out


@dataclass
class SDTULevel:
    block1: ResidualBlock
    block2: ResidualBlock
    resample: ly.MCTCParams | None  # strided conv (down path) / transposed (up path)

    def parameters(self) -> list[Parameter]:
        out = self.block1.parameters() + self.block2.parameters()
        if self.resample is not None:
            out += self.resample.parameters()
        return out


class SphericalTemporalUNet:
    """The conditional noise estimator over action chunks."""

    def __init__(self, config: SDTUConfig, cond_layout: RepLayout, rng: np.random.Generator):
        self.config = config
        self.cond_layout = cond_layout
        self.full_cond_layout = concat_layouts(
            [cond_layout, RepLayout(((0, config.timestep_embed_dim),))]
        )
        self.action_layout = ee_layout(config.arms)
        L = config.band_limit
        self._grid = make_grid(L, config.grid_oversample) if config.activation == "grid" else None

        def hidden(width: int) -> RepLayout:
            return RepLayout.uniform(L, width)

        def pre_act(width: int) -> RepLayout:
            if config.activation == "gate":
                return ly.gate_layout(hidden(width))
            return hidden(width)

        def res_block(prefix: str, lin: RepLayout, width: int) -> ResidualBlock:
            conv = ly.mctc_params(
                f"{prefix}.conv", lin, pre_act(width), rng, config.kernel_size, stride=1
            )
            film = ly.sfilm_params(f"{prefix}.film", self.full_cond_layout, pre_act(width), rng)
            shortcut = None
            if lin != hidden(width):
                shortcut = ly.spherical_linear_params(
                    f"{prefix}.skip", lin, hidden(width), rng, bias=False
                )
            return ResidualBlock(conv, film, shortcut)

        widths = config.widths
        self.down: list[SDTULevel] = []
        lin = self.action_layout
        for i, w in enumerate(widths):
            b1 = res_block(f"down{i}.b1", lin, w)
            b2 = res_block(f"down{i}.b2", hidden(w), w)
            resample = None
            if i < len(widths) - 1:
                resample = ly.mctc_params(
                    f"down{i}.pool", hidden(w), hidden(w), rng, config.kernel_size, stride=2
                )
            self.down.append(SDTULevel(b1, b2, resample))
            lin = hidden(w)

        self.up: list[SDTULevel] = []
        for i in range(len(widths) - 2, -1, -1):
            w_deep, w = widths[i + 1], widths[i]
            # transposed conv maps layout_out -> layout_in, so declare in=target
            resample = ly.mctc_params(
                f"up{i}.unpool", hidden(w_deep), hidden(w_deep), rng, config.kernel_size,
                stride=2, bias=False,
            )
            cat = concat_layouts([hidden(w_deep), hidden(w)])
            b1 = res_block(f"up{i}.b1", cat, w)
            b2 = res_block(f"up{i}.b2", hidden(w), w)
            self.up.append(SDTULevel(b1, b2, resample))

        self.final = ly.spherical_linear_params(
            "final", hidden(widths[0]), self.action_layout, rng
        )

    # -- parameters ------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for lvl in self.down + self.up:
            out += lvl.parameters()
        out += self.final.parameters()
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            raise RuntimeError("duplicate parameter names in SDTU")
        return out

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in params.items():
            p.assign(state[name])

    # -- forward ---------------------------------------------------------

    def _activation(self, x: CoeffsNode) -> CoeffsNode:
        if self.config.activation == "gate":
            return ly.gate_activation(x)
        return ly.spherical_activation(x, self._grid, "silu")

    def _run_block(self, x: CoeffsNode, cond: CoeffsNode, block: ResidualBlock) -> CoeffsNode:
        h = ly.mctc(x, block.conv)
        h = ly.sfilm(h, cond, block.film)
        h = self._activation(h)
        short = x if block.shortcut is None else ly.spherical_linear(x, block.shortcut)
        return CoeffsNode(h.layout, ad.add(h.node, short.node))

    def forward(self, cond: CoeffsNode, a_noisy, k) -> Node:
        """Noise estimate with the shape of ``a_noisy`` ([.., T, arms*13])."""
        a = ad.as_node(a_noisy)
        if a.value.shape[-1] != self.action_layout.total_dim:
            raise ValueError(
                f"action dim {a.value.shape[-1]} != layout {self.action_layout.total_dim}"
            )
        t_in = a.value.shape[-2]
        if t_in != self.config.horizon:
            raise ValueError(f"horizon mismatch: input {t_in}, config {self.config.horizon}")
        if cond.layout != self.cond_layout:
            raise ValueError(
                f"condition layout {cond.layout.entries} != {self.cond_layout.entries}"
            )
        embed = timestep_embedding(k, self.config.timestep_embed_dim)
        embed = np.broadcast_to(embed, cond.leading + (self.config.timestep_embed_dim,))
        cond_full = ly.concat_coeffs(
            [cond, CoeffsNode(RepLayout(((0, self.config.timestep_embed_dim),)), Node(embed))]
        )

        x = CoeffsNode(self.action_layout, a)
        skips: list[CoeffsNode] = []
        for lvl in self.down:
            x = self._run_block(x, cond_full, lvl.block1)
            x = self._run_block(x, cond_full, lvl.block2)
            if lvl.resample is not None:
                skips.append(x)
                x = ly.mctc(x, lvl.resample)
        for lvl in self.up:
            x = ly.mctc_transposed(x, lvl.resample)
            x = ly.concat_coeffs([x, skips.pop()])
            x = self._run_block(x, cond_full, lvl.block1)
            x = self._run_block(x, cond_full, lvl.block2)
        return ly.spherical_linear(x, self.final).node

    def __call__(self, cond_data: np.ndarray, a_data: np.ndarray, k) -> np.ndarray:
        """Inference-mode denoiser: plain arrays in, plain array out."""
        with ad.no_grad():
            cond = CoeffsNode(self.cond_layout, Node(np.asarray(cond_data, dtype=float)))
            return self.forward(cond, np.asarray(a_data, dtype=float), k).value
