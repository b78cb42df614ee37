"""Equivariant scene encoder: spherical-harmonic projection of the point
cloud plus an equivariant MLP, producing the condition feature.

Each point contributes Y_l^m(direction) x radial_basis(radius) x
(1 or a color channel), summed over points, so the embedding is permutation
invariant and rotates with the scene.  Color values are rotation-invariant
inputs; the channels derived from them live at every degree but scale
linearly with color.  The per-arm end-effector embeddings of every history
step are concatenated onto the encoded scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .autodiff import Node, Parameter
from .canonical import SceneObservation, StateWindow, ee_layout, encode_ee_multi
from .layers import CoeffsNode
from .so3 import RepLayout, concat_layouts, sh_basis


@dataclass(frozen=True)
class EncoderConfig:
    band_limit: int = 2
    radial_bins: int = 8
    radial_cutoff: float = 1.0
    hidden_widths: tuple[int, ...] = (16, 16, 16)
    out_channels: int = 16

    def __post_init__(self):
        if self.radial_cutoff <= 0:
            raise ValueError("radial cutoff must be positive")
        if self.radial_bins < 1:
            raise ValueError("need at least one radial bin")

    def to_dict(self) -> dict:
        return {
            "band_limit": self.band_limit,
            "radial_bins": self.radial_bins,
            "radial_cutoff": self.radial_cutoff,
            "hidden_widths": list(self.hidden_widths),
            "out_channels": self.out_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["hidden_widths"] = tuple(d["hidden_widths"])
        return cls(**d)


POINT_COMPONENTS = 4  # geometry + r, g, b


def embed_layout(config: EncoderConfig) -> RepLayout:
    return RepLayout.uniform(config.band_limit, config.radial_bins * POINT_COMPONENTS)


def radial_basis(r: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """Cosine-windowed Gaussian bumps over [0, cutoff]; zero beyond the cutoff
    with a smooth rolloff."""
    r = np.asarray(r, dtype=float)
    cut = config.radial_cutoff
    nb = config.radial_bins
    mus = np.linspace(0.0, cut, nb)
    width = cut / nb
    bumps = np.exp(-0.5 * ((r[..., None] - mus) / width) ** 2)
    window = np.where(r <= cut, 0.5 * (1.0 + np.cos(math.pi * np.clip(r / cut, 0.0, 1.0))), 0.0)
    return bumps * window[..., None]


def embed_points(obs: SceneObservation, config: EncoderConfig) -> np.ndarray:
    """Flat coefficients of the summed per-point features, ``embed_layout`` order."""
    pts = obs.points
    r = np.linalg.norm(pts, axis=1)
    safe_r = np.where(r > 1e-12, r, 1.0)
    dirs = np.where((r > 1e-12)[:, None], pts / safe_r[:, None], [0.0, 0.0, 1.0])
    y = sh_basis(config.band_limit, dirs)  # [N, (L+1)^2]
    radial = radial_basis(r, config)  # [N, B]
    comps = np.concatenate([np.ones((len(pts), 1)), obs.colors], axis=1)  # [N, 4]
    point_ch = (radial[:, :, None] * comps[:, None, :]).reshape(len(pts), -1)  # [N, B*4]
    per_degree = np.einsum("nd,nc->cd", y, point_ch)  # [C, (L+1)^2]

    layout = embed_layout(config)
    out = np.empty(layout.total_dim)
    for l in range(config.band_limit + 1):
        lo, hi = layout.block_range(l)
        out[lo:hi] = per_degree[:, l * l : (l + 1) * (l + 1)].reshape(-1)
    return out


def featurize_window(window_can: StateWindow, config: EncoderConfig) -> np.ndarray:
    """Fixed featurization of a canonicalized window: point embeddings of every
    history step followed by the end-effector embeddings.  Parameter-free, so
    training pipelines may cache it per sample."""
    for snap in window_can.snapshots:
        if len(snap.obs.points) < 1:
            raise ValueError("empty point cloud")
    embeds = [
        CoeffsNode(embed_layout(config), Node(embed_points(snap.obs, config)))
        for snap in window_can.snapshots
    ]
    with ad.no_grad():
        merged = ly.concat_coeffs(embeds)
    ee = np.concatenate([encode_ee_multi(s.ee) for s in window_can.snapshots])
    return np.concatenate([merged.node.value, ee])


class SceneEncoder:
    """embed_points -> (per-degree linear, gate activation) stack -> concat
    history end-effector embeddings."""

    def __init__(
        self, config: EncoderConfig, history: int, arms: int, rng: np.random.Generator
    ):
        self.config = config
        self.history = history
        self.arms = arms
        L = config.band_limit
        self.input_layout = RepLayout.uniform(
            L, config.radial_bins * POINT_COMPONENTS * history
        )
        self.ee_part_layout = concat_layouts([ee_layout(arms)] * history)
        self.scene_layout = RepLayout.uniform(L, config.out_channels)
        self.output_layout = concat_layouts([self.scene_layout, self.ee_part_layout])

        self.linears: list[ly.SphericalLinearParams] = []
        lin = self.input_layout
        for i, w in enumerate(config.hidden_widths):
            pre = ly.gate_layout(RepLayout.uniform(L, w))
            self.linears.append(ly.spherical_linear_params(f"enc.l{i}", lin, pre, rng))
            lin = RepLayout.uniform(L, w)
        self.final = ly.spherical_linear_params("enc.out", lin, self.scene_layout, rng)

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for p in self.linears:
            out += p.parameters()
        return out + self.final.parameters()

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

    # -- featurization (parameter-free, cacheable) -------------------------

    def featurize(self, window_can: StateWindow) -> np.ndarray:
        if window_can.history != self.history:
            raise ValueError(f"window history {window_can.history} != config {self.history}")
        if window_can.arms != self.arms:
            raise ValueError(f"window arms {window_can.arms} != config {self.arms}")
        return featurize_window(window_can, self.config)

    def encode_features(self, features: np.ndarray) -> CoeffsNode:
        """Differentiable head applied to (possibly batched) featurizations."""
        features = np.asarray(features, dtype=float)
        split = self.input_layout.total_dim
        x = CoeffsNode(self.input_layout, Node(features[..., :split]))
        for p in self.linears:
            x = ly.gate_activation(ly.spherical_linear(x, p))
        scene = ly.spherical_linear(x, self.final)
        ee_flat = features[..., split:]
        # history x per-arm blocks, reassembled into the concat layout
        per = ee_layout(self.arms).total_dim
        parts = [
            CoeffsNode(ee_layout(self.arms), Node(ee_flat[..., i * per : (i + 1) * per]))
            for i in range(self.history)
        ]
        return ly.concat_coeffs([scene] + parts)

    def encode_scene(self, window_can: StateWindow) -> CoeffsNode:
        return self.encode_features(self.featurize(window_can))
