"""End-to-end policies: observation window in, action chunk out.

The spherical policy chains gripper-frame canonicalization, the equivariant
scene encoder, the spherical temporal U-net, and a reverse-diffusion sampler.
Rotating the scene about the canonicalization origin rotates the sampled
chunk; translating the scene leaves the canonical chunk unchanged.  For two
arms, each arm's view and action positions are canonicalized to its own
gripper and the per-arm condition features are concatenated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, load_checkpoint, save_checkpoint
from .canonical import (
    ActionChunk,
    StateWindow,
    canonicalize,
    decode_chunk,
    ee_layout,
    encode_chunk,
    uncanonicalize,
)
from .diffusion import NoiseSchedule, ddim_sample, ddpm_sample, make_schedule
from .encoder import EncoderConfig, SceneEncoder
from .layers import CoeffsNode
from .so3 import RepLayout, concat_layouts
from .unet import SDTUConfig, SphericalTemporalUNet


@dataclass(frozen=True)
class PolicyConfig:
    arms: int = 1
    history: int = 2
    action_horizon: int = 8
    sampler: str = "ddim"  # ddim | ddpm
    ddim_steps: int = 8
    diffusion_steps: int = 100
    # scalar multiplier on the position channels of the diffused embedding;
    # a per-channel scalar commutes with the Wigner action, so this is an
    # equivariance-safe normalization that balances position SNR against the
    # unit-magnitude rotation columns
    position_scale: float = 2.0

    def __post_init__(self):
        if self.sampler not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.arms not in (1, 2):
            raise ValueError("arms must be 1 or 2")
        if self.position_scale <= 0:
            raise ValueError("position_scale must be positive")

    def to_dict(self) -> dict:
        return {
            "arms": self.arms,
            "history": self.history,
            "action_horizon": self.action_horizon,
            "sampler": self.sampler,
            "ddim_steps": self.ddim_steps,
            "diffusion_steps": self.diffusion_steps,
            "position_scale": self.position_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(**d)


def _arm_blocks_to_multi(per_arm: list[np.ndarray], arms: int) -> np.ndarray:
    """Merge per-arm [T, 13] coefficient arrays into the joint layout order."""
    layout = ee_layout(arms)
    single = ee_layout(1)
    t = per_arm[0].shape[0]
    out = np.empty((t, layout.total_dim))
    for a, block in enumerate(per_arm):
        lo, _ = layout.channel_range(0, a)
        slo, _ = single.channel_range(0, 0)
        out[:, lo] = block[:, slo]
        for v in range(4):
            lo, hi = layout.channel_range(1, 4 * a + v)
            slo, shi = single.channel_range(1, v)
            out[:, lo:hi] = block[:, slo:shi]
    return out


def _multi_to_arm_blocks(data: np.ndarray, arms: int) -> list[np.ndarray]:
    layout = ee_layout(arms)
    single = ee_layout(1)
    out = []
    for a in range(arms):
        block = np.empty((data.shape[0], single.total_dim))
        lo, _ = layout.channel_range(0, a)
        block[:, single.channel_range(0, 0)[0]] = data[:, lo]
        for v in range(4):
            lo, hi = layout.channel_range(1, 4 * a + v)
            slo, shi = single.channel_range(1, v)
            block[:, slo:shi] = data[:, lo:hi]
        out.append(block)
    return out


class SphericalPolicy:
    kind = "sdp"

    def __init__(
        self,
        config: PolicyConfig,
        encoder_config: EncoderConfig,
        net_config: SDTUConfig,
        rng: np.random.Generator,
    ):
        if net_config.arms != config.arms:
            raise ValueError("net arms != policy arms")
        self.config = config
        self.encoder = SceneEncoder(encoder_config, config.history, config.arms, rng)
        self.cond_layout: RepLayout = concat_layouts(
            [self.encoder.output_layout] * config.arms
        )
        self.net = SphericalTemporalUNet(net_config, self.cond_layout, rng)
        self.sched: NoiseSchedule = make_schedule(config.diffusion_steps)
        self.action_layout = ee_layout(config.arms)

    # -- parameters / persistence -----------------------------------------

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.net.parameters()

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def config_dict(self) -> dict:
        return {
            "kind": self.kind,
            "policy": self.config.to_dict(),
            "encoder": self.encoder.config.to_dict(),
            "net": self.net.config.to_dict(),
        }

    def save(self, path) -> None:
        save_checkpoint(path, {p.name: p.value for p in self.parameters()}, self.config_dict())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        enc_names = {p.name for p in self.encoder.parameters()}
        self.encoder.load_state_dict({k: v for k, v in state.items() if k in enc_names})
        self.net.load_state_dict({k: v for k, v in state.items() if k not in enc_names})

    # -- sample preparation -------------------------------------------------

    def condition_features(self, window: StateWindow) -> np.ndarray:
        """Parameter-free featurization of the canonicalized window (cacheable)."""
        parts = []
        for arm in range(self.config.arms):
            window_can, _ = canonicalize(window, None, arm)
            parts.append(self.encoder.featurize(window_can))
        return np.concatenate(parts)

    def encode_condition(self, features: np.ndarray) -> CoeffsNode:
        features = np.asarray(features, dtype=float)
        if self.config.arms == 1:
            return self.encoder.encode_features(features)
        per = features.shape[-1] // self.config.arms
        parts = [
            self.encoder.encode_features(features[..., a * per : (a + 1) * per])
            for a in range(self.config.arms)
        ]
        from .layers import concat_coeffs

        return concat_coeffs(parts)

    def _scale_positions(self, data: np.ndarray, factor: float) -> np.ndarray:
        out = np.array(data, dtype=float)
        for arm in range(self.config.arms):
            lo, hi = self.action_layout.channel_range(1, 4 * arm)
            out[..., lo:hi] *= factor
        return out

    def encode_actions(self, window: StateWindow, chunk: ActionChunk) -> np.ndarray:
        """[T, arms*13] canonical action coefficients (each arm in its own
        frame, positions rescaled by position_scale)."""
        per_arm = []
        for arm in range(self.config.arms):
            _, chunk_can = canonicalize(window, chunk, arm)
            block = encode_chunk(chunk_can)
            per_arm.append(_multi_to_arm_blocks(block, self.config.arms)[arm])
        return self._scale_positions(
            _arm_blocks_to_multi(per_arm, self.config.arms), self.config.position_scale
        )

    def decode_actions(self, window: StateWindow, coeffs: np.ndarray) -> ActionChunk:
        """Invert ``encode_actions``: decode and shift back to world frame."""
        coeffs = self._scale_positions(coeffs, 1.0 / self.config.position_scale)
        per_arm = _multi_to_arm_blocks(coeffs, self.config.arms)
        steps = None
        for arm in range(self.config.arms):
            chunk_can = decode_chunk(per_arm[arm], arms=1)
            origin = window.newest.ee[arm].position
            world = uncanonicalize(chunk_can, origin)
            if steps is None:
                steps = [[None] * self.config.arms for _ in range(world.horizon)]
            for t, step in enumerate(world.steps):
                steps[t][arm] = step[0]
        return ActionChunk(tuple(tuple(row) for row in steps))

    def prepare_sample(self, window: StateWindow, chunk: ActionChunk):
        return self.condition_features(window), self.encode_actions(window, chunk)

    # -- training ------------------------------------------------------------

    def loss(self, features, a0, rng: np.random.Generator, noise_transform=None):
        """Noise-prediction loss differentiable through encoder and denoiser."""
        from .diffusion import training_loss

        cond = self.encode_condition(np.asarray(features, dtype=float))
        return training_loss(self.net, cond, a0, self.sched, rng, noise_transform)

    # -- inference -----------------------------------------------------------

    def sample_coeffs(
        self,
        features: np.ndarray,
        rng: np.random.Generator,
        a_init: np.ndarray | None = None,
        noise_transform=None,
    ) -> np.ndarray:
        """Run the reverse sampler on encoded conditions; [B?, T, arms*13]."""
        features = np.asarray(features, dtype=float)
        with ad.no_grad():
            cond = self.encode_condition(features).node.value
        horizon = self.net.config.horizon
        lead = features.shape[:-1]
        shape = lead + (horizon, self.action_layout.total_dim)
        if self.config.sampler == "ddim":
            return ddim_sample(
                self.net, cond, self.sched, rng, steps=self.config.ddim_steps,
                shape=shape, a_init=a_init, noise_transform=noise_transform,
            )
        return ddpm_sample(
            self.net, cond, self.sched, rng,
            shape=shape, a_init=a_init, noise_transform=noise_transform,
        )

    def predict(
        self,
        windows: list[StateWindow],
        rng: np.random.Generator,
        a_init: np.ndarray | None = None,
        noise_transform=None,
    ) -> tuple[list[ActionChunk], np.ndarray]:
        """Batched chunk prediction; returns world-frame chunks and the raw
        canonical coefficients (the translation-invariant output)."""
        feats = np.stack([self.condition_features(w) for w in windows])
        coeffs = self.sample_coeffs(feats, rng, a_init=a_init, noise_transform=noise_transform)
        chunks = [self.decode_actions(w, coeffs[i]) for i, w in enumerate(windows)]
        return chunks, coeffs


def load_policy(path) -> "SphericalPolicy":
    """Instantiate a policy (spherical or baseline) from a checkpoint file."""
    header, state = load_checkpoint(path)
    cfg = header["config"]
    rng = np.random.default_rng(0)  # shapes only; values overwritten
    if cfg["kind"] == "sdp":
        policy = SphericalPolicy(
            PolicyConfig.from_dict(cfg["policy"]),
            EncoderConfig.from_dict(cfg["encoder"]),
            SDTUConfig.from_dict(cfg["net"]),
            rng,
        )
    elif cfg["kind"] == "baseline":
        from .baseline import BaselineConfig, BaselinePolicy

        policy = BaselinePolicy(
            PolicyConfig.from_dict(cfg["policy"]),
            EncoderConfig.from_dict(cfg["encoder"]),
            BaselineConfig.from_dict(cfg["net"]),
            rng,
        )
    else:
        raise ValueError(f"unknown checkpoint kind {cfg['kind']!r}")
    policy.load_state(state)
    return policy
