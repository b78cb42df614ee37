"""Non-equivariant reference policy with a matched parameter budget.

Same temporal U-net topology and training interface as the spherical policy,
but with the per-degree structure erased: every coefficient is an anonymous
channel mixed by dense maps, conditioning is standard FiLM (per-channel scale
and shift), and the scene features pass through a plain dense MLP.  Rotating
the scene moves its inputs off the training distribution, which is the point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter, save_checkpoint
from .canonical import StateWindow, canonicalize, ee_layout
from .diffusion import NoiseSchedule, ddim_sample, ddpm_sample, make_schedule, training_loss
from .encoder import EncoderConfig, featurize_window
from .policy import PolicyConfig, SphericalPolicy
from .unet import timestep_embedding


@dataclass(frozen=True)
class BaselineConfig:
    horizon: int = 16
    widths: tuple[int, ...] = (32, 64, 128)
    kernel_size: int = 5
    arms: int = 1
    cond_dim: int = 64
    encoder_widths: tuple[int, ...] = (96, 96)
    timestep_embed_dim: int = 16

    def __post_init__(self):
        if self.horizon % 2 ** (len(self.widths) - 1) != 0:
            raise ValueError("horizon must be divisible by 2^(levels-1)")

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "widths": list(self.widths),
            "kernel_size": self.kernel_size,
            "arms": self.arms,
            "cond_dim": self.cond_dim,
            "encoder_widths": list(self.encoder_widths),
            "timestep_embed_dim": self.timestep_embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["encoder_widths"] = tuple(d["encoder_widths"])
        return cls(**d)


def _dense(prefix: str, n_in: int, n_out: int, rng: np.random.Generator):
    w = Parameter(f"{prefix}.w", rng.standard_normal((n_out, n_in)) / np.sqrt(n_in))
    b = Parameter(f"{prefix}.b", np.zeros(n_out))
    return w, b


def _apply_dense(x: Node, w: Parameter, b: Parameter) -> Node:
    h = ad.channel_mix(ad.reshape(x, x.value.shape + (1,)), w)
    h = ad.add(h, ad.reshape(b, (b.value.shape[0], 1)))
    return ad.reshape(h, x.value.shape[:-1] + (w.value.shape[0],))


class DenseFiLMUNet:
    """Plain 1D temporal U-net: dense-channel convs, FiLM conditioning."""

    def __init__(self, config: BaselineConfig, cond_dim: int, rng: np.random.Generator):
        self.config = config
        self.feature_dim = ee_layout(config.arms).total_dim
        self.cond_dim = cond_dim + config.timestep_embed_dim
        self.params: list[Parameter] = []
        k = config.kernel_size

        def conv(prefix, c_in, c_out):
            w = Parameter(f"{prefix}.w", rng.standard_normal((k, c_in, c_out)) / np.sqrt(k * c_in))
            b = Parameter(f"{prefix}.b", np.zeros(c_out))
            self.params += [w, b]
            return w, b

        def film(prefix, c_out):
            wg, bg = _dense(f"{prefix}.scale", self.cond_dim, c_out, rng)
            wb, bb = _dense(f"{prefix}.shift", self.cond_dim, c_out, rng)
            self.params += [wg, bg, wb, bb]
            return wg, bg, wb, bb

        def block(prefix, c_in, c_out):
            entry = {"conv": conv(f"{prefix}.conv", c_in, c_out), "film": film(f"{prefix}.film", c_out)}
            if c_in != c_out:
                w = Parameter(f"{prefix}.skip.w", rng.standard_normal((c_out, c_in)) / np.sqrt(c_in))
                self.params.append(w)
                entry["skip"] = w
            return entry

        widths = config.widths
        self.down = []
        c_prev = self.feature_dim
        for i, w in enumerate(widths):
            lvl = {
                "b1": block(f"down{i}.b1", c_prev, w),
                "b2": block(f"down{i}.b2", w, w),
                "pool": conv(f"down{i}.pool", w, w) if i < len(widths) - 1 else None,
            }
            self.down.append(lvl)
            c_prev = w
        self.up = []
        for i in range(len(widths) - 2, -1, -1):
            w_deep, w = widths[i + 1], widths[i]
            wup = Parameter(
                f"up{i}.unpool.w",
                rng.standard_normal((k, w_deep, w_deep)) / np.sqrt(k * w_deep),
            )
            self.params.append(wup)
            self.up.append(
                {
                    "unpool": wup,
                    "b1": block(f"up{i}.b1", w_deep + w, w),
                    "b2": block(f"up{i}.b2", w, w),
                }
            )
        self.final = conv("final", widths[0], self.feature_dim)

    def parameters(self) -> list[Parameter]:
        return list(self.params)

    def _conv(self, x: Node, wb, stride=1) -> Node:
        w, b = wb
        h = ad.time_conv(x, w, stride)
        return ad.add(h, ad.reshape(b, (b.value.shape[0], 1)))

    def _block(self, x: Node, cond: Node, entry) -> Node:
        h = self._conv(x, entry["conv"])
        wg, bg, wb, bb = entry["film"]
        gamma = _apply_dense(cond, wg, bg)
        beta = _apply_dense(cond, wb, bb)
        lead = gamma.value.shape[:-1]
        c = gamma.value.shape[-1]
        gamma = ad.reshape(gamma, lead + (1, c, 1))
        beta = ad.reshape(beta, lead + (1, c, 1))
        h = ad.add(ad.mul(h, ad.add(gamma, Node(np.ones(())))), beta)
        h = ad.silu(h)
        short = x if "skip" not in entry else ad.channel_mix(x, entry["skip"])
        return ad.add(h, short)

    def forward(self, cond: Node, a_noisy, k) -> Node:
        a = ad.as_node(a_noisy)
        if a.value.shape[-2] != self.config.horizon:
            raise ValueError(f"horizon mismatch: {a.value.shape[-2]} vs {self.config.horizon}")
        embed = timestep_embedding(k, self.config.timestep_embed_dim)
        embed = np.broadcast_to(embed, cond.value.shape[:-1] + (self.config.timestep_embed_dim,))
        cond_full = ad.concat_last([cond, Node(embed)])
        # [.., T, F] -> [.., T, F, 1] channel form
        x = ad.reshape(a, a.value.shape + (1,))
        skips = []
        for lvl in self.down:
            x = self._block(x, cond_full, lvl["b1"])
            x = self._block(x, cond_full, lvl["b2"])
            if lvl["pool"] is not None:
                skips.append(x)
                x = self._conv(x, lvl["pool"], stride=2)
        for lvl in self.up:
            x = ad.time_conv_transpose(x, lvl["unpool"], stride=2)
            skip = skips.pop()
            # concat channels (axis -2): flatten trailing singleton first
            x = ad.reshape(
                ad.concat_last(
                    [
                        ad.reshape(x, x.value.shape[:-2] + (x.value.shape[-2],)),
                        ad.reshape(skip, skip.value.shape[:-2] + (skip.value.shape[-2],)),
                    ]
                ),
                x.value.shape[:-2] + (x.value.shape[-2] + skip.value.shape[-2], 1),
            )
            x = self._block(x, cond_full, lvl["b1"])
            x = self._block(x, cond_full, lvl["b2"])
        out = self._conv(x, self.final)
        return ad.reshape(out, out.value.shape[:-1])

    def __call__(self, cond_data: np.ndarray, a_data: np.ndarray, k) -> np.ndarray:
        with ad.no_grad():
            return self.forward(Node(np.asarray(cond_data, dtype=float)), a_data, k).value


class BaselinePolicy:
    """Identical training and evaluation interface to the spherical policy."""

    kind = "baseline"

    def __init__(
        self,
        config: PolicyConfig,
        encoder_config: EncoderConfig,
        net_config: BaselineConfig,
        rng: np.random.Generator,
    ):
        self.config = config
        self.encoder_config = encoder_config
        self.net_config = net_config
        self.action_layout = ee_layout(config.arms)
        feat_dim = _feature_dim(encoder_config, config.history, config.arms) * config.arms
        self.enc_params: list[tuple[Parameter, Parameter]] = []
        n_in = feat_dim
        for i, w in enumerate(net_config.encoder_widths):
            self.enc_params.append(_dense(f"enc.l{i}", n_in, w, rng))
            n_in = w
        self.enc_params.append(_dense("enc.out", n_in, net_config.cond_dim, rng))
        self.net = DenseFiLMUNet(net_config, net_config.cond_dim, rng)
        self.sched: NoiseSchedule = make_schedule(config.diffusion_steps)

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in self.enc_params:
            out += [w, b]
        return out + self.net.parameters()

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def config_dict(self) -> dict:
        return {
            "kind": self.kind,
            "policy": self.config.to_dict(),
            "encoder": self.encoder_config.to_dict(),
            "net": self.net_config.to_dict(),
        }

    def save(self, path) -> None:
        save_checkpoint(path, {p.name: p.value for p in self.parameters()}, self.config_dict())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        if set(params) != set(state):
            raise ValueError("checkpoint parameter names do not match baseline policy")
        for name, p in params.items():
            p.assign(state[name])

    # -- shared interface --------------------------------------------------

    def condition_features(self, window: StateWindow) -> np.ndarray:
        parts = []
        for arm in range(self.config.arms):
            window_can, _ = canonicalize(window, None, arm)
            parts.append(featurize_window(window_can, self.encoder_config))
        return np.concatenate(parts)

    def encode_condition(self, features: np.ndarray) -> Node:
        x = ad.as_node(np.asarray(features, dtype=float))
        for i, (w, b) in enumerate(self.enc_params):
            x = _apply_dense(x, w, b)
            if i < len(self.enc_params) - 1:
                x = ad.silu(x)
        return x

    _scale_positions = SphericalPolicy._scale_positions
    encode_actions = SphericalPolicy.encode_actions
    decode_actions = SphericalPolicy.decode_actions
    prepare_sample = SphericalPolicy.prepare_sample

    def loss(self, features, a0, rng, noise_transform=None):
        cond = self.encode_condition(features)
        return training_loss(self.net, cond, a0, self.sched, rng, noise_transform)

    def sample_coeffs(self, features, rng, a_init=None, noise_transform=None) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        with ad.no_grad():
            cond = self.encode_condition(features).value
        shape = features.shape[:-1] + (self.net_config.horizon, self.action_layout.total_dim)
        if self.config.sampler == "ddim":
            return ddim_sample(
                self.net, cond, self.sched, rng, steps=self.config.ddim_steps,
                shape=shape, a_init=a_init, noise_transform=noise_transform,
            )
        return ddpm_sample(
            self.net, cond, self.sched, rng, shape=shape, a_init=a_init,
            noise_transform=noise_transform,
        )

    predict = SphericalPolicy.predict


def _feature_dim(config: EncoderConfig, history: int, arms: int) -> int:
    from .encoder import POINT_COMPONENTS

    scene = history * config.radial_bins * POINT_COMPONENTS * (config.band_limit + 1) ** 2
    return scene + history * ee_layout(arms).total_dim
