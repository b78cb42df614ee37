"""Executable invariant suite: every check returns a record with its measured
worst-case error and tolerance.  The CLI's verify-equivariance command and the
acceptance tests both run these.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import bench, layers as ly
from .canonical import (
    EndEffectorState,
    SceneObservation,
    StateSnapshot,
    StateWindow,
    encode_ee,
)
from .diffusion import ddim_sample, ddpm_sample, make_schedule
from .encoder import EncoderConfig, SceneEncoder, embed_layout, embed_points
from .layers import CoeffsNode
from .policy import PolicyConfig, SphericalPolicy
from .so3 import (
    RepLayout,
    Rotation,
    SphericalCoeffs,
    analysis,
    make_grid,
    random_rotation,
    rotate_data,
    sh_basis,
    synthesis,
    wigner_d,
)
from .unet import SDTUConfig, SphericalTemporalUNet


def _record(name: str, err: float, tol: float, trials: int) -> dict:
    return {
        "name": name,
        "max_err": float(err),
        "tolerance": float(tol),
        "trials": int(trials),
        "passed": bool(err <= tol),
    }


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(a - b)) / scale)


# ---------------------------------------------------------------------------
# so3 core


def check_wigner_composition(trials: int = 1000, max_degree: int = 4, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(trials):
        r1, r2 = random_rotation(rng), random_rotation(rng)
        r12 = r1 @ r2
        for l in range(max_degree + 1):
            d = wigner_d(l, r1) @ wigner_d(l, r2) - wigner_d(l, r12)
            err = max(err, float(np.max(np.abs(d))))
    return _record("so3.wigner_composition", err, 1e-9, trials)


def check_wigner_orthogonality(trials: int = 1000, max_degree: int = 4, seed: int = 1) -> dict:
    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(trials):
        r = random_rotation(rng)
        for l in range(max_degree + 1):
            d = wigner_d(l, r)
            err = max(err, float(np.max(np.abs(d.T @ d - np.eye(2 * l + 1)))))
    return _record("so3.wigner_orthogonality", err, 1e-10, trials)


def check_sh_rotation_identity(trials: int = 200, max_degree: int = 4, seed: int = 2) -> dict:
    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(trials):
        r = random_rotation(rng)
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        y_u = sh_basis(max_degree, u)
        y_ru = sh_basis(max_degree, r.apply(u))
        for l in range(max_degree + 1):
            lo, hi = l * l, (l + 1) * (l + 1)
            err = max(err, float(np.max(np.abs(y_ru[lo:hi] - wigner_d(l, r) @ y_u[lo:hi]))))
    return _record("so3.sh_rotation_identity", err, 1e-9, trials)


def check_grid_gram(max_degree: int = 4, oversample: int = 1) -> dict:
    grid = make_grid(max_degree, oversample)
    y = grid.sh_matrix(max_degree)
    gram = (y * grid.weights[:, None]).T @ y
    err = float(np.max(np.abs(gram - np.eye((max_degree + 1) ** 2))))
    return _record("so3.grid_gram_identity", err, 1e-10, 1)


def check_fourier_round_trip(trials: int = 20, seed: int = 3) -> dict:
    rng = np.random.default_rng(seed)
    grid = make_grid(4, 2)
    err = 0.0
    for _ in range(trials):
        x = SphericalCoeffs(RepLayout.single(2), rng.standard_normal(9))
        back = analysis(synthesis(x, grid), grid, 2)
        err = max(err, float(np.max(np.abs(back.data - x.data))))
    return _record("so3.fourier_round_trip", err, 1e-10, trials)


def check_rotate_norm_preservation(trials: int = 100, seed: int = 4) -> dict:
    rng = np.random.default_rng(seed)
    layout = RepLayout.uniform(4, 3)
    err = 0.0
    for _ in range(trials):
        data = rng.standard_normal(layout.total_dim)
        rot = rotate_data(data, layout, random_rotation(rng))
        for l, c in layout.entries:
            for ch in range(c):
                lo, hi = layout.channel_range(l, ch)
                err = max(
                    err,
                    abs(np.linalg.norm(rot[lo:hi]) - np.linalg.norm(data[lo:hi])),
                )
    return _record("so3.rotate_norm_preservation", err, 1e-10, trials)


# ---------------------------------------------------------------------------
# layers


def _layer_setup(seed: int):
    rng = np.random.default_rng(seed)
    lay_in = RepLayout.uniform(2, 3)
    lay_out = RepLayout.uniform(2, 4)
    x = CoeffsNode(lay_in, ad.Node(rng.standard_normal((6, lay_in.total_dim))))
    return rng, lay_in, lay_out, x


def check_spherical_linear_equivariance(trials: int = 100, seed: int = 5) -> dict:
    rng, lay_in, lay_out, x = _layer_setup(seed)
    p = ly.spherical_linear_params("v.lin", lay_in, lay_out, rng)
    err = 0.0
    for _ in range(trials):
        r = random_rotation(rng)
        lhs = ly.spherical_linear(ly.rotate(x, r), p).node.value
        rhs = ly.rotate(ly.spherical_linear(x, p), r).node.value
        err = max(err, _rel(lhs, rhs))
    return _record("layers.spherical_linear_equivariance", err, 1e-12, trials)


def check_mctc_equivariance(trials: int = 100, seed: int = 6) -> dict:
    rng, lay_in, lay_out, x = _layer_setup(seed)
    p = ly.mctc_params("v.conv", lay_in, lay_out, rng, kernel_size=5, stride=2)
    err = 0.0
    for _ in range(trials):
        r = random_rotation(rng)
        lhs = ly.mctc(ly.rotate(x, r), p).node.value
        rhs = ly.rotate(ly.mctc(x, p), r).node.value
        err = max(err, _rel(lhs, rhs))
    return _record("layers.mctc_equivariance", err, 1e-12, trials)


def check_sfilm_equivariance(trials: int = 100, seed: int = 7) -> dict:
    rng, _, hidden, x = _layer_setup(seed)
    x = CoeffsNode(hidden, ad.Node(np.random.default_rng(seed + 1).standard_normal((6, hidden.total_dim))))
    cond_lay = RepLayout.uniform(2, 5)
    cond = CoeffsNode(cond_lay, ad.Node(rng.standard_normal(cond_lay.total_dim)))
    p = ly.sfilm_params("v.film", cond_lay, hidden, rng)
    err = 0.0
    for _ in range(trials):
        r = random_rotation(rng)
        lhs = ly.sfilm(ly.rotate(x, r), ly.rotate(cond, r), p).node.value
        rhs = ly.rotate(ly.sfilm(x, cond, p), r).node.value
        err = max(err, _rel(lhs, rhs))
    return _record("layers.sfilm_equivariance", err, 1e-12, trials)


def check_gate_equivariance(trials: int = 100, seed: int = 8) -> dict:
    rng = np.random.default_rng(seed)
    lay = ly.gate_layout(RepLayout.uniform(2, 4))
    x = CoeffsNode(lay, ad.Node(rng.standard_normal((6, lay.total_dim))))
    err = 0.0
    for _ in range(trials):
        r = random_rotation(rng)
        lhs = ly.gate_activation(ly.rotate(x, r)).node.value
        rhs = ly.rotate(ly.gate_activation(x), r).node.value
        err = max(err, _rel(lhs, rhs))
    return _record("layers.gate_equivariance", err, 1e-12, trials)


def check_grid_activation_equivariance(
    trials: int = 20, oversample: int = 2, seed: int = 9
) -> dict:
    rng = np.random.default_rng(seed)
    lay = RepLayout.uniform(2, 3)
    grid = make_grid(2, oversample)
    x = CoeffsNode(lay, ad.Node(rng.standard_normal((4, lay.total_dim))))
    err = 0.0
    for _ in range(trials):
        r = random_rotation(rng)
        lhs = ly.spherical_activation(ly.rotate(x, r), grid, "silu").node.value
        rhs = ly.rotate(ly.spherical_activation(x, grid, "silu"), r).node.value
        err = max(err, _rel(lhs, rhs))
    tol = 1e-2 if oversample == 2 else 1e-3
    return _record(f"layers.grid_activation_equivariance_ov{oversample}", err, tol, trials)


def check_mctc_adjoint(trials: int = 50, seed: int = 10) -> dict:
    rng = np.random.default_rng(seed)
    lay_in = RepLayout.uniform(2, 3)
    lay_out = RepLayout.uniform(2, 4)
    err = 0.0
    for _ in range(trials):
        p = ly.mctc_params("v.adj", lay_in, lay_out, rng, kernel_size=5, stride=2, bias=False)
        x = CoeffsNode(lay_in, ad.Node(rng.standard_normal((8, lay_in.total_dim))))
        y = CoeffsNode(lay_out, ad.Node(rng.standard_normal((4, lay_out.total_dim))))
        lhs = float(np.sum(ly.mctc(x, p).node.value * y.node.value))
        rhs = float(np.sum(x.node.value * ly.mctc_transposed(y, p).node.value))
        err = max(err, abs(lhs - rhs) / max(abs(rhs), 1e-30))
    return _record("layers.mctc_adjoint", err, 1e-10, trials)


# ---------------------------------------------------------------------------
# denoiser and samplers


def _small_net(seed: int, activation: str = "gate"):
    rng = np.random.default_rng(seed)
    cfg = SDTUConfig(
        horizon=8, widths=(4, 8), activation=activation, timestep_embed_dim=8
    )
    cond_lay = RepLayout.uniform(2, 4)
    net = SphericalTemporalUNet(cfg, cond_lay, rng)
    return rng, cfg, cond_lay, net


def check_sdtu_equivariance(trials: int = 50, seed: int = 11) -> dict:
    rng, cfg, cond_lay, net = _small_net(seed)
    err = 0.0
    for _ in range(trials):
        cond = rng.standard_normal(cond_lay.total_dim)
        a = rng.standard_normal((cfg.horizon, net.action_layout.total_dim))
        r = random_rotation(rng)
        lhs = net(rotate_data(cond, cond_lay, r), rotate_data(a, net.action_layout, r), 3)
        rhs = rotate_data(net(cond, a, 3), net.action_layout, r)
        err = max(err, _rel(lhs, rhs))
    return _record("sdtu.equivariance", err, 1e-10, trials)


def check_sampler_equivariance(trials: int = 3, sampler: str = "ddpm", seed: int = 12) -> dict:
    rng, cfg, cond_lay, net = _small_net(seed)
    sched = make_schedule(100)
    err = 0.0
    for t in range(trials):
        cond = rng.standard_normal(cond_lay.total_dim)
        r = random_rotation(rng)
        shape = (cfg.horizon, net.action_layout.total_dim)
        transform = lambda z: rotate_data(z, net.action_layout, r)
        if sampler == "ddpm":
            base = ddpm_sample(net, cond, sched, np.random.default_rng(100 + t), shape=shape)
            rot = ddpm_sample(
                net, rotate_data(cond, cond_lay, r), sched,
                np.random.default_rng(100 + t), shape=shape, noise_transform=transform,
            )
        else:
            base = ddim_sample(net, cond, sched, np.random.default_rng(100 + t), steps=8, shape=shape)
            rot = ddim_sample(
                net, rotate_data(cond, cond_lay, r), sched,
                np.random.default_rng(100 + t), steps=8, shape=shape, noise_transform=transform,
            )
        err = max(err, _rel(rot, rotate_data(base, net.action_layout, r)))
    return _record(f"diffusion.{sampler}_paired_noise_equivariance", err, 1e-8, trials)


# ---------------------------------------------------------------------------
# canonicalization and encoder


def _random_window(rng: np.random.Generator, n_points: int = 24) -> StateWindow:
    obs = SceneObservation(
        rng.uniform(-0.4, 0.4, (n_points, 3)), rng.uniform(0.0, 1.0, (n_points, 3))
    )
    snaps = []
    for _ in range(2):
        ee = EndEffectorState(rng.uniform(-0.2, 0.2, 3), random_rotation(rng), rng.uniform(0, 1))
        snaps.append(StateSnapshot(obs, (ee,)))
    return StateWindow(tuple(snaps))


def check_encode_ee_equivariance(trials: int = 100, seed: int = 13) -> dict:
    from .canonical import ee_layout

    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(trials):
        e = EndEffectorState(rng.uniform(-0.3, 0.3, 3), random_rotation(rng), rng.uniform(0, 1))
        g = random_rotation(rng)
        lhs = encode_ee(e.rotated(g))
        rhs = rotate_data(encode_ee(e), ee_layout(1), g)
        err = max(err, float(np.max(np.abs(lhs - rhs))))
    return _record("canonical.encode_equivariance", err, 1e-12, trials)


def check_embed_points_equivariance(trials: int = 25, seed: int = 14) -> dict:
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig()
    err = 0.0
    for _ in range(trials):
        obs = SceneObservation(rng.uniform(-0.4, 0.4, (20, 3)), rng.uniform(0, 1, (20, 3)))
        g = random_rotation(rng)
        lhs = embed_points(obs.rotated(g), cfg)
        rhs = rotate_data(embed_points(obs, cfg), embed_layout(cfg), g)
        err = max(err, _rel(lhs, rhs))
    return _record("encoder.embed_points_equivariance", err, 1e-10, trials)


def check_encode_scene_equivariance(trials: int = 10, seed: int = 15) -> dict:
    rng = np.random.default_rng(seed)
    enc = SceneEncoder(EncoderConfig(hidden_widths=(8, 8), out_channels=6), 2, 1, rng)
    err = 0.0
    for _ in range(trials):
        window = _random_window(rng)
        g = random_rotation(rng)
        lhs = enc.encode_scene(window.rotated(g)).node.value
        rhs = rotate_data(enc.encode_scene(window).node.value, enc.output_layout, g)
        err = max(err, _rel(lhs, rhs))
    return _record("encoder.encode_scene_equivariance", err, 1e-10, trials)


def _tiny_policy(seed: int) -> SphericalPolicy:
    return SphericalPolicy(
        PolicyConfig(ddim_steps=4, diffusion_steps=20),
        EncoderConfig(radial_bins=4, hidden_widths=(6, 6), out_channels=4),
        SDTUConfig(horizon=8, widths=(4, 8), timestep_embed_dim=8),
        np.random.default_rng(seed),
    )


def check_translation_invariance(trials: int = 50, seed: int = 16) -> dict:
    """Full pipeline: translating the scene leaves sampled canonical
    coefficients unchanged (shared rng)."""
    rng = np.random.default_rng(seed)
    policy = _tiny_policy(seed)
    err = 0.0
    for t in range(trials):
        spec = bench.default_task_spec()
        ep = bench.gen_episode(spec, np.random.default_rng(1000 + t), Rotation.identity())
        window = ep.window_at(0)
        offset = rng.uniform(-5.0, 5.0, 3)
        feats = policy.condition_features(window)[None]
        feats_t = policy.condition_features(window.translated(offset))[None]
        z = np.random.default_rng(2000 + t).standard_normal(
            (1, 8, policy.action_layout.total_dim)
        )
        base = policy.sample_coeffs(feats, np.random.default_rng(0), a_init=z)
        moved = policy.sample_coeffs(feats_t, np.random.default_rng(0), a_init=z)
        err = max(err, _rel(moved, base))
    return _record("canonical.pipeline_translation_invariance", err, 1e-10, trials)


# ---------------------------------------------------------------------------
# suite


def run_suite(trials: int | None = None, tolerance: float | None = None) -> list[dict]:
    """The full invariant suite; ``trials`` scales every check's trial count,
    ``tolerance`` overrides every check's threshold."""

    def n(default: int) -> int:
        return trials if trials is not None else default

    records = [
        check_wigner_composition(n(1000)),
        check_wigner_orthogonality(n(1000)),
        check_sh_rotation_identity(n(200)),
        check_grid_gram(),
        check_fourier_round_trip(n(20)),
        check_rotate_norm_preservation(n(100)),
        check_spherical_linear_equivariance(n(100)),
        check_mctc_equivariance(n(100)),
        check_sfilm_equivariance(n(100)),
        check_gate_equivariance(n(100)),
        check_grid_activation_equivariance(n(20), oversample=2),
        check_grid_activation_equivariance(n(20), oversample=3),
        check_mctc_adjoint(n(50)),
        check_sdtu_equivariance(n(50)),
        check_sampler_equivariance(n(3), "ddpm"),
        check_sampler_equivariance(n(3), "ddim"),
        check_encode_ee_equivariance(n(100)),
        check_embed_points_equivariance(n(25)),
        check_encode_scene_equivariance(n(10)),
        check_translation_invariance(n(50)),
    ]
    if tolerance is not None:
        for r in records:
            r["tolerance"] = tolerance
            r["passed"] = r["max_err"] <= tolerance
    return records
