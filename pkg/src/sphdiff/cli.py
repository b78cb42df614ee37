"""Command-line entry point.

Subcommands: verify-equivariance, gen-demos, train, eval, ablate.
Exit codes: 0 success, 1 check/run failure, 2 usage or configuration error.
All run state lands under --out; every run writes its resolved flat config
plus a content hash next to its outputs.  SPHDIFF_THREADS caps evaluation
parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench
from .autodiff import config_hash
from .baseline import BaselineConfig, BaselinePolicy
from .encoder import EncoderConfig
from .policy import PolicyConfig, SphericalPolicy, load_policy
from .unet import SDTUConfig

USAGE_ERROR = 2
RUN_FAILURE = 1


class ConfigError(Exception):
    pass


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "task.translation_radius_min": 0.18,
    "task.translation_radius_max": 0.45,
    "task.rotation_set": "identity",
    "task.sigma_pcd": 0.005,
    "task.episode_len": 16,
    "policy.kind": "sdp",
    "policy.arms": 1,
    "policy.history": 2,
    "policy.action_horizon": 8,
    "policy.sampler": "ddim",
    "policy.ddim_steps": 8,
    "policy.diffusion_steps": 100,
    "encoder.band_limit": 2,
    "encoder.radial_bins": 8,
    "encoder.radial_cutoff": 1.0,
    "encoder.hidden_widths": [16, 16],
    "encoder.out_channels": 12,
    "net.band_limit": 2,
    "net.horizon": 16,
    "net.widths": [8, 16, 32],
    "net.kernel_size": 5,
    "net.activation": "gate",
    "net.grid_oversample": 3,
    "net.timestep_embed_dim": 16,
    "baseline.widths": [40, 80, 160],
    "baseline.cond_dim": 96,
    "baseline.encoder_widths": [128, 128],
    "train.epochs": 60,
    "train.batch_size": 32,
    "train.learning_rate": 3e-4,
    "train.warmup_steps": 100,
    "train.sample_times": [0, 4, 8, 12],
    "eval.pos_threshold": 0.02,
    "eval.rot_threshold_deg": 10.0,
}


def load_config(path: str | None) -> dict:
    """Resolve the flat key-value run config against defaults; unknown keys
    are rejected with their key path."""
    resolved = dict(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config {path}: {e}")
        if not isinstance(user, dict):
            raise ConfigError(f"config root must be an object, got {type(user).__name__}")
        for key, value in user.items():
            if key not in resolved:
                raise ConfigError(f"unknown config key: {key}")
            default = resolved[key]
            if isinstance(default, bool) or isinstance(value, bool):
                raise ConfigError(f"bad type for {key}")
            if isinstance(default, (int, float)) and not isinstance(value, (int, float)):
                raise ConfigError(f"bad type for {key}: expected number, got {type(value).__name__}")
            if isinstance(default, str) and not isinstance(value, str):
                raise ConfigError(f"bad type for {key}: expected string, got {type(value).__name__}")
            if isinstance(default, list) and not isinstance(value, list):
                raise ConfigError(f"bad type for {key}: expected list, got {type(value).__name__}")
            resolved[key] = value
    return resolved


def build_task_spec(cfg: dict) -> bench.TaskSpec:
    return bench.default_task_spec(
        translation_radius=(cfg["task.translation_radius_min"], cfg["task.translation_radius_max"]),
        rotation_set=cfg["task.rotation_set"],
        sigma_pcd=cfg["task.sigma_pcd"],
        episode_len=cfg["task.episode_len"],
    )


def build_policy(cfg: dict, rng: np.random.Generator):
    pcfg = PolicyConfig(
        arms=cfg["policy.arms"],
        history=cfg["policy.history"],
        action_horizon=cfg["policy.action_horizon"],
        sampler=cfg["policy.sampler"],
        ddim_steps=cfg["policy.ddim_steps"],
        diffusion_steps=cfg["policy.diffusion_steps"],
    )
    ecfg = EncoderConfig(
        band_limit=cfg["encoder.band_limit"],
        radial_bins=cfg["encoder.radial_bins"],
        radial_cutoff=cfg["encoder.radial_cutoff"],
        hidden_widths=tuple(cfg["encoder.hidden_widths"]),
        out_channels=cfg["encoder.out_channels"],
    )
    if cfg["policy.kind"] == "sdp":
        ncfg = SDTUConfig(
            band_limit=cfg["net.band_limit"],
            horizon=cfg["net.horizon"],
            widths=tuple(cfg["net.widths"]),
            kernel_size=cfg["net.kernel_size"],
            arms=cfg["policy.arms"],
            activation=cfg["net.activation"],
            grid_oversample=cfg["net.grid_oversample"],
            timestep_embed_dim=cfg["net.timestep_embed_dim"],
        )
        return SphericalPolicy(pcfg, ecfg, ncfg, rng)
    if cfg["policy.kind"] == "baseline":
        bcfg = BaselineConfig(
            horizon=cfg["net.horizon"],
            widths=tuple(cfg["baseline.widths"]),
            kernel_size=cfg["net.kernel_size"],
            arms=cfg["policy.arms"],
            cond_dim=cfg["baseline.cond_dim"],
            encoder_widths=tuple(cfg["baseline.encoder_widths"]),
            timestep_embed_dim=cfg["net.timestep_embed_dim"],
        )
        return BaselinePolicy(pcfg, ecfg, bcfg, rng)
    raise ConfigError(f"unknown policy.kind: {cfg['policy.kind']}")


def max_workers() -> int:
    raw = os.environ.get("SPHDIFF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SPHDIFF_THREADS must be an integer, got {raw!r}")


class OutputDir:
    """Output directory with a single-instance lockfile."""

    def __init__(self, path: str):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.lock = self.path / ".sphdiff.lock"
        self._fd = None

    def __enter__(self) -> Path:
        try:
            self._fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"output directory {self.path} is locked by another run "
                f"(remove {self.lock} if stale)"
            )
        os.write(self._fd, str(os.getpid()).encode())
        return self.path

    def __exit__(self, *exc):
        if self._fd is not None:
            os.close(self._fd)
            self.lock.unlink(missing_ok=True)
        return False


def write_resolved_config(out: Path, cfg: dict) -> str:
    digest = config_hash(cfg)
    with open(out / "config.json", "w") as fh:
        json.dump({"config": cfg, "config_hash": digest}, fh, indent=2, sort_keys=True)
    return digest


# ---------------------------------------------------------------------------
# subcommands


def cmd_verify(args) -> int:
    from .verify import run_suite

    records = run_suite(trials=args.trials, tolerance=args.tolerance)
    ok = all(r["passed"] for r in records)
    report = {"all_passed": ok, "checks": records}
    text = json.dumps(report, indent=2)
    if args.out:
        with OutputDir(args.out) as out:
            (out / "equivariance_report.json").write_text(text)
    print(text)
    return 0 if ok else RUN_FAILURE


def cmd_gen_demos(args) -> int:
    cfg = load_config(args.config)
    if args.spec:
        try:
            with open(args.spec) as fh:
                spec = bench.TaskSpec.from_dict(json.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"spec file not found: {args.spec}")
    else:
        spec = build_task_spec(cfg)
    rng = np.random.default_rng(args.seed)
    episodes = bench.gen_demos(spec, args.n, rng)
    bench.save_dataset(args.out, episodes)
    print(f"wrote {len(episodes)} episodes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        episodes = bench.load_dataset(args.data)
    except FileNotFoundError:
        raise ConfigError(f"dataset not found: {args.data}")
    with OutputDir(args.out) as out:
        digest = write_resolved_config(out, cfg)
        rng = np.random.default_rng(cfg["seed"])
        policy = build_policy(cfg, rng)
        tcfg = bench.TrainConfig(
            epochs=cfg["train.epochs"],
            batch_size=cfg["train.batch_size"],
            learning_rate=cfg["train.learning_rate"],
            warmup_steps=cfg["train.warmup_steps"],
            seed=cfg["seed"],
            sample_times=tuple(cfg["train.sample_times"]),
        )
        rows = bench.train(policy, episodes, tcfg)
        (out / "loss.csv").write_text(bench.loss_curve_csv(rows))
        policy.save(out / "checkpoint.json")
        print(
            f"trained {cfg['policy.kind']} ({policy.param_count()} params) "
            f"for {tcfg.epochs} epochs; final loss {rows[-1]['loss']:.4f}; "
            f"config hash {digest}"
        )
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        policy = load_policy(args.ckpt)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {args.ckpt}")
    spec = build_task_spec(cfg)
    with OutputDir(args.out) as out:
        digest = write_resolved_config(out, cfg)
        report, rows = bench.evaluate(
            policy,
            spec,
            args.rollouts,
            args.rotations,
            seed=cfg["seed"],
            pos_threshold=cfg["eval.pos_threshold"],
            rot_threshold_deg=cfg["eval.rot_threshold_deg"],
            max_workers=max_workers(),
        )
        report.config_hash = digest
        (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2))
        (out / "eval.csv").write_text(bench.eval_rows_csv(rows))
        print(
            f"{args.rotations}: success {report.success_rate:.3f} over {args.rollouts} rollouts "
            f"(pos {report.mean_final_pos_err:.4f}, rot {report.mean_rot_err_deg:.2f} deg)"
        )
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    which = args.which
    if which == "baseline":
        cfg["policy.kind"] = "baseline"
    elif which.startswith("degree:"):
        L = int(which.split(":", 1)[1])
        cfg["net.band_limit"] = L
        cfg["encoder.band_limit"] = L
    elif which == "abs-action":
        pass  # handled below by swapping the canonicalization off
    else:
        raise ConfigError(f"unknown ablation {which!r}")

    spec = build_task_spec(cfg)
    with OutputDir(args.out) as out:
        digest = write_resolved_config(out, cfg)
        rng = np.random.default_rng(cfg["seed"])
        demo_rng = np.random.default_rng(cfg["seed"] + 1)
        episodes = bench.gen_demos(spec, args.demos, demo_rng)
        policy = build_policy(cfg, rng)
        if which == "abs-action":
            _disable_canonicalization(policy)
        tcfg = bench.TrainConfig(
            epochs=cfg["train.epochs"],
            batch_size=cfg["train.batch_size"],
            learning_rate=cfg["train.learning_rate"],
            warmup_steps=cfg["train.warmup_steps"],
            seed=cfg["seed"],
            sample_times=tuple(cfg["train.sample_times"]),
        )
        rows = bench.train(policy, episodes, tcfg)
        (out / "loss.csv").write_text(bench.loss_curve_csv(rows))
        results = {}
        for rotation_set in ("identity", "haar"):
            report, eval_rows = bench.evaluate(
                policy,
                spec,
                args.rollouts,
                rotation_set,
                seed=cfg["seed"],
                pos_threshold=cfg["eval.pos_threshold"],
                rot_threshold_deg=cfg["eval.rot_threshold_deg"],
                max_workers=max_workers(),
            )
            report.config_hash = digest
            results[rotation_set] = report.to_dict()
            (out / f"eval_{rotation_set}.csv").write_text(bench.eval_rows_csv(eval_rows))
        (out / "ablation.json").write_text(
            json.dumps({"which": which, "results": results}, indent=2)
        )
        print(
            f"ablation {which}: identity {results['identity']['success_rate']:.3f}, "
            f"haar {results['haar']['success_rate']:.3f}"
        )
    return 0


def _disable_canonicalization(policy) -> None:
    """Absolute-action ablation: skip the gripper-frame recentering."""
    from .canonical import ActionChunk, StateWindow

    def condition_features(window: StateWindow):
        from .encoder import featurize_window

        return np.concatenate(
            [featurize_window(window, policy.encoder.config if hasattr(policy, "encoder") else policy.encoder_config)]
            * policy.config.arms
        )

    def encode_actions(window: StateWindow, chunk: ActionChunk):
        from .canonical import encode_chunk

        return encode_chunk(chunk)

    def decode_actions(window: StateWindow, coeffs):
        from .canonical import decode_chunk

        return decode_chunk(np.asarray(coeffs, dtype=float), arms=policy.config.arms)

    policy.condition_features = condition_features
    policy.encode_actions = encode_actions
    policy.decode_actions = decode_actions


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sphdiff",
        description="Rotation-equivariant diffusion policy toolkit and benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-equivariance", help="run the invariant suite")
    p.add_argument("--trials", type=int, default=None, help="override per-check trial counts")
    p.add_argument("--tolerance", type=float, default=None, help="override all tolerances")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="optionally write the JSON report here")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("gen-demos", help="generate expert demonstrations")
    p.add_argument("--spec", default=None, help="task spec JSON (defaults from config)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_gen_demos)

    p = sub.add_parser("train", help="train a policy on a demo dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rotations", default="haar", help="identity | haar | tilt:<deg>")
    p.add_argument("--rollouts", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train+eval an ablation variant")
    p.add_argument("--which", required=True, help="baseline | degree:1 | degree:3 | abs-action")
    p.add_argument("--demos", type=int, default=200)
    p.add_argument("--rollouts", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
