"""Synthetic reach-and-orient imitation benchmark.

A rigid, rotationally asymmetric colored-point object is placed at a random
pose; the analytic expert drives the end effector from a fixed start pose to
a grasp pose in the object frame along an SE(3) screw motion, closing the
aperture on the last two steps.  Physics is fully SO(3)-symmetric (kinematic
pose tracking, no gravity or occlusion), so rotating an entire episode about
the origin yields exactly the transformed episode, which is what makes the
rotational-generalization claim testable at tight tolerances.

Episodes store the initial state plus the full expert action sequence; later
states are reconstructed kinematically (commanded pose == reached pose).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, backward
from .canonical import (
    ActionChunk,
    DegenerateRotationError,
    EndEffectorState,
    SceneObservation,
    StateSnapshot,
    StateWindow,
    encode_ee_multi,
    decode_chunk,
)
from .so3 import Rotation, random_rotation, rotate_data


# ---------------------------------------------------------------------------
# SE(3) helpers


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle) of a rotation matrix."""
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_t)
    if theta < 1e-10:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if theta > math.pi - 1e-6:
        # near a half turn the antisymmetric part vanishes; recover the axis
        # from the symmetric part R ~ 2 a a^T - I
        a2 = np.clip((np.diag(R) + 1.0) / 2.0, 0.0, None)
        k = int(np.argmax(a2))
        a = np.zeros(3)
        a[k] = math.sqrt(a2[k])
        for j in range(3):
            if j != k:
                a[j] = (R[j, k] + R[k, j]) / (4.0 * a[k])
        a /= np.linalg.norm(a)
        return theta * a
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * math.sin(theta)) * vee


def so3_exp(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = _skew(w)
    if theta < 1e-10:
        return np.eye(3) + k + 0.5 * (k @ k)
    return (
        np.eye(3)
        + math.sin(theta) / theta * k
        + (1.0 - math.cos(theta)) / theta**2 * (k @ k)
    )


def _se3_v(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    k = _skew(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    return (
        np.eye(3)
        + (1.0 - math.cos(theta)) / theta**2 * k
        + (theta - math.sin(theta)) / theta**3 * (k @ k)
    )


def screw_interp(
    start_rot: Rotation, start_pos: np.ndarray, goal_rot: Rotation, goal_pos: np.ndarray, s: float
) -> tuple[Rotation, np.ndarray]:
    """Pose at fraction s along the SE(3) geodesic from start to goal."""
    r_delta = start_rot.matrix.T @ goal_rot.matrix
    p_delta = start_rot.matrix.T @ (np.asarray(goal_pos) - np.asarray(start_pos))
    w = so3_log(r_delta)
    v = np.linalg.solve(_se3_v(w), p_delta)
    rs = so3_exp(s * w)
    ps = _se3_v(s * w) @ (s * v)
    return Rotation(start_rot.matrix @ rs), np.asarray(start_pos) + start_rot.matrix @ ps


def geodesic_deg(r1: Rotation, r2: Rotation) -> float:
    cos_t = np.clip((np.trace(r1.matrix.T @ r2.matrix) - 1.0) / 2.0, -1.0, 1.0)
    return math.degrees(math.acos(cos_t))


# ---------------------------------------------------------------------------
# task specification


@dataclass(frozen=True)
class TaskSpec:
    """Object template, pose distribution, grasp offset, and sensor noise.

    The default template is three axis-aligned rods of distinct lengths and
    colors sharing a corner, so no nontrivial rotation maps the colored point
    set onto itself and the orientation is observable.
    """

    template_points: np.ndarray
    template_colors: np.ndarray
    translation_radius: tuple[float, float] = (0.18, 0.45)
    rotation_set: str = "identity"
    grasp_offset_pos: np.ndarray = field(default_factory=lambda: np.array([0.02, 0.03, 0.28]))
    grasp_offset_rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    sigma_pcd: float = 0.005
    episode_len: int = 16

    def __post_init__(self):
        pts = np.asarray(self.template_points, dtype=float)
        cols = np.asarray(self.template_colors, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
            raise ValueError("template_points must be [K, 3]")
        if cols.shape != pts.shape:
            raise ValueError("template_colors must match template_points")
        object.__setattr__(self, "template_points", pts)
        object.__setattr__(self, "template_colors", np.clip(cols, 0.0, 1.0))
        object.__setattr__(self, "grasp_offset_pos", np.asarray(self.grasp_offset_pos, dtype=float))
        object.__setattr__(self, "grasp_offset_rot", np.asarray(self.grasp_offset_rot, dtype=float))

    def to_dict(self) -> dict:
        return {
            "template_points": self.template_points.tolist(),
            "template_colors": self.template_colors.tolist(),
            "translation_radius": list(self.translation_radius),
            "rotation_set": self.rotation_set,
            "grasp_offset_pos": self.grasp_offset_pos.tolist(),
            "grasp_offset_rot": self.grasp_offset_rot.tolist(),
            "sigma_pcd": self.sigma_pcd,
            "episode_len": self.episode_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        d["translation_radius"] = tuple(d["translation_radius"])
        for key in ("template_points", "template_colors", "grasp_offset_pos", "grasp_offset_rot"):
            d[key] = np.asarray(d[key], dtype=float)
        return cls(**d)


def default_task_spec(**overrides) -> TaskSpec:
    points, colors = [], []
    rods = [
        (np.array([1.0, 0, 0]), 0.12, 8, (1.0, 0.1, 0.1)),
        (np.array([0, 1.0, 0]), 0.18, 10, (0.1, 1.0, 0.1)),
        (np.array([0, 0, 1.0]), 0.24, 12, (0.2, 0.3, 1.0)),
    ]
    points.append(np.zeros(3))
    colors.append((0.9, 0.9, 0.9))
    for axis, length, count, color in rods:
        for i in range(1, count + 1):
            points.append(axis * length * i / count)
            colors.append(color)
    return TaskSpec(np.array(points), np.array(colors), **overrides)


def sample_rotation_from_set(set_spec: str, rng: np.random.Generator) -> Rotation:
    """identity | haar | tilt:<deg> (tilt about a random horizontal axis)."""
    if set_spec == "identity":
        return Rotation.identity()
    if set_spec == "haar":
        return random_rotation(rng)
    if set_spec.startswith("tilt:"):
        deg = float(set_spec.split(":", 1)[1])
        phi = rng.uniform(0.0, 2.0 * math.pi)
        angle = rng.uniform(0.0, math.radians(deg))
        return Rotation.from_axis_angle([math.cos(phi), math.sin(phi), 0.0], angle)
    raise ValueError(f"unknown rotation set {set_spec!r}")


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    object_rot: Rotation
    object_pos: np.ndarray
    points: np.ndarray
    colors: np.ndarray
    start: tuple[EndEffectorState, ...]
    actions: tuple[tuple[EndEffectorState, ...], ...]  # expert, world frame

    @property
    def length(self) -> int:
        return len(self.actions)

    def goal_pose(self, spec: TaskSpec) -> tuple[Rotation, np.ndarray]:
        rot = Rotation(self.object_rot.matrix @ spec.grasp_offset_rot)
        pos = self.object_rot.apply(spec.grasp_offset_pos) + self.object_pos
        return rot, pos

    def observation(self) -> SceneObservation:
        return SceneObservation(self.points, self.colors)

    def ee_at(self, t: int) -> tuple[EndEffectorState, ...]:
        """Per-arm state after executing t expert actions (kinematic)."""
        if t <= 0:
            return self.start
        return self.actions[min(t, self.length) - 1]

    def window_at(self, t: int, history: int = 2) -> StateWindow:
        snaps = []
        for h in range(history - 1, -1, -1):
            snaps.append(StateSnapshot(self.observation(), self.ee_at(max(t - h, 0))))
        return StateWindow(tuple(snaps))

    def chunk_at(self, t: int, horizon: int) -> ActionChunk:
        steps = []
        for j in range(t, t + horizon):
            steps.append(self.actions[min(j, self.length - 1)])
        return ActionChunk(tuple(steps))


START_APERTURE = 1.0
CLOSE_STEPS = 2  # aperture snaps shut on the final steps


def _expert_actions(spec: TaskSpec, goal_rot: Rotation, goal_pos: np.ndarray):
    steps = []
    start_rot, start_pos = Rotation.identity(), np.zeros(3)
    for i in range(1, spec.episode_len + 1):
        rot, pos = screw_interp(start_rot, start_pos, goal_rot, goal_pos, i / spec.episode_len)
        grip = 0.0 if i > spec.episode_len - CLOSE_STEPS else START_APERTURE
        steps.append((EndEffectorState(pos, rot, grip),))
    return tuple(steps)


def gen_episode(spec: TaskSpec, rng: np.random.Generator, rotation: Rotation) -> Episode:
    """Sample a canonical-orientation episode, then transform the whole thing
    (scene, start state, expert actions) by ``rotation`` about the origin."""
    r_lo, r_hi = spec.translation_radius
    radius = rng.uniform(r_lo, r_hi)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    t_obj = radius * direction
    noise = rng.standard_normal(spec.template_points.shape) * spec.sigma_pcd

    points = spec.template_points + noise + t_obj
    goal_rot = Rotation(np.asarray(spec.grasp_offset_rot))
    goal_pos = spec.grasp_offset_pos + t_obj
    actions = _expert_actions(spec, goal_rot, goal_pos)
    start = (EndEffectorState(np.zeros(3), Rotation.identity(), START_APERTURE),)

    g = rotation
    return Episode(
        object_rot=g @ Rotation.identity(),
        object_pos=g.apply(t_obj),
        points=g.apply(points),
        colors=spec.template_colors.copy(),
        start=tuple(e.rotated(g) for e in start),
        actions=tuple(tuple(e.rotated(g) for e in step) for step in actions),
    )


def gen_demos(spec: TaskSpec, n: int, rng: np.random.Generator) -> list[Episode]:
    """n expert episodes with poses from the spec's distribution."""
    episodes = []
    for child in rng.spawn(max(n, 0)):
        g = sample_rotation_from_set(spec.rotation_set, child)
        episodes.append(gen_episode(spec, child, g))
    return episodes


# ---------------------------------------------------------------------------
# dataset files: JSON Lines, one episode per line, 17-significant-digit reals


def _f(x: float) -> str:
    return format(float(x), ".17g")


def _vec(v) -> str:
    return "[" + ",".join(_f(x) for x in v) + "]"


def _mat(m) -> str:
    return "[" + ",".join(_vec(row) for row in m) + "]"


def episode_to_json(ep: Episode) -> str:
    ee = ",".join(
        '{"pos":%s,"rot":%s,"grip":%s}'
        % (_vec(e.position), _vec(e.rotation.matrix.reshape(-1)), _f(e.aperture))
        for e in ep.start
    )
    actions = ",".join(_vec(encode_ee_multi(step)) for step in ep.actions)
    return (
        '{"points":%s,"colors":%s,"ee":[%s],"actions":[%s],'
        '"object_pose":{"rot":%s,"pos":%s}}'
        % (
            _mat(ep.points),
            _mat(ep.colors),
            ee,
            actions,
            _vec(ep.object_rot.matrix.reshape(-1)),
            _vec(ep.object_pos),
        )
    )


def episode_from_json(line: str) -> Episode:
    d = json.loads(line)
    start = tuple(
        EndEffectorState(
            np.asarray(e["pos"], dtype=float),
            Rotation(np.asarray(e["rot"], dtype=float).reshape(3, 3)),
            float(e["grip"]),
        )
        for e in d["ee"]
    )
    arms = len(start)
    data = np.asarray(d["actions"], dtype=float)
    chunk = decode_chunk(data, arms=arms)
    return Episode(
        object_rot=Rotation(np.asarray(d["object_pose"]["rot"], dtype=float).reshape(3, 3)),
        object_pos=np.asarray(d["object_pose"]["pos"], dtype=float),
        points=np.asarray(d["points"], dtype=float),
        colors=np.asarray(d["colors"], dtype=float),
        start=start,
        actions=chunk.steps,
    )


def save_dataset(path, episodes: list[Episode]) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(episode_to_json(ep) + "\n")


def load_dataset(path) -> list[Episode]:
    episodes = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                episodes.append(episode_from_json(line))
    return episodes


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-4
    warmup_steps: int = 100
    seed: int = 0
    sample_times: tuple[int, ...] = (0, 4, 8, 12)
    # exponential moving average of the weights, used for inference after
    # training (0 disables); standard practice for diffusion denoisers
    ema_decay: float = 0.995

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "warmup_steps": self.warmup_steps,
            "seed": self.seed,
            "sample_times": list(self.sample_times),
            "ema_decay": self.ema_decay,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["sample_times"] = tuple(d["sample_times"])
        return cls(**d)


def build_samples(policy, episodes: list[Episode], sample_times) -> tuple[np.ndarray, np.ndarray]:
    """Stack (condition features, canonical action coefficients) over all
    episodes and replan times."""
    horizon = policy.net.config.horizon
    feats, targets = [], []
    for ep in episodes:
        for t in sample_times:
            window = ep.window_at(t, policy.config.history)
            chunk = ep.chunk_at(t, horizon)
            f, a0 = policy.prepare_sample(window, chunk)
            feats.append(f)
            targets.append(a0)
    return np.stack(feats), np.stack(targets)


def train(policy, episodes: list[Episode], cfg: TrainConfig) -> list[dict]:
    """Adam + cosine schedule over minibatches of noise-prediction loss;
    deterministic given the seed.  Returns per-epoch loss records.

    With ema_decay > 0 the parameters are replaced by their exponential
    moving average once training finishes.
    """
    rng = np.random.default_rng(cfg.seed)
    feats, a0 = build_samples(policy, episodes, cfg.sample_times)
    n = len(feats)
    if n == 0:
        raise ValueError("no training samples")
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    params = policy.parameters()
    opt = Adam(
        params,
        lr=cfg.learning_rate,
        total_steps=cfg.epochs * steps_per_epoch,
        warmup_steps=cfg.warmup_steps,
    )
    ema = [p.value.copy() for p in params] if cfg.ema_decay > 0 else None
    rows = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            loss = policy.loss(feats[idx], a0[idx], rng)
            opt.zero_grad()
            backward(loss)
            opt.step()
            if ema is not None:
                d = cfg.ema_decay
                for shadow, p in zip(ema, params):
                    shadow *= d
                    shadow += (1.0 - d) * p.value
            losses.append(float(loss.value))
        rows.append({"epoch": epoch, "loss": float(np.mean(losses))})
    if ema is not None:
        for shadow, p in zip(ema, params):
            p.value = shadow
    return rows


def loss_curve_csv(rows: list[dict]) -> str:
    lines = ["epoch,loss"]
    for r in rows:
        lines.append(f"{r['epoch']},{r['loss']!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    success_rate: float
    mean_final_pos_err: float
    mean_rot_err_deg: float
    per_bucket: dict[str, dict]
    n_rollouts: int
    rotation_set: str
    seed: int
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "success_rate": self.success_rate,
            "mean_final_pos_err": self.mean_final_pos_err,
            "mean_rot_err_deg": self.mean_rot_err_deg,
            "per_bucket": self.per_bucket,
            "n_rollouts": self.n_rollouts,
            "rotation_set": self.rotation_set,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }


_BUCKET_EDGES = [0.0, 30.0, 60.0, 90.0, 120.0, 180.0]


def _bucket(angle_deg: float) -> str:
    if angle_deg < 1e-9:
        return "0"
    for lo, hi in zip(_BUCKET_EDGES[:-1], _BUCKET_EDGES[1:]):
        if angle_deg <= hi:
            return f"({lo:g},{hi:g}]"
    return f"({_BUCKET_EDGES[-2]:g},180]"


def evaluate(
    policy,
    spec: TaskSpec,
    n_rollouts: int,
    rotation_set: str,
    seed: int,
    pos_threshold: float = 0.02,
    rot_threshold_deg: float = 10.0,
    max_workers: int = 1,
    phases: int | None = None,
) -> tuple[EvalReport, list[dict]]:
    """Closed-loop evaluation: execute the first ``action_horizon`` steps of
    each sampled chunk against the kinematic scene, replan, and score the
    final pose against the analytic grasp pose.  ``phases`` overrides the
    number of replans (default: enough to execute the episode length).

    Episode randomness is split per rollout index, and the evaluated rotation
    transforms the entire episode (scene, start state, initial-noise draw),
    so identity and rotated evaluations pair rollout-for-rollout.
    """
    arms = policy.config.arms
    if arms != 1:
        raise NotImplementedError("the benchmark evaluates single-arm policies")
    t_a = policy.config.action_horizon
    horizon = policy.net.config.horizon
    n_phases = phases if phases is not None else -(-spec.episode_len // t_a)

    root = np.random.SeedSequence(seed)
    episodes, gs, samp_rngs = [], [], []
    for child in root.spawn(n_rollouts):
        ep_ss, rot_ss, samp_ss = child.spawn(3)
        g = sample_rotation_from_set(rotation_set, np.random.default_rng(rot_ss))
        episodes.append(gen_episode(spec, np.random.default_rng(ep_ss), g))
        gs.append(g)
        samp_rngs.append(np.random.default_rng(samp_ss))

    layout = policy.action_layout
    cur = [ep.start for ep in episodes]
    prev = [ep.start for ep in episodes]
    failed = [False] * n_rollouts

    def predict_batch(indices: list[int]) -> None:
        windows = []
        inits = []
        for i in indices:
            obs = episodes[i].observation()
            windows.append(
                StateWindow(tuple(StateSnapshot(obs, s) for s in (prev[i], cur[i])))
            )
            z = samp_rngs[i].standard_normal((horizon, layout.total_dim))
            inits.append(rotate_data(z, layout, gs[i]))
        feats = np.stack([policy.condition_features(w) for w in windows])
        coeffs = policy.sample_coeffs(
            feats, np.random.default_rng(0), a_init=np.stack(inits)
        )
        for j, i in enumerate(indices):
            if failed[i]:
                continue
            try:
                chunk = policy.decode_actions(windows[j], coeffs[j])
            except DegenerateRotationError:
                failed[i] = True
                continue
            executed = chunk.steps[:t_a]
            prev[i] = executed[-2] if len(executed) >= 2 else cur[i]
            cur[i] = executed[-1]

    indices = list(range(n_rollouts))
    for _ in range(n_phases):
        if max_workers > 1 and n_rollouts > 1:
            from concurrent.futures import ThreadPoolExecutor

            chunks = np.array_split(indices, max_workers)
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                list(pool.map(lambda c: predict_batch(list(c)), [c for c in chunks if len(c)]))
        else:
            predict_batch(indices)

    rows = []
    n_success = 0
    pos_errs, rot_errs = [], []
    for i, ep in enumerate(episodes):
        goal_rot, goal_pos = ep.goal_pose(spec)
        e = cur[i][0]
        pos_err = float(np.linalg.norm(e.position - goal_pos))
        rot_err = float(geodesic_deg(e.rotation, goal_rot))
        ok = (not failed[i]) and pos_err < pos_threshold and rot_err < rot_threshold_deg
        n_success += ok
        pos_errs.append(pos_err)
        rot_errs.append(rot_err)
        angle = math.degrees(np.linalg.norm(so3_log(gs[i].matrix)))
        rows.append(
            {
                "rollout": i,
                "rotation_deg": angle,
                "bucket": _bucket(angle),
                "pos_err": pos_err,
                "rot_err_deg": rot_err,
                "success": int(ok),
            }
        )

    buckets: dict[str, dict] = {}
    for r in rows:
        b = buckets.setdefault(r["bucket"], {"n": 0, "successes": 0})
        b["n"] += 1
        b["successes"] += r["success"]
    for b in buckets.values():
        b["success_rate"] = b["successes"] / b["n"]

    report = EvalReport(
        success_rate=n_success / n_rollouts,
        mean_final_pos_err=float(np.mean(pos_errs)),
        mean_rot_err_deg=float(np.mean(rot_errs)),
        per_bucket=buckets,
        n_rollouts=n_rollouts,
        rotation_set=rotation_set,
        seed=seed,
    )
    return report, rows


def eval_rows_csv(rows: list[dict]) -> str:
    lines = ["rollout,rotation_deg,bucket,pos_err,rot_err_deg,success"]
    for r in rows:
        lines.append(
            f"{r['rollout']},{r['rotation_deg']!r},{r['bucket']},"
            f"{r['pos_err']!r},{r['rot_err_deg']!r},{r['success']}"
        )
    return "\n".join(lines) + "\n"
