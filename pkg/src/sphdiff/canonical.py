"""End-effector encoding and gripper-frame canonicalization.

An end-effector pose-and-aperture is embedded as one degree-0 scalar (the
aperture) plus four degree-1 vectors (position and the three rotation-matrix
columns), 13 reals per arm.  Centering every position on the gripper of the
newest state makes the whole pipeline invariant to 3D translations of the
scene; rotations about that origin act on the embedding through the Wigner
blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .so3 import RepLayout, Rotation, coeffs_to_vector, vector_to_coeffs


class DegenerateRotationError(ValueError):
    """Decoded rotation columns are too close to parallel to orthonormalize."""


EE_BLOCK_DIM = 13  # 4 * 3 + 1


def ee_layout(arms: int = 1) -> RepLayout:
    """Layout of the per-step action/state embedding: arms scalars + 4*arms vectors."""
    if arms not in (1, 2):
        raise ValueError(f"arms must be 1 or 2, got {arms}")
    return RepLayout(((0, arms), (1, 4 * arms)))


@dataclass(frozen=True)
class EndEffectorState:
    """6DoF pose plus aperture; the aperture is clamped to [0, 1]."""

    position: np.ndarray
    rotation: Rotation
    aperture: float

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise ValueError(f"position must be a finite 3-vector, got {p!r}")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "aperture", float(np.clip(self.aperture, 0.0, 1.0)))

    def translated(self, offset) -> "EndEffectorState":
        return replace(self, position=self.position + np.asarray(offset, dtype=float))

    def rotated(self, g: Rotation) -> "EndEffectorState":
        return EndEffectorState(g.apply(self.position), g @ self.rotation, self.aperture)


@dataclass(frozen=True)
class SceneObservation:
    """Colored point cloud."""

    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        cols = np.asarray(self.colors, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be [N>=1, 3], got {pts.shape}")
        if cols.shape != pts.shape:
            raise ValueError(f"colors shape {cols.shape} != points shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "colors", np.clip(cols, 0.0, 1.0))

    def translated(self, offset) -> "SceneObservation":
        return SceneObservation(self.points + np.asarray(offset, dtype=float), self.colors)

    def rotated(self, g: Rotation) -> "SceneObservation":
        return SceneObservation(g.apply(self.points), self.colors)


@dataclass(frozen=True)
class StateSnapshot:
    obs: SceneObservation
    ee: tuple[EndEffectorState, ...]

    def translated(self, offset) -> "StateSnapshot":
        return StateSnapshot(self.obs.translated(offset), tuple(e.translated(offset) for e in self.ee))

    def rotated(self, g: Rotation) -> "StateSnapshot":
        return StateSnapshot(self.obs.rotated(g), tuple(e.rotated(g) for e in self.ee))


@dataclass(frozen=True)
class StateWindow:
    """History of h snapshots, oldest first."""

    snapshots: tuple[StateSnapshot, ...]

    def __post_init__(self):
        if not self.snapshots:
            raise ValueError("state window needs at least one snapshot")
        arms = {len(s.ee) for s in self.snapshots}
        if len(arms) != 1:
            raise ValueError(f"inconsistent arm counts across snapshots: {arms}")

    @property
    def newest(self) -> StateSnapshot:
        return self.snapshots[-1]

    @property
    def history(self) -> int:
        return len(self.snapshots)

    @property
    def arms(self) -> int:
        return len(self.snapshots[0].ee)

    def translated(self, offset) -> "StateWindow":
        return StateWindow(tuple(s.translated(offset) for s in self.snapshots))

    def rotated(self, g: Rotation) -> "StateWindow":
        return StateWindow(tuple(s.rotated(g) for s in self.snapshots))


@dataclass(frozen=True)
class ActionChunk:
    """T future actions, each a per-arm pose-and-aperture tuple."""

    steps: tuple[tuple[EndEffectorState, ...], ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("action chunk needs at least one step")
        arms = {len(s) for s in self.steps}
        if len(arms) != 1:
            raise ValueError(f"inconsistent arm counts across steps: {arms}")

    @property
    def horizon(self) -> int:
        return len(self.steps)

    @property
    def arms(self) -> int:
        return len(self.steps[0])

    def translated(self, offset) -> "ActionChunk":
        return ActionChunk(tuple(tuple(e.translated(offset) for e in s) for s in self.steps))

    def rotated(self, g: Rotation) -> "ActionChunk":
        return ActionChunk(tuple(tuple(e.rotated(g) for e in s) for s in self.steps))


# ---------------------------------------------------------------------------
# encoding


def encode_ee(e: EndEffectorState) -> np.ndarray:
    """13 reals: [aperture | sh(position) | sh(col0) | sh(col1) | sh(col2)]."""
    out = np.empty(EE_BLOCK_DIM)
    out[0] = e.aperture
    out[1:4] = vector_to_coeffs(e.position)
    for i in range(3):
        out[4 + 3 * i : 7 + 3 * i] = vector_to_coeffs(e.rotation.matrix[:, i])
    return out


def encode_ee_multi(states: tuple[EndEffectorState, ...]) -> np.ndarray:
    """Flat embedding of all arms following ``ee_layout(arms)`` channel order."""
    arms = len(states)
    layout = ee_layout(arms)
    out = np.empty(layout.total_dim)
    for a, e in enumerate(states):
        block = encode_ee(e)
        lo, hi = layout.channel_range(0, a)
        out[lo:hi] = block[0]
        for v in range(4):
            lo, hi = layout.channel_range(1, 4 * a + v)
            out[lo:hi] = block[1 + 3 * v : 4 + 3 * v]
    return out


def encode_chunk(chunk: ActionChunk) -> np.ndarray:
    """[T, arms * 13] coefficient array in ``ee_layout(arms)`` order."""
    return np.stack([encode_ee_multi(step) for step in chunk.steps])


def decode_ee(block: np.ndarray) -> EndEffectorState:
    """Inverse of ``encode_ee``; the rotation is re-orthonormalized by
    Gram-Schmidt on the first two decoded columns plus a cross product."""
    block = np.asarray(block, dtype=float)
    if block.shape != (EE_BLOCK_DIM,):
        raise ValueError(f"expected a {EE_BLOCK_DIM}-vector, got shape {block.shape}")
    if not np.all(np.isfinite(block)):
        raise DegenerateRotationError("non-finite coefficients in decoded block")
    aperture = float(np.clip(block[0], 0.0, 1.0))
    position = coeffs_to_vector(block[1:4])
    c0 = coeffs_to_vector(block[4:7])
    c1 = coeffs_to_vector(block[7:10])
    cross = np.cross(c0, c1)
    if np.linalg.norm(cross) < 1e-6:
        raise DegenerateRotationError(
            f"decoded rotation columns nearly parallel (cross norm {np.linalg.norm(cross):.2e})"
        )
    u0 = c0 / np.linalg.norm(c0)
    w = c1 - (u0 @ c1) * u0
    u1 = w / np.linalg.norm(w)
    u2 = np.cross(u0, u1)
    return EndEffectorState(position, Rotation(np.column_stack([u0, u1, u2])), aperture)


def decode_chunk(data: np.ndarray, arms: int = 1) -> ActionChunk:
    """Inverse of ``encode_chunk`` for a [T, arms * 13] array."""
    data = np.asarray(data, dtype=float)
    layout = ee_layout(arms)
    if data.ndim != 2 or data.shape[1] != layout.total_dim:
        raise ValueError(f"expected [T, {layout.total_dim}], got {data.shape}")
    steps = []
    for row in data:
        per_arm = []
        for a in range(arms):
            block = np.empty(EE_BLOCK_DIM)
            lo, hi = layout.channel_range(0, a)
            block[0] = row[lo]
            for v in range(4):
                lo, hi = layout.channel_range(1, 4 * a + v)
                block[1 + 3 * v : 4 + 3 * v] = row[lo:hi]
            per_arm.append(decode_ee(block))
        steps.append(tuple(per_arm))
    return ActionChunk(tuple(steps))


# ---------------------------------------------------------------------------
# canonicalization


def canonicalize(
    window: StateWindow, chunk: ActionChunk | None, arm: int = 0
) -> tuple[StateWindow, ActionChunk | None]:
    """Shift every position (points, all arms' grippers, action targets) by
    minus the newest state's arm-``arm`` gripper position.  Rotations and
    apertures are untouched."""
    if not 0 <= arm < window.arms:
        raise ValueError(f"arm {arm} out of range for {window.arms}-arm window")
    origin = window.newest.ee[arm].position
    window_can = window.translated(-origin)
    chunk_can = chunk.translated(-origin) if chunk is not None else None
    return window_can, chunk_can


def uncanonicalize(chunk: ActionChunk, origin) -> ActionChunk:
    """Undo the action translation of ``canonicalize``."""
    return chunk.translated(np.asarray(origin, dtype=float))
