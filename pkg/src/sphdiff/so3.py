"""Rotation-group substrate: real spherical harmonics, Wigner blocks, sphere grids.

Conventions, fixed here and used by every other module:

* Real orthonormal spherical harmonics over S^2, Condon-Shortley phase
  omitted, orders stored in m = -l..l sequence.  The degree-1 basis is
  proportional to (y, z, x), so a Cartesian vector v embeds as the
  coefficient triple (v_y, v_z, v_x); see ``vector_to_coeffs``.
* ``wigner_d(l, R)`` returns the orthogonal matrix D with

      Y_l(R u) = D @ Y_l(u)        (Y_l = column of degree-l basis values)

  which makes D a group homomorphism, D(R1) @ D(R2) = D(R1 @ R2), and
  rotating a function's coefficients the map c -> D @ c.
* All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_MAX_DEGREE = 4

FOUR_PI = 4.0 * math.pi


class UnsupportedDegreeError(ValueError):
    """Raised when a Wigner block beyond the configured maximum is requested."""


# ---------------------------------------------------------------------------
# layouts and coefficient containers


@dataclass(frozen=True)
class RepLayout:
    """Typed shape of a multichannel spherical Fourier feature.

    ``entries`` lists (degree l, multiplicity c) pairs in strictly ascending
    degree order.  The flat storage order is: for each entry, channel-major
    blocks of 2l+1 coefficients (m = -l..l), so slicing one (degree, channel)
    always yields a contiguous (2l+1)-vector.
    """

    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        entries = tuple((int(l), int(c)) for l, c in self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise ValueError("layout needs at least one (degree, multiplicity) entry")
        for l, c in entries:
            if l < 0:
                raise ValueError(f"negative degree {l}")
            if c < 1:
                raise ValueError(f"multiplicity must be positive, got {c} at degree {l}")
        degrees = [l for l, _ in entries]
        if degrees != sorted(set(degrees)):
            raise ValueError(f"degrees must be strictly ascending, got {degrees}")

    @classmethod
    def single(cls, max_degree: int) -> "RepLayout":
        """One channel of every degree 0..max_degree ((L+1)^2 coefficients)."""
        return cls(tuple((l, 1) for l in range(max_degree + 1)))

    @classmethod
    def uniform(cls, max_degree: int, channels: int) -> "RepLayout":
        return cls(tuple((l, channels) for l in range(max_degree + 1)))

    @property
    def total_dim(self) -> int:
        return sum(c * (2 * l + 1) for l, c in self.entries)

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(l for l, _ in self.entries)

    @property
    def max_degree(self) -> int:
        return self.entries[-1][0]

    def multiplicity(self, degree: int) -> int:
        for l, c in self.entries:
            if l == degree:
                return c
        return 0

    def block_range(self, degree: int) -> tuple[int, int]:
        """(start, stop) of the full degree block in the flat feature axis."""
        start = 0
        for l, c in self.entries:
            width = c * (2 * l + 1)
            if l == degree:
                return start, start + width
            start += width
        raise KeyError(f"degree {degree} not in layout {self.entries}")

    def channel_range(self, degree: int, channel: int) -> tuple[int, int]:
        start, _ = self.block_range(degree)
        c = self.multiplicity(degree)
        if not 0 <= channel < c:
            raise IndexError(f"channel {channel} out of range for degree {degree} (c={c})")
        width = 2 * degree + 1
        lo = start + channel * width
        return lo, lo + width


def concat_layouts(layouts: list[RepLayout]) -> RepLayout:
    """Channel-wise concatenation: multiplicities add per degree."""
    mult: dict[int, int] = {}
    for lay in layouts:
        for l, c in lay.entries:
            mult[l] = mult.get(l, 0) + c
    return RepLayout(tuple(sorted(mult.items())))


@dataclass
class SphericalCoeffs:
    """Flat real coefficients conforming to a RepLayout.

    ``data`` may carry arbitrary leading axes (batch, time); the last axis
    always has length ``layout.total_dim``.
    """

    layout: RepLayout
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.shape[-1] != self.layout.total_dim:
            raise ValueError(
                f"data last axis {self.data.shape[-1]} != layout total_dim {self.layout.total_dim}"
            )

    @classmethod
    def zeros(cls, layout: RepLayout, leading: tuple[int, ...] = ()) -> "SphericalCoeffs":
        return cls(layout, np.zeros(leading + (layout.total_dim,)))

    def block(self, degree: int) -> np.ndarray:
        """View of the degree block shaped [..., c, 2l+1]."""
        lo, hi = self.layout.block_range(degree)
        c = self.layout.multiplicity(degree)
        return self.data[..., lo:hi].reshape(self.data.shape[:-1] + (c, 2 * degree + 1))

    def channel(self, degree: int, channel: int) -> np.ndarray:
        lo, hi = self.layout.channel_range(degree, channel)
        return self.data[..., lo:hi]

    def copy(self) -> "SphericalCoeffs":
        return SphericalCoeffs(self.layout, self.data.copy())


# ---------------------------------------------------------------------------
# rotations


@dataclass(frozen=True)
class Rotation:
    """Proper 3D rotation; the matrix is validated on construction."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        if np.max(np.abs(m.T @ m - np.eye(3))) > 1e-12:
            raise ValueError("matrix is not orthogonal within 1e-12")
        if abs(np.linalg.det(m) - 1.0) > 1e-12:
            raise ValueError("matrix determinant is not +1 within 1e-12")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation":
        a = np.asarray(axis, dtype=float)
        n = np.linalg.norm(a)
        if n == 0:
            raise ValueError("axis must be nonzero")
        a = a / n
        k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
        m = np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)
        return cls(_reorthonormalize(m))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(_reorthonormalize(self.matrix @ other.matrix))

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T.copy())

    def apply(self, points) -> np.ndarray:
        """Rotate points shaped [..., 3]."""
        return np.asarray(points, dtype=float) @ self.matrix.T


def _reorthonormalize(m: np.ndarray) -> np.ndarray:
    # Project a near-rotation back onto SO(3) so composed rotations keep
    # passing the 1e-12 construction checks.
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def random_rotation(rng: np.random.Generator) -> Rotation:
    """Haar-uniform rotation via a normalized quaternion; deterministic per rng state."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    m = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Rotation(_reorthonormalize(m))


# ---------------------------------------------------------------------------
# real spherical harmonics

# Cartesian -> SH-order permutation for degree 1: (x, y, z) -> (y, z, x).
_CART_TO_SH = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])


def vector_to_coeffs(v) -> np.ndarray:
    """Embed Cartesian vectors [..., 3] as degree-1 coefficient triples."""
    return np.asarray(v, dtype=float) @ _CART_TO_SH.T


def coeffs_to_vector(c) -> np.ndarray:
    """Inverse of ``vector_to_coeffs``."""
    return np.asarray(c, dtype=float) @ _CART_TO_SH


def sh_basis(max_degree: int, points) -> np.ndarray:
    """All real SH values Y_l^m up to max_degree at unit points [..., 3].

    Output [..., (L+1)^2] ordered degree-major, m = -l..l; callers are
    responsible for unit-length inputs.
    """
    pts = np.asarray(points, dtype=float)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    s = np.hypot(x, y)  # sin(theta) >= 0
    phi = np.arctan2(y, x)
    L = max_degree

    # Associated Legendre P_l^m(cos theta), Condon-Shortley phase omitted.
    P = np.zeros((L + 1, L + 1) + pts.shape[:-1])
    P[0, 0] = np.ones(pts.shape[:-1])
    for m in range(1, L + 1):
        P[m, m] = (2 * m - 1) * s * P[m - 1, m - 1]
    for m in range(0, L):
        P[m + 1, m] = (2 * m + 1) * z * P[m, m]
    for m in range(0, L + 1):
        for l in range(m + 2, L + 1):
            P[l, m] = ((2 * l - 1) * z * P[l - 1, m] - (l + m - 1) * P[l - 2, m]) / (l - m)

    out = np.empty(pts.shape[:-1] + ((L + 1) ** 2,))
    for l in range(L + 1):
        base = l * l + l
        for m in range(0, l + 1):
            norm = math.sqrt(
                (2 * l + 1) / FOUR_PI * math.factorial(l - m) / math.factorial(l + m)
            )
            if m == 0:
                out[..., base] = norm * P[l, 0]
            else:
                out[..., base + m] = math.sqrt(2.0) * norm * P[l, m] * np.cos(m * phi)
                out[..., base - m] = math.sqrt(2.0) * norm * P[l, m] * np.sin(m * phi)
    return out


def real_sh_eval(l: int, m: int, u) -> float:
    """Single real spherical harmonic Y_l^m at a unit direction u."""
    if not -l <= m <= l:
        raise ValueError(f"order m={m} out of range for degree l={l}")
    u = np.asarray(u, dtype=float)
    if u.shape != (3,):
        raise ValueError(f"u must be a 3-vector, got shape {u.shape}")
    if abs(np.linalg.norm(u) - 1.0) > 1e-9:
        raise ValueError(f"u must be unit length within 1e-9, |u|={np.linalg.norm(u)!r}")
    return float(sh_basis(l, u)[l * l + l + m])


# ---------------------------------------------------------------------------
# Wigner blocks


@dataclass(frozen=True)
class WignerD:
    """Block-diagonal rotation action on a RepLayout: one orthogonal block per degree."""

    blocks: dict[int, np.ndarray]

    def __post_init__(self):
        for l, b in self.blocks.items():
            if b.shape != (2 * l + 1, 2 * l + 1):
                raise ValueError(f"degree-{l} block has shape {b.shape}")
            if np.max(np.abs(b.T @ b - np.eye(2 * l + 1))) > 1e-10:
                raise ValueError(f"degree-{l} block not orthogonal within 1e-10")

    def block(self, degree: int) -> np.ndarray:
        return self.blocks[degree]


def _wigner_next_degree(l: int, r1: np.ndarray, prev: np.ndarray) -> np.ndarray:
    """Degree-l block from the degree-(l-1) block and the degree-1 block.

    Recursive real-basis construction; row/column indices run m, n = -l..l
    (array index m + l).  ``r1`` is indexed the same way for -1..1.
    """
    size = 2 * l + 1

    # P[i] pairs row i of the degree-1 block with the previous block,
    # with the two |n| = l edge columns built from the previous block's
    # own edge columns.
    P = np.empty((3, 2 * l - 1, size))
    for ai in range(3):  # ai = i + 1, i in {-1, 0, 1}
        P[ai, :, 1 : size - 1] = r1[ai, 1] * prev
        P[ai, :, size - 1] = r1[ai, 2] * prev[:, -1] - r1[ai, 0] * prev[:, 0]
        P[ai, :, 0] = r1[ai, 2] * prev[:, 0] + r1[ai, 0] * prev[:, -1]

    n = np.arange(-l, l + 1)
    denom = np.where(np.abs(n) < l, (l + n) * (l - n), (2 * l) * (2 * l - 1)).astype(float)
    inv = 1.0 / np.sqrt(denom)

    def prow(i: int, mu: int) -> np.ndarray:
        return P[i + 1, mu + l - 1]

    out = np.empty((size, size))
    for m in range(-l, l + 1):
        am = abs(m)
        u_num = math.sqrt((l + m) * (l - m))
        if m == 0:
            v_num = -0.5 * math.sqrt(2.0 * (l - 1) * l)
            w_num = 0.0
        else:
            v_num = 0.5 * math.sqrt((l + am - 1) * (l + am))
            w_num = -0.5 * math.sqrt((l - am - 1) * (l - am))

        row = np.zeros(size)
        if u_num != 0.0:
            row += u_num * prow(0, m)
        if m == 0:
            # v_num already folds the m=0 sign flip and sqrt(2) factor
            row += v_num * (prow(1, 1) + prow(-1, -1))
        elif m > 0:
            vrow = prow(1, m - 1) * math.sqrt(1.0 + (1.0 if m == 1 else 0.0))
            if m != 1:
                vrow = vrow - prow(-1, -m + 1)
            row += v_num * vrow
            if w_num != 0.0:
                row += w_num * (prow(1, m + 1) + prow(-1, -m - 1))
        else:  # m < 0
            vrow = prow(-1, -m - 1) * math.sqrt(1.0 + (1.0 if m == -1 else 0.0))
            if m != -1:
                vrow = vrow + prow(1, m + 1)
            row += v_num * vrow
            if w_num != 0.0:
                row += w_num * (prow(1, m - 1) - prow(-1, -m + 1))
        out[m + l] = row * inv
    return out


def wigner_d(l: int, rotation: Rotation, max_degree: int = DEFAULT_MAX_DEGREE) -> np.ndarray:
    """Orthogonal degree-l block of the rotation action (see module conventions)."""
    if l > max_degree:
        raise UnsupportedDegreeError(f"degree {l} exceeds supported maximum {max_degree}")
    if l == 0:
        return np.array([[1.0]])
    r1 = _CART_TO_SH @ rotation.matrix @ _CART_TO_SH.T
    if l == 1:
        return r1
    block = r1
    for deg in range(2, l + 1):
        block = _wigner_next_degree(deg, r1, block)
    return block


def wigner_block_diag(
    layout: RepLayout, rotation: Rotation, max_degree: int | None = None
) -> WignerD:
    """One block per distinct degree appearing in the layout."""
    if max_degree is None:
        max_degree = max(DEFAULT_MAX_DEGREE, layout.max_degree)
    blocks: dict[int, np.ndarray] = {}
    top = layout.max_degree
    if top > max_degree:
        raise UnsupportedDegreeError(f"degree {top} exceeds supported maximum {max_degree}")
    r1 = _CART_TO_SH @ rotation.matrix @ _CART_TO_SH.T
    chain: dict[int, np.ndarray] = {0: np.array([[1.0]]), 1: r1}
    prev = r1
    for deg in range(2, top + 1):
        prev = _wigner_next_degree(deg, r1, prev)
        chain[deg] = prev
    for l in layout.degrees:
        blocks[l] = chain[l]
    return WignerD(blocks)


def rotate_data(data: np.ndarray, layout: RepLayout, rotation: Rotation) -> np.ndarray:
    """Apply the layout's block-diagonal Wigner action along the last axis."""
    wd = wigner_block_diag(layout, rotation)
    out = np.empty_like(np.asarray(data, dtype=float))
    for l, c in layout.entries:
        lo, hi = layout.block_range(l)
        width = 2 * l + 1
        block = data[..., lo:hi].reshape(data.shape[:-1] + (c, width))
        out[..., lo:hi] = (block @ wd.block(l).T).reshape(data.shape[:-1] + (c * width,))
    return out


def rotate_coeffs(x: SphericalCoeffs, rotation: Rotation) -> SphericalCoeffs:
    """Coefficients of the rotated function; per-slice 2-norms are preserved."""
    return SphericalCoeffs(x.layout, rotate_data(x.data, x.layout, rotation))


# ---------------------------------------------------------------------------
# quadrature grids and transforms


@dataclass
class SphereGrid:
    """Gauss-Legendre x equiangular quadrature grid on S^2.

    Exactly integrates products Y_l^m Y_l'^m' for l, l' <= band_limit; the
    oversample factor scales both node counts for aliasing control under
    pointwise nonlinearities.
    """

    band_limit: int
    oversample: int
    points: np.ndarray
    weights: np.ndarray
    _sh_cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    @property
    def nodes(self) -> list[tuple[np.ndarray, float]]:
        return [(self.points[i], float(self.weights[i])) for i in range(len(self.weights))]

    def sh_matrix(self, max_degree: int) -> np.ndarray:
        """Cached [n_nodes, (L+1)^2] table of basis values on the grid."""
        if max_degree not in self._sh_cache:
            self._sh_cache[max_degree] = sh_basis(max_degree, self.points)
        return self._sh_cache[max_degree]


def make_grid(band_limit: int, oversample: int = 2) -> SphereGrid:
    """Quadrature grid exact for band-limited integrands up to 2*band_limit."""
    if band_limit < 0:
        raise ValueError("band_limit must be >= 0")
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    n_theta = oversample * (band_limit + 1)
    n_phi = oversample * (2 * band_limit + 2)
    xs, wts = np.polynomial.legendre.leggauss(n_theta)
    phis = np.arange(n_phi) * (2.0 * math.pi / n_phi)
    sin_t = np.sqrt(np.clip(1.0 - xs * xs, 0.0, None))
    pts = np.empty((n_theta, n_phi, 3))
    pts[..., 0] = sin_t[:, None] * np.cos(phis)[None, :]
    pts[..., 1] = sin_t[:, None] * np.sin(phis)[None, :]
    pts[..., 2] = xs[:, None]
    weights = np.broadcast_to(wts[:, None] * (2.0 * math.pi / n_phi), (n_theta, n_phi))
    return SphereGrid(
        band_limit=band_limit,
        oversample=oversample,
        points=pts.reshape(-1, 3),
        weights=np.ascontiguousarray(weights.reshape(-1)),
    )


def synthesis_data(data: np.ndarray, max_degree: int, grid: SphereGrid) -> np.ndarray:
    """Grid values of the band-limited function with coefficients ``data`` [..., (L+1)^2]."""
    return np.asarray(data, dtype=float) @ grid.sh_matrix(max_degree).T


def analysis_data(values: np.ndarray, grid: SphereGrid, max_degree: int) -> np.ndarray:
    """Quadrature projection of grid values onto the basis, up to max_degree."""
    if max_degree > grid.band_limit:
        raise ValueError(
            f"band limit {max_degree} exceeds grid band limit {grid.band_limit}"
        )
    y = grid.sh_matrix(max_degree)
    return (np.asarray(values, dtype=float) * grid.weights) @ y


def synthesis(x: SphericalCoeffs, grid: SphereGrid) -> np.ndarray:
    """Values over grid nodes for a single-channel all-degrees layout."""
    if any(c != 1 for _, c in x.layout.entries):
        raise ValueError("synthesis expects a single-channel layout")
    if x.layout.degrees != tuple(range(x.layout.max_degree + 1)):
        raise ValueError("synthesis expects contiguous degrees 0..L")
    return synthesis_data(x.data, x.layout.max_degree, grid)


def analysis(values: np.ndarray, grid: SphereGrid, max_degree: int) -> SphericalCoeffs:
    """Inverse of ``synthesis`` for band-limited inputs with L <= grid band limit."""
    return SphericalCoeffs(RepLayout.single(max_degree), analysis_data(values, grid, max_degree))
