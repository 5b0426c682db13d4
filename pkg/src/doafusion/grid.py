"""Geodesic half-sphere DOA grid and plane-wave TDOA computation.

The search space for direction-of-arrival estimation is the unit half-sphere
(z >= 0) above a circular microphone array, discretized by recursively
subdividing an icosahedron and keeping the upper hemisphere.  Each candidate
direction maps to a set of per-microphone-pair time differences of arrival
under the far-field plane-wave assumption.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-9
EQUATOR_SNAP = 1e-12
MAX_SUBDIVISION_LEVEL = 8


@dataclass(frozen=True)
class DoaVector:
    """Unit direction vector on the positive-z half-sphere."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        n = self.dx * self.dx + self.dy * self.dy + self.dz * self.dz
        if abs(n - 1.0) > 3.0 * UNIT_TOL:
            raise ValueError(f"DOA vector must have unit norm, got |d|^2 = {n!r}")
        if self.dz < 0.0:
            raise ValueError(f"DOA vector must have dz >= 0, got {self.dz!r}")

    @classmethod
    def from_array(cls, v) -> "DoaVector":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), float(v[1]), float(v[2]))

    @classmethod
    def unit(cls, x: float, y: float, z: float) -> "DoaVector":
        """Normalize (x, y, z) and clamp to the half-sphere."""
        v = np.array([x, y, max(z, 0.0)], dtype=float)
        n = np.linalg.norm(v)
        if n == 0.0:
            raise ValueError("cannot normalize a zero vector")
        return cls.from_array(v / n)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])

    def angle_to(self, other: "DoaVector") -> float:
        """Angle to another direction, in degrees."""
        c = np.clip(self.as_array() @ other.as_array(), -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))


def unit_halfsphere(v: np.ndarray) -> np.ndarray:
    """Project a nonzero 3-vector onto the unit half-sphere (clamp z, renormalize)."""
    v = np.asarray(v, dtype=float).copy()
    if v[2] < 0.0:
        v[2] = 0.0
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def angle_between_deg(a: np.ndarray, b: np.ndarray) -> float:
    c = np.clip(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def _icosahedron() -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Canonical icosahedron: golden-ratio vertices rotated so one vertex is at +z."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = []
    for s1 in (-1.0, 1.0):
        for s2 in (-phi, phi):
            verts.append((0.0, s1, s2))
            verts.append((s1, s2, 0.0))
            verts.append((s2, 0.0, s1))
    v = np.array(verts) / np.sqrt(1.0 + phi * phi)
    # rotate about x so vertex (0, 1, phi)/|.| lands on +z
    n = np.sqrt(1.0 + phi * phi)
    c, s = phi / n, 1.0 / n
    rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    v = v @ rot.T
    # scrub rounding dust so the pole vertex is exactly (0, 0, 1)
    v[np.abs(v) < 1e-15] = 0.0
    v /= np.linalg.norm(v, axis=1, keepdims=True)

    # faces from edge adjacency (shortest pairwise distance = icosahedron edge)
    d = np.linalg.norm(v[:, None, :] - v[None, :, :], axis=2)
    edge = d[d > 1e-9].min()
    adj = d < edge + 1e-6
    faces = []
    for i in range(12):
        for j in range(i + 1, 12):
            if not adj[i, j]:
                continue
            for k in range(j + 1, 12):
                if adj[i, k] and adj[j, k]:
                    faces.append((i, j, k))
    return v, faces


@dataclass(frozen=True)
class HalfSphereGrid:
    """Deterministically ordered DOA candidates on the unit half-sphere.

    ``points`` is an (n, 3) array of unit vectors with z >= 0, sorted
    lexicographically by (z, y, x).  ``level`` is the subdivision depth;
    level 4 yields 1321 points.
    """

    points: np.ndarray
    level: int

    def __len__(self) -> int:
        return self.points.shape[0]

    def nearest_index(self, doa: np.ndarray) -> int:
        """Index of the grid point closest (by angle) to ``doa``."""
        return int(np.argmax(self.points @ np.asarray(doa, dtype=float)))

    def doa(self, index: int) -> DoaVector:
        return DoaVector.from_array(self.points[index])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["idx", "x", "y", "z"])
            for i, p in enumerate(self.points):
                w.writerow([i, repr(float(p[0])), repr(float(p[1])), repr(float(p[2]))])

    @classmethod
    def from_csv(cls, path, level: int = -1) -> "HalfSphereGrid":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append([float(rec["x"]), float(rec["y"]), float(rec["z"])])
        return cls(points=np.array(rows), level=level)


def build_halfsphere_grid(level: int) -> HalfSphereGrid:
    """Build the half-sphere DOA grid by icosahedron midpoint subdivision.

    Each subdivision splits every face into four, with new vertices at the
    projected edge midpoints.  Vertices with z >= 0 are kept; points on the
    equator (|z| < 1e-12) are snapped to z = 0 and retained once.  At level 4
    this yields 1321 points.

    Parameters
    ----------
    level : int
        Subdivision depth, 0 <= level <= 8.  Level 0 is the icosahedron
        itself (6 half-sphere points).

    Returns
    -------
    HalfSphereGrid
    """
    if not isinstance(level, (int, np.integer)) or isinstance(level, bool):
        raise ValueError(f"level must be an integer, got {level!r}")
    if level < 0 or level > MAX_SUBDIVISION_LEVEL:
        raise ValueError(f"level must be in [0, {MAX_SUBDIVISION_LEVEL}], got {level}")

    verts, faces = _icosahedron()
    verts = [np.array(v) for v in verts]

    for _ in range(level):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            idx = midpoint_cache.get(key)
            if idx is None:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                idx = len(verts)
                verts.append(m)
                midpoint_cache[key] = idx
            return idx

        new_faces = []
        for i, j, k in faces:
            a, b, c = midpoint(i, j), midpoint(j, k), midpoint(i, k)
            new_faces += [(i, a, c), (j, b, a), (k, c, b), (a, b, c)]
        faces = new_faces

    pts = np.array(verts)
    pts[np.abs(pts[:, 2]) < EQUATOR_SNAP, 2] = 0.0
    pts = pts[pts[:, 2] >= 0.0]
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)

    # midpoint caching already dedupes shared vertices; this guards the
    # snapped equator ring against float-noise duplicates
    _, keep = np.unique(np.round(pts / UNIT_TOL).astype(np.int64), axis=0, return_index=True)
    pts = pts[np.sort(keep)]

    order = np.lexsort((pts[:, 0], pts[:, 1], pts[:, 2]))
    return HalfSphereGrid(points=pts[order], level=level)


def circular_mic_positions(n_mics: int = 8, diameter: float = 0.10) -> np.ndarray:
    """Microphones uniformly spaced on a circle in the z = 0 plane."""
    ang = 2.0 * np.pi * np.arange(n_mics) / n_mics
    r = diameter / 2.0
    return np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(n_mics)], axis=1)


@dataclass(frozen=True)
class ArrayGeometry:
    """Microphone positions (meters, local frame) plus sampling constants.

    The default is eight microphones on a 10 cm diameter circle in the
    z = 0 plane, sampled at 16 kHz with c = 343 m/s.
    """

    mic_positions: np.ndarray = field(default_factory=circular_mic_positions)
    speed_of_sound: float = 343.0
    sample_rate: float = 16000.0

    def __post_init__(self):
        mics = np.asarray(self.mic_positions, dtype=float)
        if mics.ndim != 2 or mics.shape[1] != 3 or mics.shape[0] < 2:
            raise ValueError("mic_positions must be an (n >= 2, 3) array")
        object.__setattr__(self, "mic_positions", mics)

    @property
    def n_mics(self) -> int:
        return self.mic_positions.shape[0]

    def mic_pairs(self) -> list[tuple[int, int]]:
        n = self.n_mics
        return [(p, q) for p in range(n) for q in range(p + 1, n)]

    def pair_deltas(self) -> np.ndarray:
        """(n_pairs, 3) array of m_p - m_q for each pair p < q."""
        return np.array([self.mic_positions[p] - self.mic_positions[q]
                         for p, q in self.mic_pairs()])


def tdoa_for_doa(geom: ArrayGeometry, doa) -> np.ndarray:
    """Per-pair TDOAs (in samples) for a plane wave from direction ``doa``.

    For each microphone pair (p, q) with p < q,
    ``tau_pq = fs * (m_p - m_q) . d / c``; a positive value means the
    wavefront reaches mic p after mic q.  Fractional samples are kept.

    ``doa`` may be a DoaVector or any unit 3-vector (the half-sphere
    constraint is not enforced here, so sign-convention identities can be
    probed with the antipode).
    """
    d = doa.as_array() if isinstance(doa, DoaVector) else np.asarray(doa, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError(f"doa must be a unit vector, got norm {np.linalg.norm(d)!r}")
    return geom.sample_rate / geom.speed_of_sound * (geom.pair_deltas() @ d)


def tdoa_matrix(geom: ArrayGeometry, doa) -> np.ndarray:
    """Full antisymmetric (n_mics, n_mics) TDOA matrix, tau[p, q] = -tau[q, p]."""
    taus = tdoa_for_doa(geom, doa)
    n = geom.n_mics
    out = np.zeros((n, n))
    for (p, q), t in zip(geom.mic_pairs(), taus):
        out[p, q] = t
        out[q, p] = -t
    return out


def grid_tdoas(grid: HalfSphereGrid, geom: ArrayGeometry) -> np.ndarray:
    """(n_points, n_pairs) TDOA table for every grid direction."""
    scale = geom.sample_rate / geom.speed_of_sound
    return scale * (grid.points @ geom.pair_deltas().T)
