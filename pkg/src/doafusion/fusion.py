"""Concatenated-DOA fusion: PCA subspace localization and affine room mapping.

A room with M arrays produces, per time bin, one 3M-element vector stacking
each array's local DOA estimate.  Source positions are recovered without
knowing array placements through two maps fit on calibration recordings:

* a PCA model of the calibration DOA matrix (no source locations needed),
  localizing in the coordinates of the leading left singular vectors, and
* an affine map ``r = r0 + B d`` fit by closed-form least squares with a
  Moore-Penrose pseudo-inverse, which needs the calibration locations but
  tolerates missing arrays by refitting on the active row subset.

Both maps support disturbance-from-reference-point operation: a new
observation is located relative to a known (DOA, location) pair.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

SUBVECTOR_UNIT_TOL = 1e-6
PINV_RTOL = 1e-10


class ActiveSetMismatchError(ValueError):
    """An observation does not cover the arrays a fitted map requires."""


class NoObservationError(ValueError):
    """An observation has no active arrays at all."""


class PartialProjectionWarning(UserWarning):
    """A partially-active DOA vector was projected with a full-array PCA model."""


@dataclass
class ConcatenatedDoa:
    """One fused observation: 3M stacked direction cosines plus array mask.

    Inactive arrays contribute all-zero 3-subvectors and a False mask entry.
    """

    values: np.ndarray
    active_mask: np.ndarray
    timestamp_ms: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.active_mask = np.asarray(self.active_mask, dtype=bool)
        if self.values.shape != (3 * self.active_mask.shape[0],):
            raise ValueError("values must have 3 entries per mask bit")

    @property
    def n_arrays(self) -> int:
        return self.active_mask.shape[0]

    def subvector(self, array_index: int) -> np.ndarray:
        return self.values[3 * array_index: 3 * array_index + 3]

    def validate(self, unit_tol: float = SUBVECTOR_UNIT_TOL) -> None:
        for a in range(self.n_arrays):
            sub = self.subvector(a)
            if self.active_mask[a]:
                n = np.linalg.norm(sub)
                if abs(n - 1.0) > unit_tol:
                    raise ValueError(f"array {a}: active subvector norm {n!r} != 1")
                if sub[2] < 0.0:
                    raise ValueError(f"array {a}: active subvector has dz < 0")
            elif np.any(sub != 0.0):
                raise ValueError(f"array {a}: inactive subvector must be zero")


def concat_doas(per_array, timestamp_ms: int = 0) -> ConcatenatedDoa:
    """Stack per-array DOAs (None for absent arrays) into one observation."""
    m = len(per_array)
    if m < 1:
        raise ValueError("need at least one array")
    values = np.zeros(3 * m)
    mask = np.zeros(m, dtype=bool)
    for a, d in enumerate(per_array):
        if d is None:
            continue
        vec = d.as_array() if hasattr(d, "as_array") else np.asarray(d, dtype=float)
        values[3 * a: 3 * a + 3] = vec
        mask[a] = True
    return ConcatenatedDoa(values=values, active_mask=mask, timestamp_ms=timestamp_ms)


@dataclass
class CalibrationSet:
    """Paired calibration matrices: DOAs ``D`` (3M x L) and locations ``R`` (N x L).

    ``segments`` lists (point_id, start, stop) column ranges, one per
    calibration point; every column of R inside a segment equals that
    point's location exactly.
    """

    D: np.ndarray
    R: np.ndarray
    segments: list[tuple[int, int, int]]
    timestamps_ms: np.ndarray | None = None
    masks: np.ndarray | None = None  # (M, L) bool; None means all active

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.D.ndim != 2 or self.D.shape[0] % 3 != 0:
            raise ValueError("D must be (3M, L)")
        if self.R.ndim != 2 or self.R.shape[1] != self.D.shape[1]:
            raise ValueError("R must be (N, L) with L matching D")
        if self.R.shape[0] not in (2, 3):
            raise ValueError("room dimension N must be 2 or 3")
        covered = sorted((s, e) for _, s, e in self.segments)
        if sum(e - s for s, e in covered) != self.n_obs or (
                covered and (covered[0][0] != 0 or covered[-1][1] != self.n_obs)):
            raise ValueError("segments must partition the L columns")
        for pid, s, e in self.segments:
            if not np.all(self.R[:, s:e] == self.R[:, s, None]):
                raise ValueError(f"point {pid}: R varies inside its segment")

    @property
    def n_arrays(self) -> int:
        return self.D.shape[0] // 3

    @property
    def n_dim(self) -> int:
        return self.R.shape[0]

    @property
    def n_obs(self) -> int:
        return self.D.shape[1]

    @property
    def point_ids(self) -> list[int]:
        return [pid for pid, _, _ in self.segments]

    def point_location(self, point_id: int) -> np.ndarray:
        for pid, s, _ in self.segments:
            if pid == point_id:
                return self.R[:, s].copy()
        raise KeyError(f"no calibration point {point_id}")

    def point_mean_doa(self, point_id: int) -> np.ndarray:
        for pid, s, e in self.segments:
            if pid == point_id:
                return self.D[:, s:e].mean(axis=1)
        raise KeyError(f"no calibration point {point_id}")

    def is_fully_active(self) -> bool:
        return self.masks is None or bool(np.all(self.masks))

    def subset(self, point_ids) -> "CalibrationSet":
        """Restrict to the given calibration points (columns reordered by id order)."""
        wanted = list(point_ids)
        missing = [p for p in wanted if p not in self.point_ids]
        if missing:
            raise KeyError(f"calibration points not present: {missing}")
        cols, segments, pos = [], [], 0
        for pid in wanted:
            for qid, s, e in self.segments:
                if qid == pid:
                    cols.extend(range(s, e))
                    segments.append((pid, pos, pos + (e - s)))
                    pos += e - s
        cols = np.array(cols)
        return CalibrationSet(
            D=self.D[:, cols], R=self.R[:, cols], segments=segments,
            timestamps_ms=None if self.timestamps_ms is None else self.timestamps_ms[cols],
            masks=None if self.masks is None else self.masks[:, cols])


@dataclass
class FitReport:
    """Diagnostics from an affine calibration fit."""

    n_points: int
    n_obs: int
    active_set: tuple[int, ...]
    singular_values: np.ndarray
    rank: int
    n_dropped: int
    residual_rms: float
    spans_space: bool
    messages: list[str] = field(default_factory=list)


@dataclass
class AffineMap:
    """Affine DOA-to-room map ``r = r0 + B d`` for a fixed active array set.

    ``B`` has shape (N, 3 * len(active_set)); apply it to the rows of a
    concatenated DOA belonging to the active arrays, in ascending order.
    """

    r0: np.ndarray
    B: np.ndarray
    active_set: tuple[int, ...]
    report: FitReport | None = None

    @property
    def n_dim(self) -> int:
        return self.r0.shape[0]


@dataclass
class PcaModel:
    """Leading left singular vectors of the calibration DOA matrix.

    The decomposition is taken on D directly (no mean centering), so the
    first singular vector largely encodes the mean DOA.  Each vector is
    sign-fixed so its largest-magnitude entry is positive.
    """

    U: np.ndarray
    singular_values: np.ndarray
    J: int

    @property
    def n_rows(self) -> int:
        return self.U.shape[0]


@dataclass
class ReferencePair:
    """A known (DOA, location) anchor for disturbance mapping."""

    d_ref: ConcatenatedDoa
    r_ref: np.ndarray
    a_ref: np.ndarray | None = None

    def __post_init__(self):
        self.r_ref = np.asarray(self.r_ref, dtype=float)
        if self.a_ref is not None:
            self.a_ref = np.asarray(self.a_ref, dtype=float)

    def with_projection(self, model: PcaModel) -> "ReferencePair":
        return ReferencePair(self.d_ref, self.r_ref,
                             a_ref=project_pca(model, self.d_ref))


def active_rows(active_set, n_arrays: int) -> np.ndarray:
    """Row indices of D belonging to the given arrays (ascending)."""
    idx = sorted(set(int(a) for a in active_set))
    if any(a < 0 or a >= n_arrays for a in idx):
        raise ValueError(f"active set {idx} out of range for {n_arrays} arrays")
    return np.concatenate([np.arange(3 * a, 3 * a + 3) for a in idx])


def fit_pca(cal: CalibrationSet, J: int = 2) -> PcaModel:
    """Singular value decomposition of the calibration DOA matrix.

    Returns the first ``J`` left singular vectors and all singular values.
    The calibration set must be fully active and provide at least J
    observations; J may not exceed the numerical rank of D.
    """
    if not cal.is_fully_active():
        raise ValueError("PCA calibration requires a fully active calibration set")
    if cal.n_obs < J:
        raise ValueError(f"need at least J={J} observations, got {cal.n_obs}")
    u, s, _ = np.linalg.svd(cal.D, full_matrices=False)
    rank = int(np.sum(s > PINV_RTOL * s[0])) if s.size and s[0] > 0 else 0
    if J > rank:
        raise ValueError(f"J={J} exceeds numerical rank {rank} of the DOA matrix")
    uj = u[:, :J].copy()
    for j in range(J):
        k = np.argmax(np.abs(uj[:, j]))
        if uj[k, j] < 0:
            uj[:, j] = -uj[:, j]
    return PcaModel(U=uj, singular_values=s, J=J)


def project_pca(model: PcaModel, d) -> np.ndarray:
    """PCA coefficients ``a_j = d . u_j`` of an observation.

    A partially-active ConcatenatedDoa is projected as-is (zeros standing in
    for the missing arrays), with a PartialProjectionWarning.
    """
    if isinstance(d, ConcatenatedDoa):
        if not np.all(d.active_mask):
            warnings.warn(
                "projecting a partially-active DOA vector with the full-array PCA model",
                PartialProjectionWarning, stacklevel=2)
        vec = d.values
    else:
        vec = np.asarray(d, dtype=float)
    if vec.shape[0] != model.n_rows:
        raise ValueError(f"expected {model.n_rows} components, got {vec.shape[0]}")
    return model.U.T @ vec


def fit_affine(cal: CalibrationSet, active=None) -> AffineMap:
    """Closed-form least-squares fit of the affine map ``r = r0 + B d``.

    With observation means ``dbar`` and ``rbar``, the coefficients are

        B  = [R - rbar 1^T] D^T [(D - dbar 1^T) D^T]^+
        r0 = rbar - B dbar

    where ``+`` is the Moore-Penrose pseudo-inverse (singular values below
    1e-10 of the largest are zeroed).  Only rows of D belonging to ``active``
    arrays (default all) are used.  At least two distinct calibration points
    are required; N+1 points spanning the room space give a full-rank map,
    while fewer leave the map degenerate (e.g. two points map everything to
    the line through them), which is permitted and flagged in the report.
    """
    if not cal.is_fully_active():
        raise ValueError("affine calibration requires a fully active calibration set")
    if active is None:
        active = range(cal.n_arrays)
    active = tuple(sorted(set(int(a) for a in active)))
    if not active:
        raise NoObservationError("active set is empty")
    rows = active_rows(active, cal.n_arrays)

    locations = {tuple(cal.R[:, s]) for _, s, _ in cal.segments}
    if len(locations) < 2:
        raise ValueError(
            f"need at least 2 distinct calibration points ({cal.n_dim + 1} spanning "
            f"points for a full-rank {cal.n_dim}-D map), got {len(locations)}")

    D = cal.D[rows]
    R = cal.R
    dbar = D.mean(axis=1, keepdims=True)
    rbar = R.mean(axis=1, keepdims=True)
    P = (D - dbar) @ D.T
    u, s, vt = np.linalg.svd(P)
    rank = int(np.sum(s > PINV_RTOL * s[0])) if s.size and s[0] > 0 else 0
    s_inv = np.where(s > PINV_RTOL * s[0], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    B = (R - rbar) @ D.T @ (vt.T * s_inv) @ u.T
    r0 = (rbar - B @ dbar).ravel()

    resid = R - r0[:, None] - B @ D
    centered_r = R - rbar
    spans = np.linalg.matrix_rank(centered_r) >= cal.n_dim
    messages = []
    if not spans:
        messages.append("calibration locations do not span the room space; "
                        "map is degenerate (line/point constrained)")
    if rank < P.shape[0]:
        messages.append(f"DOA covariance rank {rank} < {P.shape[0]}; "
                        f"pseudo-inverse dropped {P.shape[0] - rank} directions")
    report = FitReport(
        n_points=len(cal.segments), n_obs=cal.n_obs, active_set=active,
        singular_values=s, rank=rank, n_dropped=int(P.shape[0] - rank),
        residual_rms=float(np.sqrt(np.mean(resid ** 2))),
        spans_space=bool(spans), messages=messages)
    return AffineMap(r0=r0, B=B, active_set=active, report=report)


def map_affine(amap: AffineMap, d: ConcatenatedDoa) -> np.ndarray:
    """Apply ``r = r0 + B d`` using the map's active rows of ``d``."""
    missing = [a for a in amap.active_set if not d.active_mask[a]]
    if missing:
        raise ActiveSetMismatchError(
            f"observation is missing arrays {missing} required by this map")
    rows = active_rows(amap.active_set, d.n_arrays)
    return amap.r0 + amap.B @ d.values[rows]


def map_with_missing(cal: CalibrationSet, d: ConcatenatedDoa, cache: dict,
                     reuse_full_r0: bool = False) -> np.ndarray:
    """Map an observation using only its active arrays.

    The affine map for exactly ``d``'s active set is fit on the
    corresponding row subset of the calibration matrix (and cached in
    ``cache``, keyed by the active-set mask), then applied to the active
    subvector.  By default the offset r0 is refit along with B for each
    active subset; ``reuse_full_r0=True`` instead keeps the full-set r0, for
    comparison.
    """
    active = tuple(int(a) for a in np.flatnonzero(d.active_mask))
    if not active:
        raise NoObservationError("observation has no active arrays")
    key = (tuple(bool(b) for b in d.active_mask), reuse_full_r0)
    amap = cache.get(key)
    if amap is None:
        amap = fit_affine(cal, active=active)
        if reuse_full_r0:
            full_key = ((True,) * cal.n_arrays, False)
            full = cache.get(full_key)
            if full is None:
                full = fit_affine(cal)
                cache.setdefault(full_key, full)
            amap = AffineMap(r0=full.r0.copy(), B=amap.B,
                             active_set=amap.active_set, report=amap.report)
        cache.setdefault(key, amap)
        amap = cache[key]
    return map_affine(amap, d)


class MissingArrayMapper:
    """Convenience wrapper owning the per-active-set map cache.

    Safe to share across threads: fits are deterministic, so concurrent
    duplicate fits of the same active set store identical maps, and dict
    insertion via setdefault keeps exactly one.
    """

    def __init__(self, cal: CalibrationSet, reuse_full_r0: bool = False):
        self.cal = cal
        self.reuse_full_r0 = reuse_full_r0
        self.cache: dict = {}

    def map(self, d: ConcatenatedDoa) -> np.ndarray:
        return map_with_missing(self.cal, d, self.cache, self.reuse_full_r0)


def map_from_reference(amap: AffineMap, ref: ReferencePair,
                       d_n: ConcatenatedDoa) -> np.ndarray:
    """Locate ``d_n`` relative to a reference pair: ``r_n = r_ref + B (d_n - d_ref)``."""
    rows = active_rows(amap.active_set, d_n.n_arrays)
    for obs in (ref.d_ref, d_n):
        missing = [a for a in amap.active_set if not obs.active_mask[a]]
        if missing:
            raise ActiveSetMismatchError(
                f"reference/observation missing arrays {missing} required by this map")
    return ref.r_ref + amap.B @ (d_n.values[rows] - ref.d_ref.values[rows])


def pca_to_room(amap: AffineMap, model: PcaModel, ref: ReferencePair,
                a_n: np.ndarray) -> np.ndarray:
    """Locate a PCA observation: ``r_n = r_ref + C (a_n - a_ref)`` with ``C = B U``.

    The affine map and PCA model must be fit on the same calibration rows.
    """
    a_n = np.asarray(a_n, dtype=float)
    if a_n.shape[0] != model.J:
        raise ValueError(f"expected {model.J} PCA coefficients, got {a_n.shape[0]}")
    if amap.B.shape[1] != model.n_rows:
        raise ValueError("affine map and PCA model were fit on different row sets")
    if ref.a_ref is None:
        raise ValueError("reference pair has no PCA coefficients; "
                         "use ReferencePair.with_projection first")
    C = amap.B @ model.U
    return ref.r_ref + C @ (a_n - ref.a_ref)


def pca_distances(model: PcaModel, cal: CalibrationSet, a: np.ndarray) -> dict[int, float]:
    """Euclidean distance in PCA coordinates from ``a`` to each calibration point."""
    a = np.asarray(a, dtype=float)
    out = {}
    for pid in cal.point_ids:
        a_k = model.U.T @ cal.point_mean_doa(pid)
        out[pid] = float(np.linalg.norm(a - a_k))
    return out


# ---------------------------------------------------------------------------
# serialization

_AFFINE_MAGIC = "doafusion-affine-map v1"
_PCA_MAGIC = "doafusion-pca-model v1"


def _write_matrix(fh, mat: np.ndarray) -> None:
    for row in np.atleast_2d(mat):
        fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def save_affine_map(path, amap: AffineMap) -> None:
    """Versioned textual format: magic, dimensions, active set, r0, rows of B."""
    with open(path, "w") as fh:
        fh.write(_AFFINE_MAGIC + "\n")
        fh.write(f"{amap.n_dim} {amap.B.shape[1]}\n")
        fh.write(" ".join(str(a) for a in amap.active_set) + "\n")
        _write_matrix(fh, amap.r0)
        _write_matrix(fh, amap.B)


def load_affine_map(path) -> AffineMap:
    with open(path) as fh:
        if fh.readline().strip() != _AFFINE_MAGIC:
            raise ValueError(f"{path}: not an affine map file")
        n_dim, n_cols = (int(x) for x in fh.readline().split())
        active = tuple(int(x) for x in fh.readline().split())
        r0 = np.array([float(x) for x in fh.readline().split()])
        B = np.array([[float(x) for x in fh.readline().split()] for _ in range(n_dim)])
    if r0.shape != (n_dim,) or B.shape != (n_dim, n_cols):
        raise ValueError(f"{path}: inconsistent dimensions")
    return AffineMap(r0=r0, B=B, active_set=active)


def save_pca_model(path, model: PcaModel) -> None:
    """Versioned textual format: magic, dimensions, rows of U, singular values."""
    with open(path, "w") as fh:
        fh.write(_PCA_MAGIC + "\n")
        fh.write(f"{model.n_rows} {model.J} {model.singular_values.shape[0]}\n")
        _write_matrix(fh, model.U)
        _write_matrix(fh, model.singular_values)


def load_pca_model(path) -> PcaModel:
    with open(path) as fh:
        if fh.readline().strip() != _PCA_MAGIC:
            raise ValueError(f"{path}: not a PCA model file")
        n_rows, j, n_sv = (int(x) for x in fh.readline().split())
        U = np.array([[float(x) for x in fh.readline().split()] for _ in range(n_rows)])
        s = np.array([float(x) for x in fh.readline().split()])
    if U.shape != (n_rows, j) or s.shape != (n_sv,):
        raise ValueError(f"{path}: inconsistent dimensions")
    return PcaModel(U=U, singular_values=s, J=j)


# ---------------------------------------------------------------------------
# calibration CSV

def calibration_to_csv(path, cal: CalibrationSet) -> None:
    """Columns: timestamp_ms, point_id, r_x, r_y[, r_z], 3M DOAs, M mask bits."""
    m = cal.n_arrays
    header = ["timestamp_ms", "point_id"] + ["r_x", "r_y", "r_z"][:cal.n_dim]
    for a in range(m):
        header += [f"d{a}_x", f"d{a}_y", f"d{a}_z"]
    header += [f"m{a}" for a in range(m)]
    ts = cal.timestamps_ms
    if ts is None:
        ts = 64 * np.arange(cal.n_obs)
    masks = cal.masks if cal.masks is not None else np.ones((m, cal.n_obs), dtype=bool)
    col_pid = np.empty(cal.n_obs, dtype=int)
    for pid, s, e in cal.segments:
        col_pid[s:e] = pid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for ell in range(cal.n_obs):
            row = [int(ts[ell]), int(col_pid[ell])]
            row += [repr(float(x)) for x in cal.R[:, ell]]
            row += [repr(float(x)) for x in cal.D[:, ell]]
            row += [int(b) for b in masks[:, ell]]
            w.writerow(row)


def calibration_from_csv(path) -> CalibrationSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_dim = 3 if "r_z" in header else 2
        m = sum(1 for h in header if h.startswith("m"))
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: empty calibration CSV")
    ts = np.array([int(r[0]) for r in rows])
    pids = np.array([int(r[1]) for r in rows])
    base = 2
    R = np.array([[float(x) for x in r[base:base + n_dim]] for r in rows]).T
    D = np.array([[float(x) for x in r[base + n_dim:base + n_dim + 3 * m]] for r in rows]).T
    masks = np.array([[bool(int(x)) for x in r[base + n_dim + 3 * m:]] for r in rows]).T
    segments = []
    start = 0
    for i in range(1, len(rows) + 1):
        if i == len(rows) or pids[i] != pids[start]:
            segments.append((int(pids[start]), start, i))
            start = i
    seen = [pid for pid, _, _ in segments]
    if len(set(seen)) != len(seen):
        raise ValueError(f"{path}: point ids are not contiguous")
    return CalibrationSet(D=D, R=R, segments=segments, timestamps_ms=ts, masks=masks)
