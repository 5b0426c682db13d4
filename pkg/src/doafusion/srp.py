"""Per-array DOA estimation: STFT, SRP-PHAT scan, peak picking, tracking.

Each 8-microphone array runs an independent pipeline: Hann-windowed STFT
frames, phase-transform-normalized cross-spectra steered over the half-sphere
grid, greedy peak picking, a single-track Kalman smoother on the DOA
components, and 64 ms binning of the 8 ms track output.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .grid import ArrayGeometry, DoaVector, HalfSphereGrid, grid_tdoas

PHAT_EPS = 1e-12
N_CHANNELS = 8


@dataclass(frozen=True)
class MultichannelFrame:
    """One windowing unit of 8-channel audio (length a power of two)."""

    samples: np.ndarray
    frame_index: int
    sample_rate: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2:
            raise ValueError("samples must be (channels, n)")
        object.__setattr__(self, "samples", s)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class SteeredPowerMap:
    """SRP-PHAT power per grid point."""

    powers: np.ndarray
    grid: HalfSphereGrid

    def __post_init__(self):
        p = np.asarray(self.powers, dtype=float)
        if p.shape[0] != len(self.grid) or not np.all(np.isfinite(p)):
            raise ValueError("powers must be finite, one per grid point")
        object.__setattr__(self, "powers", p)

    def argmax(self) -> int:
        return int(np.argmax(self.powers))


@dataclass
class TrackedDoa:
    """One smoothed DOA record with its peak steered power."""

    timestamp_ms: int
    doa: DoaVector
    energy: float


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def stft(frame: MultichannelFrame) -> np.ndarray:
    """Hann-windowed FFT per channel; returns bins 0..N/2 (conjugate symmetry)."""
    n = frame.n_samples
    if not _is_power_of_two(n):
        raise ValueError(f"frame length must be a power of two, got {n}")
    window = np.hanning(n)
    return np.fft.rfft(frame.samples * window, axis=1)


def frame_signal(signal: np.ndarray, sample_rate: float,
                 frame_len: int = 512, hop: int = 128) -> list[MultichannelFrame]:
    """Slice a (channels, T) signal into hop-overlapped frames."""
    signal = np.asarray(signal, dtype=float)
    frames = []
    for i, start in enumerate(range(0, signal.shape[1] - frame_len + 1, hop)):
        frames.append(MultichannelFrame(samples=signal[:, start:start + frame_len],
                                        frame_index=i, sample_rate=sample_rate))
    return frames


class _SteeringTables:
    """Precomputed per-pair phase tables for one (grid, geometry, N) combination.

    For grid point i, pair p<q with TDOA tau, and bin k the steered term uses
    the symmetric (centered) frequency convention, under which the power is
    real for fractional TDOAs:

        E contribution = h[0] + h[N/2] cos(pi tau) + 2 Re sum_k h[k] e^{j 2 pi tau k / N}
    """

    def __init__(self, grid: HalfSphereGrid, geom: ArrayGeometry, n_fft: int):
        tau = grid_tdoas(grid, geom)  # (G, n_pairs)
        k_mid = np.arange(1, n_fft // 2)
        theta = 2.0 * np.pi * tau[:, :, None] * k_mid[None, None, :] / n_fft
        self.cos_mid = np.cos(theta)
        self.sin_mid = np.sin(theta)
        self.cos_nyq = np.cos(np.pi * tau)
        self.n_fft = n_fft

    def steer(self, phat: np.ndarray) -> np.ndarray:
        """Steered power for a (n_pairs, N/2 + 1) PHAT cross-spectrum table."""
        k = self.n_fft // 2
        mid = 2.0 * (np.einsum("gpk,pk->g", self.cos_mid, phat[:, 1:k].real)
                     - np.einsum("gpk,pk->g", self.sin_mid, phat[:, 1:k].imag))
        dc_nyq = phat[:, 0].real.sum() + self.cos_nyq @ phat[:, k].real
        return (mid + dc_nyq) / self.n_fft


_steering_cache: dict = {}
_steering_lock = threading.Lock()


def _steering_for(grid: HalfSphereGrid, geom: ArrayGeometry, n_fft: int) -> _SteeringTables:
    key = (hash(grid.points.tobytes()), hash(geom.mic_positions.tobytes()),
           geom.sample_rate, geom.speed_of_sound, n_fft)
    tables = _steering_cache.get(key)
    if tables is None:
        with _steering_lock:
            tables = _steering_cache.get(key)
            if tables is None:
                tables = _SteeringTables(grid, geom, n_fft)
                if len(_steering_cache) > 4:
                    _steering_cache.clear()
                _steering_cache[key] = tables
    return tables


def phat_cross_spectra(spectra: np.ndarray, geom: ArrayGeometry) -> np.ndarray:
    """Magnitude-normalized cross-spectra per pair; near-silent bins zeroed."""
    spectra = np.asarray(spectra)
    if spectra.shape[0] != N_CHANNELS:
        raise ValueError(f"expected {N_CHANNELS} channels, got {spectra.shape[0]}")
    pairs = geom.mic_pairs()
    p_idx = [p for p, _ in pairs]
    q_idx = [q for _, q in pairs]
    cross = spectra[p_idx] * np.conj(spectra[q_idx])
    mag = np.abs(spectra[p_idx]) * np.abs(spectra[q_idx])
    phat = np.where(mag < PHAT_EPS, 0.0, cross / np.maximum(mag, PHAT_EPS))
    # DC and Nyquist bins of a real signal are real; their PHAT value must be too
    assert np.all(np.abs(phat[:, 0].imag) <= 1e-9)
    assert np.all(np.abs(phat[:, -1].imag) <= 1e-9)
    return phat


def srp_phat_power(spectra: np.ndarray, grid: HalfSphereGrid,
                   geom: ArrayGeometry) -> SteeredPowerMap:
    """Steered-response power with phase transform over the DOA grid.

    For grid point i the power sums, over all microphone pairs p < q and
    frequency bins, the PHAT-normalized cross-spectrum rotated by the pair's
    TDOA phase and scaled by 1/N.  Bins where the spectral magnitude product
    falls below a floor contribute zero.

    Parameters
    ----------
    spectra : (8, N/2 + 1) complex array
        Per-channel STFT of one frame, as returned by :func:`stft`.
    grid : HalfSphereGrid
    geom : ArrayGeometry

    Returns
    -------
    SteeredPowerMap
    """
    spectra = np.asarray(spectra)
    n_fft = 2 * (spectra.shape[1] - 1)
    phat = phat_cross_spectra(spectra, geom)
    tables = _steering_for(grid, geom, n_fft)
    return SteeredPowerMap(powers=tables.steer(phat), grid=grid)


def average_power_map(frames, grid: HalfSphereGrid, geom: ArrayGeometry) -> SteeredPowerMap:
    """Mean steered power over several frames.

    The steering operation is linear in the PHAT table, so the per-frame
    tables are averaged first and steered once.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    acc = None
    for frame in frames:
        phat = phat_cross_spectra(stft(frame), geom)
        acc = phat if acc is None else acc + phat
    acc /= len(frames)
    tables = _steering_for(grid, geom, 2 * (acc.shape[1] - 1))
    return SteeredPowerMap(powers=tables.steer(acc), grid=grid)


def pick_peaks(power_map: SteeredPowerMap, k: int = 4,
               min_separation_deg: float = 10.0) -> list[tuple[int, float]]:
    """Up to ``k`` strongest grid points, greedily suppressing neighbors.

    Points within ``min_separation_deg`` of an already-selected peak are
    skipped.  Ties in power are broken by the lower grid index, so identical
    maps always yield identical peak lists.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    powers = power_map.powers
    pts = power_map.grid.points
    min_cos = np.cos(np.radians(min_separation_deg))
    order = np.lexsort((np.arange(len(powers)), -powers))
    chosen: list[tuple[int, float]] = []
    for idx in order:
        if len(chosen) == k:
            break
        if any(pts[idx] @ pts[j] > min_cos for j, _ in chosen):
            continue
        chosen.append((int(idx), float(powers[idx])))
    return chosen


@dataclass
class TrackerConfig:
    """Single-source constant-position Kalman filter settings.

    The state is the 3 Cartesian DOA components, renormalized to the unit
    half-sphere after every update.  ``e_min`` is the steered-power floor
    below which a step emits nothing (the source is considered unheard).
    """

    process_var: float = 1e-4
    meas_var: float = 4e-3
    gate_deg: float = 20.0
    t_lost_ms: int = 500
    e_min: float = 0.0


class KalmanTracker:
    """Tracks the loudest source's DOA through a stream of peak lists."""

    def __init__(self, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        self.state: np.ndarray | None = None
        self.cov: float = 0.0
        self.last_assoc_ms: int | None = None
        self.last_energy: float = 0.0

    def _normalize(self) -> None:
        v = self.state.copy()
        if v[2] < 0.0:
            v[2] = 0.0
        n = np.linalg.norm(v)
        self.state = np.array([0.0, 0.0, 1.0]) if n == 0.0 else v / n

    def step(self, timestamp_ms: int, peaks) -> TrackedDoa | None:
        """Advance one hop.  ``peaks`` is a list of (unit-vector, energy) pairs."""
        cfg = self.config
        usable = [(np.asarray(v, dtype=float), float(e)) for v, e in peaks
                  if e >= cfg.e_min]
        if self.state is not None and self.last_assoc_ms is not None \
                and timestamp_ms - self.last_assoc_ms > cfg.t_lost_ms:
            self.state = None

        if self.state is None:
            if not usable:
                return None
            vec, energy = max(usable, key=lambda p: p[1])
            self.state = vec.copy()
            self.cov = cfg.meas_var
            self.last_assoc_ms = timestamp_ms
            self.last_energy = energy
            self._normalize()
            return TrackedDoa(timestamp_ms, DoaVector.from_array(self.state), energy)

        # predict: constant position, inflate covariance
        self.cov += cfg.process_var

        gate_cos = np.cos(np.radians(cfg.gate_deg))
        gated = [(v, e) for v, e in usable if v @ self.state >= gate_cos]
        if not gated:
            # coast; emit the held state only if something was heard at all
            if not usable:
                return None
            return TrackedDoa(timestamp_ms, DoaVector.from_array(self.state),
                              self.last_energy)

        vec, energy = max(gated, key=lambda p: p[0] @ self.state)
        denom = self.cov + cfg.meas_var
        gain = 1.0 if denom == 0.0 else self.cov / denom
        self.state = self.state + gain * (vec - self.state)
        self.cov = (1.0 - gain) * self.cov
        self._normalize()
        self.last_assoc_ms = timestamp_ms
        self.last_energy = energy
        return TrackedDoa(timestamp_ms, DoaVector.from_array(self.state), energy)


def kalman_track(steps, config: TrackerConfig | None = None):
    """Run a tracker over (timestamp_ms, peak list) steps, yielding TrackedDoa.

    Timestamps must be strictly increasing.
    """
    tracker = KalmanTracker(config)
    last_ts = None
    for timestamp_ms, peaks in steps:
        if last_ts is not None and timestamp_ms <= last_ts:
            raise ValueError("timestamps must be strictly increasing")
        last_ts = timestamp_ms
        rec = tracker.step(timestamp_ms, peaks)
        if rec is not None:
            yield rec


def bin_to_records(records, bin_ms: int = 64,
                   counters: dict | None = None) -> list[TrackedDoa]:
    """Average tracked DOAs into fixed time bins.

    Each record joins the bin ``floor(timestamp / bin_ms)``; the output
    carries the renormalized component-wise mean, stamped at the bin start.
    Bins whose mean cancels to zero norm are dropped and counted under
    ``counters['dropped_zero_norm']``.
    """
    if bin_ms <= 0:
        raise ValueError("bin_ms must be positive")
    bins: dict[int, list[TrackedDoa]] = {}
    for rec in records:
        bins.setdefault(rec.timestamp_ms // bin_ms, []).append(rec)
    out = []
    for b in sorted(bins):
        group = bins[b]
        if len(group) == 1:
            # the mean of one record is itself; skipping the renormalization
            # makes re-binning a binned stream an exact identity
            out.append(TrackedDoa(timestamp_ms=b * bin_ms, doa=group[0].doa,
                                  energy=group[0].energy))
            continue
        mean = np.mean([r.doa.as_array() for r in group], axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            if counters is not None:
                counters["dropped_zero_norm"] = counters.get("dropped_zero_norm", 0) + 1
            continue
        out.append(TrackedDoa(
            timestamp_ms=b * bin_ms,
            doa=DoaVector.from_array(mean / norm),
            energy=float(np.mean([r.energy for r in group]))))
    return out


@dataclass
class FrontendConfig:
    """End-to-end per-array pipeline settings (8 ms hop at 16 kHz defaults)."""

    frame_len: int = 512
    hop: int = 128
    n_peaks: int = 4
    bin_ms: int = 64
    e_min_factor: float = 0.15  # of the microphone pair count
    tracker: TrackerConfig = field(default_factory=TrackerConfig)


def run_frontend(signal: np.ndarray, grid: HalfSphereGrid, geom: ArrayGeometry,
                 config: FrontendConfig | None = None,
                 start_ms: int = 0) -> list[TrackedDoa]:
    """Full pipeline on a (8, T) signal: frames to binned 64 ms DOA records."""
    cfg = config or FrontendConfig()
    n_pairs = len(geom.mic_pairs())
    tracker_cfg = TrackerConfig(**{**vars(cfg.tracker),
                                   "e_min": cfg.e_min_factor * n_pairs})
    tracker = KalmanTracker(tracker_cfg)
    hop_ms = 1000.0 * cfg.hop / geom.sample_rate
    tracked = []
    for frame in frame_signal(signal, geom.sample_rate, cfg.frame_len, cfg.hop):
        power_map = srp_phat_power(stft(frame), grid, geom)
        peaks = pick_peaks(power_map, k=cfg.n_peaks)
        peak_vecs = [(grid.points[i], e) for i, e in peaks]
        ts = start_ms + int(round(frame.frame_index * hop_ms))
        rec = tracker.step(ts, peak_vecs)
        if rec is not None:
            tracked.append(rec)
    return bin_to_records(tracked, bin_ms=cfg.bin_ms)
