"""Fusion-center ingestion: wire protocol, append-only storage, timestamp join.

Arrays push one textual record per 64 ms over TCP (or the same lines arrive
as batch files); the service appends them to per-array logs, then serves
time-range queries that bin records to a fixed window, average each array's
DOAs per bin, and join across arrays into concatenated observations.

Wire format, one record per line:

    ts_ms,array_id,dx,dy,dz,energy,seq

``seq`` is a per-array monotone counter used only for loss accounting.
Floats are written with full precision so a stored file replays bit-exactly.
"""

from __future__ import annotations

import os
import socket
import socketserver
import threading
from dataclasses import dataclass

import numpy as np

from .fusion import ConcatenatedDoa

WIRE_NORM_TOL = 1e-3


@dataclass(frozen=True)
class WireRecord:
    """One per-array DOA summary as it crosses the wire."""

    timestamp_ms: int
    array_id: int
    dx: float
    dy: float
    dz: float
    energy: float
    seq: int

    def doa_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])


@dataclass(frozen=True)
class JoinedRow:
    """One fused observation: bin start plus the concatenated DOA."""

    bin_start_ms: int
    doa: ConcatenatedDoa


def format_wire_line(rec: WireRecord) -> str:
    return (f"{rec.timestamp_ms},{rec.array_id},{rec.dx!r},{rec.dy!r},"
            f"{rec.dz!r},{rec.energy!r},{rec.seq}")


def parse_wire_line(line: str) -> WireRecord:
    parts = line.strip().split(",")
    if len(parts) != 7:
        raise ValueError(f"expected 7 fields, got {len(parts)}")
    return WireRecord(
        timestamp_ms=int(parts[0]), array_id=int(parts[1]),
        dx=float(parts[2]), dy=float(parts[3]), dz=float(parts[4]),
        energy=float(parts[5]), seq=int(parts[6]))


def _normalize_record(rec: WireRecord) -> WireRecord | None:
    """Validate wire tolerances, renormalize the DOA, clamp dz >= 0."""
    v = rec.doa_array()
    norm = np.linalg.norm(v)
    if abs(norm - 1.0) > WIRE_NORM_TOL or v[2] < -WIRE_NORM_TOL:
        return None
    if v[2] < 0.0:
        v[2] = 0.0
    v /= np.linalg.norm(v)
    return WireRecord(rec.timestamp_ms, rec.array_id,
                      float(v[0]), float(v[1]), float(v[2]),
                      rec.energy, rec.seq)


class DoaStorage:
    """Append-only per-array logs plus an in-memory index for range queries.

    Records are kept in arrival order; duplicates of the same
    (array_id, timestamp) keep the last received.  Writes are serialized by
    an internal lock, and queries snapshot under the same lock, so readers
    never observe a partially ingested record.
    """

    def __init__(self, directory=None, n_arrays: int = 5):
        self.directory = None if directory is None else str(directory)
        self.n_arrays = n_arrays
        self._records: dict[int, list[WireRecord]] = {}
        self._files: dict[int, object] = {}
        self._lock = threading.Lock()
        self._conflict_keys: set[tuple[int, int]] = set()
        self.counters = {"received": 0, "ingested": 0, "rejected": 0,
                         "conflicting_duplicates": 0, "partial_lines": 0}
        if self.directory is not None:
            os.makedirs(self.directory, exist_ok=True)
            self._load_existing()

    def _count(self, key: str, n: int = 1) -> None:
        with self._lock:
            self.counters[key] += n

    def _log_path(self, array_id: int) -> str:
        return os.path.join(self.directory, f"array_{array_id}.log")

    def _load_existing(self) -> None:
        for name in sorted(os.listdir(self.directory)):
            if not (name.startswith("array_") and name.endswith(".log")):
                continue
            array_id = int(name[len("array_"):-len(".log")])
            with open(os.path.join(self.directory, name)) as fh:
                for line in fh:
                    rec = parse_wire_line(line)
                    self._records.setdefault(array_id, []).append(rec)

    def ingest_line(self, line: str) -> bool:
        """Parse, validate and store one wire line; malformed input is counted."""
        self._count("received")
        try:
            rec = parse_wire_line(line)
        except (ValueError, IndexError):
            self._count("rejected")
            return False
        return self._ingest_parsed(rec)

    def ingest_record(self, rec: WireRecord) -> bool:
        self._count("received")
        return self._ingest_parsed(rec)

    def _ingest_parsed(self, rec: WireRecord) -> bool:
        norm = _normalize_record(rec)
        if norm is None or rec.array_id < 0 or rec.array_id >= self.n_arrays:
            self._count("rejected")
            return False
        with self._lock:
            if self.directory is not None:
                fh = self._files.get(norm.array_id)
                if fh is None:
                    fh = open(self._log_path(norm.array_id), "a")
                    self._files[norm.array_id] = fh
                fh.write(format_wire_line(norm) + "\n")
            self._records.setdefault(norm.array_id, []).append(norm)
            self.counters["ingested"] += 1
        return True

    def ingest_file(self, path) -> int:
        """Batch-ingest a capture file; returns the number of accepted records."""
        n = 0
        with open(path) as fh:
            for line in fh:
                if line.endswith("\n"):
                    n += bool(self.ingest_line(line))
                else:
                    self._count("partial_lines")
        return n

    def flush(self) -> None:
        with self._lock:
            for fh in self._files.values():
                fh.flush()

    def close(self) -> None:
        with self._lock:
            for fh in self._files.values():
                fh.close()
            self._files.clear()

    def n_records(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._records.values())

    def _deduped(self) -> dict[int, dict[int, WireRecord]]:
        """Per array: timestamp -> last-arrived record.  Caller holds no lock."""
        with self._lock:
            snapshot = {a: list(v) for a, v in self._records.items()}
        out: dict[int, dict[int, WireRecord]] = {}
        conflicts: set[tuple[int, int]] = set()
        for array_id, recs in snapshot.items():
            by_ts: dict[int, WireRecord] = {}
            for rec in recs:
                prev = by_ts.get(rec.timestamp_ms)
                if prev is not None and prev != rec:
                    conflicts.add((array_id, rec.timestamp_ms))
                by_ts[rec.timestamp_ms] = rec
            out[array_id] = by_ts
        with self._lock:
            self._conflict_keys |= conflicts
            self.counters["conflicting_duplicates"] = len(self._conflict_keys)
        return out

    def join_bins(self, start_ms: int, end_ms: int, bin_ms: int = 64,
                  clock_offsets: dict[int, int] | None = None) -> list[JoinedRow]:
        """Bin, average, and join records with timestamps in [start_ms, end_ms).

        Bin boundaries are absolute multiples of ``bin_ms`` (so the earliest
        record's bin is simply its timestamp rounded down).  Per-array clock
        offsets (milliseconds, added to the raw timestamps) model constant
        synchronization error; records of an array absent from a bin leave it
        inactive there.  Bins with no active array are omitted.
        """
        if bin_ms <= 0:
            raise ValueError("bin_ms must be positive")
        if end_ms < start_ms:
            raise ValueError(f"inverted time range [{start_ms}, {end_ms})")
        offsets = clock_offsets or {}
        per_bin: dict[int, dict[int, list[WireRecord]]] = {}
        for array_id, by_ts in self._deduped().items():
            off = offsets.get(array_id, 0)
            # timestamp order keeps the per-bin mean independent of arrival order
            for ts in sorted(by_ts):
                corrected = ts + off
                if not (start_ms <= corrected < end_ms):
                    continue
                b = (corrected // bin_ms) * bin_ms
                per_bin.setdefault(b, {}).setdefault(array_id, []).append(by_ts[ts])
        rows = []
        for b in sorted(per_bin):
            values = np.zeros(3 * self.n_arrays)
            mask = np.zeros(self.n_arrays, dtype=bool)
            for array_id, recs in per_bin[b].items():
                if len(recs) == 1:
                    # stored records are unit-norm already; the mean of one
                    # needs no renormalization
                    values[3 * array_id] = recs[0].dx
                    values[3 * array_id + 1] = recs[0].dy
                    values[3 * array_id + 2] = recs[0].dz
                    mask[array_id] = True
                    continue
                mean = np.mean([r.doa_array() for r in recs], axis=0)
                norm = np.linalg.norm(mean)
                if norm == 0.0:
                    continue
                mean /= norm
                if mean[2] < 0.0:
                    mean[2] = 0.0
                    mean /= np.linalg.norm(mean)
                values[3 * array_id: 3 * array_id + 3] = mean
                mask[array_id] = True
            if mask.any():
                rows.append(JoinedRow(
                    bin_start_ms=int(b),
                    doa=ConcatenatedDoa(values=values, active_mask=mask,
                                        timestamp_ms=int(b))))
        return rows

    def query(self, start_ms: int, end_ms: int, bin_ms: int = 64) -> list[JoinedRow]:
        """Chronological joined rows for a time range (64 ms bins by default)."""
        return self.join_bins(start_ms, end_ms, bin_ms=bin_ms)


def tracked_to_wire(records, array_id: int, seq_start: int = 0) -> list[WireRecord]:
    """Convert per-array 64 ms tracker output to wire records."""
    return [WireRecord(timestamp_ms=r.timestamp_ms, array_id=array_id,
                       dx=r.doa.dx, dy=r.doa.dy, dz=r.doa.dz,
                       energy=r.energy, seq=seq_start + i)
            for i, r in enumerate(records)]


class _WireHandler(socketserver.StreamRequestHandler):
    def handle(self):
        storage = self.server.storage  # type: ignore[attr-defined]
        buffer = b""
        while True:
            try:
                chunk = self.request.recv(65536)
            except OSError:
                break
            if not chunk:
                break
            buffer += chunk
            while b"\n" in buffer:
                line, buffer = buffer.split(b"\n", 1)
                try:
                    storage.ingest_line(line.decode("ascii"))
                except UnicodeDecodeError:
                    storage._count("received")
                    storage._count("rejected")
        if buffer:
            # disconnect mid-line: discard the fragment, count it
            storage._count("partial_lines")


class _ThreadedServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class WireServer:
    """Threaded TCP ingest endpoint feeding a DoaStorage.

    Each client streams newline-delimited wire records; connections are
    isolated (one failing client never disturbs another) and storage writes
    are serialized inside DoaStorage.  ``stop`` flushes storage.
    """

    def __init__(self, storage: DoaStorage, host: str = "127.0.0.1", port: int = 0):
        self.storage = storage
        self._server = _ThreadedServer((host, port), _WireHandler)
        self._server.storage = storage  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "WireServer":
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="doafusion-wire", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
        self.storage.flush()


def serve_wire(storage: DoaStorage, host: str = "127.0.0.1",
               port: int = 0) -> WireServer:
    """Start an ingest endpoint; returns the running server."""
    return WireServer(storage, host=host, port=port).start()


def replay_capture(path, host: str, port: int, chunk_size: int = 65536) -> int:
    """Stream a capture file byte-for-byte to a wire endpoint."""
    sent = 0
    with socket.create_connection((host, port)) as sock:
        with open(path, "rb") as fh:
            while True:
                chunk = fh.read(chunk_size)
                if not chunk:
                    break
                sock.sendall(chunk)
                sent += len(chunk)
        sock.shutdown(socket.SHUT_WR)
        # wait for the server to close its side so ingestion is complete
        while sock.recv(4096):
            pass
    return sent
