"""Operator command line: simulate, calibrate, map, evaluate, serve, replay.

Every command is deterministic given its config, seed, and inputs.  Figures
are emitted as CSV first; the optional SVG is a pure view of the same data.
Exit codes: 0 success, 2 invalid configuration, 3 data error.  Diagnostics go
to stderr as ``doafusion: error: <category>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import fusion, service, simulate

POINT_SETS = {
    "table": [1, 2, 3, 4, 5, 6],
    "chair": [7, 8, 9, 10, 11],
    "all": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],
}


class ConfigError(Exception):
    exit_code = 2
    category = "config"


class DataError(Exception):
    exit_code = 3
    category = "data"


def _parse_points(spec: str) -> list[int]:
    if spec in POINT_SETS:
        return POINT_SETS[spec]
    try:
        return [int(p) for p in spec.split(",") if p]
    except ValueError:
        raise ConfigError(f"bad point set {spec!r}; use table|chair|all or id,id,...")


def _load_scenario(path: str) -> simulate.Scenario:
    if path == "default":
        return simulate.default_paper_scenario()
    try:
        return simulate.load_scenario(path)
    except FileNotFoundError:
        raise DataError(f"scenario file not found: {path}")
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"bad scenario file {path}: {exc}")


def _write_capture(path: str, records) -> None:
    seqs: dict[int, int] = {}
    with open(path, "w") as fh:
        for rec in records:
            obs = rec.observed
            for a in range(obs.n_arrays):
                if not obs.active_mask[a]:
                    continue
                sub = obs.subvector(a)
                wire = service.WireRecord(
                    timestamp_ms=rec.timestamp_ms, array_id=a,
                    dx=float(sub[0]), dy=float(sub[1]), dz=float(sub[2]),
                    energy=1.0, seq=seqs.get(a, 0))
                seqs[a] = seqs.get(a, 0) + 1
                fh.write(service.format_wire_line(wire) + "\n")


def _storage_from_capture(path: str, n_arrays: int) -> service.DoaStorage:
    storage = service.DoaStorage(directory=None, n_arrays=n_arrays)
    try:
        storage.ingest_file(path)
    except FileNotFoundError:
        raise DataError(f"capture file not found: {path}")
    if storage.n_records() == 0:
        raise DataError(f"capture {path} contained no valid records")
    return storage


def _svg_scatter(path: str, xy: np.ndarray, title: str) -> None:
    """Minimal standalone scatter plot; never touches the CSV data."""
    xy = np.asarray(xy, dtype=float)
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    size, margin = 640.0, 40.0
    scale = (size - 2 * margin) / span.max()
    with open(path, "w") as fh:
        fh.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" '
                 f'height="{size:.0f}" viewBox="0 0 {size:.0f} {size:.0f}">\n')
        fh.write(f'<title>{title}</title>\n')
        fh.write(f'<rect width="{size:.0f}" height="{size:.0f}" fill="white"/>\n')
        for x, y in xy:
            px = margin + (x - lo[0]) * scale
            py = size - margin - (y - lo[1]) * scale
            fh.write(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="2" fill="steelblue" '
                     f'fill-opacity="0.6"/>\n')
        fh.write("</svg>\n")


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    scn = _load_scenario(args.scenario)
    if args.seed is not None:
        scn.seed = args.seed
    if args.noise_deg is not None:
        scn.noise_deg = args.noise_deg
    if args.no_quantize:
        scn.quantize_to_grid = False
    if args.dropout != "none":
        scn.dropout = simulate.DropoutPolicy(kind=args.dropout, prob=args.dropout_prob)

    if args.calibration:
        points = _parse_points(args.points)
        missing = [p for p in points if p not in scn.calibration_points]
        if missing:
            raise ConfigError(f"scenario lacks calibration points {missing}")
        cal = simulate.synthesize_calibration(
            scn, dwell_s=args.dwell_s, period_ms=args.period_ms,
            n_dim=args.n_dim, points=points)
        fusion.calibration_to_csv(f"{args.out_prefix}.cal.csv", cal)
        records = _calibration_records(scn, cal)
        _write_capture(f"{args.out_prefix}.capture", records)
        print(f"wrote {args.out_prefix}.cal.csv and {args.out_prefix}.capture "
              f"({cal.n_obs} observations at {len(points)} points)")
    else:
        if args.trajectory not in scn.trajectories:
            raise ConfigError(f"scenario has no trajectory {args.trajectory!r}; "
                              f"available: {sorted(scn.trajectories)}")
        records = simulate.synthesize_doa_stream(scn, args.trajectory,
                                                 period_ms=args.period_ms)
        simulate.ground_truth_to_csv(f"{args.out_prefix}.gt.csv", records)
        _write_capture(f"{args.out_prefix}.capture", records)
        print(f"wrote {args.out_prefix}.gt.csv and {args.out_prefix}.capture "
              f"({len(records)} records)")
    return 0


def _calibration_records(scn, cal):
    """View a CalibrationSet as ground-truth records for capture writing."""
    out = []
    masks = cal.masks if cal.masks is not None else np.ones((cal.n_arrays, cal.n_obs), bool)
    for ell in range(cal.n_obs):
        obs = fusion.ConcatenatedDoa(values=cal.D[:, ell].copy(),
                                     active_mask=masks[:, ell].copy(),
                                     timestamp_ms=int(cal.timestamps_ms[ell]))
        out.append(simulate.GroundTruthRecord(
            timestamp_ms=obs.timestamp_ms,
            true_position=np.concatenate([cal.R[:, ell], [0.0] * (3 - cal.n_dim)]),
            true_doas=[None] * cal.n_arrays, observed=obs))
    return out


def _load_calibration(args) -> fusion.CalibrationSet:
    try:
        cal = fusion.calibration_from_csv(args.calibration_csv)
    except FileNotFoundError:
        raise DataError(f"calibration CSV not found: {args.calibration_csv}")
    except ValueError as exc:
        raise DataError(str(exc))
    points = _parse_points(args.points)
    try:
        return cal.subset(points)
    except KeyError as exc:
        raise ConfigError(str(exc))


def cmd_calibrate(args) -> int:
    cal = _load_calibration(args)
    n_points = len(cal.segments)
    if n_points < 2:
        raise ConfigError(
            f"cannot calibrate on {n_points} point(s): at least 2 distinct points "
            f"are required, and N+1 = {cal.n_dim + 1} points spanning the room "
            f"space are needed for a full-rank map")
    report: dict = {"n_points": n_points, "n_obs": cal.n_obs,
                    "points": cal.point_ids}
    wrote = []
    if args.method in ("affine", "both"):
        amap = fusion.fit_affine(cal)
        fusion.save_affine_map(f"{args.out_prefix}.affine.txt", amap)
        wrote.append(f"{args.out_prefix}.affine.txt")
        fr = amap.report
        report["affine"] = {
            "singular_values": fr.singular_values.tolist(),
            "rank": fr.rank, "n_dropped": fr.n_dropped,
            "residual_rms_m": fr.residual_rms,
            "spans_space": fr.spans_space, "messages": fr.messages,
        }
        for msg in fr.messages:
            print(f"warning: {msg}", file=sys.stderr)
    if args.method in ("pca", "both"):
        try:
            model = fusion.fit_pca(cal, J=args.pca_components)
        except ValueError as exc:
            raise DataError(str(exc))
        fusion.save_pca_model(f"{args.out_prefix}.pca.txt", model)
        wrote.append(f"{args.out_prefix}.pca.txt")
        sv = model.singular_values
        report["pca"] = {
            "singular_values": sv.tolist(),
            "normalized_singular_values": (sv / sv.sum()).tolist(),
            "J": model.J,
        }
    with open(f"{args.out_prefix}.report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    wrote.append(f"{args.out_prefix}.report.json")
    print("wrote " + ", ".join(wrote))
    return 0


def _reference_pair(cal: fusion.CalibrationSet, point_id: int,
                    model: fusion.PcaModel | None = None) -> fusion.ReferencePair:
    try:
        r_ref = cal.point_location(point_id)
    except KeyError as exc:
        raise ConfigError(str(exc))
    d_ref = fusion.ConcatenatedDoa(values=cal.point_mean_doa(point_id),
                                   active_mask=np.ones(cal.n_arrays, bool))
    # the mean of unit vectors is not unit; renormalize per array
    for a in range(cal.n_arrays):
        sub = d_ref.subvector(a)
        sub /= np.linalg.norm(sub)
    ref = fusion.ReferencePair(d_ref=d_ref, r_ref=r_ref)
    return ref.with_projection(model) if model is not None else ref


def cmd_map(args) -> int:
    method = args.method
    storage = _storage_from_capture(args.capture, args.n_arrays)
    rows = storage.query(-2 ** 62, 2 ** 62, bin_ms=args.bin_ms)
    if not rows:
        raise DataError("no joined rows in capture")

    cal = None
    if method in ("affine-missing", "pca-to-room", "reference") or \
            (args.calibration_csv and method == "pca"):
        if not args.calibration_csv:
            raise ConfigError(f"method {method} requires --calibration-csv")
        cal = _load_calibration(args)

    if method == "affine":
        if not args.model:
            raise ConfigError("method affine requires --model")
        amap = _load_model(args.model, fusion.load_affine_map)
        mapper = lambda row: fusion.map_affine(amap, row.doa)
        headers = _coord_headers(amap.n_dim)
    elif method == "affine-missing":
        mapper_obj = fusion.MissingArrayMapper(cal)
        mapper = lambda row: mapper_obj.map(row.doa)
        headers = _coord_headers(cal.n_dim)
    elif method == "pca":
        if not args.model:
            raise ConfigError("method pca requires --model")
        model = _load_model(args.model, fusion.load_pca_model)
        import warnings as _warnings

        def mapper(row, _model=model):
            with _warnings.catch_warnings():
                _warnings.simplefilter("ignore", fusion.PartialProjectionWarning)
                return fusion.project_pca(_model, row.doa)
        headers = [f"a{j + 1}" for j in range(model.J)]
    elif method == "reference":
        if not args.model:
            raise ConfigError("method reference requires --model (affine)")
        amap = _load_model(args.model, fusion.load_affine_map)
        if args.reference_point is None:
            raise ConfigError("method reference requires --reference-point")
        ref = _reference_pair(cal, args.reference_point)
        mapper = lambda row: fusion.map_from_reference(amap, ref, row.doa)
        headers = _coord_headers(amap.n_dim)
    elif method == "pca-to-room":
        if not args.model or not args.affine_model:
            raise ConfigError("method pca-to-room requires --model (pca) "
                              "and --affine-model")
        model = _load_model(args.model, fusion.load_pca_model)
        amap = _load_model(args.affine_model, fusion.load_affine_map)
        if args.reference_point is None:
            raise ConfigError("method pca-to-room requires --reference-point")
        ref = _reference_pair(cal, args.reference_point, model=model)
        mapper = lambda row: fusion.pca_to_room(
            amap, model, ref, fusion.project_pca(model, row.doa))
        headers = _coord_headers(amap.n_dim)
    else:
        raise ConfigError(f"unknown method {method!r}")

    out_rows = []
    for row in rows:
        try:
            est = mapper(row)
        except fusion.ActiveSetMismatchError as exc:
            raise DataError(f"bin {row.bin_start_ms}: {exc}")
        except ValueError as exc:
            raise DataError(f"bin {row.bin_start_ms}: {exc}")
        out_rows.append((row.bin_start_ms, est, int(row.doa.active_mask.sum())))

    with open(args.out, "w") as fh:
        fh.write("bin_start_ms," + ",".join(headers) + ",active_count,method\n")
        for ts, est, n_active in out_rows:
            coords = ",".join(repr(float(v)) for v in est)
            fh.write(f"{ts},{coords},{n_active},{method}\n")
    if args.svg:
        _svg_scatter(args.svg, np.array([e for _, e, _ in out_rows])[:, :2],
                     title=f"{method} mapping")
    print(f"wrote {args.out} ({len(out_rows)} rows)")
    return 0


def _coord_headers(n_dim: int) -> list[str]:
    return ["est_x", "est_y", "est_z"][:n_dim]


def _load_model(path: str, loader):
    try:
        return loader(path)
    except FileNotFoundError:
        raise DataError(f"model file not found: {path}")
    except ValueError as exc:
        raise DataError(str(exc))


def _read_estimates(path: str):
    rows = []
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            for line in fh:
                rows.append(line.strip().split(","))
    except FileNotFoundError:
        raise DataError(f"estimates file not found: {path}")
    if not rows:
        raise DataError(f"estimates file {path} is empty")
    n_coords = len(header) - 3
    ts = np.array([int(r[0]) for r in rows])
    est = np.array([[float(v) for v in r[1:1 + n_coords]] for r in rows])
    method = rows[0][-1]
    return ts, est, method


def cmd_evaluate(args) -> int:
    ts, est, method = _read_estimates(args.estimates)
    try:
        truth_records = simulate.ground_truth_from_csv(args.truth)
    except FileNotFoundError:
        raise DataError(f"truth file not found: {args.truth}")
    truth_by_ts = {r.timestamp_ms: r.true_position for r in truth_records}
    missing = [int(t) for t in ts if int(t) not in truth_by_ts]
    if missing:
        raise DataError(
            f"timestamp misalignment: {len(missing)} estimate bins have no "
            f"ground-truth record (first: {missing[0]} ms)")
    truth = np.array([truth_by_ts[int(t)] for t in ts])

    report: dict = {"n": int(len(ts)), "method": method}
    if method == "pca":
        report.update(_pca_scale_metrics(est, truth))
    else:
        n_dim = est.shape[1]
        err = est - truth[:, :n_dim]
        report["rmse_m"] = float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))
        report["bias_m"] = [float(b) for b in err.mean(axis=0)]
        shape = _shape_metrics(est[:, :2], truth[:, :2], ts)
        if shape:
            report.update(shape)

    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _shape_metrics(est: np.ndarray, truth: np.ndarray, ts: np.ndarray,
                   corner_window_ms: int = 200) -> dict:
    """Rectangle-shape metrics keyed off the true trajectory's corners."""
    lo, hi = truth.min(axis=0), truth.max(axis=0)
    if np.any(hi - lo < 0.05):
        return {}
    corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    dists = np.linalg.norm(truth[:, None, :] - corners[None, :, :], axis=2)
    if np.any(dists.min(axis=0) > 0.05):
        return {}  # trajectory does not visit all bounding-box corners
    corner_est, corner_bias = [], []
    for c in range(4):
        hits = ts[dists[:, c] <= 0.02]
        sel = np.zeros(len(ts), dtype=bool)
        for h in hits:
            sel |= np.abs(ts - h) <= corner_window_ms
        if not sel.any():
            return {}
        corner_est.append(est[sel].mean(axis=0))
        corner_bias.append(est[sel].mean(axis=0) - corners[c])
    corner_est = np.array(corner_est)
    sides = [float(np.linalg.norm(corner_est[(i + 1) % 4] - corner_est[i]))
             for i in range(4)]
    a = (sides[0] + sides[2]) / 2.0
    b = (sides[1] + sides[3]) / 2.0
    return {
        "corner_bias_m": [[float(v) for v in cb] for cb in corner_bias],
        "side_lengths_m": sides,
        "side_ratio": float(max(a, b) / min(a, b)),
    }


def _pca_scale_metrics(est: np.ndarray, truth: np.ndarray) -> dict:
    """Meters-per-PCA-unit from a least-squares linear fit of the trace."""
    a = est - est.mean(axis=0)
    r = truth[:, :2] - truth[:, :2].mean(axis=0)
    G, *_ = np.linalg.lstsq(a, r, rcond=None)
    fit = a @ G
    return {
        "meters_per_pca_unit": float(np.sqrt(abs(np.linalg.det(G.T)))),
        "linear_fit_rmse_m": float(np.sqrt(np.mean(np.sum((fit - r) ** 2, axis=1)))),
    }


def cmd_serve(args) -> int:
    storage = service.DoaStorage(args.storage, n_arrays=args.n_arrays)
    server = service.serve_wire(storage, host=args.host, port=args.port)
    host, port = server.address
    print(f"listening on {host}:{port} (storage: {args.storage})", flush=True)
    try:
        while True:
            import time
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        storage.close()
    return 0


def cmd_replay(args) -> int:
    try:
        sent = service.replay_capture(args.capture, args.host, args.port)
    except FileNotFoundError:
        raise DataError(f"capture file not found: {args.capture}")
    except OSError as exc:
        raise DataError(f"cannot reach {args.host}:{args.port}: {exc}")
    print(f"replayed {sent} bytes to {args.host}:{args.port}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="doafusion",
        description="Multi-array sound-source localization toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="JSON file whose keys override flags")
    parser.add_argument("--config", default=None,
                        help="JSON file whose keys override flags")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=lambda **kw: argparse.ArgumentParser(
                                    parents=[common], **kw))

    p = sub.add_parser("simulate", help="synthesize ground truth and a wire capture")
    p.add_argument("--scenario", default="default",
                   help="scenario JSON path, or 'default'")
    p.add_argument("--trajectory", default="rectangle-1234")
    p.add_argument("--calibration", action="store_true",
                   help="dwell at calibration points instead of a trajectory")
    p.add_argument("--points", default="all", help="calibration points "
                   "(table|chair|all or comma-separated ids)")
    p.add_argument("--dwell-s", type=float, default=30.0)
    p.add_argument("--period-ms", type=int, default=64)
    p.add_argument("--n-dim", type=int, default=2, choices=(2, 3))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noise-deg", type=float, default=None)
    p.add_argument("--no-quantize", action="store_true")
    p.add_argument("--dropout", default="none", choices=("none", "one_of_m"))
    p.add_argument("--dropout-prob", type=float, default=0.5)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit mapping models from calibration data")
    p.add_argument("--calibration-csv", required=True)
    p.add_argument("--points", default="all")
    p.add_argument("--method", default="both", choices=("affine", "pca", "both"))
    p.add_argument("--pca-components", type=int, default=2)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("map", help="map a capture to room or PCA coordinates")
    p.add_argument("--capture", required=True)
    p.add_argument("--method", required=True,
                   choices=("affine", "affine-missing", "pca", "pca-to-room",
                            "reference"))
    p.add_argument("--model", help="fitted model file for the method")
    p.add_argument("--affine-model", help="affine model (for pca-to-room)")
    p.add_argument("--calibration-csv", help="needed by affine-missing, "
                   "reference, and pca-to-room")
    p.add_argument("--points", default="all")
    p.add_argument("--reference-point", type=int, default=None)
    p.add_argument("--n-arrays", type=int, default=5)
    p.add_argument("--bin-ms", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", default=None)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("evaluate", help="compare mapped estimates to ground truth")
    p.add_argument("--estimates", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="run the wire ingest endpoint")
    p.add_argument("--storage", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--n-arrays", type=int, default=5)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="stream a capture file to a wire endpoint")
    p.add_argument("--capture", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def _apply_config(args: argparse.Namespace) -> None:
    if not args.config:
        return
    try:
        with open(args.config) as fh:
            overrides = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"bad config file {args.config}: {exc}")
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise ConfigError(f"config key {key!r} is not a flag of "
                              f"{args.command!r}")
        setattr(args, dest, value)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    try:
        _apply_config(args)
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"doafusion: error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
