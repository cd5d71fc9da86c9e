"""Command-line front end.

Exit codes: 0 ok, 2 bad arguments/config, 3 divergence, 4 I/O or parse
failure, 5 missing correspondence.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .diagnostics import diagnose, jacobian_grid_check, probe_bbox, read_correspondence, tre, write_det_csv
from .errors import (DegenerateInput, Divergence, EmptyCloud, InvalidConfig, IoError,
                     MissingCorrespondence, ParseError)
from .flow import export_frames, flow_forward, write_velocity_csv
from .geometry import NormalizationRecord, PointCloud, RigidTransform, load_pointcloud, save_pointcloud
from .network import load_params, save_params
from .objective import LossReport, write_loss_history
from .solver import (RegistrationConfig, RegistrationOutcome, format_config, geodesic_path,
                     read_config, register)

EXIT_OK, EXIT_ARGS, EXIT_DIVERGED, EXIT_IO, EXIT_CORR = 0, 2, 3, 4, 5

log = logging.getLogger("resflow")

# flag dest -> RegistrationConfig field
_FLAG_FIELDS = {
    "epochs": "epochs", "L": "L", "width": "m", "eta": "eta", "sigma": "sigma",
    "data_term": "data_term", "sinkhorn_eps": "sinkhorn_eps", "activation": "activation",
    "alpha": "alpha", "seed": "seed",
}


class _Fail(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _add_run_flags(p):
    p.add_argument("--source", required=True, help="moving shape (obj/ply/xyz)")
    p.add_argument("--target", required=True, help="fixed shape (obj/ply/xyz)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--epochs", type=int)
    p.add_argument("--L", type=int, dest="L")
    p.add_argument("--width", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--data-term", choices=("cd", "med"))
    p.add_argument("--sinkhorn-eps", type=float)
    p.add_argument("--activation", choices=("relu", "leaky", "leaky_relu", "tanh"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--no-prealign", action="store_true", help="skip rigid ICP pre-alignment")
    p.add_argument("--correspondence", help="target index per source point, for TRE")
    p.add_argument("--format", default="obj", choices=("obj", "ply", "xyz"), help="frame file format")
    p.add_argument("--dedup", action="store_true", help="merge duplicate input vertices")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="resflow", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"resflow {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="fit a flow carrying source onto target")
    _add_run_flags(p)
    p.add_argument("--resolution", type=int, default=16, help="Jacobian/probe grid resolution")
    p.add_argument("--det-csv", action="store_true", help="also write the determinant field")

    p = sub.add_parser("evaluate", help="TRE between a deformed shape and the target")
    p.add_argument("--deformed", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--correspondence", help="omit for vertex-order correspondence")
    p.add_argument("--csv", help="append a row to this CSV")

    p = sub.add_parser("geodesic", help="re-export geodesic frames from a register run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", help="default: <run>/geodesic")
    p.add_argument("--format", default="obj", choices=("obj", "ply", "xyz"))

    p = sub.add_parser("diagnose", help="regularity report for a register run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", help="default: <run>/diagnostics.txt")
    p.add_argument("--resolution", type=int, default=16)
    p.add_argument("--det-csv", action="store_true")

    p = sub.add_parser("sweep", help="ablation over m, activation or sigma")
    _add_run_flags(p)
    p.add_argument("--axis", required=True, choices=("m", "activation", "sigma"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs (processes)")
    return ap


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load(path, dedup=False):
    try:
        return load_pointcloud(path, dedup=dedup)
    except (IoError, ParseError, EmptyCloud, DegenerateInput) as exc:
        raise _Fail(EXIT_IO, f"{path}: {exc}") from exc


def _config_from_args(args) -> RegistrationConfig:
    values = {}
    if args.config:
        try:
            values.update(read_config(args.config))
        except (IoError, ParseError) as exc:
            raise _Fail(EXIT_ARGS, str(exc)) from exc
    for flag, name in _FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    if args.no_normalize:
        values["normalize"] = False
    if args.no_prealign:
        values["rigid_prealign"] = False
    try:
        return RegistrationConfig(**values)
    except (InvalidConfig, TypeError) as exc:
        raise _Fail(EXIT_ARGS, f"invalid configuration: {exc}") from exc


def _makedirs(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot create {path}: {exc}") from exc


def _write_json(obj, path):
    try:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot write {path}: {exc}") from exc


def _attach_correspondence(source, target, path):
    if path is None:
        return source, target
    try:
        idx = read_correspondence(path)
    except IoError as exc:
        raise _Fail(EXIT_IO, str(exc)) from exc
    except MissingCorrespondence as exc:
        raise _Fail(EXIT_CORR, str(exc)) from exc
    if len(idx) != len(source) or (idx < 0).any() or (idx >= len(target)).any():
        raise _Fail(EXIT_CORR, f"{path}: correspondence does not cover the source")
    return (PointCloud(source.points, source.faces, idx),
            PointCloud(target.points, target.faces, np.arange(len(target))))


def _run_register(args, cfg, out_dir, command="register"):
    """Shared by register and sweep; returns (outcome, report)."""
    _makedirs(out_dir)
    manifest = {
        "command": command,
        "source": os.path.abspath(args.source),
        "target": os.path.abspath(args.target),
        "config": cfg.to_dict(),
        "out": os.path.abspath(out_dir),
        "seed": cfg.seed,
        "version": __version__,
        "started": _now(),
        "correspondence": os.path.abspath(args.correspondence) if args.correspondence else None,
        "dedup": bool(args.dedup),
    }
    man_path = os.path.join(out_dir, "manifest.json")
    _write_json(manifest, man_path)
    try:
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            fh.write(format_config(cfg))
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot write config snapshot: {exc}") from exc

    source = _load(args.source, args.dedup)
    target = _load(args.target, args.dedup)
    source, target = _attach_correspondence(source, target, args.correspondence)

    def progress(e, rep):
        if e % 100 == 0:
            log.info("epoch %5d  data %.6g  kinetic %.6g  total %.6g", e, rep.data_term,
                     rep.kinetic_total, rep.total)

    try:
        outcome = register(source, target, cfg, callback=progress)
    except Divergence as exc:
        raise _Fail(EXIT_DIVERGED, f"diverged: {exc}") from exc
    except (DegenerateInput, EmptyCloud) as exc:
        raise _Fail(EXIT_IO, f"unusable input: {exc}") from exc

    try:
        save_params(outcome.theta_star, os.path.join(out_dir, "theta_star.json"))
        export_frames(geodesic_path(outcome), os.path.join(out_dir, "frames"), args.format)
        save_pointcloud(outcome.deformed_source(), os.path.join(out_dir, f"deformed.{args.format}"))
        write_loss_history(outcome.history, os.path.join(out_dir, "loss_history.csv"),
                           outcome.wall_ms, outcome.grad_stats)
        write_velocity_csv(outcome.final_flow, os.path.join(out_dir, "velocity_magnitudes.csv"),
                           outcome.normalization.scale)
    except IoError as exc:
        raise _Fail(EXIT_IO, str(exc)) from exc

    report = diagnose(outcome, resolution=args.resolution if hasattr(args, "resolution") else 16)
    _write_text(report.to_text(), os.path.join(out_dir, "diagnostics.txt"))
    if getattr(args, "det_csv", False):
        lo, hi = report.grid_spec["min"], report.grid_spec["max"]
        _, det = jacobian_grid_check(outcome.theta_star, (lo, hi), report.grid_spec["resolution"])
        write_det_csv(det, lo, hi, os.path.join(out_dir, "jacobian_det.csv"))

    manifest.update({
        "finished": _now(),
        "best_epoch": outcome.best_epoch,
        "epochs_run": len(outcome.history),
        "eta_final": outcome.eta_final,
        "normalization": outcome.normalization.to_dict(),
        "rigid": None if outcome.rigid is None else {
            "rotation": outcome.rigid.rotation.tolist(),
            "translation": outcome.rigid.translation.tolist()},
        "wall_time_s": outcome.wall_time,
    })
    _write_json(manifest, man_path)
    return outcome, report


def _write_text(text, path):
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot write {path}: {exc}") from exc


def load_run(run_dir) -> RegistrationOutcome:
    """Rebuild a RegistrationOutcome from a register output directory."""
    try:
        with open(os.path.join(run_dir, "manifest.json")) as fh:
            man = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise _Fail(EXIT_IO, f"cannot read manifest in {run_dir}: {exc}") from exc
    if "normalization" not in man:
        raise _Fail(EXIT_IO, f"{run_dir}: run did not finish")
    try:
        theta = load_params(os.path.join(run_dir, "theta_star.json"))
    except (IoError, ParseError) as exc:
        raise _Fail(EXIT_IO, str(exc)) from exc
    cfg = RegistrationConfig(**man["config"])
    source = _load(man["source"], man.get("dedup", False))
    target = _load(man["target"], man.get("dedup", False))
    if man.get("correspondence"):
        source, target = _attach_correspondence(source, target, man["correspondence"])
    rec = NormalizationRecord.from_dict(man["normalization"])
    rigid = None if man["rigid"] is None else RigidTransform(
        np.asarray(man["rigid"]["rotation"]), np.asarray(man["rigid"]["translation"]))
    X0 = rec.apply(source.points)
    if rigid is not None:
        X0 = rigid.apply(X0)
    fr = flow_forward(source.with_points(X0), theta)
    history = []
    try:
        with open(os.path.join(run_dir, "loss_history.csv")) as fh:
            for row in csv.DictReader(fh):
                history.append(LossReport(float(row["data_term"]), float(row["kinetic_total"]), [],
                                          float(row["total"]), cfg.sigma))
    except (OSError, KeyError, ValueError) as exc:
        raise _Fail(EXIT_IO, f"cannot read loss history: {exc}") from exc
    return RegistrationOutcome(
        theta_star=theta, final_flow=fr, history=history, wall_time=man.get("wall_time_s", math.nan),
        best_epoch=man["best_epoch"], config=cfg, normalization=rec, rigid=rigid, source=source,
        target=target, target_normalized=target.with_points(rec.apply(target.points)),
        eta_final=man.get("eta_final", cfg.eta))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_register(args) -> int:
    cfg = _config_from_args(args)
    outcome, report = _run_register(args, cfg, args.out)
    best = outcome.best_report
    print(f"best epoch {outcome.best_epoch}: data {best.data_term:.6g}  kinetic "
          f"{best.kinetic_total:.6g}  total {best.total:.6g}")
    print(f"C_theta {report.C_theta:.6g}  min jacobian det {report.min_jacobian_det:.6g}")
    if report.tre is not None:
        print(f"TRE {report.tre:.6g}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    deformed = _load(args.deformed)
    target = _load(args.target)
    if args.correspondence:
        try:
            idx = read_correspondence(args.correspondence)
        except IoError as exc:
            raise _Fail(EXIT_IO, str(exc)) from exc
        except MissingCorrespondence as exc:
            raise _Fail(EXIT_CORR, str(exc)) from exc
    elif len(deformed) == len(target):
        idx = np.arange(len(deformed))
    else:
        raise _Fail(EXIT_CORR, "sizes differ and no --correspondence given")
    try:
        value = tre(deformed, target, idx)
    except MissingCorrespondence as exc:
        raise _Fail(EXIT_CORR, str(exc)) from exc
    print(repr(value))
    if args.csv:
        new = not os.path.exists(args.csv)
        try:
            with open(args.csv, "a", newline="") as fh:
                w = csv.writer(fh)
                if new:
                    w.writerow(["deformed", "target", "tre"])
                w.writerow([args.deformed, args.target, repr(value)])
        except OSError as exc:
            raise _Fail(EXIT_IO, f"cannot append to {args.csv}: {exc}") from exc
    return EXIT_OK


def cmd_geodesic(args) -> int:
    outcome = load_run(args.run)
    out = args.out or os.path.join(args.run, "geodesic")
    try:
        paths = export_frames(geodesic_path(outcome), out, args.format)
    except IoError as exc:
        raise _Fail(EXIT_IO, str(exc)) from exc
    print(f"wrote {len(paths)} frames to {out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    outcome = load_run(args.run)
    report = diagnose(outcome, resolution=args.resolution)
    out = args.out or os.path.join(args.run, "diagnostics.txt")
    _write_text(report.to_text(), out)
    if args.det_csv:
        lo, hi = report.grid_spec["min"], report.grid_spec["max"]
        _, det = jacobian_grid_check(outcome.theta_star, (lo, hi), args.resolution)
        write_det_csv(det, lo, hi, os.path.join(os.path.dirname(out) or ".", "jacobian_det.csv"))
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _sweep_one(args, cfg, axis, value, out_dir):
    row = {"value": value, "status": "ok", "best_total": "", "best_data": "", "best_kinetic": "",
           "final_tre": "", "C_theta": "", "min_jacobian_det": "", "wall_time_s": "", "error": ""}
    try:
        if axis == "m":
            run_cfg = replace(cfg, m=int(value))
        elif axis == "sigma":
            run_cfg = replace(cfg, sigma=float(value))
        else:
            run_cfg = replace(cfg, activation=value)
        outcome, report = _run_register(args, run_cfg, out_dir, command="sweep")
        best = outcome.best_report
        row.update(best_total=repr(best.total), best_data=repr(best.data_term),
                   best_kinetic=repr(best.kinetic_total), C_theta=repr(report.C_theta),
                   min_jacobian_det=repr(report.min_jacobian_det),
                   wall_time_s=f"{outcome.wall_time:.3f}",
                   final_tre="" if report.tre is None else repr(report.tre))
    except _Fail as exc:
        row.update(status=f"failed({exc.code})", error=str(exc))
    except (InvalidConfig, ValueError) as exc:
        row.update(status="failed(2)", error=str(exc))
    return row


def _sweep_worker(payload):
    args, cfg, axis, value, out_dir = payload
    return _sweep_one(args, cfg, axis, value, out_dir)


def cmd_sweep(args) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise _Fail(EXIT_ARGS, "--values is empty")
    cfg = _config_from_args(args)
    _makedirs(args.out)
    jobs = [(args, cfg, args.axis, v, os.path.join(args.out, f"{args.axis}_{v}")) for v in values]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            rows = list(ex.map(_sweep_worker, jobs))
    else:
        rows = [_sweep_worker(j) for j in jobs]
    path = os.path.join(args.out, "sweep.csv")
    cols = ["value", "status", "best_total", "best_data", "best_kinetic", "final_tre", "C_theta",
            "min_jacobian_det", "wall_time_s", "error"]
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot write {path}: {exc}") from exc
    ok = sum(r["status"] == "ok" for r in rows)
    print(f"{ok}/{len(rows)} runs succeeded; summary in {path}")
    return EXIT_OK if ok else EXIT_DIVERGED


COMMANDS = {"register": cmd_register, "evaluate": cmd_evaluate, "geodesic": cmd_geodesic,
            "diagnose": cmd_diagnose, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # exits 2 with usage on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except _Fail as exc:
        print(f"resflow {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except InvalidConfig as exc:
        print(f"resflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
