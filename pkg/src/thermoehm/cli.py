"""Command-line entry point (``ehm``)."""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import driver as dr
from . import ehm_core as ec
from . import fip
from . import influence as inf
from .errors import EhmError
from .material import load_material
from .microstructure import adjacency, build_synthetic_rve, read_rve, write_rve


def _cmd_rve(args):
    spec = {"kind": args.texture, "beta_fraction": args.beta_fraction}
    if args.texture == "fiber":
        spec.update(axis=tuple(args.axis), spread=args.spread)
    rve, grains = build_synthetic_rve(args.dims, args.grains, args.seed, spec)
    write_rve(args.out, rve, grains)
    print(f"wrote {args.out}: {rve.n_grains} grains on {rve.dims}")


def _cmd_precompute(args):
    rve, grains = read_rve(args.rve)
    material = load_material(args.mat)
    temps = tuple(args.temps) if args.temps else inf.BASE_TEMPERATURES

    def progress(T):
        print(f"  solved influence problems at {T} K", file=sys.stderr)

    tset = inf.assemble_set(rve, grains, material, temps, progress=progress)
    inf.write_cache(args.out, tset)
    worst = max(float(r.max()) for r in tset.consistency_residuals())
    print(f"wrote {args.out}; largest consistency residual {worst:.3e}")


def _cmd_run(args):
    _, model = dr.load_model(args.rve, args.mat, args.cache)
    program = dr.read_program(args.program)
    if args.T is not None:
        program = program.with_temperature(args.T)
    res = dr.run_program(program, model, args.out, args.point)
    sig, _, eqp = ec.homogenize(res.state)
    print(f"{len(res.history) - 1} increments; final sigma_11 {sig[0]:.6g} MPa, eps_eqp {eqp:.6g}")


def _cmd_batch(args):
    rows = dr.run_batch(dr.read_batch(args.spec), args.out, args.jobs)
    failed = [r["point"] for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} points, {len(failed)} failed" + (f": {', '.join(failed)}" if failed else ""))
    return 1 if failed else 0


def _cmd_calibrate(args):
    files = sorted(Path(args.exp).glob("*.csv"))
    if not files:
        raise EhmError(f"no experiment CSVs in {args.exp}")
    curves = [dr.read_experiment(p) for p in files]
    free = [k.strip() for k in args.free.split(",") if k.strip()]
    bounds = dr.read_bounds(args.bounds)
    missing = [k for k in free if k not in bounds]
    if missing:
        raise EhmError(f"no bounds for {', '.join(missing)}")
    rve, grains = read_rve(args.rve)
    tset = inf.read_cache(args.cache)
    res = dr.calibrate(curves, free, bounds, grains, load_material(args.mat), tset,
                       max_evals=args.max_evals)
    rows = [("parameter", "value")] + [(k, repr(v)) for k, v in res.params.items()]
    rows += [("residual", repr(res.residual)), ("evaluations", res.evaluations)]
    rows += [(f"max_rel_error.{k}", repr(v)) for k, v in res.max_rel_error.items()]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    for k, v in rows[1:]:
        print(f"{k} = {v}")


def _snapshot_files(root):
    root = Path(root)
    return sorted(root.rglob("*.csv")) if root.is_dir() else [root]


def _cmd_fip(args):
    rve, _ = read_rve(args.rve)
    graph = adjacency(rve)
    rows = []
    for path in _snapshot_files(args.snapshots):
        try:
            snap = dr.read_snapshot(path)
        except (EhmError, KeyError, ValueError):
            continue  # not a snapshot (e.g. a history file)
        if snap.C.size != rve.n_grains:
            raise EhmError(f"{path}: {snap.C.size} parts, RVE has {rve.n_grains} grains")
        rep = fip.report(snap, graph, snap.active)
        rows.append((snap.point_id, snap.time, snap.increment, rep))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point", "time", "eps_eqp", "delta_rho_tot_max", "grain_i", "grain_j"])
        for pid, t, _, rep in rows:
            w.writerow([pid, repr(t), repr(rep.eps_eqp), repr(rep.delta_rho_tot_max), *rep.pair])
    print(f"wrote {len(rows)} rows to {args.out}")


def _cmd_oracle(args):
    from .oracle import FullFieldSolver, run_program

    rve, grains = read_rve(args.rve)
    program = dr.read_program(args.program)
    if args.T is not None:
        program = program.with_temperature(args.T)
    solver = FullFieldSolver(rve, grains, load_material(args.mat))
    history, _ = run_program(program, solver)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dr.write_history(out / "history.csv", history)
    print(f"{len(history) - 1} increments; final sigma_11 {history[-1][8]:.6g} MPa")


def build_parser():
    p = argparse.ArgumentParser(prog="ehm", description="Temperature-dependent reduced-order "
                                "polycrystal homogenization with dislocation-density slip.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("rve", help="generate a synthetic periodic voxel RVE")
    s.add_argument("--dims", type=int, nargs=3, default=[16, 16, 16])
    s.add_argument("--grains", type=int, default=145)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--texture", choices=("random", "fiber"), default="random")
    s.add_argument("--axis", type=float, nargs=3, default=[1.0, 0.0, 0.0])
    s.add_argument("--spread", type=float, default=0.3, help="fiber spread (rad)")
    s.add_argument("--beta-fraction", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_rve)

    s = sub.add_parser("precompute", help="compute the coefficient-tensor cache")
    s.add_argument("--rve", required=True)
    s.add_argument("--mat", default=None, help="parameter file, or 'table1'/'demo'")
    s.add_argument("--temps", type=float, nargs="+", help="base temperatures (K)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_precompute)

    s = sub.add_parser("run", help="run a load program at one material point")
    s.add_argument("--program", required=True)
    s.add_argument("--rve", required=True)
    s.add_argument("--mat", default=None)
    s.add_argument("--cache", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--point", default="point")
    s.add_argument("--T", type=float, nargs="+", help="override segment-boundary temperatures")
    s.set_defaults(func=_cmd_run)

    s = sub.add_parser("batch", help="run a batch of material points")
    s.add_argument("--spec", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_batch)

    s = sub.add_parser("calibrate", help="fit slip parameters to stress-strain curves")
    s.add_argument("--exp", required=True, help="directory of experiment CSVs")
    s.add_argument("--free", required=True, help="comma-separated keys, e.g. k1.basal,D.basal")
    s.add_argument("--bounds", required=True)
    s.add_argument("--rve", required=True)
    s.add_argument("--cache", required=True)
    s.add_argument("--mat", default=None)
    s.add_argument("--max-evals", type=int, default=200)
    s.add_argument("--out", default=None, help="CSV for the fitted parameters")
    s.set_defaults(func=_cmd_calibrate)

    s = sub.add_parser("fip", help="neighbour-grain dislocation-density indicator")
    s.add_argument("--snapshots", required=True)
    s.add_argument("--rve", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_fip)

    s = sub.add_parser("oracle", help="full-field reference run with the same output schema")
    s.add_argument("--rve", required=True)
    s.add_argument("--program", required=True)
    s.add_argument("--mat", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--T", type=float, nargs="+")
    s.set_defaults(func=_cmd_oracle)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (EhmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
