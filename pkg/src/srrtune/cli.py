"""Command-line entry point: ``srrtune {simulate,reconstruct,tune,evaluate,report}``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime error
(including solver divergence).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .acquisition import (ExamDescriptor, LRSeries, MotionConfig, SeriesGeometry, simulate_exam,
                          simulate_series_set)
from .errors import DivergenceError, SRRError
from .forward import build_operator, stack_data
from .geometry import Grid, RigidTransform, Volume3D
from .metrics import compare_reconstructions, evaluation_mask
from .nifti import read_volume, write_volume
from .phantom import MAX_VOXEL_MM, SequenceParams, generate_phantom, load_tissue_table, reference_hr
from .psf import PSFSpec
from .report import (read_rows, render_figures, series_trend_tests, summarize, table1, format_table,
                     write_rows)
from .solvers import RegularizerKind, SolverConfig, solve
from .tuner import Configuration, GridSpec, default_grid, make_grid, tune_setting, tune_subject

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
SIMULATION_FILE = "simulation.json"

log = logging.getLogger("srrtune")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="srrtune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a phantom, its reference volume and LR series")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--field", type=float, default=1.5, choices=(1.5, 3.0))
    s.add_argument("--ga", type=float, default=30.0)
    s.add_argument("--dims", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--per-orientation", type=int, default=3)
    s.add_argument("--motion", choices=("little", "moderate"), default="little")
    s.add_argument("--exam", type=Path, help="simulate the series of an exam descriptor instead")

    r = sub.add_parser("reconstruct", help="reconstruct simulated series at one alpha")
    r.add_argument("input", type=Path, help="directory written by 'simulate'")
    r.add_argument("--alpha", type=float, required=True)
    r.add_argument("--regularizer", default="tv", choices=[k.value for k in RegularizerKind])
    r.add_argument("--series", help="comma-separated series ids to use (default: all)")
    r.add_argument("--max-iters", type=int)
    r.add_argument("--tol", type=float, default=1e-6)
    r.add_argument("--out", required=True, type=Path)

    t = sub.add_parser("tune", help="grid search for alpha")
    t.add_argument("--protocol", choices=("setting", "subject", "ga-sweep"), default="setting")
    t.add_argument("--field", type=float, default=1.5, choices=(1.5, 3.0))
    t.add_argument("--series", type=int, default=3)
    t.add_argument("--ga", type=float, default=30.0)
    t.add_argument("--ga-values", type=_floats, default=[22.0, 26.0, 30.0, 34.0])
    t.add_argument("--exam", type=Path)
    t.add_argument("--phantoms", type=int, default=1, help="number of phantom instances (consecutive seeds)")
    t.add_argument("--repeats", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--dims", type=int, default=64)
    t.add_argument("--motion", choices=("little", "moderate"), default="little")
    t.add_argument("--regularizer", default="tikhonov1", choices=[k.value for k in RegularizerKind])
    t.add_argument("--grid", choices=("tv-style", "tikhonov-style"))
    t.add_argument("--alphas", type=_floats, help="custom grid (overrides --grid)")
    t.add_argument("--default-alpha", type=float)
    t.add_argument("--max-iters", type=int)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--out", required=True, type=Path)

    e = sub.add_parser("evaluate", help="PSNR/SSIM of a volume against a reference")
    e.add_argument("reference", type=Path)
    e.add_argument("test", type=Path)
    e.add_argument("--mask", type=Path, help="label/support volume; non-zero voxels are dilated")
    e.add_argument("--dilation", type=int, default=3)
    e.add_argument("--json", type=Path, help="also write the result here")

    g = sub.add_parser("report", help="aggregate tuning CSVs into tables, p-values and figures")
    g.add_argument("csv", nargs="+", type=Path)
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--no-figures", action="store_true")
    return p


# ------------------------------------------------------------------ helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _write_manifest(out: Path, command: str, argv, args: argparse.Namespace, outputs, extra=None) -> None:
    def plain(v):
        if isinstance(v, Path):
            return str(v)
        if isinstance(v, list):
            return [plain(x) for x in v]
        return v

    echo = {k: plain(v) for k, v in vars(args).items()}
    manifest = {
        "command": command,
        "argv": list(argv),
        "arguments": echo,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    import scipy
    manifest["scipy"] = scipy.__version__
    if extra:
        manifest.update(extra)
    _dump(manifest, out / "manifest.json")


def _transform_dict(t: RigidTransform) -> dict:
    return {"rotation_deg": list(t.rotation), "translation_mm": list(t.translation)}


def save_series(series: list[LRSeries], out: Path) -> list[dict]:
    """Write each series as a NIfTI stack (u, v, slice) and return its metadata."""
    (out / "series").mkdir(parents=True, exist_ok=True)
    meta = []
    for s in series:
        g = s.geometry
        grid = Grid((g.n_u, g.n_v, g.n_slices), (g.in_plane, g.in_plane, g.slice_spacing),
                    tuple(g.origin), g.frame)
        name = f"series/{s.series_id}.nii.gz"
        write_volume(Volume3D(np.transpose(s.slices, (1, 2, 0)), grid), out / name)
        meta.append({
            "file": name, "orientation": s.orientation, "series_index": s.series_index,
            "in_plane": g.in_plane, "slice_thickness": g.slice_thickness, "slice_spacing": g.slice_spacing,
            "n_u": g.n_u, "n_v": g.n_v, "slice_positions": list(g.slice_positions),
            "psf_fwhm": list(s.psf.fwhm),
            "motion": [_transform_dict(t) for t in s.motion],
            "corrupted": [bool(c) for c in s.corrupted],
        })
    return meta


def load_simulation(directory: Path):
    """Series and HR grid of a directory written by ``simulate``."""
    spec_path = directory / SIMULATION_FILE
    if not spec_path.exists():
        raise FileNotFoundError(f"{spec_path} not found")
    spec = json.loads(spec_path.read_text())
    hg = spec["hr_grid"]
    hr_grid = Grid(tuple(hg["dims"]), tuple(hg["voxel_size"]), tuple(hg["origin"]), np.asarray(hg["axes"]))
    series = []
    for m in spec["series"]:
        vol = read_volume(directory / m["file"])
        geom = SeriesGeometry(m["orientation"], m["in_plane"], m["slice_thickness"], m["slice_spacing"],
                              m["n_u"], m["n_v"], tuple(m["slice_positions"]))
        motion = [RigidTransform(t["rotation_deg"], t["translation_mm"]) for t in m["motion"]]
        series.append(LRSeries(m["orientation"], m["series_index"], np.transpose(vol.data, (2, 0, 1)), geom,
                               tuple(motion), np.asarray(m["corrupted"]), PSFSpec(tuple(m["psf_fwhm"]))))
    return spec, hr_grid, series


def _grid_dict(grid: Grid) -> dict:
    return {"dims": list(grid.dims), "voxel_size": list(grid.voxel_size), "origin": list(grid.origin),
            "axes": grid.axes.tolist()}


# ------------------------------------------------------------------ commands

def cmd_simulate(args, argv) -> int:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    exam = ExamDescriptor.load(args.exam) if args.exam else None
    fs = exam.field_strength if exam else args.field
    ga = exam.ga_weeks if exam else args.ga
    seq = SequenceParams.preset(fs)
    grid = Grid.centered(args.dims, min(MAX_VOXEL_MM, seq.in_plane))
    labels = generate_phantom(ga, grid, seed=args.seed)
    hr = reference_hr(labels, load_tissue_table(fs), seq)
    if exam:
        series = simulate_exam(hr, exam, seq, seed=args.seed)
    else:
        series = simulate_series_set(hr, seq, MotionConfig.preset(args.motion, args.seed),
                                     per_orientation=args.per_orientation, seed=args.seed)
    write_volume(hr, out / "reference.nii.gz")
    write_volume(Volume3D(labels.data.astype(np.int16), grid), out / "labels.nii.gz")
    spec = {"field_strength": fs, "ga_weeks": ga, "seed": args.seed, "sequence": seq.to_dict(),
            "hr_grid": _grid_dict(grid), "series": save_series(series, out)}
    if exam:
        spec["exam"] = exam.to_dict()
    _dump(spec, out / SIMULATION_FILE)
    outputs = [out / "reference.nii.gz", out / "labels.nii.gz", out / SIMULATION_FILE]
    outputs += [out / m["file"] for m in spec["series"]]
    _write_manifest(out, "simulate", argv, args, outputs)
    print(json.dumps({"out": str(out), "series": [m["file"] for m in spec["series"]]}))
    return EXIT_OK


def cmd_reconstruct(args, argv) -> int:
    _, hr_grid, series = load_simulation(args.input)
    if args.series:
        wanted = [s.strip() for s in args.series.split(",") if s.strip()]
        by_id = {s.series_id: s for s in series}
        unknown = [w for w in wanted if w not in by_id]
        if unknown:
            raise ValueError(f"unknown series {unknown}; available: {sorted(by_id)}")
        series = [by_id[w] for w in wanted]
    H = build_operator(series, hr_grid)
    res = solve(H, stack_data(series), args.regularizer,
                SolverConfig(args.alpha, max_iters=args.max_iters, tol=args.tol))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(res.volume, args.out)
    info = {"out": str(args.out), "regularizer": args.regularizer, "alpha": args.alpha,
            "objective": res.objective, "iterations": res.iterations, "converged": res.converged,
            "series": [s.series_id for s in series]}
    _write_manifest(args.out.parent, "reconstruct", argv, args, [args.out], {"result": info})
    print(json.dumps(info))
    return EXIT_OK


def _grid_for(args, reg: RegularizerKind) -> GridSpec:
    if args.alphas:
        return GridSpec.custom(args.alphas, args.default_alpha)
    grid = make_grid(args.grid) if args.grid else default_grid(reg)
    if args.default_alpha is not None and args.default_alpha != grid.default_alpha:
        grid = GridSpec.custom(grid.values, args.default_alpha)
    return grid


def cmd_tune(args, argv) -> int:
    reg = RegularizerKind.parse(args.regularizer)
    grid = _grid_for(args, reg)
    if args.phantoms < 1 or args.workers < 1:
        raise ValueError("--phantoms and --workers must be at least 1")
    results = []
    if args.protocol == "subject":
        if args.exam is None:
            raise UsageError("tune --protocol subject requires --exam")
        exam = ExamDescriptor.load(args.exam)
        for i in range(args.phantoms):
            results.append(tune_subject(exam, grid, reg, seed=args.seed + i, repeats=args.repeats or 1,
                                        hr_dims=args.dims, max_iters=args.max_iters, workers=args.workers))
    else:
        gas = args.ga_values if args.protocol == "ga-sweep" else [args.ga]
        for ga in gas:
            for i in range(args.phantoms):
                cfg = Configuration(args.field, args.series, ga, repeats=args.repeats or 3, seed=args.seed + i,
                                    hr_dims=args.dims, motion=args.motion, max_iters=args.max_iters)
                results.append(tune_setting(cfg, grid, reg, workers=args.workers))
                log.info("%s: alpha*_psnr=%g alpha*_ssim=%g", cfg.config_id,
                         results[-1].alpha_star_psnr, results[-1].alpha_star_ssim)
    rows = [r for res in results for r in res.rows]
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_rows(rows, out / "rows.csv")
    summary = {"protocol": args.protocol, "grid": grid.to_dict(), **summarize(rows, grid.default_alpha),
               "unconverged_solves": sum(not r.converged for r in rows)}
    if args.protocol == "ga-sweep":
        summary["ga_table"] = [{"ga_weeks": res.config["ga_weeks"], "config_id": res.config["config_id"],
                                "alpha_star_psnr": res.alpha_star_psnr, "alpha_star_ssim": res.alpha_star_ssim}
                               for res in results]
    _dump(summary, out / "summary.json")
    _write_manifest(out, "tune", argv, args, [out / "rows.csv", out / "summary.json"],
                    {"configurations": [res.config for res in results]})
    print(json.dumps({k: summary[k] for k in ("alpha_star_psnr", "alpha_star_ssim", "default_alpha", "gains")}))
    return EXIT_OK


def cmd_evaluate(args, argv) -> int:
    ref = read_volume(args.reference)
    test = read_volume(args.test)
    if not ref.grid.same_as(test.grid, atol=1e-4):
        raise ValueError("reference and test volumes are on different grids")
    mask = None
    if args.mask is not None:
        mask = evaluation_mask(read_volume(args.mask).data != 0, args.dilation)
    report = compare_reconstructions(test.data, ref.data, mask).to_dict()
    text = json.dumps(report, sort_keys=True, allow_nan=False)
    if args.json:
        args.json.write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_report(args, argv) -> int:
    rows = read_rows(args.csv)
    if not rows:
        raise ValueError("no rows in the given CSV files")
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    table, tests = table1(rows)
    (out / "table1.md").write_text(format_table(table))
    import csv
    with open(out / "table1.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    _dump({"alpha_star_vs_default": tests, "series_count_trend": series_trend_tests(rows)},
          out / "pvalues.json")
    outputs = [out / "table1.md", out / "table1.csv", out / "pvalues.json"]
    if not args.no_figures:
        outputs += render_figures(rows, out)
    _write_manifest(out, "report", argv, args, outputs)
    print(format_table(table), end="")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "tune": cmd_tune,
            "evaluate": cmd_evaluate, "report": cmd_report}


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args, argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError, FileNotFoundError, SRRError, json.JSONDecodeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())
