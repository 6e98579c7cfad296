"""Command-line harness for closed-loop campaigns.

Commands: sample (evaluate a space-filling design), optimise (run the
closed loop), props (measure one volume file), generate (emit volumes
for given or perturbed latent vectors), analyse (plot-ready tables).
Exit codes: 0 success, 2 configuration error, 3 evaluation failure,
4 I/O error.

Run directories are self-describing: the configuration, seeds, and
package versions are persisted next to the outputs, and single-threaded
reruns reproduce every output byte for byte (no timestamps are
written).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import __version__, analyse
from .bo import lhs, run_loop
from .config import RunConfig, load_config, override, save_config
from .errors import (
    ConfigError,
    EvaluationError,
    FitError,
    MicroforgeError,
    VolumeIOError,
)
from .genlat import (
    ExternalGeneratorEndpoint,
    LatentVector,
    external_generate,
    generate,
)
from .props import PropertyReport, evaluate_all
from .voxel import read_volume, write_volume

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EVALUATION = 3
EXIT_IO = 4


def _generator_fn(cfg: RunConfig):
    if cfg.endpoint_mode == "builtin":
        gen_cfg = cfg.generator
        return lambda z: generate(z, gen_cfg)
    endpoint = ExternalGeneratorEndpoint(command=cfg.external_command)
    dims = cfg.generator.output_dims
    return lambda z: external_generate(LatentVector(z), endpoint, dims)


def _prepare_out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    out.joinpath("versions.txt").write_text(
        "microforge {}\npython {}\nnumpy {}\nscipy {}\n".format(
            __version__,
            ".".join(str(v) for v in sys.version_info[:3]),
            np.__version__,
            __import__("scipy").__version__,
        )
    )
    return out


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return override(
        cfg,
        seed=getattr(args, "seed", None),
        threads=getattr(args, "threads", None),
        out_dir=getattr(args, "out", None),
    )


def cmd_sample(args) -> int:
    """Evaluate a Latin hypercube design and write the training set."""
    cfg = _load_run_config(args)
    out = _prepare_out_dir(cfg)
    space = cfg.design_space()
    build = _generator_fn(cfg)
    design = lhs(cfg.n_init, space.dim, cfg.seed)
    header = [f"z_{d}" for d in range(space.dim)]
    header.extend(PropertyReport.CSV_COLUMNS)
    lines = [",".join(header)]
    n_failed = 0
    for x in design:
        z = space.unscale(x)
        cells = [repr(float(v)) for v in z]
        try:
            volume = build(z)
            report = evaluate_all(volume, cfg.solver, threads=cfg.threads)
            cells.append(report.to_csv_row())
        except MicroforgeError as exc:
            n_failed += 1
            print(f"warning: design point failed: {exc}", file=sys.stderr)
            cells.append(",".join([""] * len(PropertyReport.CSV_COLUMNS)))
        lines.append(",".join(cells))
    path = out / "training_set.csv"
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path} ({cfg.n_init} rows, {n_failed} failed)")
    return EXIT_OK


def _flush_trace(trace, out: Path) -> None:
    trace.to_jsonl(out / "trace.jsonl")
    trace.to_csv(out / "trace.csv")


def cmd_optimise(args) -> int:
    """Run the closed loop; trace files are flushed even on abort."""
    cfg = _load_run_config(args)
    out = _prepare_out_dir(cfg)
    snap_dir = out / "snapshots"

    def snapshot(trace, i):
        _flush_trace(trace, out)
        if trace.best_volume is not None:
            snap_dir.mkdir(exist_ok=True)
            write_volume(
                trace.best_volume, snap_dir / f"iter_{i + 1:04d}_best.raw"
            )

    try:
        trace = run_loop(
            cfg.objective,
            _generator_fn(cfg),
            cfg.loop_config(),
            snapshot_every=cfg.snapshot_every,
            snapshot_fn=snapshot,
        )
    except Exception as exc:
        partial = getattr(exc, "trace", None)
        if partial is not None:
            _flush_trace(partial, out)
        raise
    _flush_trace(trace, out)
    if trace.best_volume is not None:
        write_volume(trace.best_volume, out / "best_volume.raw")
    best = trace.best_record()
    if best is not None:
        print(f"best objective {best.objective!r} at record {best.index}")
    print(f"wrote {out / 'trace.jsonl'} ({len(trace.records)} records)")
    return EXIT_OK


def cmd_props(args) -> int:
    """Measure one volume file and print its property report."""
    cfg = _load_run_config(args)
    path = Path(args.volume)
    fmt = args.format
    if fmt == "raw-u8" and path.is_dir():
        fmt = "csv-slices"
    volume = read_volume(path, fmt)
    report = evaluate_all(volume, cfg.solver, threads=cfg.threads)
    print(PropertyReport.csv_header())
    print(report.to_csv_row())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        target = out / "props.csv"
        target.write_text(
            PropertyReport.csv_header() + "\n" + report.to_csv_row() + "\n"
        )
        print(f"wrote {target}")
    return EXIT_OK


def _read_latent_rows(path: Path, dim: int) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.replace(",", " ").split()
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise ConfigError(f"{path}: no latent rows found")
    widths = {len(r) for r in rows}
    if widths != {dim}:
        raise ConfigError(
            f"{path}: every row must have {dim} components, got {sorted(widths)}"
        )
    return np.asarray(rows, dtype=np.float64)


def _ball_perturbations(base, rho, count, dim, rng):
    points = []
    for _ in range(count):
        direction = rng.standard_normal(dim)
        norm = float(np.linalg.norm(direction))
        if norm == 0.0:
            direction = np.zeros(dim)
        else:
            direction = direction / norm
        radius = rho * rng.random() ** (1.0 / dim)
        points.append(base + radius * direction)
    return points


def cmd_generate(args) -> int:
    """Generate volumes from latent rows or a perturbed base vector."""
    cfg = _load_run_config(args)
    out = _prepare_out_dir(cfg)
    space = cfg.design_space()
    build = _generator_fn(cfg)
    rng = np.random.default_rng(cfg.seed)

    if args.z_file:
        rows = _read_latent_rows(Path(args.z_file), space.dim)
    else:
        rows = rng.standard_normal((1, space.dim))
    if args.batch > 1:
        if rows.shape[0] != 1:
            raise ConfigError("batch mode needs exactly one base latent row")
        rows = np.asarray(
            _ball_perturbations(rows[0], args.rho, args.batch, space.dim, rng)
        )

    summary = ["index,file,phi_pore,phi_nmc,phi_cbd"]
    for i, row in enumerate(rows):
        z = LatentVector(row)
        if z.was_clamped:
            print(
                f"warning: latent row {i}: {z.n_clamped} components "
                "clipped to bounds",
                file=sys.stderr,
            )
        volume = build(z.values)
        name = f"volume_{i:04d}.raw"
        write_volume(volume, out / name)
        counts = np.bincount(volume.labels.ravel(), minlength=3)
        frac = counts / volume.labels.size
        summary.append(
            f"{i},{name},{float(frac[0])!r},{float(frac[1])!r},{float(frac[2])!r}"
        )
    path = out / "batch_summary.csv"
    path.write_text("\n".join(summary) + "\n")
    print(f"wrote {len(rows)} volumes to {out}")
    return EXIT_OK


def _load_trace_records(path: Path) -> list[SimpleNamespace]:
    records = []
    for line in path.read_text().splitlines():
        if line.strip():
            records.append(SimpleNamespace(**json.loads(line)))
    return records


def _analyse_trace(out: Path, dest: Path, cfg: RunConfig) -> list[str]:
    records = _load_trace_records(out / "trace.jsonl")
    written = []
    analyse.write_best_curve(dest / "best_curve.csv", records)
    written.append("best_curve.csv")
    accepted = [r for r in records if r.accepted and r.objective is not None]
    if len(accepted) >= 2:
        points = np.asarray([r.z for r in accepted])
        n_comp = min(2, points.shape[1])
        result = analyse.pca(points, n_components=n_comp)
        extra = {"objective": [r.objective for r in accepted]}
        for column in ("phi_pore", "phi_nmc", "phi_cbd", "ssa_nmc",
                       "d_rel_x", "d_rel_y", "d_rel_z"):
            values = []
            for r in accepted:
                report = getattr(r, "report", None)
                cell = report.get(column) if report else None
                values.append(float(cell) if cell not in (None, "") else None)
            if any(v is not None for v in values):
                extra[column] = values
        analyse.write_pca_table(dest / "pca.csv", result, extra)
        analyse.write_variance_table(dest / "pca_variance.csv", result)
        written.extend(["pca.csv", "pca_variance.csv"])
    best_volume = out / "best_volume.raw"
    if best_volume.is_file():
        volume = read_volume(best_volume, "raw-u8")
        axis = (
            cfg.objective.graded_axis
            if cfg.objective.kind == "graded_profile"
            else "z"
        )
        analyse.write_profile_table(dest / "profiles_best.csv", volume, axis)
        written.append("profiles_best.csv")
    return written


def _analyse_training_set(path: Path, dest: Path) -> list[str]:
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    z_cols = [i for i, name in enumerate(header) if name.startswith("z_")]
    if not z_cols:
        raise ConfigError(f"{path}: no latent columns found")
    prop_names = ("phi_pore", "phi_nmc", "phi_cbd", "ssa_nmc",
                  "d_rel_x", "d_rel_y", "d_rel_z")
    prop_cols = {n: header.index(n) for n in prop_names if n in header}
    points, extra = [], {n: [] for n in prop_cols}
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = line.split(",")
        first_prop = next(iter(prop_cols.values()), None)
        if first_prop is not None and cells[first_prop] == "":
            continue  # failed design point, no properties to join
        points.append([float(cells[i]) for i in z_cols])
        for name, col in prop_cols.items():
            extra[name].append(float(cells[col]))
    if len(points) < 2:
        raise ConfigError(f"{path}: need at least two evaluated rows")
    pts = np.asarray(points)
    result = analyse.pca(pts, n_components=min(2, pts.shape[1]))
    analyse.write_pca_table(dest / "pca.csv", result, extra)
    analyse.write_variance_table(dest / "pca_variance.csv", result)
    return ["pca.csv", "pca_variance.csv"]


def cmd_analyse(args) -> int:
    """Export plot-ready tables for a finished run or training set."""
    cfg = _load_run_config(args)
    out = Path(cfg.out_dir)
    dest = out / "analysis"
    dest.mkdir(parents=True, exist_ok=True)
    if (out / "trace.jsonl").is_file():
        written = _analyse_trace(out, dest, cfg)
    elif (out / "training_set.csv").is_file():
        written = _analyse_training_set(out / "training_set.csv", dest)
    else:
        raise VolumeIOError(
            f"{out}: neither trace.jsonl nor training_set.csv present"
        )
    print(f"wrote {', '.join(written)} to {dest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microforge",
        description="closed-loop design of three-phase electrode "
        "microstructures",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument(
            "--config", required=config_required, help="run configuration file"
        )
        p.add_argument("--seed", type=int, help="override the loop seed")
        p.add_argument(
            "--threads", type=int, help="worker threads (1 = deterministic)"
        )
        p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("sample", help="evaluate a space-filling design")
    common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("optimise", help="run the closed loop")
    common(p)
    p.set_defaults(func=cmd_optimise)

    p = sub.add_parser("props", help="measure one volume file")
    common(p, config_required=False)
    p.add_argument("--volume", required=True, help="volume file or slice dir")
    p.add_argument(
        "--format", default="raw-u8", choices=("raw-u8", "csv-slices")
    )
    p.set_defaults(func=cmd_props)

    p = sub.add_parser("generate", help="generate volumes from latent rows")
    common(p)
    p.add_argument("--z-file", help="text file with one latent row per line")
    p.add_argument(
        "--batch", type=int, default=1,
        help="number of perturbed samples around the base row",
    )
    p.add_argument(
        "--rho", type=float, default=0.0,
        help="perturbation radius for batch mode",
    )
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyse", help="export plot-ready tables")
    common(p)
    p.set_defaults(func=cmd_analyse)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VolumeIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (EvaluationError, FitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVALUATION
    except MicroforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVALUATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
