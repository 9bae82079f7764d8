"""Command-line convergence studies on the unit sphere.

Runs the mixed method over a sequence of halved background meshes, collects
mesh-quality data and error norms per level, and writes a fixed-schema CSV
plus a dependency-free log-log SVG plot.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import build_rhs, condense_and_assemble, solve_hybrid
from .elements import mixed_space
from .geometry import Sphere
from .postprocess_errors import (
    ErrorReport,
    LevelRecord,
    compute_errors,
    manufactured_sphere,
    postprocess_gradient,
    postprocess_neumann,
)
from .trace_mesh import bisect_quads, build_bulk_mesh, extract_trace_surface, mesh_stats, write_off

__all__ = ["StudyConfig", "StudyResult", "run_study", "main"]

CSV_COLUMNS = (
    "level,h,n_tri,max_angle,max_abs_d,err_p,err_u,err_eu,err_post,"
    "rate_p,rate_u,rate_eu,rate_post"
)


@dataclass(frozen=True)
class StudyConfig:
    space: str = "rt0"
    postprocess: str = "neumann"
    box: tuple = ((-2.0, 2.0), (-2.0, 2.0), (-2.0, 2.0))
    n0: int = 8
    levels: int = 4
    seed_offset: tuple = (0.0, 0.0, 0.0)
    output_dir: str | None = None
    export_mesh: bool = False
    check_mesh_only: bool = False

    def __post_init__(self):
        if self.space not in ("rt0", "bdm1"):
            raise ValueError(f"unknown space '{self.space}'")
        if self.postprocess not in ("neumann", "gradient", "both"):
            raise ValueError(f"unknown postprocess variant '{self.postprocess}'")
        if self.n0 < 4:
            raise ValueError("initial subdivision count must be at least 4")
        if self.levels < 1:
            raise ValueError("need at least one level")
        box = np.asarray(self.box, dtype=float).reshape(3, 2)
        off = np.asarray(self.seed_offset, dtype=float)
        if off.shape != (3,):
            raise ValueError("seed offset needs three components")
        lo = box[:, 0] + off
        hi = box[:, 1] + off
        if np.any(lo > -1.5) or np.any(hi < 1.5):
            raise ValueError("box must contain the unit sphere with margin at least 0.5")

    def shifted_box(self) -> np.ndarray:
        box = np.asarray(self.box, dtype=float).reshape(3, 2)
        return box + np.asarray(self.seed_offset, dtype=float)[:, None]


@dataclass
class StudyResult:
    report: ErrorReport
    seconds: float
    files: list = field(default_factory=list)


def _run_level(config: StudyConfig, surface, problem, space, n: int, level: int):
    bulk = build_bulk_mesh(config.shifted_box(), n)
    mesh = bisect_quads(extract_trace_surface(bulk, surface.signed_distance), surface=surface)
    stats = mesh_stats(mesh, surface)
    if stats.euler_characteristic != 2:
        raise RuntimeError(f"level {level}: extracted surface is not a topological sphere")
    if config.check_mesh_only:
        return mesh, LevelRecord(level=level, n=n, stats=stats, errors=None)

    rhs = build_rhs(problem.f, mesh, surface)
    fields = solve_hybrid(condense_and_assemble(mesh, space, rhs=rhs))
    u_star = u_star_alt = None
    if config.postprocess in ("neumann", "both"):
        u_star = postprocess_neumann(mesh, space, fields, rhs)
    if config.postprocess in ("gradient", "both"):
        alt = postprocess_gradient(mesh, space, fields)
        if config.postprocess == "gradient":
            u_star = alt
        else:
            u_star_alt = alt
    errors = compute_errors(mesh, surface, space, problem, fields, u_star=u_star, u_star_alt=u_star_alt)
    record = LevelRecord(
        level=level, n=n, stats=stats, errors=errors, rhs_mean_correction=rhs.mean_correction
    )
    return mesh, record


def run_study(config: StudyConfig) -> StudyResult:
    """Execute the refinement study described by ``config``."""
    start = time.perf_counter()
    surface = Sphere(1.0)
    problem = manufactured_sphere()
    space = mixed_space(config.space)
    report = ErrorReport(space=config.space)
    out = Path(config.output_dir) if config.output_dir else None
    files: list[Path] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for level in range(config.levels):
        n = config.n0 * 2**level
        mesh, record = _run_level(config, surface, problem, space, n, level)
        report.add(record)
        if out is not None and config.export_mesh:
            path = out / f"mesh_level{level}.off"
            write_off(mesh, path)
            files.append(path)

    if out is not None and not config.check_mesh_only:
        csv_path = out / "study.csv"
        csv_path.write_text(report_csv(report))
        files.append(csv_path)
        svg_path = out / "study.svg"
        svg_path.write_text(report_svg(report))
        files.append(svg_path)
    return StudyResult(report=report, seconds=time.perf_counter() - start, files=files)


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return ""
    return f"{value:.12g}"


def report_csv(report: ErrorReport) -> str:
    rates = {name: report.rates(name) for name in ("err_p", "err_u", "err_eu", "err_post")}
    lines = [CSV_COLUMNS]
    for i, rec in enumerate(report.records):
        cells = [
            str(rec.level),
            _fmt(rec.h),
            str(rec.stats.n_triangles),
            _fmt(rec.stats.max_interior_angle),
            _fmt(rec.stats.max_abs_dist),
            _fmt(rec.errors.err_p),
            _fmt(rec.errors.err_u),
            _fmt(rec.errors.err_eu),
            _fmt(rec.errors.err_post),
            _fmt(rates["err_p"][i]),
            _fmt(rates["err_u"][i]),
            _fmt(rates["err_eu"][i]),
            _fmt(rates["err_post"][i]),
        ]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def report_svg(report: ErrorReport, width: int = 640, height: int = 480) -> str:
    """Log-log error plot with reference slopes 1 and 2, no plotting deps."""
    series = {
        "err_p": ("#1f77b4", report.column("err_p")),
        "err_u": ("#d62728", report.column("err_u")),
        "err_eu": ("#2ca02c", report.column("err_eu")),
        "err_post": ("#9467bd", report.column("err_post")),
    }
    hs = report.hs()
    xs = np.log10(hs)
    all_vals = [v for _, vals in series.values() for v in vals if v is not None and v > 0]
    ys_min, ys_max = np.log10(min(all_vals)), np.log10(max(all_vals))
    x_min, x_max = min(xs), max(xs)
    pad = 0.15
    x_lo, x_hi = x_min - pad, x_max + pad
    y_lo, y_hi = ys_min - pad, ys_max + pad
    ml, mr, mt, mb = 60, 20, 30, 45

    def px(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mb - mt)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle" '
        f'font-size="13">h (log scale), {report.space}</text>',
        f'<text x="15" y="{height / 2:.1f}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 15 {height / 2:.1f})">L2 error (log scale)</text>',
    ]
    # decade grid
    for d in range(int(np.floor(y_lo)), int(np.ceil(y_hi)) + 1):
        if y_lo <= d <= y_hi:
            parts.append(
                f'<line x1="{px(x_lo):.1f}" y1="{py(d):.1f}" x2="{px(x_hi):.1f}" y2="{py(d):.1f}" '
                f'stroke="#dddddd"/>'
                f'<text x="{px(x_lo) - 4:.1f}" y="{py(d) + 4:.1f}" text-anchor="end" '
                f'font-size="11">1e{d}</text>'
            )
    legend_y = mt + 6
    for name, (color, vals) in series.items():
        pts = " ".join(
            f"{px(np.log10(h)):.2f},{py(np.log10(v)):.2f}"
            for h, v in zip(hs, vals)
            if v is not None and v > 0
        )
        if not pts:
            continue
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>'
        )
        parts.append(
            f'<text x="{width - mr - 90}" y="{legend_y}" font-size="12" fill="{color}">{name}</text>'
        )
        legend_y += 16
    # reference slope triangles anchored near the coarsest level
    x0, x1 = x_max - 0.35, x_max - 0.05
    for rate, offset in ((1, 0.35), (2, 0.95)):
        yb = ys_min + offset
        parts.append(
            f'<polyline points="{px(x0):.1f},{py(yb):.1f} {px(x1):.1f},{py(yb):.1f} '
            f'{px(x1):.1f},{py(yb + rate * (x1 - x0)):.1f} {px(x0):.1f},{py(yb):.1f}" '
            f'fill="none" stroke="#555555" stroke-width="1"/>'
            f'<text x="{px(x1) + 4:.1f}" y="{py(yb + 0.5 * rate * (x1 - x0)):.1f}" '
            f'font-size="11" fill="#555555">{rate}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quasitrace",
        description="Mixed-method convergence study on a level-set sphere mesh.",
    )
    parser.add_argument("--space", choices=("rt0", "bdm1"), default="rt0")
    parser.add_argument("--postprocess", choices=("neumann", "gradient", "both"), default="neumann")
    parser.add_argument("--n0", type=int, default=8, help="initial subdivisions per axis")
    parser.add_argument("--levels", type=int, default=4)
    parser.add_argument(
        "--box", type=float, nargs=6, metavar=("X0", "X1", "Y0", "Y1", "Z0", "Z1"),
        default=(-2.0, 2.0, -2.0, 2.0, -2.0, 2.0),
    )
    parser.add_argument("--seed-offset", type=float, nargs=3, default=(0.0, 0.0, 0.0),
                        metavar=("DX", "DY", "DZ"), help="shift of the background lattice")
    parser.add_argument("--out", type=str, default=".", help="output directory")
    parser.add_argument("--export-mesh", action="store_true", help="write an OFF file per level")
    parser.add_argument("--check-mesh-only", action="store_true",
                        help="build and check meshes, skip the solves")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = StudyConfig(
            space=args.space,
            postprocess=args.postprocess,
            box=tuple((args.box[2 * i], args.box[2 * i + 1]) for i in range(3)),
            n0=args.n0,
            levels=args.levels,
            seed_offset=tuple(args.seed_offset),
            output_dir=args.out,
            export_mesh=args.export_mesh,
            check_mesh_only=args.check_mesh_only,
        )
        result = run_study(config)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for rec in result.report.records:
        line = (
            f"level {rec.level}: n={rec.n} h={rec.h:.4g} tris={rec.stats.n_triangles} "
            f"max_angle={rec.stats.max_interior_angle:.4f} max|d|={rec.stats.max_abs_dist:.3e}"
        )
        if rec.errors is not None:
            line += (
                f" err_p={rec.errors.err_p:.3e} err_u={rec.errors.err_u:.3e} "
                f"err_eu={rec.errors.err_eu:.3e} err_post={rec.errors.err_post:.3e}"
            )
            if rec.errors.err_post_alt is not None:
                line += f" err_post_gradient={rec.errors.err_post_alt:.3e}"
        print(line)
    print(f"total {result.seconds:.1f}s; wrote {', '.join(str(p) for p in result.files) or 'no files'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
