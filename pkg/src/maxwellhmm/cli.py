"""Batch driver: configuration, experiment orchestration, file outputs.

Experiments
-----------
cell      homogenized tensors for every macro element, one CSV per
          micro mesh size
solve     one multiscale solve: dof table, probe-grid field samples,
          optional VTK export
converge  convergence table against an overkill reference; the constant
          preset instead reproduces the manufactured-solution table
estimate  the convergence table plus per-entity indicator CSVs
modeling  composite approximation against direct fine solves for a
          sequence of oscillation lengths delta

The configuration is a flat JSON document; command-line flags override
file values.  Every run writes its CSV tables (floats at 17 significant
digits) and a manifest.json recording the resolved configuration,
package versions, solver tolerances, and stage timings.  Identical
configurations produce byte-identical CSV files.  Validation failures
exit with status 2 and print a machine-readable record listing every
violated field; stage failures exit with status 1 and a record naming
the stage.
"""

import argparse
import csv
import json
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pyamg
import scipy

from . import __version__
from . import cell as cel
from . import coeffs as cf
from . import errors as err
from . import estimate as est
from . import fespace as fes
from . import hmm
from . import linsolve as lin
from . import mesh as msh

EXPERIMENTS = ("cell", "solve", "converge", "estimate", "modeling")
MACRO_MIN = 1
MICRO_MIN = 2
VALIDATION_EXIT = 2
STAGE_EXIT = 1
MANIFEST_NAME = "manifest.json"
ERROR_NAME = "error.json"

CELL_HEADER = (
    ("j", "x_0", "x_1", "x_2")
    + tuple(f"mhom_{a}{b}" for a in range(3) for b in range(3))
    + tuple(
        f"khom_{a}{b}_{part}"
        for a in range(3)
        for b in range(3)
        for part in ("re", "im")
    )
)
DOF_HEADER = ("dof", "re", "im")
PROBE_HEADER = ("x_0", "x_1", "x_2") + tuple(
    f"e_{c}_{part}" for c in range(3) for part in ("re", "im")
)
MMS_HEADER = ("n", "hcurl_error", "rate")
CONVERGENCE_HEADER = (
    "n_macro", "n_micro", "delta", "energy_error", "curl_part",
    "div_part", "l2_part", "theta_norm", "z_norm", "estimator_total",
    "effectivity",
)
MODELING_HEADER = ("delta", "fine_n", "l2_error", "curl_error")

DEFAULTS = {
    "experiment": None,
    "box_lo": (0.0, 0.0, 0.0),
    "box_hi": (1.0, 1.0, 1.0),
    "macro_n": (4,),
    "micro_n": (4,),
    "delta": (0.25,),
    "coeff_preset": "laminate_y1",
    "coeff_params": {},
    "source_preset": "constant",
    "source_params": {},
    "out_dir": "maxwell_run",
    "reference_factor": 4,
    "resolution_factor": 2.0,
    "split_factor": 2,
    "source_degree": 1,
    "probe_n": 8,
    "fine_n": None,
    "seed": 0,
    "jobs": None,
    "vtk": False,
}


@dataclass(frozen=True)
class RunConfig:
    """Resolved experiment configuration with sequence fields as tuples."""

    experiment: str
    box_lo: tuple
    box_hi: tuple
    macro_n: tuple
    micro_n: tuple
    delta: tuple
    coeff_preset: str
    coeff_params: dict
    source_preset: str
    source_params: dict
    out_dir: str
    reference_factor: int
    resolution_factor: float
    split_factor: int
    source_degree: int
    probe_n: int
    fine_n: object
    seed: int
    jobs: object
    vtk: bool


def _int_tuple(value):
    """Coerce an int, comma string, or sequence into a tuple of ints."""
    if isinstance(value, str):
        value = [part for part in value.split(",") if part.strip()]
    elif np.isscalar(value):
        value = [value]
    out = []
    for item in value:
        as_float = float(item)
        as_int = int(round(as_float))
        if abs(as_float - as_int) > 0:
            raise ValueError(f"{item!r} is not an integer")
        out.append(as_int)
    if not out:
        raise ValueError("empty sequence")
    return tuple(out)


def _float_tuple(value):
    if isinstance(value, str):
        value = [part for part in value.split(",") if part.strip()]
    elif np.isscalar(value):
        value = [value]
    out = tuple(float(item) for item in value)
    if not out:
        raise ValueError("empty sequence")
    return out


def _decode_params(params):
    """Decode preset parameters: strings are parsed as complex numbers."""
    out = {}
    for key, value in params.items():
        if isinstance(value, str):
            out[key] = complex(value.replace(" ", ""))
        elif isinstance(value, (list, tuple)):
            out[key] = [
                complex(v.replace(" ", "")) if isinstance(v, str) else v
                for v in value
            ]
        else:
            out[key] = value
    return out


def validate_config(raw):
    """Normalize a raw mapping into a RunConfig, collecting all violations.

    Returns (config or None, violations) where violations is a list of
    {field, message} records naming every field that failed.
    """
    violations = []

    def bad(field, message):
        violations.append({"field": field, "message": str(message)})

    for key in sorted(set(raw) - set(DEFAULTS)):
        bad(key, "unknown configuration field")
    merged = dict(DEFAULTS)
    merged.update({k: v for k, v in raw.items() if k in DEFAULTS})
    cfg = {}

    experiment = merged["experiment"]
    if experiment not in EXPERIMENTS:
        bad("experiment",
            f"must be one of {', '.join(EXPERIMENTS)}, got {experiment!r}")
    cfg["experiment"] = experiment

    box_ok = True
    for field in ("box_lo", "box_hi"):
        try:
            vec = tuple(float(v) for v in merged[field])
            if len(vec) != 3:
                raise ValueError(f"needs 3 components, got {len(vec)}")
            cfg[field] = vec
        except (TypeError, ValueError) as exc:
            bad(field, exc)
            cfg[field] = None
            box_ok = False
    if box_ok and not all(
        hi > lo for lo, hi in zip(cfg["box_lo"], cfg["box_hi"])
    ):
        bad("box_hi", "every component must exceed box_lo")
        box_ok = False

    for field, minimum in (("macro_n", MACRO_MIN), ("micro_n", MICRO_MIN)):
        try:
            ns = _int_tuple(merged[field])
            low = min(ns)
            if low < minimum:
                raise ValueError(f"entries must be >= {minimum}, got {low}")
            cfg[field] = ns
        except (TypeError, ValueError) as exc:
            bad(field, exc)
            cfg[field] = None

    try:
        deltas = _float_tuple(merged["delta"])
        for d in deltas:
            if not 0.0 < d <= 1.0:
                raise ValueError(f"entries must lie in (0, 1], got {d}")
        cfg["delta"] = deltas
    except (TypeError, ValueError) as exc:
        bad("delta", exc)
        cfg["delta"] = None

    coeffs = None
    cfg["coeff_preset"] = str(merged["coeff_preset"])
    cfg["coeff_params"] = dict(merged["coeff_params"] or {})
    try:
        coeffs = cf.preset(
            cfg["coeff_preset"], _decode_params(cfg["coeff_params"])
        )
    except cf.PresetError as exc:
        bad("coeff_preset", exc)
    except (TypeError, ValueError) as exc:
        bad("coeff_params", exc)

    cfg["source_preset"] = str(merged["source_preset"])
    cfg["source_params"] = dict(merged["source_params"] or {})
    try:
        cf.source_preset(
            cfg["source_preset"], _decode_params(cfg["source_params"])
        )
    except cf.PresetError as exc:
        bad("source_preset", exc)
    except (TypeError, ValueError) as exc:
        bad("source_params", exc)

    cfg["out_dir"] = str(merged["out_dir"])
    if not cfg["out_dir"]:
        bad("out_dir", "must be a non-empty path")

    for field, minimum in (
        ("reference_factor", 2), ("split_factor", 2), ("probe_n", 1),
        ("seed", 0),
    ):
        try:
            value = int(merged[field])
            if value < minimum:
                raise ValueError(f"must be >= {minimum}, got {value}")
            cfg[field] = value
        except (TypeError, ValueError) as exc:
            bad(field, exc)
            cfg[field] = None

    try:
        rf = float(merged["resolution_factor"])
        if not rf > 0:
            raise ValueError(f"must be positive, got {rf}")
        cfg["resolution_factor"] = rf
    except (TypeError, ValueError) as exc:
        bad("resolution_factor", exc)
        cfg["resolution_factor"] = None

    degree = merged["source_degree"]
    if degree not in est.SOURCE_DEGREES:
        bad("source_degree",
            f"must be one of {est.SOURCE_DEGREES}, got {degree!r}")
        cfg["source_degree"] = None
    else:
        cfg["source_degree"] = int(degree)

    for field, minimum in (("fine_n", 1), ("jobs", 1)):
        value = merged[field]
        if value is None:
            cfg[field] = None
            continue
        try:
            value = int(value)
            if value < minimum:
                raise ValueError(f"must be >= {minimum}, got {value}")
            cfg[field] = value
        except (TypeError, ValueError) as exc:
            bad(field, exc)
            cfg[field] = None

    if isinstance(merged["vtk"], bool):
        cfg["vtk"] = merged["vtk"]
    else:
        bad("vtk", f"must be true or false, got {merged['vtk']!r}")
        cfg["vtk"] = False

    if experiment in ("converge", "estimate") and cfg["macro_n"] and (
        cfg["micro_n"]
    ):
        nma, nmi = len(cfg["macro_n"]), len(cfg["micro_n"])
        if nma != nmi:
            if nmi == 1:
                cfg["micro_n"] = cfg["micro_n"] * nma
            elif nma == 1:
                cfg["macro_n"] = cfg["macro_n"] * nmi
            else:
                bad("micro_n",
                    f"level count {nmi} does not match macro_n count {nma}")
        mms_table = coeffs is not None and coeffs.preset == "constant" and (
            experiment == "converge"
        )
        if not mms_table and cfg["reference_factor"]:
            ref_n = cfg["reference_factor"] * max(cfg["macro_n"])
            off = sorted({n for n in cfg["macro_n"] if ref_n % n})
            if off:
                bad("macro_n",
                    f"reference mesh n={ref_n} does not refine levels {off}")

    if experiment == "converge" and coeffs is not None and (
        coeffs.preset == "constant"
    ):
        if abs(coeffs.params["m0"] - 1.0) > 0:
            bad("coeff_params",
                "the manufactured-solution table needs m0 = 1")

    if experiment == "modeling" and box_ok and cfg["delta"] and (
        cfg["resolution_factor"]
    ):
        diag = float(np.linalg.norm(
            np.asarray(cfg["box_hi"]) - np.asarray(cfg["box_lo"])
        ))
        d_min = min(cfg["delta"])
        needed = int(np.ceil(cfg["resolution_factor"] * diag / d_min))
        if cfg["fine_n"] is None:
            cfg["fine_n"] = needed
        elif diag / cfg["fine_n"] > d_min / cfg["resolution_factor"] + 1e-14:
            bad("fine_n",
                f"{cfg['fine_n']} does not resolve delta={d_min:g} at "
                f"resolution factor {cfg['resolution_factor']:g}; "
                f"need fine_n >= {needed}")

    if violations:
        return None, violations
    return RunConfig(**cfg), []


@contextmanager
def _stage(timings, name):
    """Time a stage; wrap non-stage failures so the record names it."""
    start = time.perf_counter()
    try:
        yield
    except hmm.StageError:
        raise
    except Exception as exc:
        raise hmm.StageError(f"stage {name}: {exc}") from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


def _map_ordered(fn, items, jobs):
    """Apply fn over items, optionally threaded, preserving item order."""
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _format_field(value):
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_field(value) for value in row])


def _write_vtk(path, solution):
    """Legacy ASCII VTK export of the macro field as per-cell vectors."""
    mesh = solution.macro
    fmt = "%.17g"
    lines = [
        "# vtk DataFile Version 3.0",
        "time-harmonic Maxwell multiscale field",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.num_vertices} double",
    ]
    for point in mesh.vertices:
        lines.append(" ".join(fmt % c for c in point))
    lines.append(f"CELLS {mesh.num_tets} {5 * mesh.num_tets}")
    for tet in mesh.tets:
        lines.append("4 " + " ".join(str(int(v)) for v in tet))
    lines.append(f"CELL_TYPES {mesh.num_tets}")
    lines.extend(["10"] * mesh.num_tets)
    lines.append(f"CELL_DATA {mesh.num_tets}")
    fields = (
        ("e_re", solution.center_values.real),
        ("e_im", solution.center_values.imag),
        ("curl_re", np.asarray(solution.curl_values).real),
        ("curl_im", np.asarray(solution.curl_values).imag),
    )
    for name, values in fields:
        lines.append(f"VECTORS {name} double")
        for vec in values:
            lines.append(" ".join(fmt % c for c in vec))
    Path(path).write_text("\n".join(lines) + "\n")


def _solve_level(config, coeffs, source, macro_n, micro_n, delta):
    macro = msh.build_box_mesh(config.box_lo, config.box_hi, macro_n)
    micro = msh.build_periodic_cube_mesh(micro_n)
    return hmm.solve_hmm(
        hmm.HmmProblem(macro, micro, coeffs, source, delta)
    )


def _run_cell(config, coeffs, source, out, timings, jobs):
    macro = msh.build_box_mesh(
        config.box_lo, config.box_hi, config.macro_n[0]
    )

    def one(micro_n):
        with _stage(timings, f"cell_n{micro_n}"):
            micro = msh.build_periodic_cube_mesh(micro_n)
            return cel.homogenize_all(macro, micro, coeffs)

    outputs = []
    bary = macro.tet_barycenters
    for micro_n, cells in zip(
        config.micro_n, _map_ordered(one, config.micro_n, jobs)
    ):
        rows = []
        for j in range(macro.num_tets):
            khom = cells.khom[j].ravel()
            rows.append(
                (j,) + tuple(bary[j]) + tuple(cells.mhom[j].ravel())
                + tuple(
                    part for z in khom for part in (z.real, z.imag)
                )
            )
        name = f"tensors_n{micro_n}.csv"
        _write_csv(out / name, CELL_HEADER, rows)
        outputs.append(name)
    return outputs


def _run_solve(config, coeffs, source, out, timings, jobs):
    with _stage(timings, "solve"):
        solution = _solve_level(
            config, coeffs, source, config.macro_n[0], config.micro_n[0],
            config.delta[0],
        )
    outputs = ["dofs.csv", "probe.csv"]
    _write_csv(
        out / "dofs.csv", DOF_HEADER,
        [
            (k, z.real, z.imag)
            for k, z in enumerate(solution.dofs)
        ],
    )
    with _stage(timings, "probe"):
        n = config.probe_n
        lo = np.asarray(config.box_lo)
        hi = np.asarray(config.box_hi)
        centers = (np.arange(n) + 0.5) / n
        grid = np.stack(
            np.meshgrid(centers, centers, centers, indexing="ij"), axis=-1
        ).reshape(-1, 3)
        pts = lo + grid * (hi - lo)
        vals = hmm.evaluate_ehmm(solution, pts)
    _write_csv(
        out / "probe.csv", PROBE_HEADER,
        [
            tuple(p) + tuple(
                part for z in v for part in (z.real, z.imag)
            )
            for p, v in zip(pts, vals)
        ],
    )
    if config.vtk:
        with _stage(timings, "vtk"):
            _write_vtk(out / "field.vtk", solution)
        outputs.append("field.vtk")
    return outputs


def _run_levels(config, coeffs, source, out, timings, jobs, indicators):
    if config.experiment == "converge" and coeffs.preset == "constant":
        with _stage(timings, "mms_table"):
            rows = err.mms_reference(
                coeffs.params["k0"], config.macro_n, config.micro_n[0]
            )
        _write_csv(
            out / "convergence.csv", MMS_HEADER,
            [(r["n"], r["hcurl_error"], r["rate"]) for r in rows],
        )
        return ["convergence.csv"]

    delta = config.delta[0]
    with _stage(timings, "reference"):
        reference = _solve_level(
            config, coeffs, source,
            config.reference_factor * max(config.macro_n),
            config.reference_factor * max(config.micro_n),
            delta,
        )

    def level(k):
        macro_n, micro_n = config.macro_n[k], config.micro_n[k]
        with _stage(timings, f"level_{k}"):
            solution = _solve_level(
                config, coeffs, source, macro_n, micro_n, delta
            )
            triple = err.error_triple(solution, reference)

            def reference_values(pts):
                return fes.evaluate_edge_field(
                    reference.space, reference.dofs, points=pts
                )[0]

            gap = solution.dofs - fes.interpolate_edge(
                solution.space, reference_values
            )
            split_mesh = msh.build_box_mesh(
                config.box_lo, config.box_hi,
                config.split_factor * macro_n,
            )
            theta, z = err.helmholtz_split(solution.space, gap, split_mesh)
            table = est.compute_indicators(
                solution, coeffs, source, config.source_degree
            )
            eff = est.effectivity(solution, reference, table)
        row = (
            macro_n, micro_n, delta, triple.total, triple.curl_part,
            triple.div_part, triple.l2_part, theta, z, table.total, eff,
        )
        return row, table, eff

    results = _map_ordered(level, range(len(config.macro_n)), jobs)
    _write_csv(
        out / "convergence.csv", CONVERGENCE_HEADER,
        [row for row, _, _ in results],
    )
    outputs = ["convergence.csv"]
    if indicators:
        for k, (_, table, eff) in enumerate(results):
            name = f"indicators_{k}.csv"
            est.write_indicator_csv(table, out / name, effectivity_value=eff)
            outputs.append(name)
    return outputs


def _run_converge(config, coeffs, source, out, timings, jobs):
    return _run_levels(
        config, coeffs, source, out, timings, jobs, indicators=False
    )


def _run_estimate(config, coeffs, source, out, timings, jobs):
    return _run_levels(
        config, coeffs, source, out, timings, jobs, indicators=True
    )


def _run_modeling(config, coeffs, source, out, timings, jobs):
    fine_mesh = msh.build_box_mesh(
        config.box_lo, config.box_hi, config.fine_n
    )

    def one(k):
        delta = config.delta[k]
        with _stage(timings, f"delta_{k}"):
            solution = _solve_level(
                config, coeffs, source, config.macro_n[0],
                config.micro_n[0], delta,
            )
            fine = err.solve_direct_fine(
                coeffs, delta, source, fine_mesh, config.resolution_factor
            )
            l2, curl = err.modeling_error(fine, solution)
        return (delta, config.fine_n, l2, curl)

    rows = _map_ordered(one, range(len(config.delta)), jobs)
    _write_csv(out / "modeling.csv", MODELING_HEADER, rows)
    return ["modeling.csv"]


RUNNERS = {
    "cell": _run_cell,
    "solve": _run_solve,
    "converge": _run_converge,
    "estimate": _run_estimate,
    "modeling": _run_modeling,
}

TOLERANCES = {
    "residual_tol": lin.RESIDUAL_TOL,
    "symmetry_rtol": lin.SYMMETRY_RTOL,
    "pivot_rtol": lin.PIVOT_RTOL,
    "two_grid_edge_damping": lin.TWO_GRID_EDGE_DAMPING,
    "two_grid_nodal_damping": lin.TWO_GRID_NODAL_DAMPING,
    "two_grid_restart": lin.TWO_GRID_RESTART,
    "two_grid_max_rounds": lin.TWO_GRID_MAX_ROUNDS,
    "cell_iterative_min_dofs": cel.CELL_ITERATIVE_MIN_DOFS,
    "cell_krylov_tol": cel.CELL_KRYLOV_TOL,
    "cell_cg_max_iters": cel.CELL_CG_MAX_ITERS,
    "cell_gmres_restart": cel.CELL_GMRES_RESTART,
    "cell_gmres_max_rounds": cel.CELL_GMRES_MAX_ROUNDS,
    "amg_max_coarse": cel.AMG_MAX_COARSE,
    "large_system_min_dofs": hmm.LARGE_SYSTEM_MIN_DOFS,
    "mass_degree": hmm.MASS_DEGREE,
    "load_degree": hmm.LOAD_DEGREE,
    "error_x_quad_degree": err.X_QUAD_DEGREE,
    "exact_quad_degree": err.EXACT_QUAD_DEGREE,
    "estimate_x_quad_degree": est.X_QUAD_DEGREE,
    "face_quad_degree": est.FACE_QUAD_DEGREE,
    "micro_quad_degree": est.MICRO_QUAD_DEGREE,
    "source_quad_degree": est.SOURCE_QUAD_DEGREE,
    "geom_tol": msh.GEOM_TOL,
}


def _json_safe(value):
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_json_safe(v) for v in value.tolist()]
    if isinstance(value, (complex, np.complexfloating)):
        z = complex(value)
        return format(z.real, ".17g") + format(z.imag, "+.17g") + "j"
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def run(config: RunConfig):
    """Execute one experiment; returns the manifest written to out_dir."""
    timings = {}
    start = time.perf_counter()
    with _stage(timings, "setup"):
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        coeffs = cf.preset(
            config.coeff_preset, _decode_params(config.coeff_params)
        )
        source = cf.source_preset(
            config.source_preset, _decode_params(config.source_params)
        )
        jobs = config.jobs or os.cpu_count() or 1
    try:
        outputs = RUNNERS[config.experiment](
            config, coeffs, source, out, timings, jobs
        )
    except hmm.StageError:
        raise
    except Exception as exc:
        raise hmm.StageError(
            f"stage {config.experiment}: {exc}"
        ) from exc
    timings["total"] = time.perf_counter() - start
    manifest = {
        "config": _json_safe(asdict(config)),
        "coefficients": {
            "preset": coeffs.preset,
            "params": _json_safe(coeffs.params),
            "c0": coeffs.c0,
            "c1": coeffs.c1,
            "x_independent": coeffs.x_independent,
        },
        "source": {
            "preset": source.preset,
            "params": _json_safe(source.params),
            "divergence_free": source.divergence_free,
        },
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pyamg": pyamg.__version__,
            "maxwellhmm": __version__,
        },
        "tolerances": _json_safe(TOLERANCES),
        "jobs_effective": jobs,
        "timings": timings,
        "outputs": outputs,
    }
    try:
        with open(out / MANIFEST_NAME, "w") as handle:
            json.dump(manifest, handle, indent=2, sort_keys=True)
            handle.write("\n")
    except OSError as exc:
        raise hmm.StageError(f"stage manifest: {exc}") from exc
    return manifest


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="maxwell-hmm",
        description="Batch experiments for the multiscale Maxwell solver.",
    )
    parser.add_argument(
        "experiment", help="one of " + ", ".join(EXPERIMENTS)
    )
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument(
        "--macro-n", dest="macro_n",
        help="macro mesh size or comma-separated sequence",
    )
    parser.add_argument(
        "--micro-n", dest="micro_n",
        help="micro mesh size or comma-separated sequence",
    )
    parser.add_argument(
        "--delta", help="oscillation length or comma-separated sequence"
    )
    parser.add_argument(
        "--preset", dest="coeff_preset", help="coefficient preset name"
    )
    parser.add_argument(
        "--jobs", help="worker count for independent stages"
    )
    parser.add_argument("--out", dest="out_dir", help="output directory")
    return parser.parse_args(argv)


def _emit_error(record, out_dir):
    """Print the error record; persist it if the run directory exists."""
    print(json.dumps(record, sort_keys=True))
    try:
        out = Path(str(out_dir))
        if out.is_dir():
            with open(out / ERROR_NAME, "w") as handle:
                json.dump(record, handle, indent=2, sort_keys=True)
                handle.write("\n")
    except OSError:
        pass


def main(argv=None):
    args = _parse_args(argv)
    raw = {"experiment": args.experiment}
    if args.config:
        try:
            with open(args.config) as handle:
                loaded = json.load(handle)
            if not isinstance(loaded, dict):
                raise ValueError("the configuration must be a JSON object")
            raw.update(loaded)
        except (OSError, ValueError) as exc:
            _emit_error(
                {"error": "config", "message": str(exc)},
                raw.get("out_dir", DEFAULTS["out_dir"]),
            )
            return VALIDATION_EXIT
        raw["experiment"] = args.experiment
    for field in ("macro_n", "micro_n", "delta", "coeff_preset", "jobs",
                  "out_dir"):
        value = getattr(args, field)
        if value is not None:
            raw[field] = value

    config, violations = validate_config(raw)
    if violations:
        _emit_error(
            {"error": "validation", "violations": violations},
            raw.get("out_dir", DEFAULTS["out_dir"]),
        )
        return VALIDATION_EXIT

    try:
        run(config)
    except hmm.StageError as exc:
        message = str(exc)
        stage = message.split(":", 1)[0]
        stage = stage[len("stage "):] if stage.startswith("stage ") else stage
        _emit_error(
            {"error": "stage", "stage": stage, "message": message},
            config.out_dir,
        )
        return STAGE_EXIT
    print(f"wrote {Path(config.out_dir) / MANIFEST_NAME}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
