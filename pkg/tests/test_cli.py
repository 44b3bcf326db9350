"""Batch driver tests: config validation, experiments, file contracts."""

import csv
import json
import math

import numpy as np
import pytest

import maxwellhmm.cell as cel
import maxwellhmm.cli as cli
import maxwellhmm.coeffs as cf
import maxwellhmm.errors as err
import maxwellhmm.estimate as est
import maxwellhmm.fespace as fes
import maxwellhmm.hmm as hmm
import maxwellhmm.linsolve as lin
import maxwellhmm.mesh as msh

SQRT3 = math.sqrt(3.0)


def _read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def _run(args):
    return cli.main(args)


def _error_record(capsys):
    out = capsys.readouterr().out
    return json.loads(out.splitlines()[-1])


def test_cell_laminate_first_tensor_entry(tmp_path):
    out = tmp_path / "cell"
    rc = _run([
        "cell", "--preset", "laminate_y1", "--macro-n", "1",
        "--micro-n", "4,8", "--out", str(out),
    ])
    assert rc == 0
    rows8 = _read_csv(out / "tensors_n8.csv")
    assert len(rows8) == 6
    assert [int(r["j"]) for r in rows8] == list(range(6))
    first = rows8[0]
    assert abs(float(first["khom_00_re"]) - SQRT3) <= 2e-2 * SQRT3
    assert abs(float(first["khom_00_im"]) + SQRT3) <= 2e-2 * SQRT3
    assert abs(float(first["khom_01_re"])) <= 1e-6
    assert abs(float(first["mhom_00"]) - 2.0) <= 1e-10
    assert abs(float(first["mhom_11"]) - SQRT3) <= 2e-2 * SQRT3
    rows4 = _read_csv(out / "tensors_n4.csv")
    gap8 = abs(float(first["khom_00_re"]) - SQRT3)
    gap4 = abs(float(rows4[0]["khom_00_re"]) - SQRT3)
    assert gap8 < gap4


def test_cell_rows_carry_element_barycenters(tmp_path):
    out = tmp_path / "cell"
    rc = _run([
        "cell", "--macro-n", "2", "--micro-n", "2", "--out", str(out),
    ])
    assert rc == 0
    rows = _read_csv(out / "tensors_n2.csv")
    mesh = msh.build_box_mesh((0, 0, 0), (1, 1, 1), 2)
    assert len(rows) == mesh.num_tets
    got = np.array([
        [float(r["x_0"]), float(r["x_1"]), float(r["x_2"])] for r in rows
    ])
    assert np.allclose(got, mesh.tet_barycenters, atol=1e-15)


def test_converge_constant_matches_reference_table(tmp_path):
    out = tmp_path / "mms"
    rc = _run([
        "converge", "--preset", "constant", "--macro-n", "2,4",
        "--micro-n", "2", "--out", str(out),
    ])
    assert rc == 0
    rows = _read_csv(out / "convergence.csv")
    assert list(rows[0].keys()) == ["n", "hcurl_error", "rate"]
    table = err.mms_reference(1.0 - 1.0j, [2, 4], 2)
    assert len(rows) == len(table)
    for got, want in zip(rows, table):
        assert int(got["n"]) == want["n"]
        assert float(got["hcurl_error"]) == want["hcurl_error"]
        assert float(got["rate"]) == want["rate"]
    assert 0.5 <= float(rows[0]["rate"]) <= 1.5


def test_invalid_preset_exits_2_and_names_the_field(tmp_path, capsys):
    rc = _run([
        "cell", "--preset", "nonexistent", "--out", str(tmp_path / "x"),
    ])
    assert rc == 2
    record = _error_record(capsys)
    assert record["error"] == "validation"
    fields = [v["field"] for v in record["violations"]]
    assert fields == ["coeff_preset"]
    assert "nonexistent" in record["violations"][0]["message"]


def test_validation_lists_every_violated_field(tmp_path, capsys):
    config = {
        "experiment": "solve",
        "macro_n": 0,
        "micro_n": 1,
        "delta": 3.0,
        "probe_n": 0,
        "source_degree": 7,
        "vtk": "yes",
        "frobnicate": 1,
    }
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(config))
    rc = _run(["solve", "--config", str(path)])
    assert rc == 2
    record = _error_record(capsys)
    fields = sorted(v["field"] for v in record["violations"])
    assert fields == [
        "delta", "frobnicate", "macro_n", "micro_n", "probe_n",
        "source_degree", "vtk",
    ]


def test_unreadable_config_exits_2(tmp_path, capsys):
    rc = _run(["solve", "--config", str(tmp_path / "missing.json")])
    assert rc == 2
    record = _error_record(capsys)
    assert record["error"] == "config"


def test_flags_override_config_file(tmp_path):
    config = {"macro_n": 2, "micro_n": [2], "coeff_preset": "constant"}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(config))
    out = tmp_path / "run"
    rc = _run([
        "cell", "--config", str(path), "--macro-n", "1", "--out", str(out),
    ])
    assert rc == 0
    rows = _read_csv(out / "tensors_n2.csv")
    assert len(rows) == 6
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["macro_n"] == [1]
    assert manifest["config"]["coeff_preset"] == "constant"


def test_reruns_and_job_counts_are_byte_identical(tmp_path):
    config = {
        "experiment": "cell", "macro_n": 1, "micro_n": [2, 4],
        "coeff_preset": "laminate_y1",
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(config))
    blobs = []
    for name, extra in (("a", []), ("b", []), ("c", ["--jobs", "3"])):
        out = tmp_path / name
        rc = _run(["cell", "--config", str(path), "--out", str(out)] + extra)
        assert rc == 0
        blobs.append(
            (out / "tensors_n2.csv").read_bytes()
            + (out / "tensors_n4.csv").read_bytes()
        )
    assert blobs[0] == blobs[1]
    assert blobs[0] == blobs[2]


def test_solve_writes_dofs_probe_and_vtk(tmp_path):
    out = tmp_path / "solve"
    config = {
        "macro_n": 2, "micro_n": 2, "delta": 0.5, "probe_n": 3,
        "vtk": True, "out_dir": str(out),
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(config))
    rc = _run(["solve", "--config", str(path)])
    assert rc == 0

    mesh = msh.build_box_mesh((0, 0, 0), (1, 1, 1), 2)
    space = fes.EdgeSpace(mesh)
    dofs = _read_csv(out / "dofs.csv")
    assert len(dofs) == space.num_dofs
    assert list(dofs[0].keys()) == ["dof", "re", "im"]

    probe = _read_csv(out / "probe.csv")
    assert len(probe) == 27
    assert list(probe[0].keys()) == list(cli.PROBE_HEADER)
    pts = np.array([
        [float(r["x_0"]), float(r["x_1"]), float(r["x_2"])] for r in probe
    ])
    assert pts.min() > 0.0 and pts.max() < 1.0
    vals = np.array([
        [complex(float(r[f"e_{c}_re"]), float(r[f"e_{c}_im"]))
         for c in range(3)]
        for r in probe
    ])
    assert np.all(np.isfinite(vals.view(float)))

    lines = (out / "field.vtk").read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2] == "ASCII"
    assert lines[3] == "DATASET UNSTRUCTURED_GRID"
    assert lines[4] == f"POINTS {mesh.num_vertices} double"
    cells_at = lines.index(f"CELLS {mesh.num_tets} {5 * mesh.num_tets}")
    points = np.array([
        [float(v) for v in line.split()]
        for line in lines[5:cells_at]
    ])
    assert np.array_equal(points, mesh.vertices)
    assert lines.count("VECTORS e_re double") == 1
    assert lines.count("VECTORS curl_im double") == 1
    types_at = lines.index(f"CELL_TYPES {mesh.num_tets}")
    assert all(
        line == "10"
        for line in lines[types_at + 1:types_at + 1 + mesh.num_tets]
    )


def test_solve_probe_values_match_composite_field(tmp_path):
    out = tmp_path / "solve"
    rc = _run([
        "solve", "--macro-n", "2", "--micro-n", "2", "--delta", "0.5",
        "--out", str(out),
    ])
    assert rc == 0
    probe = _read_csv(out / "probe.csv")
    macro = msh.build_box_mesh((0, 0, 0), (1, 1, 1), 2)
    micro = msh.build_periodic_cube_mesh(2)
    coeffs = cf.preset("laminate_y1")
    source = cf.source_preset("constant")
    sol = hmm.solve_hmm(hmm.HmmProblem(macro, micro, coeffs, source, 0.5))
    pts = np.array([
        [float(r["x_0"]), float(r["x_1"]), float(r["x_2"])] for r in probe
    ])
    vals = hmm.evaluate_ehmm(sol, pts)
    got = np.array([
        [complex(float(r[f"e_{c}_re"]), float(r[f"e_{c}_im"]))
         for c in range(3)]
        for r in probe
    ])
    assert np.abs(got - vals).max() <= 1e-12 * max(np.abs(vals).max(), 1.0)


def test_estimate_writes_convergence_and_indicator_tables(tmp_path):
    out = tmp_path / "est"
    config = {
        "macro_n": [2], "micro_n": [2], "reference_factor": 2,
        "out_dir": str(out),
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(config))
    rc = _run(["estimate", "--config", str(path)])
    assert rc == 0
    rows = _read_csv(out / "convergence.csv")
    assert list(rows[0].keys()) == list(cli.CONVERGENCE_HEADER)
    assert len(rows) == 1
    row = rows[0]
    assert float(row["energy_error"]) > 0
    assert float(row["estimator_total"]) > 0
    assert float(row["effectivity"]) > 0

    entity_rows = _read_csv(out / "indicators_0.csv")
    aggregates = {
        r["element"]: r["value"]
        for r in entity_rows if r["kind"] == "aggregate"
    }
    assert float(aggregates["effectivity"]) == float(row["effectivity"])
    assert float(aggregates["total"]) == float(row["estimator_total"])

    macro = msh.build_box_mesh((0, 0, 0), (1, 1, 1), 2)
    micro = msh.build_periodic_cube_mesh(2)
    coeffs = cf.preset("laminate_y1")
    source = cf.source_preset("constant")
    sol = hmm.solve_hmm(hmm.HmmProblem(macro, micro, coeffs, source, 0.25))
    table = est.compute_indicators(sol, coeffs, source)
    assert abs(float(row["estimator_total"]) - table.total) <= (
        1e-12 * table.total
    )


def test_estimate_rejects_non_nested_levels(tmp_path, capsys):
    rc = _run([
        "estimate", "--macro-n", "3,4", "--micro-n", "2",
        "--out", str(tmp_path / "x"),
    ])
    assert rc == 2
    record = _error_record(capsys)
    assert [v["field"] for v in record["violations"]] == ["macro_n"]
    assert "refine" in record["violations"][0]["message"]


def test_modeling_table_and_auto_fine_n(tmp_path):
    out = tmp_path / "mod"
    rc = _run([
        "modeling", "--macro-n", "2", "--micro-n", "2", "--delta", "0.5",
        "--out", str(out),
    ])
    assert rc == 0
    rows = _read_csv(out / "modeling.csv")
    assert list(rows[0].keys()) == list(cli.MODELING_HEADER)
    assert len(rows) == 1
    needed = int(np.ceil(2.0 * SQRT3 / 0.5))
    assert int(rows[0]["fine_n"]) == needed
    assert float(rows[0]["l2_error"]) > 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["fine_n"] == needed


def test_modeling_rejects_unresolved_fine_mesh(tmp_path, capsys):
    config = {"fine_n": 3, "delta": [0.5], "out_dir": str(tmp_path / "x")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(config))
    rc = _run(["modeling", "--config", str(path)])
    assert rc == 2
    record = _error_record(capsys)
    violation = record["violations"][0]
    assert violation["field"] == "fine_n"
    assert "need fine_n >=" in violation["message"]


def test_stage_failure_exits_1_with_record(tmp_path, capsys, monkeypatch):
    out = tmp_path / "run"
    out.mkdir()

    def boom(*args, **kwargs):
        raise RuntimeError("synthetic failure")

    monkeypatch.setattr(cli.err, "mms_reference", boom)
    rc = _run([
        "converge", "--preset", "constant", "--macro-n", "2",
        "--micro-n", "2", "--out", str(out),
    ])
    assert rc == 1
    record = _error_record(capsys)
    assert record["error"] == "stage"
    assert record["stage"] == "mms_table"
    assert "synthetic failure" in record["message"]
    persisted = json.loads((out / "error.json").read_text())
    assert persisted == record


def test_setup_failure_names_the_stage(tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    rc = _run([
        "solve", "--macro-n", "2", "--micro-n", "2",
        "--out", str(blocker / "nested"),
    ])
    assert rc == 1
    record = _error_record(capsys)
    assert record["error"] == "stage"
    assert record["stage"] == "setup"


def test_complex_parameter_strings_decode(tmp_path):
    out = tmp_path / "cell"
    config = {
        "macro_n": 1, "micro_n": 2, "coeff_preset": "constant",
        "coeff_params": {"m0": 1.5, "k0": "2-0.5j"}, "out_dir": str(out),
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(config))
    rc = _run(["cell", "--config", str(path)])
    assert rc == 0
    rows = _read_csv(out / "tensors_n2.csv")
    assert abs(float(rows[0]["khom_00_re"]) - 2.0) <= 1e-10
    assert abs(float(rows[0]["khom_00_im"]) + 0.5) <= 1e-10
    assert abs(float(rows[0]["mhom_00"]) - 1.5) <= 1e-10
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["coefficients"]["params"]["k0"] == "2-0.5j"


def test_manifest_records_versions_tolerances_timings(tmp_path):
    out = tmp_path / "run"
    rc = _run([
        "solve", "--macro-n", "2", "--micro-n", "2", "--out", str(out),
    ])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    for field in (
        "experiment", "box_lo", "box_hi", "macro_n", "micro_n", "delta",
        "coeff_preset", "source_preset", "out_dir", "reference_factor",
        "resolution_factor", "split_factor", "source_degree", "probe_n",
        "fine_n", "seed", "jobs", "vtk",
    ):
        assert field in manifest["config"]
    versions = manifest["versions"]
    assert set(versions) == {"python", "numpy", "scipy", "pyamg",
                             "maxwellhmm"}
    tolerances = manifest["tolerances"]
    assert tolerances["residual_tol"] == lin.RESIDUAL_TOL
    assert tolerances["cell_krylov_tol"] == pytest.approx(1e-12)
    assert tolerances["large_system_min_dofs"] == hmm.LARGE_SYSTEM_MIN_DOFS
    assert "total" in manifest["timings"]
    for name in manifest["outputs"]:
        assert (out / name).is_file()


def test_validate_config_broadcasts_levels():
    config, violations = cli.validate_config({
        "experiment": "converge", "macro_n": [2, 4, 8], "micro_n": 2,
    })
    assert violations == []
    assert config.micro_n == (2, 2, 2)
    assert config.macro_n == (2, 4, 8)


def test_validate_config_rejects_mismatched_levels():
    config, violations = cli.validate_config({
        "experiment": "estimate", "macro_n": [2, 4], "micro_n": [2, 4, 8],
    })
    assert config is None
    assert [v["field"] for v in violations] == ["micro_n"]


def test_csv_floats_round_trip_at_17_digits(tmp_path):
    out = tmp_path / "cell"
    rc = _run([
        "cell", "--macro-n", "1", "--micro-n", "4", "--out", str(out),
    ])
    assert rc == 0
    rows = _read_csv(out / "tensors_n4.csv")
    macro = msh.build_box_mesh((0, 0, 0), (1, 1, 1), 1)
    micro = msh.build_periodic_cube_mesh(4)
    result = cel.homogenize_all(macro, micro, cf.preset("laminate_y1"))
    for j, row in enumerate(rows):
        for a in range(3):
            for b in range(3):
                assert float(row[f"mhom_{a}{b}"]) == result.mhom[j, a, b]
                z = result.khom[j, a, b]
                assert float(row[f"khom_{a}{b}_re"]) == z.real
                assert float(row[f"khom_{a}{b}_im"]) == z.imag
