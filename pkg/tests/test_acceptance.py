"""Acceptance gates for the multiscale curl-curl solver.

Each test prints a single verdict line (PASS or FAIL, with the measured
quantities and their thresholds) and then asserts it.  Run with
``pytest -s tests/test_acceptance.py`` to see the verdicts of passing
gates as well; runtime limits are asserted alongside the accuracy gates.
"""
import math
import time

import numpy as np
import pytest

import maxwellhmm.cell as cel
import maxwellhmm.coeffs as cf
import maxwellhmm.errors as err
import maxwellhmm.estimate as est
import maxwellhmm.fespace as fes
import maxwellhmm.hmm as hmm
import maxwellhmm.linsolve as lin
import maxwellhmm.mesh as msh

LO = (0.0, 0.0, 0.0)
HI = (1.0, 1.0, 1.0)
KAPPA0 = 1.0 - 1.0j
LEVELS = ((4, 4), (8, 8), (16, 16))
LEVEL_NS = tuple(level[0] for level in LEVELS)
REFERENCE_N = 32
MODELING_FINE_N = 24
MODELING_DELTAS = (0.5, 0.25)
MODELING_RESOLUTION_FACTOR = 6.0
SHARED_BUDGET_S = 900.0

_shared_spent = {"seconds": 0.0}


def _verdict(name, ok, detail):
    line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


def _box(n):
    return msh.build_box_mesh(LO, HI, n)


def _solve(macro_n, micro_n, coeffs, source, delta):
    problem = hmm.HmmProblem(
        _box(macro_n), msh.build_periodic_cube_mesh(micro_n),
        coeffs, source, delta=delta,
    )
    return hmm.solve_hmm(problem)


@pytest.fixture(scope="module")
def laminate_study():
    """Laminate solutions at the three levels plus the overkill reference."""
    t0 = time.perf_counter()
    coeffs = cf.preset("laminate_y1")
    source = cf.source_preset("constant")
    solutions = [_solve(hn, mn, coeffs, source, 0.25) for hn, mn in LEVELS]
    reference = _solve(REFERENCE_N, REFERENCE_N, coeffs, source, 0.25)
    _shared_spent["seconds"] += time.perf_counter() - t0
    return {
        "solutions": solutions,
        "reference": reference,
        "coeffs": coeffs,
        "source": source,
    }


def test_criterion_1_laminate_effective_tensors():
    t0 = time.perf_counter()
    coeffs = cf.preset("laminate_y1")
    macro = _box(1)
    root3 = math.sqrt(3.0)
    khom_target = (1.0 - 1.0j) * np.diag([root3, 2.0, 2.0])
    mhom_target = np.diag([2.0, root3, root3])
    diag = np.eye(3, dtype=bool)
    gaps = []
    off = None
    for n in (4, 8, 16):
        cells = cel.homogenize_all(
            macro, msh.build_periodic_cube_mesh(n), coeffs
        )
        mhom, khom = cells.mhom[0], cells.khom[0]
        rel_m = np.abs(mhom - mhom_target)[diag] / np.abs(mhom_target[diag])
        rel_k = np.abs(khom - khom_target)[diag] / np.abs(khom_target[diag])
        gaps.append(float(max(rel_m.max(), rel_k.max())))
        off = float(max(np.abs(mhom[~diag]).max(), np.abs(khom[~diag]).max()))
    order = err.fit_rate((4, 8, 16), gaps)
    elapsed = time.perf_counter() - t0
    ok = (
        gaps[-1] <= 0.03 and order >= 1.0 and off <= 1e-3 and elapsed <= 30.0
    )
    _verdict(
        "criterion 1", ok,
        f"diagonal gap at n=16 {gaps[-1]:.2e} <= 3e-2, order {order:.2f} "
        f">= 1, off-diagonal {off:.1e} <= 1e-3, {elapsed:.0f}s <= 30s",
    )


def test_criterion_2_constant_coefficient_degeneracy():
    t0 = time.perf_counter()
    coeffs = cf.preset("constant", {"m0": 1.0, "k0": KAPPA0})
    source = cf.source_preset("constant")
    macro = _box(4)
    micro = msh.build_periodic_cube_mesh(4)
    cells = cel.homogenize_all(macro, micro, coeffs)
    dof_sup = max(
        float(np.abs(cells.curl_correctors).max()),
        float(np.abs(cells.grad_correctors).max()),
    )
    # crude interpolation bound: nodal sup controls the P1 field and,
    # after dividing by the mesh size, its gradient
    h1_bound = dof_sup * (1.0 + 6.0 * micro.n)
    tensor_gap = max(
        float(np.abs(cells.mhom - np.eye(3)).max()),
        float(np.abs(cells.khom - KAPPA0 * np.eye(3)).max()),
    )
    sol = hmm.solve_hmm(hmm.HmmProblem(macro, micro, coeffs, source,
                                       delta=1.0))
    table = est.compute_indicators(sol, coeffs, source)
    indicator_sup = max(
        float(np.sqrt(table.micro_tangential_sq).max()),
        float(np.sqrt(table.micro_normal_sq).max()),
        float(np.sqrt(table.coefficient_mismatch_sq).max()),
        float(table.element_divergence.max()),
    )
    fine = err.solve_direct_fine(coeffs, 1.0, source, macro,
                                 resolution_factor=2.0)
    solution_gap = float(
        np.abs(sol.dofs - fine.dofs).max() / np.abs(fine.dofs).max()
    )
    ok = (
        h1_bound <= 1e-10 and tensor_gap <= 1e-12
        and indicator_sup <= 1e-12 and solution_gap <= 1e-9
    )
    elapsed = time.perf_counter() - t0
    _verdict(
        "criterion 2", ok,
        f"corrector H1 bound {h1_bound:.1e} <= 1e-10, tensor gap "
        f"{tensor_gap:.1e} <= 1e-12, indicator sup {indicator_sup:.1e} "
        f"<= 1e-12, single-scale gap {solution_gap:.1e} <= 1e-9, "
        f"{elapsed:.0f}s",
    )


def test_criterion_3_coupled_solver_matches_tensor_path():
    t0 = time.perf_counter()
    coeffs = cf.preset("laminate_y1")
    source = cf.source_preset("constant")
    macro = _box(2)
    micro = msh.build_periodic_cube_mesh(2)
    sol = hmm.solve_hmm(hmm.HmmProblem(macro, micro, coeffs, source,
                                       delta=0.25))
    system, _ = hmm.assemble_macro(macro, sol.cells, source)
    coupled = hmm.assemble_coupled_two_scale(macro, micro,
                                             sol.cells.sampled, source)
    full = coupled.system.matrix.toarray()
    n = coupled.num_macro
    schur = full[:n, :n] - full[:n, n:] @ np.linalg.solve(
        full[n:, n:], full[n:, :n]
    )
    matrix_gap = float(np.abs(schur - system.matrix.toarray()).max())
    x = lin.solve_direct(coupled.system, coupled.rhs)
    solution_gap = float(np.abs(x[:n] - sol.dofs).max())
    elapsed = time.perf_counter() - t0
    ok = matrix_gap <= 1e-10 and solution_gap <= 1e-9 and elapsed <= 60.0
    _verdict(
        "criterion 3", ok,
        f"matrix gap {matrix_gap:.1e} <= 1e-10, solution gap "
        f"{solution_gap:.1e} <= 1e-9, {elapsed:.0f}s <= 60s",
    )


def test_criterion_4_manufactured_solution_rate():
    t0 = time.perf_counter()
    rows = err.mms_reference(KAPPA0, LEVEL_NS)
    rate = rows[0]["rate"]
    elapsed = time.perf_counter() - t0
    ok = 0.8 <= rate <= 1.15 and elapsed <= 120.0
    _verdict(
        "criterion 4", ok,
        f"H(curl) rate {rate:.3f} in [0.8, 1.15], {elapsed:.0f}s <= 120s",
    )


def test_criterion_5_two_scale_energy_convergence(laminate_study):
    t0 = time.perf_counter()
    reference = laminate_study["reference"]
    errors = [
        err.error_triple(sol, reference).total
        for sol in laminate_study["solutions"]
    ]
    order = err.fit_rate(LEVEL_NS, errors)
    _shared_spent["seconds"] += time.perf_counter() - t0
    spent = _shared_spent["seconds"]
    ok = order >= 0.8 and spent <= SHARED_BUDGET_S
    _verdict(
        "criterion 5", ok,
        f"energy errors {errors[0]:.4f}/{errors[1]:.4f}/{errors[2]:.4f}, "
        f"order {order:.2f} >= 0.8, shared budget {spent:.0f}s <= 900s",
    )


def test_criterion_6_error_split_superconvergence():
    t0 = time.perf_counter()
    coeffs = cf.preset("constant", {"m0": 1.0, "k0": KAPPA0})
    source = cf.source_preset(
        "mms_sine", {"amplitude": 2.0 * np.pi**2 - KAPPA0}
    )
    exact = err.mms_field()
    sums = []
    for n in LEVEL_NS:
        sol = _solve(n, 2, coeffs, source, 1.0)
        gap = sol.dofs - fes.interpolate_edge(
            sol.space, lambda p: exact(p)[0]
        )
        theta, z = err.helmholtz_split(sol.space, gap, _box(2 * n))
        sums.append(theta + z)
    rate = err.fit_rate(LEVEL_NS, sums)
    elapsed = time.perf_counter() - t0
    ok = rate >= 1.5 and elapsed <= 180.0
    _verdict(
        "criterion 6", ok,
        f"split norms {sums[0]:.2e}/{sums[1]:.2e}/{sums[2]:.2e}, rate "
        f"{rate:.2f} >= 1.5, {elapsed:.0f}s <= 180s",
    )


def test_criterion_7_estimator_effectivity(laminate_study):
    t0 = time.perf_counter()
    reference = laminate_study["reference"]
    coeffs = laminate_study["coeffs"]
    source = laminate_study["source"]
    effectivities = []
    local_max = []
    for sol in laminate_study["solutions"]:
        table = est.compute_indicators(sol, coeffs, source)
        effectivities.append(est.effectivity(sol, reference, table))
        ratios = est.local_efficiency(
            table, err.element_error_norms(sol, reference)
        )
        local_max.append(float(ratios.max()))
    _shared_spent["seconds"] += time.perf_counter() - t0
    spent = _shared_spent["seconds"]
    spread = max(effectivities) / min(effectivities)
    ok = (
        min(effectivities) >= 0.1 and max(effectivities) <= 50.0
        and spread <= 3.0 and bool(np.isfinite(local_max).all())
        and local_max[2] <= 2.0 * local_max[0]
        and spent <= SHARED_BUDGET_S
    )
    _verdict(
        "criterion 7", ok,
        f"effectivity {effectivities[0]:.1f}/{effectivities[1]:.1f}/"
        f"{effectivities[2]:.1f} in [0.1, 50], spread {spread:.2f} <= 3, "
        f"local efficiency max {local_max[0]:.1f}/{local_max[1]:.1f}/"
        f"{local_max[2]:.1f} (last <= 2x first), budget {spent:.0f}s "
        f"<= 900s",
    )


def test_criterion_8_modeling_error_trend():
    t0 = time.perf_counter()
    coeffs = cf.preset("laminate_y1")
    source = cf.source_preset("constant")
    fine_mesh = _box(MODELING_FINE_N)
    l2 = {}
    for delta in MODELING_DELTAS:
        sol = _solve(8, 8, coeffs, source, delta)
        fine = err.solve_direct_fine(
            coeffs, delta, source, fine_mesh,
            resolution_factor=MODELING_RESOLUTION_FACTOR,
        )
        l2[delta], _ = err.modeling_error(fine, sol)
    factor = l2[MODELING_DELTAS[0]] / l2[MODELING_DELTAS[1]]
    elapsed = time.perf_counter() - t0
    ok = factor >= 1.3 and elapsed <= 1200.0
    _verdict(
        "criterion 8", ok,
        f"L2 distance {l2[0.5]:.5f} at delta 1/2 vs {l2[0.25]:.5f} at "
        f"delta 1/4, drop factor {factor:.3f} >= 1.3, {elapsed:.0f}s "
        f"<= 1200s",
    )


def _corrector_galerkin_residual(sol, workspace):
    """Worst relative residual of both corrector families in their
    discrete variational equations."""
    cells = sol.cells
    micro = cells.micro
    nm = micro.num_masters
    mu = np.asarray(cells.sampled.mu_inv[0], dtype=float)
    dim = 3 * nm
    dense = np.zeros((dim, dim))
    load = np.zeros((dim, 3))
    for t in range(micro.num_tets):
        d = workspace.vector_space.cell_dofs[t]
        dense[np.ix_(d, d)] += (
            mu[t] * workspace.vec_curlcurl[t] + workspace.vec_divdiv[t]
        )
        load[d] += micro.tet_volumes[t] * mu[t] * workspace.vec_curl_op[t].T
    worst = 0.0
    for j in (0, 7, 23):
        c = sol.curl_values[j]
        k1 = np.einsum("k,kl->l", c, cells.curl_correctors[j])
        scale = max(np.abs(load @ c).max(), 1.0)
        worst = max(worst, float(np.abs(dense @ k1 + load @ c).max() / scale))
    kappa = np.asarray(cells.sampled.kappa[0], dtype=complex)
    dense_s = np.zeros((nm, nm), dtype=complex)
    rhs_s = np.zeros((nm, 3), dtype=complex)
    for t in range(micro.num_tets):
        d = workspace.scalar_space.cell_dofs[t]
        dense_s[np.ix_(d, d)] += kappa[t] * workspace.scal_stiff[t]
        rhs_s[d] += -kappa[t] * workspace.scal_coup[t]
    residual = dense_s @ cells.grad_correctors[0].T - rhs_s
    return max(worst, float(np.abs(residual).max()))


def _symmetry_gap(matrix):
    """Relative sup-norm asymmetry of a sparse matrix."""
    dense = matrix.toarray()
    return float(np.abs(dense - dense.T).max() / np.abs(dense).max())


def _quadrature_defect():
    """Worst monomial integration error of the tet and triangle rules."""
    worst = 0.0
    for degree in (1, 2, 4):
        rule = fes.tet_rule(degree)
        for a in range(degree + 1):
            for b in range(degree + 1 - a):
                for c in range(degree + 1 - a - b):
                    got = float(np.sum(
                        rule.weights * rule.points[:, 1] ** a
                        * rule.points[:, 2] ** b * rule.points[:, 3] ** c
                    ))
                    want = 6.0 * (
                        math.factorial(a) * math.factorial(b)
                        * math.factorial(c)
                        / math.factorial(a + b + c + 3)
                    )
                    worst = max(worst, abs(got - want))
    for degree in (1, 2):
        rule = fes.triangle_rule(degree)
        for a in range(degree + 1):
            for b in range(degree + 1 - a):
                got = float(np.sum(
                    rule.weights * rule.points[:, 1] ** a
                    * rule.points[:, 2] ** b
                ))
                want = 2.0 * (
                    math.factorial(a) * math.factorial(b)
                    / math.factorial(a + b + 2)
                )
                worst = max(worst, abs(got - want))
    return worst


def _mesh_invariant_defect():
    """Worst geometric defect of a skew box mesh and its point location."""
    mesh = msh.build_box_mesh((0.5, -1.0, 2.0), (1.5, 1.0, 3.5), 3)
    volume_gap = abs(float(mesh.tet_volumes.sum()) - 3.0) / 3.0
    boundary_gap = abs(int(mesh.boundary_face_mask.sum()) - 12 * 3**2)
    normal_gap = float(
        np.abs(np.linalg.norm(mesh.face_normals, axis=1) - 1.0).max()
    )
    centers = mesh.vertices[mesh.faces].mean(axis=1)
    owners = mesh.tet_barycenters[mesh.face_owner]
    outward = float(np.einsum(
        "fc,fc->f", mesh.face_normals, centers - owners
    ).min())
    rng = np.random.default_rng(7)
    pts = mesh.box_lo + rng.random((200, 3)) * (mesh.box_hi - mesh.box_lo)
    tids, bary = msh.locate_points(mesh, pts)
    rebuilt = np.einsum("pa,pac->pc", bary, mesh.vertices[mesh.tets[tids]])
    locate_gap = float(np.abs(rebuilt - pts).max())
    orientation_gap = 0.0 if outward > 0.0 else 1.0
    return max(
        volume_gap, float(boundary_gap), normal_gap, orientation_gap,
        locate_gap,
    )


def _energy_axiom_gaps(sol):
    """Relative homogeneity gap and normalized triangle slack of the
    two-scale energy norm on random discrete triples."""
    macro = sol.space.mesh
    micro = sol.cells.micro
    rng = np.random.default_rng(11)
    nt = macro.num_tets
    nd = sol.space.num_dofs

    def rand_field():
        return err.TwoScaleField(
            space=sol.space,
            dofs=rng.standard_normal(nd) + 1j * rng.standard_normal(nd),
            cells=sol.cells,
            curl_coeffs=rng.standard_normal((nt, 3))
            + 1j * rng.standard_normal((nt, 3)),
            field_coeffs=rng.standard_normal((nt, 3))
            + 1j * rng.standard_normal((nt, 3)),
        )

    def combine(u, v, alpha, beta):
        return err.TwoScaleField(
            space=sol.space,
            dofs=alpha * u.dofs + beta * v.dofs,
            cells=sol.cells,
            curl_coeffs=alpha * u.curl_coeffs + beta * v.curl_coeffs,
            field_coeffs=alpha * u.field_coeffs + beta * v.field_coeffs,
        )

    homogeneity = 0.0
    triangle = -np.inf
    for _ in range(3):
        u = rand_field()
        v = rand_field()
        alpha = complex(rng.standard_normal(), rng.standard_normal())
        norm_u = err.energy_norm(u, macro, micro).total
        norm_v = err.energy_norm(v, macro, micro).total
        scaled = err.energy_norm(
            combine(u, v, alpha, 0.0), macro, micro
        ).total
        summed = err.energy_norm(
            combine(u, v, 1.0, 1.0), macro, micro
        ).total
        homogeneity = max(
            homogeneity,
            abs(scaled - abs(alpha) * norm_u) / (abs(alpha) * norm_u),
        )
        triangle = max(
            triangle, (summed - norm_u - norm_v) / (norm_u + norm_v)
        )
    return homogeneity, triangle


def test_criterion_9_structural_invariants():
    t0 = time.perf_counter()
    coeffs = cf.preset("laminate_y1")
    source = cf.source_preset("constant")
    macro = _box(2)
    micro = msh.build_periodic_cube_mesh(2)
    sol = hmm.solve_hmm(hmm.HmmProblem(macro, micro, coeffs, source,
                                       delta=0.25))
    workspace = cel.cell_workspace(micro)
    galerkin = _corrector_galerkin_residual(sol, workspace)
    system, _ = hmm.assemble_macro(macro, sol.cells, source)
    coupled = hmm.assemble_coupled_two_scale(
        macro, micro, sol.cells.sampled, source
    )
    symmetry = max(
        _symmetry_gap(system.matrix), _symmetry_gap(coupled.system.matrix)
    )
    cells4 = cel.homogenize_all(
        _box(4), msh.build_periodic_cube_mesh(4), coeffs
    )
    tensor_sym = max(
        float(np.abs(cells4.mhom - cells4.mhom.transpose(0, 2, 1)).max()),
        float(np.abs(cells4.khom - cells4.khom.transpose(0, 2, 1)).max()),
    )
    homogeneity, triangle = _energy_axiom_gaps(sol)
    quadrature = _quadrature_defect()
    mesh_defect = _mesh_invariant_defect()
    elapsed = time.perf_counter() - t0
    ok = (
        galerkin <= 1e-10 and symmetry <= 1e-12 and tensor_sym <= 1e-10
        and homogeneity <= 1e-12 and triangle <= 1e-12
        and quadrature <= 1e-14 and mesh_defect <= 1e-12
        and elapsed <= 60.0
    )
    _verdict(
        "criterion 9", ok,
        f"galerkin residual {galerkin:.1e} <= 1e-10, system asymmetry "
        f"{symmetry:.1e} <= 1e-12, tensor asymmetry {tensor_sym:.1e} "
        f"<= 1e-10, energy homogeneity {homogeneity:.1e} <= 1e-12, "
        f"triangle slack {triangle:.1e} <= 1e-12, quadrature defect "
        f"{quadrature:.1e} <= 1e-14, mesh defect {mesh_defect:.1e} "
        f"<= 1e-12, {elapsed:.0f}s <= 60s",
    )
