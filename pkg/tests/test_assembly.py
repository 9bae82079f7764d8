"""Hybridized solve, saddle-point cross-check, and load construction."""

import numpy as np
import pytest

from quasitrace.assembly import (
    assemble_local_blocks,
    build_rhs,
    condense_and_assemble,
    conforming_matrices,
    conformity_defect,
    effective_condition_number,
    global_vector_coefficients,
    solve_hybrid,
    solve_saddle_point,
)
from quasitrace.elements import AffineMap, mixed_space, triangle_rule

from conftest import (
    l2_scalar_diff,
    l2_vector_diff,
    make_sphere_mesh,
    random_needle,
    tet_boundary_mesh,
)
from test_elements import boundary_flux


def zero_rhs(points, faces):
    return np.zeros(points.shape[:-1])


class TestRhs:
    def test_zero_source_gives_zero_load(self, sphere, sphere_meshes):
        mesh = sphere_meshes[8]
        rhs = build_rhs(lambda x: np.zeros(x.shape[:-1]), mesh, sphere)
        assert rhs.mean_correction == 0.0
        pts = mesh.centroids()[:5]
        assert np.all(rhs(pts, np.arange(5)) == 0.0)

    def test_load_is_mean_free(self, sphere, problem, sphere_meshes):
        for n in (8, 16):
            mesh = sphere_meshes[n]
            rhs = build_rhs(problem.f, mesh, sphere)
            blocks = assemble_local_blocks(mesh, mixed_space("rt0"), rhs=rhs)
            assert abs(blocks.load.sum()) < 1e-12

    def test_warns_on_incompatible_source(self, sphere, sphere_meshes):
        # the threshold is h^3 * |f|, so use a mesh fine enough to resolve it
        with pytest.warns(UserWarning):
            build_rhs(lambda x: np.ones(x.shape[:-1]), sphere_meshes[16], sphere)

    def test_mean_correction_below_warning_threshold_and_decreasing(self, sphere, problem, sphere_meshes):
        corrections = []
        for n in (8, 16, 32):
            mesh = sphere_meshes[n]
            rhs = build_rhs(problem.f, mesh, sphere)
            assert abs(rhs.mean_correction) <= mesh.h**3 * rhs.norm
            corrections.append(abs(rhs.mean_correction))
        assert corrections[0] > corrections[1] > corrections[2]


class TestLocalBlocks:
    def test_mass_positive_definite_on_needles(self):
        rng = np.random.default_rng(40)
        space = mixed_space("bdm1")
        verts = np.stack([random_needle(rng, max_aspect=1e3) for _ in range(50)])
        # build blocks directly from maps; no mesh needed for the mass part
        maps = AffineMap.from_triangles(verts)
        pts, wts = triangle_rule(4)
        bas = space.vector.basis(pts)
        mass = np.einsum("q,kqa,fab,lqb->fkl", wts, bas, maps.metric, bas) / maps.jac[:, None, None]
        eigs = np.linalg.eigvalsh(mass)
        assert eigs.min() > 0.0

    def test_divergence_row_matches_boundary_flux(self):
        """Divergence theorem: row against constants = summed edge fluxes."""
        rng = np.random.default_rng(41)
        for kind in ("rt0", "bdm1"):
            space = mixed_space(kind)
            for _ in range(10):
                verts = random_needle(rng, max_aspect=100.0)
                amap = AffineMap.from_triangles(verts)
                for k in range(space.vector.n_dofs):
                    coeffs = np.zeros(space.vector.n_dofs)
                    coeffs[k] = 1.0

                    def basis_field(pts):
                        ref = amap.to_reference(pts[None])[0]
                        vals = np.einsum("kqd,k->qd", space.vector.basis(ref), coeffs)
                        return amap.push_vector(vals[None])[0]

                    row_value = 0.5 * space.vector.divergence()[k]
                    assert row_value == pytest.approx(boundary_flux(verts, basis_field), abs=1e-12)

    def test_reference_blocks_against_overintegration(self):
        """Degree-4 assembly must agree with a degree-10 quadrature oracle."""
        space = mixed_space("rt0")
        verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        maps = AffineMap.from_triangles(verts)
        for degree in (4, 10):
            pts, wts = triangle_rule(degree)
            bas = space.vector.basis(pts)
            mass = np.einsum("q,kqa,fab,lqb->fkl", wts, bas, maps.metric, bas) / maps.jac[:, None, None]
            if degree == 4:
                reference = mass
        assert np.abs(mass - reference).max() < 1e-12


class TestTetBoundarySystem:
    def test_structure_and_symmetry(self):
        mesh = tet_boundary_mesh()
        system = condense_and_assemble(mesh, mixed_space("rt0"), rhs=zero_rhs)
        assert system.unbordered.shape == (6, 6)
        assert system.matrix.shape == (7, 7)
        dense = system.matrix.toarray()
        assert np.abs(dense - dense.T).max() < 1e-14 * max(1.0, np.abs(dense).max())

    @pytest.mark.parametrize("kind", ["rt0", "bdm1"])
    def test_constant_multiplier_in_kernel(self, kind):
        mesh = tet_boundary_mesh()
        space = mixed_space(kind)
        system = condense_and_assemble(mesh, space, rhs=zero_rhs)
        constant = np.zeros(system.n_multipliers)
        if space.multiplier_moments == 1:
            constant[:] = 1.0
        else:
            constant[0::2] = 1.0
        assert np.abs(system.unbordered @ constant).max() < 1e-12

    @pytest.mark.parametrize("kind", ["rt0", "bdm1"])
    def test_kernel_dimension_and_positivity(self, kind):
        mesh = tet_boundary_mesh()
        system = condense_and_assemble(mesh, mixed_space(kind), rhs=zero_rhs)
        eigs = np.linalg.eigvalsh(system.unbordered.toarray())
        scale = eigs.max()
        assert eigs.min() > -1e-12 * scale
        assert (np.abs(eigs) < 1e-10 * scale).sum() == 1

    def test_zero_source_gives_zero_fields(self):
        mesh = tet_boundary_mesh()
        fields = solve_hybrid(condense_and_assemble(mesh, mixed_space("rt0"), rhs=zero_rhs))
        assert np.abs(fields.u).max() < 1e-13
        assert np.abs(fields.p_local).max() < 1e-13
        assert np.abs(fields.multipliers).max() < 1e-13

    def test_effective_condition_number_reported(self):
        mesh = tet_boundary_mesh()
        system = condense_and_assemble(mesh, mixed_space("rt0"), rhs=zero_rhs)
        cond = effective_condition_number(system.unbordered)
        assert np.isfinite(cond) and cond >= 1.0


@pytest.fixture(scope="module")
def sphere_solves(sphere, problem, sphere_meshes):
    mesh = sphere_meshes[8]
    rhs = build_rhs(problem.f, mesh, sphere)
    out = {}
    for kind in ("rt0", "bdm1"):
        space = mixed_space(kind)
        out[kind] = (
            space,
            solve_hybrid(condense_and_assemble(mesh, space, rhs=rhs)),
            solve_saddle_point(mesh, space, rhs=rhs),
            rhs,
        )
    return mesh, out


class TestSolvers:
    @pytest.mark.parametrize("kind", ["rt0", "bdm1"])
    def test_hybrid_matches_saddle_point(self, kind, sphere_solves):
        mesh, out = sphere_solves
        space, hybrid, saddle, _ = out[kind]
        assert l2_scalar_diff(mesh, hybrid.u, saddle.u) <= 1e-8
        assert l2_vector_diff(mesh, space, hybrid.p_local, saddle.p_local) <= 1e-8

    @pytest.mark.parametrize("kind", ["rt0", "bdm1"])
    def test_mean_zero_scalar(self, kind, sphere_solves):
        _, out = sphere_solves
        _, hybrid, saddle, _ = out[kind]
        assert abs(hybrid.mean_u) < 1e-12
        assert abs(saddle.mean_u) < 1e-12

    @pytest.mark.parametrize("kind", ["rt0", "bdm1"])
    def test_discrete_conservation(self, kind, sphere_solves):
        """Balance equation holds elementwise against the assembled load."""
        mesh, out = sphere_solves
        space, hybrid, saddle, rhs = out[kind]
        blocks = assemble_local_blocks(mesh, space, rhs=rhs)
        for fields in (hybrid, saddle):
            defect = np.einsum("fk,fk->f", blocks.div, fields.p_local) - blocks.load
            assert np.linalg.norm(defect) / np.linalg.norm(blocks.load) < 1e-10

    @pytest.mark.parametrize("kind", ["rt0", "bdm1"])
    def test_saddle_point_flux_equation(self, kind, sphere_solves):
        _, out = sphere_solves
        _, _, saddle, _ = out[kind]
        assert saddle.residual_flux < 1e-10

    @pytest.mark.parametrize("kind", ["rt0", "bdm1"])
    def test_hybrid_residuals_within_conditioning_slack(self, kind, sphere_solves):
        _, out = sphere_solves
        _, hybrid, _, _ = out[kind]
        assert hybrid.residual_balance < 1e-10
        assert hybrid.residual_flux < 1e-8

    @pytest.mark.parametrize("kind", ["rt0", "bdm1"])
    def test_recovered_vector_is_conforming(self, kind, sphere_solves):
        mesh, out = sphere_solves
        space, hybrid, _, _ = out[kind]
        scale = np.abs(hybrid.p_local).max()
        assert conformity_defect(mesh, space, hybrid.p_local) < 1e-9 * scale

    def test_linearity_in_the_source(self, sphere, problem, sphere_meshes):
        mesh = sphere_meshes[8]
        space = mixed_space("rt0")
        rhs = build_rhs(problem.f, mesh, sphere)
        doubled = build_rhs(lambda x: 2.0 * problem.f(x), mesh, sphere)
        base = solve_hybrid(condense_and_assemble(mesh, space, rhs=rhs), check_residuals=False)
        twice = solve_hybrid(condense_and_assemble(mesh, space, rhs=doubled), check_residuals=False)
        assert np.allclose(twice.u, 2.0 * base.u, rtol=1e-12, atol=1e-14)
        assert np.allclose(twice.p_local, 2.0 * base.p_local, rtol=1e-12, atol=1e-14)

    def test_flux_equation_clean_on_generic_box(self, sphere, problem):
        """Away from degenerate cuts both residuals sit at rounding level."""
        mesh = make_sphere_mesh(8, box=((-2.013, 1.987), (-2.007, 1.993), (-2.021, 1.979)))
        rhs = build_rhs(problem.f, mesh, sphere)
        fields = solve_hybrid(condense_and_assemble(mesh, mixed_space("rt0"), rhs=rhs))
        assert fields.residual_flux < 1e-12
        assert fields.residual_balance < 1e-12


class TestNodePlacementStability:
    def test_errors_stable_under_lattice_shift(self, sphere, problem):
        from quasitrace.postprocess_errors import compute_errors, postprocess_neumann

        space = mixed_space("rt0")
        results = []
        for box in (
            ((-2.0, 2.0), (-2.0, 2.0), (-2.0, 2.0)),
            ((-2.013, 1.987), (-2.007, 1.993), (-2.021, 1.979)),
        ):
            mesh = make_sphere_mesh(16, box=box)
            rhs = build_rhs(problem.f, mesh, sphere)
            fields = solve_hybrid(condense_and_assemble(mesh, space, rhs=rhs))
            star = postprocess_neumann(mesh, space, fields, rhs)
            results.append(compute_errors(mesh, sphere, space, problem, fields, u_star=star))
        for name in ("err_p", "err_u", "err_eu", "err_post"):
            ratio = getattr(results[0], name) / getattr(results[1], name)
            assert 1.0 / 1.3 <= ratio <= 1.3
