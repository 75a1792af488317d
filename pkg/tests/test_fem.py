import numpy as np
import pytest
import scipy.sparse as sparse

from lodhom.fem import (
    CoefficientField,
    FeSpace,
    SolverError,
    assemble_mass,
    assemble_stiffness,
    corrector_load_vertexwise,
    fine_elements_by_parent,
    mass_matrix,
    prolongation,
    prolongation_vertexwise,
    quasi_interpolation_matrix,
    solve_saddle,
    solve_spd,
    stiffness_matrix,
)
from lodhom.geometry import TriMesh, build_uniform_mesh, refine_uniform

REF_TRIANGLE = TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                       np.array([[0, 1, 2]]))


def poisson_peak_series(terms=400):
    """Series solution peak of -lap(u)=1 on the unit square (oracle)."""
    total = 0.0
    for m in range(1, terms, 2):
        for n in range(1, terms, 2):
            total += (np.sin(m * np.pi / 2) * np.sin(n * np.pi / 2)
                      / (m * n * (m * m + n * n)))
    return 16.0 / np.pi ** 4 * total


class TestCoefficientField:
    def test_scalar_promotion_and_bounds(self):
        m = build_uniform_mesh(2)
        c = CoefficientField(m, np.linspace(0.2, 0.5, m.n_elements))
        assert c.values.shape == (8, 2, 2)
        assert c.alpha == pytest.approx(0.2)
        assert c.beta == pytest.approx(0.5)

    def test_tensor_bounds(self):
        m = build_uniform_mesh(1)
        vals = np.array([[[2.0, 1.0], [1.0, 2.0]], [[3.0, 0.0], [0.0, 3.0]]])
        c = CoefficientField(m, vals)
        assert (c.alpha, c.beta) == (pytest.approx(1.0), pytest.approx(3.0))

    def test_asymmetric_rejected(self):
        m = build_uniform_mesh(1)
        vals = np.tile(np.array([[1.0, 0.5], [0.0, 1.0]]), (2, 1, 1))
        with pytest.raises(ValueError):
            CoefficientField(m, vals)

    def test_nonelliptic_rejected(self):
        m = build_uniform_mesh(1)
        with pytest.raises(ValueError):
            CoefficientField(m, np.array([1.0, -0.5]))

    def test_fingerprint_tracks_values(self):
        m = build_uniform_mesh(2)
        a = CoefficientField(m, np.full(8, 2.0))
        b = CoefficientField(m, np.full(8, 2.0))
        c = CoefficientField(m, np.full(8, 3.0))
        assert a.fingerprint == b.fingerprint != c.fingerprint


class TestStiffnessMass:
    def test_reference_triangle_identity_coefficient(self):
        S = stiffness_matrix(REF_TRIANGLE, CoefficientField(REF_TRIANGLE, [1.0]))
        expected = 0.5 * np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
        assert np.allclose(S.toarray(), expected, atol=1e-15)

    def test_linearity_in_coefficient(self):
        m = build_uniform_mesh(3)
        S1 = stiffness_matrix(m, CoefficientField(m, np.ones(m.n_elements)))
        S2 = stiffness_matrix(m, CoefficientField(m, 2.0 * np.ones(m.n_elements)))
        assert np.allclose(S2.toarray(), 2.0 * S1.toarray(), rtol=0, atol=1e-15)

    def test_row_sums_zero_unconstrained(self):
        m = build_uniform_mesh(4)
        S = stiffness_matrix(m, CoefficientField(m, np.linspace(1, 3, m.n_elements)))
        assert np.abs(S @ np.ones(m.n_vertices)).max() <= 1e-13

    def test_symmetry(self):
        m = refine_uniform(build_uniform_mesh(4), 1)
        rng = np.random.default_rng(3)
        S = stiffness_matrix(m, CoefficientField(m, rng.uniform(0.5, 5.0, m.n_elements)))
        dev = np.abs((S - S.T).toarray()).max()
        assert dev <= 1e-13 * np.abs(S.toarray()).max()

    def test_local_mass(self):
        M = mass_matrix(REF_TRIANGLE).toarray()
        assert np.allclose(M, 0.5 / 12.0 * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]))

    def test_mass_total_and_constant_norm(self):
        m = build_uniform_mesh(5)
        M = mass_matrix(m)
        assert M.sum() == pytest.approx(1.0, abs=1e-13)
        ones = np.ones(m.n_vertices)
        assert ones @ (M @ ones) == pytest.approx(1.0, abs=1e-13)

    def test_space_level_spd(self):
        m = build_uniform_mesh(4)
        sp = FeSpace(m, "dirichlet")
        S = assemble_stiffness(sp, CoefficientField(m, np.ones(m.n_elements)))
        assert S.shape == (9, 9)
        evals = np.linalg.eigvalsh(S.toarray())
        assert evals.min() > 0

    def test_mass_space_level(self):
        m = build_uniform_mesh(4)
        sp = FeSpace(m, "dirichlet")
        M = assemble_mass(sp)
        assert M.shape == (sp.ndof, sp.ndof)
        assert np.all(np.linalg.eigvalsh(M.toarray()) > 0)


class TestCorrectorLoad:
    def test_partition_of_unity_annihilates(self):
        coarse = build_uniform_mesh(3)
        fine = refine_uniform(coarse, 2)
        coeff = CoefficientField(fine, np.ones(fine.n_elements))
        groups = fine_elements_by_parent(fine, coarse.n_elements)
        for T in (0, 7, 11):
            for j in (0, 1):
                load = corrector_load_vertexwise(fine, coeff, groups[T], j)
                assert abs(load.sum()) <= 1e-13

    def test_support_confined(self):
        coarse = build_uniform_mesh(3)
        fine = refine_uniform(coarse, 2)
        coeff = CoefficientField(fine, np.linspace(1, 2, fine.n_elements))
        groups = fine_elements_by_parent(fine, coarse.n_elements)
        T = 5
        load = corrector_load_vertexwise(fine, coeff, groups[T], 0)
        allowed = np.unique(fine.elements[groups[T]].ravel())
        outside = np.setdiff1d(np.arange(fine.n_vertices), allowed)
        assert np.all(load[outside] == 0.0)

    def test_fine_equals_coarse_column_identity(self):
        # on the 2-element mesh the load equals S restricted to T applied to
        # the hat expansion of the coordinate function x_j
        m = build_uniform_mesh(1)
        coeff = CoefficientField(m, np.array([1.3, 0.7]))
        S_T = stiffness_matrix(
            TriMesh(m.vertices, m.elements[:1]),
            CoefficientField(TriMesh(m.vertices, m.elements[:1]), coeff.values[:1]))
        for j in (0, 1):
            load = corrector_load_vertexwise(m, coeff, [0], j)
            expected = S_T @ m.vertices[:, j]
            assert np.allclose(load, expected, atol=1e-14)


class TestQuasiInterpolation:
    def test_projection_property(self):
        coarse = build_uniform_mesh(4)
        fine = refine_uniform(coarse, 2)
        cs, fs = FeSpace(coarse, "dirichlet"), FeSpace(fine, "dirichlet")
        IH = quasi_interpolation_matrix(cs, fs)
        P = prolongation(cs, fs)
        assert np.abs((IH @ P - sparse.identity(cs.ndof)).toarray()).max() <= 1e-13

    def test_fine_equals_coarse_identity(self):
        m = build_uniform_mesh(4)
        sp = FeSpace(m, "dirichlet")
        IH = quasi_interpolation_matrix(sp, sp)
        assert np.abs((IH - sparse.identity(sp.ndof)).toarray()).max() <= 1e-13

    def test_l2_stability_constant_mesh_independent(self):
        rng = np.random.default_rng(11)
        constants = []
        for n in (4, 8, 16):
            coarse = build_uniform_mesh(n)
            fine = refine_uniform(coarse, 2)
            cs, fs = FeSpace(coarse, "dirichlet"), FeSpace(fine, "dirichlet")
            IH = quasi_interpolation_matrix(cs, fs)
            Mc = assemble_mass(cs)
            Mf = assemble_mass(fs)
            worst = 0.0
            for _ in range(100):
                v = rng.standard_normal(fs.ndof)
                num = np.sqrt((IH @ v) @ (Mc @ (IH @ v)))
                den = np.sqrt(v @ (Mf @ v))
                worst = max(worst, num / den)
            constants.append(worst)
        print("I_H L2 stability constants (n=4,8,16):", constants)
        assert max(constants) <= 4.0
        assert max(constants) / min(constants) <= 1.5

    def test_surjectivity_full_row_rank(self):
        coarse = build_uniform_mesh(8)
        fine = refine_uniform(coarse, 1)
        cs, fs = FeSpace(coarse, "dirichlet"), FeSpace(fine, "dirichlet")
        IH = quasi_interpolation_matrix(cs, fs).toarray()
        assert np.linalg.matrix_rank(IH) == cs.ndof


class TestProlongation:
    def test_constant_gradient_reproduced(self):
        coarse = build_uniform_mesh(3)
        fine = refine_uniform(coarse, 3)
        P = prolongation_vertexwise(coarse, fine)
        lin = 0.7 * coarse.vertices[:, 0] - 0.3 * coarse.vertices[:, 1]
        lin_fine = 0.7 * fine.vertices[:, 0] - 0.3 * fine.vertices[:, 1]
        assert np.allclose(P @ lin, lin_fine, atol=1e-14)

    def test_hat_midpoint_values(self):
        coarse = build_uniform_mesh(2)
        fine = refine_uniform(coarse, 1)
        P = prolongation_vertexwise(coarse, fine)
        hat = np.zeros(coarse.n_vertices)
        hat[4] = 1.0  # center vertex
        vals = P @ hat
        mids = np.flatnonzero(np.abs(vals - 0.5) < 1e-14)
        assert mids.size == 6  # edge midpoints of the 6 incident edges

    def test_mass_galerkin_identity(self):
        coarse = build_uniform_mesh(3)
        fine = refine_uniform(coarse, 2)
        cs, fs = FeSpace(coarse, "dirichlet"), FeSpace(fine, "dirichlet")
        P = prolongation(cs, fs)
        Mc = assemble_mass(cs).toarray()
        Mf = assemble_mass(fs)
        assert np.abs((P.T @ Mf @ P).toarray() - Mc).max() <= 1e-12

    def test_stiffness_galerkin_identity_coarse_constant(self):
        coarse = build_uniform_mesh(3)
        fine = refine_uniform(coarse, 2)
        cs, fs = FeSpace(coarse, "dirichlet"), FeSpace(fine, "dirichlet")
        rng = np.random.default_rng(5)
        coarse_vals = rng.uniform(1.0, 4.0, coarse.n_elements)
        fine_vals = coarse_vals[fine.parent_of]
        Sc = assemble_stiffness(cs, CoefficientField(coarse, coarse_vals)).toarray()
        Sf = assemble_stiffness(fs, CoefficientField(fine, fine_vals))
        P = prolongation(cs, fs)
        assert np.abs((P.T @ Sf @ P).toarray() - Sc).max() <= 1e-12


class TestSolvers:
    def test_identity_returns_rhs(self):
        op = sparse.identity(10, format="csr")
        rhs = np.arange(10.0)
        assert np.allclose(solve_spd(op, rhs), rhs, atol=1e-14)

    def test_poisson_peak_against_series_oracle(self):
        m = build_uniform_mesh(8)
        sp = FeSpace(m, "dirichlet")
        S = assemble_stiffness(sp, CoefficientField(m, np.ones(m.n_elements)))
        rhs = sp.E.T @ (mass_matrix(m) @ np.ones(m.n_vertices))
        u = solve_spd(S, rhs)
        assert u.max() == pytest.approx(poisson_peak_series(), abs=3e-3)

    def test_residual_contract(self):
        m = build_uniform_mesh(6)
        sp = FeSpace(m, "dirichlet")
        S = assemble_stiffness(sp, CoefficientField(m, np.ones(m.n_elements)))
        rhs = np.ones(sp.ndof)
        u = solve_spd(S, rhs, tol=1e-10)
        assert np.linalg.norm(S @ u - rhs) / np.linalg.norm(rhs) <= 1e-10

    def test_tol_validated(self):
        with pytest.raises(ValueError):
            solve_spd(sparse.identity(3, format="csr"), np.ones(3), tol=1e-3)

    def test_saddle_empty_constraints_is_spd_solve(self):
        m = build_uniform_mesh(4)
        sp = FeSpace(m, "dirichlet")
        S = assemble_stiffness(sp, CoefficientField(m, np.ones(m.n_elements)))
        rhs = np.linspace(-1, 1, sp.ndof)
        C = sparse.csr_matrix((0, sp.ndof))
        assert np.allclose(solve_saddle(S, C, rhs), solve_spd(S, rhs), atol=1e-12)

    def test_saddle_identity_constraints_force_zero(self):
        S = sparse.identity(6, format="csr") * 2.0
        C = sparse.identity(6, format="csr")
        q = solve_saddle(S, C, np.ones(6))
        assert np.abs(q).max() <= 1e-12

    def test_saddle_matches_nullspace_oracle(self):
        rng = np.random.default_rng(17)
        for trial in range(5):
            n = 12
            A = rng.standard_normal((n, n))
            op = sparse.csr_matrix(A @ A.T + n * np.eye(n))
            c = rng.standard_normal((1, n))
            rhs = rng.standard_normal(n)
            q = solve_saddle(op, sparse.csr_matrix(c), rhs)
            # dense null-space elimination oracle
            _, _, Vt = np.linalg.svd(c)
            Z = Vt[1:].T
            y = np.linalg.solve(Z.T @ op.toarray() @ Z, Z.T @ rhs)
            assert np.allclose(q, Z @ y, atol=1e-9)

    def test_saddle_prunes_redundant_rows(self):
        S = sparse.identity(5, format="csr")
        row = np.ones((1, 5))
        C = sparse.csr_matrix(np.vstack([row, 2.0 * row, np.zeros((1, 5))]))
        q = solve_saddle(S, C, np.arange(5.0))
        assert abs(q.sum()) <= 1e-10


class TestErrorPaths:
    def test_coefficient_mesh_mismatch(self):
        a = build_uniform_mesh(2)
        b = build_uniform_mesh(3)
        coeff = CoefficientField(b, np.ones(b.n_elements))
        with pytest.raises(ValueError):
            stiffness_matrix(a, coeff)

    def test_non_nested_meshes_rejected(self):
        from lodhom.geometry import MeshStructureError
        a = build_uniform_mesh(2)
        b = build_uniform_mesh(4)  # same geometry family but no lineage
        sa, sb = FeSpace(a, "dirichlet"), FeSpace(b, "dirichlet")
        with pytest.raises(MeshStructureError):
            quasi_interpolation_matrix(sa, sb)
        with pytest.raises(MeshStructureError):
            prolongation(sa, sb)

    def test_solve_spd_singular_diagnostic(self):
        op = sparse.csr_matrix(np.zeros((4, 4)))
        with pytest.raises(SolverError):
            solve_spd(op, np.ones(4))

    def test_saddle_singular_on_kernel_structural_error(self):
        from lodhom.geometry import MeshStructureError
        op = sparse.csr_matrix(np.zeros((4, 4)))
        C = sparse.csr_matrix(np.ones((1, 4)))
        with pytest.raises((MeshStructureError, SolverError)):
            solve_saddle(op, C, np.ones(4))
