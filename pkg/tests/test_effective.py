import csv
import math

import numpy as np
import pytest
import scipy.sparse as sparse

from lodhom.coefficients import constant, exp1_twofreq
from lodhom.correctors import compute_all_correctors
from lodhom.effective import (
    LocalTensorField,
    assemble_kernel,
    assemble_local_system,
    assemble_quasilocal_system,
    eta_estimator,
    export_kernel_csv,
    export_tensor_csv,
    local_coefficient,
    quasilocal_system_from_kernel,
    spectral_bounds,
    _face_jumps,
)
from lodhom.fem import (
    CoefficientField,
    FeSpace,
    assemble_stiffness,
    mass_matrix,
    prolongation_vertexwise,
    stiffness_matrix,
)
from lodhom.geometry import build_uniform_mesh, element_patch, refine_uniform


@pytest.fixture(scope="module")
def kernel_setup(small_dirichlet, ideal_correctors):
    cs, fs, coeff = small_dirichlet
    kernel = assemble_kernel(ideal_correctors, coeff)
    return cs, fs, coeff, ideal_correctors, kernel


class TestKernel:
    def test_fine_equals_coarse_reduces_to_means(self):
        m = build_uniform_mesh(4)
        sp = FeSpace(m, "dirichlet")
        coeff = CoefficientField(m, np.linspace(1, 2, m.n_elements))
        cset = compute_all_correctors(1, sp, sp, coeff)
        kernel = assemble_kernel(cset, coeff)
        assert len(kernel.blocks) == 0
        field = local_coefficient(kernel)
        assert np.allclose(field.values, kernel.diagonal_means, atol=1e-15)
        assert np.allclose(field.values, coeff.values, atol=1e-15)

    def test_block_sparsity_against_patch_census(self):
        coarse = build_uniform_mesh(8)
        fine = refine_uniform(coarse, 2)
        cs, fs = FeSpace(coarse, "dirichlet"), FeSpace(fine, "dirichlet")
        coeff = exp1_twofreq(fine)
        ell = 2
        cset = compute_all_correctors(ell, cs, fs, coeff)
        kernel = assemble_kernel(cset, coeff)
        census = sum(element_patch(coarse, T, ell).elements.size
                     for T in range(coarse.n_elements))
        assert len(kernel.blocks) <= census
        assert len(kernel.blocks) >= coarse.n_elements  # diagonal present
        assert len(kernel.blocks) <= coarse.n_elements * 8 * (ell + 1) ** 2
        for (T, K) in kernel.blocks:
            patch = set(element_patch(coarse, T, ell).elements.tolist())
            assert K in patch

    def test_ideal_kernel_blocks_match_energy_oracle(self, kernel_setup):
        # at ell=infinity each block entry equals a corrector energy product
        cs, fs, coeff, cset, kernel = kernel_setup
        S = stiffness_matrix(fs.mesh, coeff)
        areas = cs.mesh.areas
        rng = np.random.default_rng(2)
        keys = list(kernel.blocks)
        sample = [keys[i] for i in rng.choice(len(keys), size=12, replace=False)]
        scale = max(np.abs(b).max() for b in kernel.blocks.values())
        for (T, K) in sample:
            for j in range(2):
                for k in range(2):
                    qK = fs.E @ cset.vector(K, j)
                    qT = fs.E @ cset.vector(T, k)
                    oracle = (qK @ (S @ qT)) / (areas[T] * areas[K])
                    assert abs(kernel.blocks[(T, K)][j, k] - oracle) <= 1e-9 * scale

    def test_ideal_kernel_symmetry(self, kernel_setup):
        cs, fs, coeff, cset, kernel = kernel_setup
        scale = max(np.abs(b).max() for b in kernel.blocks.values())
        for (T, K), b in kernel.blocks.items():
            bt = kernel.blocks.get((K, T))
            assert bt is not None
            assert np.abs(b - bt.T).max() <= 1e-9 * scale

    def test_fingerprint_guard(self, kernel_setup):
        cs, fs, coeff, cset, _ = kernel_setup
        with pytest.raises(ValueError):
            assemble_kernel(cset, constant(fs.mesh, 1.0))


class TestQuasilocalSystem:
    def test_two_route_agreement(self):
        coarse = build_uniform_mesh(4)
        fine = refine_uniform(coarse, 2)
        cs, fs = FeSpace(coarse, "dirichlet"), FeSpace(fine, "dirichlet")
        coeff = exp1_twofreq(fine)
        cset = compute_all_correctors(1, cs, fs, coeff)
        G1 = assemble_quasilocal_system(cset, coeff, cs, fs).toarray()
        G2 = quasilocal_system_from_kernel(assemble_kernel(cset, coeff), cs).toarray()
        assert np.abs(G1 - G2).max() <= 1e-11 * np.abs(G1).max()

    def test_two_route_solve_agreement(self, kernel_setup):
        cs, fs, coeff, cset, kernel = kernel_setup
        G1 = assemble_quasilocal_system(cset, coeff, cs, fs)
        G2 = quasilocal_system_from_kernel(kernel, cs)
        Pc = (prolongation_vertexwise(cs.mesh, fs.mesh) @ cs.E).tocsr()
        rhs = Pc.T @ (mass_matrix(fs.mesh) @ np.ones(fs.mesh.n_vertices))
        import scipy.sparse.linalg as spla
        u1 = spla.spsolve(sparse.csc_matrix(G1.T), rhs)
        u2 = spla.spsolve(sparse.csc_matrix(G2.T), rhs)
        assert np.abs(u1 - u2).max() <= 1e-9 * np.abs(u1).max()

    def test_zero_correctors_give_mean_stiffness(self):
        m = build_uniform_mesh(4)
        sp = FeSpace(m, "dirichlet")
        coeff = CoefficientField(m, np.linspace(1, 2, m.n_elements))
        cset = compute_all_correctors(1, sp, sp, coeff)
        G = assemble_quasilocal_system(cset, coeff, sp, sp).toarray()
        S = assemble_stiffness(sp, coeff).toarray()
        assert np.abs(G - S).max() <= 1e-12 * np.abs(S).max()


class TestLocalCoefficient:
    def test_row_sum_identity(self, kernel_setup):
        cs, fs, coeff, cset, kernel = kernel_setup
        field = local_coefficient(kernel)
        recon = field.values.copy()
        for (T, K), b in kernel.blocks.items():
            recon[T] += cs.mesh.areas[K] * b
        assert np.abs(recon - kernel.diagonal_means).max() <= 1e-13

    def test_remark_route_agreement(self, kernel_setup):
        cs, fs, coeff, cset, kernel = kernel_setup
        local_coefficient(kernel, correctors=cset, coeff=coeff, check_tol=1e-10)

    def test_constant_coefficient_mean_recovers_it(self):
        coarse = build_uniform_mesh(2)
        fine = refine_uniform(coarse, 2)
        cs, fs = FeSpace(coarse, "dirichlet"), FeSpace(fine, "dirichlet")
        coeff = constant(fine, 1.0)
        cset = compute_all_correctors(math.inf, cs, fs, coeff)
        field = local_coefficient(assemble_kernel(cset, coeff))
        mean = np.einsum("t,tde->de", coarse.areas, field.values) / coarse.areas.sum()
        assert np.abs(mean - np.eye(2)).max() <= 1e-9

    def test_kernel_row_l2_bound_recorded(self):
        constants = []
        for n in (4, 8, 16):
            coarse = build_uniform_mesh(n)
            fine = refine_uniform(coarse, 2)
            cs, fs = FeSpace(coarse, "dirichlet"), FeSpace(fine, "dirichlet")
            coeff = exp1_twofreq(fine)
            cset = compute_all_correctors(2, cs, fs, coeff)
            kernel = assemble_kernel(cset, coeff)
            areas = coarse.areas
            worst = 0.0
            for T in range(coarse.n_elements):
                row = sum(areas[K] * float((b * b).sum())
                          for (TT, K), b in kernel.blocks.items() if TT == T)
                worst = max(worst, row)
            H = coarse.mesh_size_H
            constants.append(worst * H ** 2)  # row bound scaled by H^d
        print("kernel row L2 constants (n=4,8,16):", constants)
        assert max(constants) / min(constants) <= 4.0


class TestSpectralAndEta:
    def test_scalar_bounds(self):
        m = build_uniform_mesh(1)
        field = LocalTensorField(mesh=m, values=np.array(
            [[[0.2, 0.0], [0.0, 0.2]], [[0.5, 0.0], [0.0, 0.5]]]),
            alpha_H=0.0, beta_H=0.0, face_jumps=np.zeros(1))
        assert spectral_bounds(field) == (pytest.approx(0.2), pytest.approx(0.5))

    def test_rotation_invariance(self, rng):
        m = build_uniform_mesh(2)
        vals = rng.standard_normal((m.n_elements, 2, 2))
        vals = vals + vals.transpose(0, 2, 1) + 4.0 * np.eye(2)
        field = LocalTensorField(mesh=m, values=vals, alpha_H=0.0, beta_H=0.0,
                                 face_jumps=np.zeros(0))
        a0, b0 = spectral_bounds(field)
        th = 0.37
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        rot = LocalTensorField(mesh=m, values=np.einsum("ab,tbc,dc->tad", R, vals, R),
                               alpha_H=0.0, beta_H=0.0, face_jumps=np.zeros(0))
        a1, b1 = spectral_bounds(rot)
        assert abs(a0 - a1) <= 1e-12 and abs(b0 - b1) <= 1e-12

    def test_constant_field_eta_zero(self):
        m = build_uniform_mesh(4)
        vals = np.tile(np.eye(2), (m.n_elements, 1, 1))
        field = LocalTensorField(mesh=m, values=vals, alpha_H=1.0, beta_H=1.0,
                                 face_jumps=_face_jumps(m, vals))
        rep = eta_estimator(field, m)
        assert rep.eta == 0.0

    def test_two_element_closed_form(self):
        m = build_uniform_mesh(1)
        a, J = 0.7, 0.4
        vals = np.array([[[a, 0.0], [0.0, a]], [[a + J, 0.0], [0.0, a + J]]])
        field = LocalTensorField(mesh=m, values=vals, alpha_H=a, beta_H=a + J,
                                 face_jumps=_face_jumps(m, vals))
        rep = eta_estimator(field, m)
        H = m.mesh_size_H
        assert rep.eta == pytest.approx(J / H * (1.0 + J / a), rel=1e-14)

    def test_nonpositive_alpha_reported_not_raised(self):
        m = build_uniform_mesh(1)
        vals = np.array([[[1.0, 0.0], [0.0, 1.0]], [[-1.0, 0.0], [0.0, -1.0]]])
        field = LocalTensorField(mesh=m, values=vals, alpha_H=-1.0, beta_H=1.0,
                                 face_jumps=_face_jumps(m, vals))
        rep = eta_estimator(field, m)
        assert rep.eta is None
        assert rep.alpha_H == -1.0


class TestLocalSystem:
    def test_identity_field_is_laplacian(self):
        m = build_uniform_mesh(4)
        sp = FeSpace(m, "dirichlet")
        vals = np.tile(np.eye(2), (m.n_elements, 1, 1))
        field = LocalTensorField(mesh=m, values=vals, alpha_H=1.0, beta_H=1.0,
                                 face_jumps=np.zeros(0))
        G = assemble_local_system(field, sp)
        S = assemble_stiffness(sp, constant(m, 1.0))
        assert np.abs((G - S).toarray()).max() <= 1e-14

    def test_matches_stiffness_assembly_entrywise(self, rng):
        m = build_uniform_mesh(3)
        sp = FeSpace(m, "dirichlet")
        scal = rng.uniform(0.5, 2.0, m.n_elements)
        vals = scal[:, None, None] * np.eye(2)
        field = LocalTensorField(mesh=m, values=vals, alpha_H=scal.min(),
                                 beta_H=scal.max(), face_jumps=np.zeros(0))
        G = assemble_local_system(field, sp)
        S = assemble_stiffness(sp, CoefficientField(m, scal))
        assert np.abs((G - S).toarray()).max() <= 1e-14

    def test_row_sums_zero_before_elimination(self):
        from lodhom.fem import stiffness_from_values
        m = build_uniform_mesh(3)
        vals = np.tile(np.array([[1.5, 0.2], [0.2, 0.9]]), (m.n_elements, 1, 1))
        S = stiffness_from_values(m, vals)
        assert np.abs(S @ np.ones(m.n_vertices)).max() <= 1e-13

    def test_nonpositive_field_warns(self):
        m = build_uniform_mesh(2)
        sp = FeSpace(m, "dirichlet")
        vals = np.tile(-np.eye(2), (m.n_elements, 1, 1))
        field = LocalTensorField(mesh=m, values=vals, alpha_H=-1.0, beta_H=-1.0,
                                 face_jumps=np.zeros(0))
        with pytest.warns(RuntimeWarning):
            assemble_local_system(field, sp)


class TestExports:
    def test_tensor_csv(self, kernel_setup, tmp_path):
        cs, fs, coeff, cset, kernel = kernel_setup
        field = local_coefficient(kernel)
        path = tmp_path / "field.csv"
        export_tensor_csv(field, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["element", "x", "y", "A11", "A12", "A21", "A22"]
        assert len(rows) == 1 + cs.mesh.n_elements
        assert float(rows[1][3]) == pytest.approx(field.values[0, 0, 0])

    def test_kernel_csv(self, kernel_setup, tmp_path):
        cs, fs, coeff, cset, kernel = kernel_setup
        path = tmp_path / "kernel.csv"
        export_kernel_csv(kernel, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["T", "K", "K11", "K12", "K21", "K22"]
        assert len(rows) == 1 + len(kernel.blocks)


@pytest.mark.slow
def test_finest_row_full_scale_regression():
    # finest sweep row at the full reference resolution (n=64 coarse, fine
    # n=512); ~6 minutes, hence opt-in
    from lodhom.correctors import compute_all_correctors as _cac
    cm = build_uniform_mesh(64)
    fm = refine_uniform(cm, 3)
    cs, fs = FeSpace(cm, "dirichlet"), FeSpace(fm, "dirichlet")
    coeff = exp1_twofreq(fm)
    cset = _cac(2, cs, fs, coeff, threads=4)
    field = local_coefficient(assemble_kernel(cset, coeff))
    rep = eta_estimator(field, cm)
    print(f"full-scale row: eta={rep.eta:.4e} alpha={rep.alpha_H:.4e} "
          f"beta={rep.beta_H:.4e}")
    assert abs(rep.alpha_H - 1.4070e-01) / 1.4070e-01 <= 0.02
    assert abs(rep.beta_H - 3.0277e-01) / 3.0277e-01 <= 0.02
    assert 0.5 <= rep.eta / 1.5538e+01 <= 2.0
