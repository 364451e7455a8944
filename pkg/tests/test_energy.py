import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zonalvol.energy import (
    EpidermisParams,
    InvertedElementError,
    MaterialParams,
    Model,
    alpha_tilde,
    assemble,
    det_gradient,
    det_hessian,
    energy,
    lame_from_young_poisson,
    penalty_d2u,
    penalty_du,
    penalty_u,
    penalty_un,
    project_psd,
    psi_dev_nh,
    psi_epidermis,
    psi_unh,
    unvec,
    vec,
)
from zonalvol.mesh import make_grid

from test_mesh import random_rotation


def fd_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def near_identity(rng, scale=0.3):
    return np.eye(3) + scale * rng.normal(size=(3, 3)) / 3


class TestLame:
    def test_zero_poisson(self):
        assert lame_from_young_poisson(3.0, 0.0) == (0.0, 1.5)

    def test_unit_shear_convention(self):
        nu = 0.495
        lam, mu = lame_from_young_poisson(2 * (1 + nu), nu)
        assert mu == pytest.approx(1.0)
        assert lam == pytest.approx(99.0, rel=1e-12)

    def test_hand_values(self):
        lam, mu = lame_from_young_poisson(1.0, 0.25)
        assert lam == pytest.approx(0.4, rel=1e-14)
        assert mu == pytest.approx(0.4, rel=1e-14)

    def test_incompressible_limit(self):
        with pytest.raises(ValueError, match="incompressible limit; use constraints"):
            lame_from_young_poisson(1.0, 0.5)

    def test_material_params_validation(self):
        with pytest.raises(ValueError):
            MaterialParams(mu=1, lam=-1)
        with pytest.raises(ValueError):
            MaterialParams(mu=1, lam=1, epsilon=1.5)
        with pytest.raises(ValueError):
            EpidermisParams(lambda_e=-1)
        assert MaterialParams(mu=1, lam=1, model="UNH").model is Model.UNH


class TestDeterminantDerivatives:
    def test_gradient_is_cofactor(self, rng):
        F = rng.normal(size=(3, 3))
        cof = np.linalg.det(F) * np.linalg.inv(F).T
        np.testing.assert_allclose(unvec(det_gradient(F)), cof, atol=1e-12)

    def test_hessian_fd(self, rng):
        F = rng.normal(size=(3, 3))
        fd = np.array([fd_gradient(lambda v: det_gradient(unvec(v))[i], vec(F)) for i in range(9)])
        np.testing.assert_allclose(det_hessian(F), fd, atol=1e-8)


class TestUNH:
    def test_rest(self):
        psi, g, _ = psi_unh(np.eye(3), 5.0, 2.0)
        assert psi == 0.0
        np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_dilation_by_two(self):
        psi, _, _ = psi_unh(2 * np.eye(3), 0.0, 2.0)
        assert psi == pytest.approx(9 - 6 * np.log(2), rel=1e-14)

    def test_inverted_raises(self):
        F = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(InvertedElementError, match="UNH undefined for inverted element"):
            psi_unh(F, 1.0, 1.0)

    def test_gradient_and_hessian_fd(self, rng):
        for _ in range(20):
            F = near_identity(rng)
            psi, g, H = psi_unh(F, 7.0, 1.3)
            fd = fd_gradient(lambda M: psi_unh(M, 7.0, 1.3)[0], F)
            np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)
            fdH = np.array([fd_gradient(lambda v: vec(psi_unh(unvec(v), 7.0, 1.3)[1])[i], vec(F)) for i in range(9)])
            np.testing.assert_allclose(H, fdH, rtol=1e-5, atol=1e-6)


class TestAlphaTilde:
    def test_rest(self):
        assert alpha_tilde(1.0, 0.1)[0] == 1.0

    def test_branch_point(self):
        assert alpha_tilde(0.1, 0.1)[0] == pytest.approx(2.15443469, rel=1e-8)

    @pytest.mark.parametrize("eps", [0.05, 0.1, 0.2])
    def test_c2_at_joint(self, eps):
        h = 1e-7
        below = alpha_tilde(eps - h, eps)
        above = alpha_tilde(eps + h, eps)
        for lo, hi in zip(below, above):
            assert abs(lo - hi) <= 1e-5 * abs(hi)

    def test_finite_everywhere(self):
        a, da, dda = alpha_tilde(np.array([-100.0, -1.0, 0.0, 1e-9, 100.0]))
        assert np.all(np.isfinite(a)) and np.all(np.isfinite(da)) and np.all(np.isfinite(dda))

    def test_derivatives_fd(self):
        for J in (-0.5, 0.02, 0.3, 1.0, 2.5):
            a, da, dda = alpha_tilde(J, 0.1)
            h = 1e-6
            assert da == pytest.approx((alpha_tilde(J + h)[0] - alpha_tilde(J - h)[0]) / (2 * h), rel=1e-7)
            assert dda == pytest.approx((alpha_tilde(J + h)[1] - alpha_tilde(J - h)[1]) / (2 * h), rel=1e-6)


class TestDeviatoricNH:
    def test_rest(self):
        assert psi_dev_nh(np.eye(3), 1.0)[0] == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("s", [0.6, 1.0, 1.7])
    def test_pure_dilation_costs_nothing(self, s):
        assert psi_dev_nh(s * np.eye(3), 3.0)[0] == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_rotation_invariance(self, seed):
        r = np.random.default_rng(seed)
        F = near_identity(r, 0.6)
        R = random_rotation(r)
        assert psi_dev_nh(R @ F, 2.0)[0] == pytest.approx(psi_dev_nh(F, 2.0)[0], rel=1e-10, abs=1e-12)

    def test_gradient_and_hessian_fd(self, rng):
        samples = [near_identity(rng) for _ in range(15)]
        # Samples below epsilon and inverted ones exercise the extension.
        samples += [np.diag([0.3, 0.2, 0.5]) + 0.02 * rng.normal(size=(3, 3)) for _ in range(3)]
        samples += [np.diag([1.0, 1.0, -0.5]) + 0.02 * rng.normal(size=(3, 3)) for _ in range(2)]
        for F in samples:
            _, g, H = psi_dev_nh(F, 1.5)
            np.testing.assert_allclose(g, fd_gradient(lambda M: psi_dev_nh(M, 1.5)[0], F), rtol=1e-6, atol=1e-7)
            fdH = np.array([fd_gradient(lambda v: vec(psi_dev_nh(unvec(v), 1.5)[1])[i], vec(F)) for i in range(9)])
            np.testing.assert_allclose(H, fdH, rtol=1e-5, atol=1e-5)


class TestPenalty:
    @pytest.mark.parametrize("beta", [0.0, 1.0, 6.0, 9.0, 37.5])
    def test_rest_conditions(self, beta):
        assert penalty_u(1.0, beta) == 0.0
        assert penalty_du(1.0, beta) == 0.0
        assert penalty_d2u(1.0, beta) == 1.0

    def test_hand_values(self):
        assert penalty_u(3.0, 0.0) == pytest.approx(2.0, rel=1e-15)
        assert penalty_u(0.0, 6.0) == pytest.approx(1.0, rel=1e-15)
        assert penalty_un(2.0, 30.0, 2)[0] == pytest.approx(1.5, rel=1e-14)
        assert penalty_un(1.0, 5.0, 2)[0] == 0.0

    def test_order_zero_rejected(self):
        with pytest.raises(ValueError):
            penalty_un(1.0, 1.0, 0)

    def test_derivatives_fd(self):
        h = 1e-6
        for beta in (0.0, 1.0, 9.0):
            for J in np.linspace(-2, 3, 11):
                assert penalty_du(J, beta) == pytest.approx((penalty_u(J + h, beta) - penalty_u(J - h, beta)) / (2 * h), rel=1e-7, abs=1e-9)
                assert penalty_d2u(J, beta) == pytest.approx((penalty_du(J + h, beta) - penalty_du(J - h, beta)) / (2 * h), rel=1e-7)
            for n in (1, 2, 3):
                for J in np.linspace(-2, 3, 7):
                    u, du, d2u = penalty_un(J, beta, n)
                    assert du == pytest.approx((penalty_un(J + h, beta, n)[0] - penalty_un(J - h, beta, n)[0]) / (2 * h), rel=1e-6, abs=1e-8)
                    assert d2u == pytest.approx((penalty_un(J + h, beta, n)[1] - penalty_un(J - h, beta, n)[1]) / (2 * h), rel=1e-6, abs=1e-8)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-10, 10), st.floats(0, 50))
    def test_nonnegative_and_convex(self, J, beta):
        assert penalty_u(J, beta) >= 0.0
        assert penalty_d2u(J, beta) >= 1.0

    def test_stress_ordering(self):
        J = np.linspace(0.005, 0.995, 100)
        s0, s1, s6 = (np.abs(penalty_du(J, b)) for b in (0.0, 1.0, 6.0))
        assert np.all(s6 >= s1) and np.all(s1 >= s0)


class TestEpidermis:
    def test_rest(self):
        Ft = np.eye(3)[:, :2]
        assert psi_epidermis(Ft, 1.0, 5.0)[0] == 0.0

    def test_doubled_area(self):
        Ft = np.array([[2.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        assert psi_epidermis(Ft, 1.0, 12.0)[0] == pytest.approx(7.0, rel=1e-14)

    def test_rigid_invariance(self, rng):
        for _ in range(10):
            Ft = np.eye(3)[:, :2] + 0.3 * rng.normal(size=(3, 2))
            R = random_rotation(rng)
            assert psi_epidermis(R @ Ft, 2.0, 3.0)[0] == pytest.approx(psi_epidermis(Ft, 2.0, 3.0)[0], rel=1e-10, abs=1e-12)

    def test_gradient_and_hessian_fd(self, rng):
        for _ in range(20):
            Ft = np.eye(3)[:, :2] + 0.3 * rng.normal(size=(3, 2))
            _, g, H = psi_epidermis(Ft, 1.0, 4.0)
            np.testing.assert_allclose(g, fd_gradient(lambda M: psi_epidermis(M, 1.0, 4.0)[0], Ft), rtol=1e-6, atol=1e-7)
            fdH = np.array([fd_gradient(lambda v: vec(psi_epidermis(unvec(v), 1.0, 4.0)[1])[i], vec(Ft)) for i in range(6)])
            np.testing.assert_allclose(H, fdH, rtol=1e-5, atol=1e-5)


MODELS = [
    (MaterialParams(mu=1.0, lam=20.0, model="UNH"), None),
    (MaterialParams(mu=1.0, lam=20.0, beta=1.0), None),
    (MaterialParams(mu=1.0, lam=20.0, beta=6.0), EpidermisParams(5.0, 1.0)),
]


class TestAssembly:
    @pytest.mark.parametrize("mat, epi", MODELS)
    def test_rest_is_stationary(self, grid3, mat, epi):
        rep, g, _, _ = assemble(grid3, grid3.reference_positions(), mat, epi)
        assert rep.total == pytest.approx(0.0, abs=1e-12)
        assert np.linalg.norm(g) < 1e-12

    @pytest.mark.parametrize("mat, epi", MODELS)
    def test_report_total(self, grid3, rng, mat, epi):
        x = grid3.reference_positions() + 0.05 * rng.normal(size=3 * grid3.n_vertices)
        rep = energy(grid3, x, mat, epi)
        assert rep.total == pytest.approx(rep.deviatoric + rep.penalty + rep.epidermis + rep.inertial, rel=1e-12)

    @pytest.mark.parametrize("mat, epi", MODELS)
    def test_symmetric_and_projection(self, grid3, rng, mat, epi):
        x = grid3.reference_positions() + 0.06 * rng.normal(size=3 * grid3.n_vertices)
        _, _, H, flag = assemble(grid3, x, mat, epi)
        assert flag is False
        Hd = H.toarray()
        assert np.abs(Hd - Hd.T).max() <= 1e-10 * np.abs(Hd).max()
        _, _, Hp, flag = assemble(grid3, x, mat, epi, psd_project=True)
        assert flag is True
        w = np.linalg.eigvalsh(Hp.toarray())
        assert w.min() >= -1e-8 * w.max()

    def test_project_psd_modes(self, rng):
        A = rng.normal(size=(5, 6, 6))
        A = A + np.swapaxes(A, 1, 2)
        for mode in ("clamp", "abs"):
            w = np.linalg.eigvalsh(project_psd(A, mode))
            assert w.min() >= -1e-12 * np.abs(w).max()
        w0 = np.linalg.eigvalsh(A)
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(project_psd(A, "abs")), axis=1), np.sort(np.abs(w0), axis=1), atol=1e-10)
        with pytest.raises(ValueError):
            project_psd(A, "flip")

    def test_unh_inversion_propagates(self, two_tet):
        x = two_tet.reference_positions().reshape(-1, 3).copy()
        x[4, 2] = -2.0
        with pytest.raises(InvertedElementError):
            assemble(two_tet, x.ravel(), MaterialParams(mu=1, lam=1, model="UNH"))
        # The deviatoric model stays finite on the same inverted state.
        rep, g, _, _ = assemble(two_tet, x.ravel(), MaterialParams(mu=1, lam=1))
        assert np.isfinite(rep.total) and np.all(np.isfinite(g))

    def test_gradient_and_hessian_fd_small_mesh(self, rng):
        mesh = make_grid(2, 2, 3)
        mat, epi = MaterialParams(mu=1.0, lam=10.0, beta=1.0), EpidermisParams(3.0, 1.0)
        x = mesh.reference_positions() + 0.08 * rng.normal(size=3 * mesh.n_vertices)
        _, g, H, _ = assemble(mesh, x, mat, epi)
        fd = fd_gradient(lambda y: energy(mesh, y, mat, epi).total, x)
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-7)
        cols = np.array([fd_gradient(lambda y: assemble(mesh, y, mat, epi)[1][i], x) for i in range(len(x))])
        np.testing.assert_allclose(H.toarray(), cols, rtol=1e-5, atol=1e-5)
