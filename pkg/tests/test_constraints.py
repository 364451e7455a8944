import numpy as np
import pytest
import scipy.sparse as sp

from zonalvol.constraints import (
    Zone,
    ZoneFormatError,
    ZoneSet,
    constraint_hessian,
    constraint_jacobian,
    constraint_jacobians,
    constraint_value,
    constraint_values,
    format_zones,
    parse_zones,
    read_zones,
    volume_hessians,
    weighted_constraint_hessian,
    zone_volume_via_boundary,
)
from zonalvol.mesh import TetMesh, make_grid, signed_volumes, tet_signed_volume
from zonalvol.zoning import global_zone, k_ring_zones

UNIT_TET = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


@pytest.fixture(scope="module")
def grid():
    return make_grid(3, 3, 3)


def perturbed(mesh, rng, scale=0.08):
    return mesh.reference_positions() + scale * rng.normal(size=3 * mesh.n_vertices)


class TestZoneSet:
    def test_rest_volume_is_element_sum(self, grid):
        zs = ZoneSet.from_element_sets(grid, [[0, 3, 5], range(10, 30)])
        for z in zs:
            assert z.rest_volume == pytest.approx(grid.rest_volumes[z.elements].sum(), rel=1e-12)

    def test_invalid_zones(self, grid):
        with pytest.raises(ValueError):
            ZoneSet.from_element_sets(grid, [[]])
        with pytest.raises(ValueError):
            ZoneSet.from_element_sets(grid, [[grid.n_tets]])

    def test_membership(self, grid):
        zs = ZoneSet.from_element_sets(grid, [[0, 1], [1, 2]])
        M = zs.membership.toarray()
        assert M.shape == (2, grid.n_tets)
        np.testing.assert_array_equal(M[:, :3], [[1, 1, 0], [0, 1, 1]])


class TestConstraintValue:
    def test_zero_at_reference(self, grid):
        zs = k_ring_zones(grid, 1)
        np.testing.assert_allclose(constraint_values(grid, grid.reference_positions(), zs), 0.0, atol=1e-15)

    def test_uniform_scale(self, grid):
        z = global_zone(grid).zones[0]
        s = 1.3
        assert constraint_value(grid, s * grid.reference_positions(), z) == pytest.approx((s**3 - 1) * grid.total_rest_volume, rel=1e-12)

    def test_flattened_tet(self, two_tet):
        x = two_tet.vertices.copy()
        x[0, 2] = 0.0  # apex of tet 0 dropped into the shared face plane
        z = global_zone(two_tet).zones[0]
        assert constraint_value(two_tet, x, z) == pytest.approx(-two_tet.rest_volumes[0], rel=1e-12)

    def test_overlap_consistency(self, grid, rng):
        x = perturbed(grid, rng)
        b, c = np.arange(0, 17), np.arange(17, grid.n_tets)
        zs = ZoneSet.from_element_sets(grid, [np.arange(grid.n_tets), b, c])
        cA, cB, cC = constraint_values(grid, x, zs)
        assert cA == pytest.approx(cB + cC, abs=1e-12)

    def test_translation_invariance(self, grid, rng):
        zs = k_ring_zones(grid, 2)
        x = perturbed(grid, rng)
        t = np.tile(rng.normal(size=3) * 10, grid.n_vertices)
        np.testing.assert_allclose(constraint_values(grid, x + t, zs), constraint_values(grid, x, zs), atol=1e-10)


class TestConstraintJacobian:
    def test_matches_fd(self, grid, rng):
        zs = k_ring_zones(grid, 1)
        for _ in range(5):
            x = perturbed(grid, rng)
            Jc = constraint_jacobians(grid, x, zs).toarray()
            h = 1e-6
            fd = np.zeros_like(Jc)
            for i in range(len(x)):
                e = np.zeros_like(x)
                e[i] = h
                fd[:, i] = (constraint_values(grid, x + e, zs) - constraint_values(grid, x - e, zs)) / (2 * h)
            np.testing.assert_allclose(Jc, fd, rtol=1e-8, atol=1e-9)

    def test_single_tet_gradients_sum_to_zero(self, rng):
        mesh = TetMesh.from_arrays(UNIT_TET, [[0, 1, 2, 3]])
        z = global_zone(mesh).zones[0]
        g = constraint_jacobian(mesh, UNIT_TET.ravel() + 0.1 * rng.normal(size=12), z).toarray().reshape(4, 3)
        np.testing.assert_allclose(g.sum(axis=0), 0.0, atol=1e-14)

    def test_unit_tet_stencil(self):
        mesh = TetMesh.from_arrays(UNIT_TET, [[0, 1, 2, 3]])
        g = constraint_jacobian(mesh, UNIT_TET.ravel(), global_zone(mesh).zones[0]).toarray().reshape(4, 3)
        np.testing.assert_allclose(g[3], [0, 0, 1 / 6], atol=1e-15)
        v1, v2, v3 = UNIT_TET[1:]
        np.testing.assert_allclose(g[1], np.cross(v2, v3) / 6, atol=1e-15)
        np.testing.assert_allclose(g[2], np.cross(v3, v1) / 6, atol=1e-15)

    def test_disjoint_zones_disjoint_support(self, grid, rng):
        x = perturbed(grid, rng)
        # Two zones of tets with no shared vertex.
        a = [0]
        used = set(grid.tets[0])
        b = [e for e in range(grid.n_tets) if not used & set(grid.tets[e])][:1]
        zs = ZoneSet.from_element_sets(grid, [a, b])
        Jc = constraint_jacobians(grid, x, zs).toarray()
        assert not np.any((Jc[0] != 0) & (Jc[1] != 0))


class TestConstraintHessian:
    def test_matches_fd(self, grid, rng):
        z = k_ring_zones(grid, 1).zones[13]
        x = perturbed(grid, rng)
        H = constraint_hessian(grid, x, z).toarray()
        h = 1e-6
        fd = np.zeros_like(H)
        for i in range(len(x)):
            e = np.zeros_like(x)
            e[i] = h
            fd[:, i] = (constraint_jacobian(grid, x + e, z).toarray().ravel() - constraint_jacobian(grid, x - e, z).toarray().ravel()) / (2 * h)
        np.testing.assert_allclose(H, fd, rtol=1e-7, atol=1e-9)

    def test_block_structure(self, rng):
        x = rng.normal(size=(1, 4, 3)).reshape(-1)
        mesh = TetMesh.from_arrays(UNIT_TET, [[0, 1, 2, 3]])
        H = volume_hessians(mesh, x)[0]
        for i in range(4):
            np.testing.assert_allclose(H[3 * i : 3 * i + 3, 3 * i : 3 * i + 3], 0.0, atol=1e-15)
            for j in range(4):
                if i != j:
                    B = H[3 * i : 3 * i + 3, 3 * j : 3 * j + 3]
                    np.testing.assert_allclose(B + B.T, 0.0, atol=1e-15)
        np.testing.assert_allclose(H, H.T, atol=1e-15)

    def test_linear_in_positions(self):
        mesh = TetMesh.from_arrays(UNIT_TET, [[0, 1, 2, 3]])
        z = global_zone(mesh).zones[0]
        H1 = constraint_hessian(mesh, UNIT_TET.ravel(), z).toarray()
        H2 = constraint_hessian(mesh, 2 * UNIT_TET.ravel(), z).toarray()
        np.testing.assert_allclose(H2, 2 * H1, atol=1e-15)

    def test_weighted_sum(self, grid, rng):
        zs = k_ring_zones(grid, 1)
        x = perturbed(grid, rng)
        w = rng.normal(size=len(zs))
        total = weighted_constraint_hessian(grid, x, zs, w).toarray()
        expected = sum(wj * constraint_hessian(grid, x, z).toarray() for wj, z in zip(w, zs))
        np.testing.assert_allclose(total, expected, atol=1e-12)


class TestBoundaryVolume:
    def test_grid_global(self):
        mesh = make_grid(3, 4, 2, 2.0, 1.0, 0.5)
        assert zone_volume_via_boundary(mesh, mesh.reference_positions(), global_zone(mesh).zones[0]) == pytest.approx(1.0, rel=1e-12)

    def test_agrees_with_element_sum(self, grid, rng):
        zs = k_ring_zones(grid, 1)
        for _ in range(20):
            x = perturbed(grid, rng, 0.1)
            for z in list(zs)[::5]:
                direct = constraint_value(grid, x, z) + z.rest_volume
                assert zone_volume_via_boundary(grid, x, z) == pytest.approx(direct, rel=1e-10)

    def test_single_tet(self, grid, rng):
        x = perturbed(grid, rng)
        z = Zone(np.array([4]), grid.rest_volumes[4])
        assert zone_volume_via_boundary(grid, x, z) == pytest.approx(signed_volumes(grid.tets[4:5], x)[0], rel=1e-12)
        p = x.reshape(-1, 3)[grid.tets[4]]
        assert zone_volume_via_boundary(grid, x, z) == pytest.approx(tet_signed_volume(*p), rel=1e-12)


class TestZoneFile:
    def test_round_trip(self, grid, tmp_path):
        zs = ZoneSet.from_element_sets(grid, [np.arange(grid.n_tets), [1, 2, 3], [3, 9]], ["all", "a", "b"])
        (tmp_path / "z.txt").write_text(format_zones(zs))
        back = read_zones(tmp_path / "z.txt", grid)
        assert back.labels == ["all", "a", "b"]
        for z0, z1 in zip(zs, back):
            np.testing.assert_array_equal(z0.elements, z1.elements)

    def test_global_keyword(self, grid):
        zs = parse_zones("global\n# comment\n\nbody: global\n", grid)
        assert len(zs) == 2
        assert all(len(z.elements) == grid.n_tets for z in zs)

    def test_errors_name_line(self, grid):
        with pytest.raises(ZoneFormatError, match="line 2"):
            parse_zones("a: 1 2\nb: 1 x\n", grid)
        with pytest.raises(ZoneFormatError, match="line 1"):
            parse_zones(f"a: {grid.n_tets}\n", grid)
        with pytest.raises(ZoneFormatError):
            parse_zones("a:\n", grid)


def test_jacobian_sparse_type(grid):
    assert sp.issparse(constraint_jacobians(grid, grid.reference_positions(), global_zone(grid)))
