import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochfv.mesh import (
    MeshError,
    build_uniform_mesh,
    check_mesh_invariants,
    is_nested,
    prolong,
    restrict,
    verify_admissibility,
)


def test_uniform_1d_geometry():
    m = build_uniform_mesh(1, [(0.0, 1.0)], (100,), [True])
    assert m.h == pytest.approx(0.01, rel=1e-14)
    np.testing.assert_allclose(m.cell_volume, 0.01, rtol=1e-14)
    np.testing.assert_allclose(m.face_measure, 1.0)
    assert m.alpha == pytest.approx(0.5, rel=1e-14)
    assert m.n_faces == 100  # periodic wrap face included


def test_uniform_2d_geometry():
    m = build_uniform_mesh(2, [(0.0, 1.0), (0.0, 1.0)], (10, 10), [True, True])
    assert m.h == pytest.approx(math.sqrt(2) / 10, rel=1e-14)
    np.testing.assert_allclose(m.cell_volume, 0.01, rtol=1e-13)
    assert m.alpha == pytest.approx(1 / (2 * math.sqrt(2)), rel=1e-13)
    assert verify_admissibility(m).alpha == pytest.approx(1 / (2 * math.sqrt(2)), rel=1e-13)


@pytest.mark.parametrize("counts", [(1,), (2,)])
def test_too_few_cells_rejected(counts):
    with pytest.raises(MeshError):
        build_uniform_mesh(1, [(0.0, 1.0)], counts, [True])


def test_degenerate_extent_rejected():
    with pytest.raises(MeshError):
        build_uniform_mesh(1, [(1.0, 1.0)], (8,), [True])


def test_zero_measure_cell_fails_admissibility():
    m = build_uniform_mesh(1, [(0.0, 1.0)], (8,), [True])
    vol = m.cell_volume.copy()
    vol[3] = 0.0
    bad = dataclasses.replace(m, cell_volume=vol)
    rep = verify_admissibility(bad)
    assert not rep.ok and 3 in rep.worst_cells


@pytest.mark.parametrize("d,periodic", [(1, True), (1, False), (2, True), (2, False)])
def test_invariants_hold(d, periodic):
    m = build_uniform_mesh(d, [(0.0, 1.0)] * d, (6,) * d, [periodic] * d)
    check_mesh_invariants(m)
    fc = m.face_cells
    assert np.all(fc[:, 0] != fc[:, 1])
    np.testing.assert_allclose(np.linalg.norm(m.face_normal, axis=1), 1.0, atol=1e-15)
    # the orientation signs of a face seen from its two cells are opposite
    for f in range(m.n_faces):
        a, b = fc[f]
        sa = dict(m.adjacency(a))[f]
        sb = dict(m.adjacency(b))[f]
        assert sa == -sb


def test_refinement_halves_h_keeps_alpha():
    m = build_uniform_mesh(2, [(0.0, 1.0), (0.0, 2.0)], (4, 8), [True, False])
    r = m.refine()
    assert r.h == pytest.approx(m.h / 2, rel=1e-14)
    assert r.alpha == pytest.approx(m.alpha, rel=1e-14)
    assert is_nested(m, r)


def test_non_periodic_walls_have_no_boundary_faces():
    m = build_uniform_mesh(1, [(0.0, 1.0)], (5,), [False])
    assert m.n_faces == 4
    assert list(m.outer_ring()) == [0, 4]


def test_cells_in_ball():
    m = build_uniform_mesh(1, [(0.0, 1.0)], (10,), [True])
    inside = m.cells_in_ball([0.5], 0.2)
    np.testing.assert_array_equal(inside, [3, 4, 5, 6])
    assert m.cells_in_ball([0.5], 10.0).size == m.n_cells


@settings(max_examples=30, deadline=None)
@given(
    d=st.integers(1, 2),
    n=st.integers(3, 8),
    seed=st.integers(0, 2**32 - 1),
)
def test_restrict_inverts_prolong_and_conserves(d, n, seed):
    coarse = build_uniform_mesh(d, [(0.0, 1.0)] * d, (n,) * d, [True] * d)
    fine = coarse.refine()
    v = np.random.default_rng(seed).normal(size=(2, coarse.n_cells))
    up = prolong(v, coarse, fine)
    np.testing.assert_array_equal(restrict(up, fine, coarse), v)
    np.testing.assert_allclose(up @ fine.cell_volume, v @ coarse.cell_volume, rtol=1e-13, atol=1e-14)


def test_prolong_rejects_non_nested():
    a = build_uniform_mesh(1, [(0.0, 1.0)], (4,), [True])
    b = build_uniform_mesh(1, [(0.0, 1.0)], (12,), [True])
    with pytest.raises(MeshError):
        prolong(np.zeros(4), a, b)
