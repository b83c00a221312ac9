import numpy as np
import pytest

from dualflow import fem, hier, homogenize as hz


def test_hierarchy_example_sets():
    h = hier.build_hierarchy(0.0, 1.0, 3)
    np.testing.assert_array_equal(h.levels_1d[0], [0, 4, 8])
    np.testing.assert_array_equal(h.levels_1d[1], [2, 6])
    np.testing.assert_array_equal(h.levels_1d[2], [1, 3, 5, 7])
    np.testing.assert_allclose(h.coord(h.levels_1d[1]), [0.25, 0.75])
    np.testing.assert_array_equal(h.macrogrid(1), np.arange(9))
    assert h.level_sizes(1) == [3, 2, 4]
    assert h.level_sizes(2) == [9, 4, 16]


def test_hierarchy_validation():
    with pytest.raises(ValueError):
        hier.build_hierarchy(1.0, 1.0, 3)
    with pytest.raises(ValueError):
        hier.build_hierarchy(0.0, 1.0, 0)


@pytest.mark.parametrize("L", [1, 2, 3, 4, 5, 6])
def test_hierarchy_partition_and_ancestor_distance(L):
    h = hier.build_hierarchy(0.0, 1.0, L)
    all_pts = np.concatenate(h.levels_1d)
    assert np.array_equal(np.sort(all_pts), np.arange(2**L + 1))
    assert all_pts.size == len(set(all_pts.tolist()))  # levels are disjoint
    # a level-l point sits exactly (b-a)/2^l from its ancestor
    for l in range(2, L + 1):
        for r in h.levels_1d[l - 1]:
            anc = h.ancestor_1d[int(r)]
            assert abs(int(r) - anc) == 2 ** (L - l)
    # 2D: ancestor within sqrt(2) * 2^-l, componentwise a lower-level point
    for l in range(2, L + 1):
        for x, y in h.levels_2d[l - 1]:
            ax, ay = h.ancestor_2d[(int(x), int(y))]
            d = np.hypot(int(x) - ax, int(y) - ay)
            assert d <= np.sqrt(2.0) * 2 ** (L - l) + 1e-12


def test_ancestor_ties_go_to_smaller_coordinates():
    h = hier.build_hierarchy(0.0, 1.0, 3)
    # numerator 2 (= 1/4) is equidistant from 0 and 4; pick 0
    assert h.ancestor_1d[2] == 0
    assert h.ancestor_2d[(2, 2)] == (0, 0)
    assert h.ancestor_2d[(2, 6)] == (0, 8) or h.ancestor_2d[(2, 6)] == (0, 4)


def test_chain_terminates_at_an_anchor():
    h = hier.build_hierarchy(0.0, 1.0, 4)
    for r in h.levels_1d[-1]:
        chain = h.chain(int(r))
        assert chain[0] == int(r)
        assert h.ancestor_1d[chain[-1]] is None
        assert len(chain) <= h.L


def test_shifted_interval_coordinates():
    h = hier.build_hierarchy(0.5, 2.5, 2)
    assert h.coord(0) == 0.5
    assert h.coord(4) == 2.5
    assert h.coord(2) == 1.5


def test_dof_count_formulas():
    h3 = hier.build_hierarchy(0.0, 1.0, 3)
    ladder3 = hier.build_ladder(3)
    assert hier.dof_count(h3, ladder3, "hierarchical") == 240
    assert hier.dof_count(h3, ladder3, "full") == 576
    # 2D variant follows the squared level sizes
    assert hier.dof_count(h3, ladder3, "hierarchical", param_dim=2) == 704
    assert hier.dof_count(h3, ladder3, "full", param_dim=2) == 29 * 64
    # depth 1 stores everything in the only space there is
    h1 = hier.build_hierarchy(0.0, 1.0, 1)
    l1 = hier.build_ladder(1)
    assert hier.dof_count(h1, l1, "hierarchical") == hier.dof_count(h1, l1, "full")
    for L in (2, 3, 4, 5):
        h = hier.build_hierarchy(0.0, 1.0, L)
        la = hier.build_ladder(L)
        assert hier.dof_count(h, la, "hierarchical") < hier.dof_count(h, la, "full")
    with pytest.raises(ValueError):
        hier.dof_count(h3, ladder3, "compressed")


def test_ladder_prolongations_nest_exactly():
    ladder = hier.build_ladder(4)
    with pytest.raises(ValueError):
        hier.build_ladder(0)
    # finest-level prolongation is the identity
    eye = ladder.prolong(4)
    assert abs(eye - np.eye(eye.shape[0])).max() == 0.0
    for m in range(1, 4):
        P = ladder.prolong(m)
        # rows are convex combinations: bilinear weights sum to one
        np.testing.assert_allclose(
            np.asarray(P.sum(axis=1)).ravel(), 1.0, atol=1e-15
        )
        # two-step factorization through the next level is exact (dyadic)
        step = hier._periodic_prolongation(2**m, 2 ** (m + 1))
        assert abs(P - ladder.prolong(m + 1) @ step).max() < 1e-15


def _k_nonseparable(y, p):
    return 2.0 + np.sin(2 * np.pi * y[:, 0]) / (1.0 + p)


def _k_separable(y, p):
    return (2.0 + np.sin(2 * np.pi * y[:, 0])) / (1.0 + p)


def test_anchor_solutions_match_direct_cell_solves():
    L = 3
    h = hier.build_hierarchy(0.0, 1.0, L)
    ladder = hier.build_ladder(L)
    table = hier.hierarchical_cell_solve(_k_nonseparable, h, ladder)
    cell = ladder.finest
    for r in h.levels_1d[0]:
        ent = table.entries[int(r)]
        direct = hz.solve_cell_N(cell, lambda y: _k_nonseparable(y, ent.point), 1)
        np.testing.assert_allclose(ent.solution, direct, atol=1e-11)
        assert ent.level == 1 and ent.space_level == L
        assert ent.ancestor is None


def test_pressure_independent_coefficient_gives_zero_corrections():
    h = hier.build_hierarchy(0.0, 1.0, 3)
    ladder = hier.build_ladder(3)
    table = hier.hierarchical_cell_solve(
        lambda y, p: 2.0 + np.sin(2 * np.pi * y[:, 0]), h, ladder
    )
    anchor = table.entries[0].solution
    for ent in table.entries.values():
        np.testing.assert_allclose(ent.solution, anchor, atol=1e-11)
        assert ent.residual < 1e-9


def test_separable_coefficient_is_reproduced_exactly():
    # k(y, p) = k0(y) g(p): the corrector weak form rescales, so N is
    # p-independent and every hierarchical composite is already exact
    h = hier.build_hierarchy(0.0, 1.0, 3)
    ladder = hier.build_ladder(3)
    table = hier.hierarchical_cell_solve(_k_separable, h, ladder)
    ref = hier.full_reference_table(_k_separable, h, ladder)
    rep = hier.convergence_report(table, ref, ladder)
    assert rep["fitted_C"] < 1e-7


def test_nonseparable_convergence_and_residuals():
    h = hier.build_hierarchy(0.0, 1.0, 3)
    ladder = hier.build_ladder(3)
    table = hier.hierarchical_cell_solve(_k_nonseparable, h, ladder)
    assert len(table) == 9
    for ent in table.entries.values():
        assert ent.residual < 1e-9  # composite solves its own-space system
    ref = hier.full_reference_table(_k_nonseparable, h, ladder)
    rep = hier.convergence_report(table, ref, ladder)
    assert rep["levels"] == [1, 2, 3]
    assert rep["max_error"][0] < 1e-12  # anchors are full solves
    assert 0.0 < rep["fitted_C"] < 1.0
    # deeper levels accumulate correction error
    assert rep["max_error"][1] <= rep["max_error"][2] + 1e-14


def test_fitted_constant_stable_in_depth():
    cs = []
    for L in (3, 4):
        h = hier.build_hierarchy(0.0, 1.0, L)
        ladder = hier.build_ladder(L)
        table = hier.hierarchical_cell_solve(_k_nonseparable, h, ladder)
        ref = hier.full_reference_table(_k_nonseparable, h, ladder)
        cs.append(hier.convergence_report(table, ref, ladder)["fitted_C"])
    assert max(cs) / min(cs) < 2.0


def test_m_kind_table_over_2d_macrogrid():
    L = 3
    h = hier.build_hierarchy(0.0, 1.0, L)
    ladder = hier.build_ladder(L)

    k = lambda y, p1, p2: 2.0 + np.sin(2 * np.pi * y[:, 0]) / (1.0 + p1)
    Q = lambda y, p1, p2: (1.5 + np.cos(2 * np.pi * y[:, 1])) * (p2 - p1)
    table = hier.hierarchical_cell_solve(
        k, h, ladder, kind="M", Q=Q, mean_correct=True
    )
    assert len(table) == 29
    assert table.param_dim == 2
    for ent in table.entries.values():
        assert ent.residual < 1e-9
        assert abs(ladder.finest.mean(ent.solution)) < 1e-10
    ref = hier.full_reference_table(
        k, h, ladder, kind="M", Q=Q, mean_correct=True
    )
    rep = hier.convergence_report(table, ref, ladder)
    assert rep["fitted_C"] < 10.0


def test_solver_argument_validation():
    h = hier.build_hierarchy(0.0, 1.0, 2)
    ladder = hier.build_ladder(2)
    with pytest.raises(ValueError):
        hier.hierarchical_cell_solve(_k_separable, h, ladder, kind="P")
    with pytest.raises(ValueError):
        hier.hierarchical_cell_solve(_k_separable, h, ladder, kind="M")
    with pytest.raises(ValueError):
        hier.hierarchical_cell_solve(
            _k_separable, h, hier.build_ladder(3)
        )
    with pytest.raises(ValueError, match="zero cell average"):
        hier.hierarchical_cell_solve(
            lambda y, p1, p2: 1.0 + 0 * y[:, 0],
            h, ladder, kind="M",
            Q=lambda y, p1, p2: 1.0 + 0 * y[:, 0],
        )


def test_convergence_report_rejects_mismatched_tables():
    h3 = hier.build_hierarchy(0.0, 1.0, 3)
    l3 = hier.build_ladder(3)
    h2 = hier.build_hierarchy(0.0, 1.0, 2)
    l2 = hier.build_ladder(2)
    t3 = hier.hierarchical_cell_solve(_k_separable, h3, l3)
    t2 = hier.full_reference_table(_k_separable, h2, l2)
    with pytest.raises(ValueError):
        hier.convergence_report(t3, t2, l3)
