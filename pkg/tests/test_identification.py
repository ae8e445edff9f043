import numpy as np
import pytest

from oracles import gram_top_eigvecs
from staggered_ife.errors import (
    InfeasibleCell,
    InsufficientComparisonGroups,
    NoFeasibleCells,
    RankDeficientOmega,
)
from staggered_ife.identification import (
    CellIndex,
    OmegaKind,
    OmegaSpec,
    build_omega,
    comparison_set,
    factor_count_diagnostic,
    feasible_cells,
    gamma_hat,
    rank_diagnostic,
    t_max,
)
from staggered_ife.panel import NEVER, first_differences
from staggered_ife.simulate import factor_panel

SIM_GROUPS = (5, 6, 7, 8, NEVER)


def keys(cells):
    return [c.key for c in cells]


def test_comparison_set_orders_never_last():
    assert comparison_set(5, 6, SIM_GROUPS).members == (7, 8, NEVER)
    assert comparison_set(5, 8, SIM_GROUPS).members == (NEVER,)
    assert comparison_set(3, 3, (3, 4)).members == (4,)
    with pytest.raises(ValueError):
        comparison_set(5, 4, SIM_GROUPS)


def test_t_max():
    assert t_max(5, SIM_GROUPS, 8, 0) == 8
    assert t_max(5, SIM_GROUPS, 8, 1) == 7
    assert t_max(5, SIM_GROUPS, 8, 2) == 6
    assert t_max(8, SIM_GROUPS, 8, 1) is None


def test_feasible_cells_baseline_design():
    assert keys(feasible_cells((3, 4, NEVER), 4, 1)) == [(3, 3)]
    with pytest.raises(NoFeasibleCells):
        feasible_cells((3, 4, NEVER), 4, 3)


def test_feasible_cells_simulation_design():
    assert keys(feasible_cells(SIM_GROUPS, 8, 1)) == [(5, 5), (5, 6), (5, 7), (6, 6), (6, 7), (7, 7)]
    assert keys(feasible_cells(SIM_GROUPS, 8, 2)) == [(5, 5), (5, 6), (6, 6)]
    assert len(feasible_cells(SIM_GROUPS, 8, 0)) == 10


def test_feasible_cells_need_enough_pre_periods():
    # R=2 needs g-2 >= 2 and three not-yet-treated groups
    assert keys(feasible_cells((3, 4, 5, 6, NEVER), 6, 2)) == [(4, 4)]
    assert keys(feasible_cells((3, 4, 5, 6, 7, NEVER), 7, 2)) == [(4, 4), (4, 5), (5, 5)]


def test_last_block_omega():
    om = build_omega(OmegaSpec(OmegaKind.LAST_BLOCK, 2), CellIndex(6, 6, 2))
    np.testing.assert_array_equal(om.values, [[0, 0], [0, 0], [1, 0], [0, 1]])
    assert not om.estimated
    om0 = build_omega(OmegaSpec(OmegaKind.LAST_BLOCK, 0), CellIndex(6, 6, 0))
    assert om0.values.shape == (4, 0)


def test_explicit_omega_periods():
    om = build_omega(OmegaSpec(OmegaKind.LAST_BLOCK, 1, (2,)), CellIndex(5, 5, 1))
    np.testing.assert_array_equal(om.values[:, 0], [1, 0, 0])
    with pytest.raises(InfeasibleCell):
        build_omega(OmegaSpec(OmegaKind.LAST_BLOCK, 1, (5,)), CellIndex(5, 5, 1))
    with pytest.raises(ValueError):
        OmegaSpec(OmegaKind.PRINCIPAL_COMPONENTS, 1, (2,))


def test_omega_needs_enough_pre_periods():
    with pytest.raises(InfeasibleCell):
        build_omega(OmegaSpec(OmegaKind.LAST_BLOCK, 2), CellIndex(3, 3, 2))


def test_pca_omega_spans_factor_direction(rng):
    # noiseless rank-1 pre-differences: every row is lambda_i * dF
    dF = np.array([1.0, -2.0, 0.5])
    lam = rng.normal(size=50)
    x = lam[:, None] * dF[None, :] + 3.0
    om = build_omega(OmegaSpec(OmegaKind.PRINCIPAL_COMPONENTS, 1), CellIndex(5, 5, 1), x)
    v = om.values[:, 0]
    cos = abs(v @ dF) / np.linalg.norm(dF)
    assert np.arccos(min(cos, 1.0)) < 1e-8
    assert v[np.argmax(np.abs(v))] > 0


def test_pca_omega_matches_eigendecomposition(rng):
    x = rng.normal(size=(80, 4)) @ np.diag([3.0, 2.0, 1.0, 0.5])
    om = build_omega(OmegaSpec(OmegaKind.PRINCIPAL_COMPONENTS, 2), CellIndex(6, 6, 2), x)
    ref = gram_top_eigvecs(x, 2)
    # same column space, column by column up to sign
    for j in range(2):
        assert abs(abs(om.values[:, j] @ ref[:, j]) - 1.0) < 1e-10


def test_rank_deficient_omega_from_collinear_data():
    x = np.tile(np.array([1.0, 2.0, 3.0]), (10, 1))
    with pytest.raises(RankDeficientOmega):
        build_omega(OmegaSpec(OmegaKind.PRINCIPAL_COMPONENTS, 1), CellIndex(5, 5, 1), x)
    with pytest.raises(RankDeficientOmega):
        build_omega(OmegaSpec(OmegaKind.LAST_BLOCK, 1), CellIndex(5, 5, 1), x)


def test_rank_diagnostic():
    ok = rank_diagnostic(np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]]))
    assert ok.rank_ok and ok.condition_number > 1
    bad = rank_diagnostic(np.array([[1.0, 2.0], [1.0, 2.0], [1.0, 2.0 + 1e-12]]))
    assert not bad.rank_ok
    # too few rows for full column rank
    assert not rank_diagnostic(np.array([[1.0, 2.0]])).rank_ok


def test_gamma_hat_rows_are_group_means(rng):
    F = np.array([[0.0], [1.0], [3.0], [2.0], [5.0], [4.0]])
    data = factor_panel(rng, (5, 6, NEVER), [30, 30, 30], F, {5: [1], 6: [2], NEVER: [-1]})
    cell = CellIndex(5, 5, 1)
    om = build_omega(OmegaSpec(OmegaKind.LAST_BLOCK, 1), cell)
    gh = gamma_hat(cell, om, data)
    d = first_differences(data).column(4)
    assert gh.members == (6, NEVER)
    np.testing.assert_allclose(gh.values[:, 1], [d[data.groups == 6].mean(), d[np.isinf(data.groups)].mean()])
    np.testing.assert_array_equal(gh.values[:, 0], 1.0)


def test_factor_count_diagnostic_flags_late_divergence(rng):
    # factor flat between periods 1 and 2, moving afterwards
    F = np.array([[1.0], [1.0], [4.0], [6.0]])
    data = factor_panel(
        rng, (3, 4, NEVER), [200, 200, 200], F, {3: [0.0], 4: [1.0], NEVER: [3.0]},
        within_sd=0.2, e_sd=0.1,
    )
    rep = factor_count_diagnostic(data, 3, 3)
    assert rep.comparison_groups == (4, NEVER)
    assert rep.flag
    assert abs(rep.z_scores[(4, NEVER, 2)]) < 1.96
    assert abs(rep.z_scores[(4, NEVER, 3)]) > 1.96


def test_factor_count_diagnostic_quiet_without_factor(rng):
    data = factor_panel(rng, (3, 4, NEVER), [200] * 3, np.zeros((4, 1)), {3: [0], 4: [0], NEVER: [0]})
    assert not factor_count_diagnostic(data, 3, 3).flag


def test_factor_count_diagnostic_needs_two_groups(rng):
    data = factor_panel(rng, (3, 4, NEVER), [20] * 3, np.zeros((4, 1)), {3: [0], 4: [0], NEVER: [0]})
    with pytest.raises(InsufficientComparisonGroups):
        factor_count_diagnostic(data, 3, 4)
