import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from dynlead.analysis import (
    SensitivityMap, default_tolerance, depth_gain_correlation, null_space_decomposition,
    null_space_projected_sensitivity, relative_sensitivity, sensitivity, sensitivity_difference,
    singular_spectrum, source_depth,
)
from dynlead.dynamics import DynamicsModel
from dynlead.dynmap import (
    ModelKind, assemble_dyn, assemble_ind, assemble_sts, build_sts_temporal_cov, default_sts_window,
)


def scalar_model(p, phi):
    return DynamicsModel.from_transition(sp.csr_matrix(phi * np.eye(p)), np.full(p, 1 - phi**2), phi)


@pytest.fixture(scope="module")
def sts_window():
    T, t = default_sts_window(20)
    return build_sts_temporal_cov(T, 4e-3, 204.8), t


# -- spectrum ------------------------------------------------------------------


def test_spectrum_of_identity():
    rep = singular_spectrum(np.eye(3))
    np.testing.assert_array_equal(rep.singular_values, [1.0, 1.0, 1.0])
    assert rep.numerical_rank == 3
    assert rep.tolerance == pytest.approx(3 * np.finfo(float).eps)


def test_spectrum_rank_deficient():
    a = np.outer([1.0, 2.0, 3.0], [1.0, -1.0, 0.5, 2.0])
    rep = singular_spectrum(a)
    assert rep.numerical_rank == 1
    assert rep.singular_values.size == 3


def test_spectrum_explicit_tolerance():
    rep = singular_spectrum(np.diag([1.0, 1e-3, 1e-6]), tolerance=1e-4)
    assert rep.numerical_rank == 2 and rep.tolerance == 1e-4


def test_default_tolerance_formula():
    assert default_tolerance((60, 400), 2.0) == 400 * np.finfo(float).eps * 2.0


def test_spectrum_rejects_non_finite_and_empty():
    with pytest.raises(ValueError):
        singular_spectrum(np.array([[1.0, np.nan]]))
    with pytest.raises(ValueError):
        singular_spectrum(np.zeros((0, 3)))


def test_ind_spectrum_equals_static(desk_lead):
    rep = singular_spectrum(assemble_ind(desk_lead, 5))
    static = singular_spectrum(desk_lead.gain)
    n = desk_lead.sensor_count
    np.testing.assert_array_equal(rep.singular_values[:n], static.singular_values)
    assert not np.any(rep.singular_values[n:])
    assert rep.shape == (11 * desk_lead.sensor_count, desk_lead.source_count)


def test_summary_keys(desk_lead):
    s = singular_spectrum(desk_lead.gain).summary()
    assert s["rank"] == 20 and s["rows"] == 20 and s["cols"] == 400
    assert s["sigma_max"] >= s["sigma_min"] > 0


@pytest.mark.parametrize("k", [0, 1, 2])
def test_dyn_rank_multiplies(desk_lead, desk_dyn, k):
    assert singular_spectrum(assemble_dyn(desk_lead, desk_dyn, k)).numerical_rank == (2 * k + 1) * 20


def test_rank_bounds_and_monotone(desk_lead, desk_dyn):
    ranks = [singular_spectrum(assemble_dyn(desk_lead, desk_dyn, k)).numerical_rank for k in range(6)]
    assert all(b >= a for a, b in zip(ranks, ranks[1:]))
    for k, r in enumerate(ranks):
        assert 20 <= r <= min((2 * k + 1) * 20, 400)


# -- sensitivity ---------------------------------------------------------------


def test_sensitivity_identity_scalar_dynamics():
    m = assemble_dyn(np.eye(2), scalar_model(2, 0.5), 1)
    s = sensitivity(m)
    np.testing.assert_allclose(s.values, np.sqrt(1.5), rtol=1e-14)
    assert s.k == 1 and s.model_kind is ModelKind.DYN


def test_sensitivity_is_column_norm(desk_lead, desk_dyn):
    m = assemble_dyn(desk_lead, desk_dyn, 2)
    np.testing.assert_allclose(sensitivity(m).values, np.linalg.norm(m.stacked, axis=0), rtol=1e-13)


def test_sts_sensitivity_closed_form(desk_lead, sts_window):
    g, t = sts_window
    m = assemble_sts(desk_lead, g, t, 5)
    w = g.window(t, 5)
    factor = np.linalg.norm(w) / g.gamma[t - 1, t - 1]
    np.testing.assert_allclose(sensitivity(m).values, factor * np.linalg.norm(desk_lead.gain, axis=0), rtol=1e-13)


def test_sensitivity_nondecreasing_in_k(desk_lead, desk_dyn, sts_window):
    g, t = sts_window
    for build in (lambda k: assemble_dyn(desk_lead, desk_dyn, k),
                  lambda k: assemble_ind(desk_lead, k),
                  lambda k: assemble_sts(desk_lead, g, t, k)):
        prev = None
        for k in range(6):
            cur = sensitivity(build(k)).values
            if prev is not None:
                assert np.all(cur >= prev)
            prev = cur


def test_relative_sensitivity_masks_silent_sources():
    a = SensitivityMap([2.0, 3.0, 0.0], 2, ModelKind.DYN)
    b = SensitivityMap([1.0, 0.0, 0.0], 0, ModelKind.DYN)
    rel = relative_sensitivity(a, b)
    assert rel[0] == 2.0
    assert rel.mask.tolist() == [False, True, True]


def test_relative_sensitivity_mismatches():
    a = SensitivityMap([1.0, 2.0], 1, ModelKind.DYN)
    with pytest.raises(ValueError, match="length"):
        relative_sensitivity(a, SensitivityMap([1.0], 0, ModelKind.DYN))
    with pytest.raises(ValueError, match="model"):
        relative_sensitivity(a, SensitivityMap([1.0, 1.0], 0, ModelKind.STS))


def test_sts_relative_sensitivity_uniform(desk_lead, sts_window):
    g, t = sts_window
    s0 = sensitivity(assemble_sts(desk_lead, g, t, 0))
    rel = relative_sensitivity(sensitivity(assemble_sts(desk_lead, g, t, 10)), s0)
    assert rel.max() / rel.min() - 1 < 1e-10


def test_ind_relative_sensitivity_is_one(desk_lead):
    rel = relative_sensitivity(sensitivity(assemble_ind(desk_lead, 5)), sensitivity(assemble_ind(desk_lead, 0)))
    np.testing.assert_array_equal(rel.compressed(), 1.0)


def test_sensitivity_difference_checks():
    a = SensitivityMap([2.0, 3.0], 1, ModelKind.DYN)
    b = SensitivityMap([1.0, 5.0], 1, ModelKind.STS)
    np.testing.assert_array_equal(sensitivity_difference(a, b), [1.0, -2.0])
    with pytest.raises(ValueError, match="k"):
        sensitivity_difference(a, SensitivityMap([1.0, 5.0], 2, ModelKind.STS))
    with pytest.raises(ValueError, match="length"):
        sensitivity_difference(a, SensitivityMap([1.0], 1, ModelKind.STS))


def test_sensitivity_map_validation():
    with pytest.raises(ValueError):
        SensitivityMap([1.0, -1.0], 0, ModelKind.DYN)
    with pytest.raises(ValueError):
        SensitivityMap([1.0, np.inf], 0, ModelKind.DYN)


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 3))
def test_sensitivity_scales_with_lead_field(c, k):
    x = np.random.default_rng(k).standard_normal((4, 7))
    dyn = scalar_model(7, 0.6)
    base = sensitivity(assemble_dyn(x, dyn, k)).values
    scaled = sensitivity(assemble_dyn(c * x, dyn, k)).values
    np.testing.assert_allclose(scaled, c * base, rtol=1e-12)


# -- null space ----------------------------------------------------------------


def test_null_space_scalar_dynamics_is_empty():
    x = np.random.default_rng(0).standard_normal((4, 9))
    dyn = scalar_model(9, 0.9)
    out = null_space_projected_sensitivity(assemble_dyn(x, dyn, 3), assemble_dyn(x, dyn, 0))
    ref = np.max(np.linalg.norm(x, axis=0))
    assert np.max(out) < 1e-10 * ref


def test_null_space_sts_is_empty(desk_lead, sts_window):
    g, t = sts_window
    out = null_space_projected_sensitivity(assemble_sts(desk_lead, g, t, 10), assemble_sts(desk_lead, g, t, 0))
    assert np.max(out) < 1e-8 * np.max(np.linalg.norm(desk_lead.gain, axis=0))


def test_null_space_dyn_is_not_empty(desk_lead, desk_dyn):
    out = null_space_projected_sensitivity(assemble_dyn(desk_lead, desk_dyn, 2), assemble_dyn(desk_lead, desk_dyn, 0))
    assert np.max(out) > 1e-3 * np.max(np.linalg.norm(desk_lead.gain, axis=0))


@pytest.mark.parametrize("k_small,k_big", [(0, 1), (1, 3), (0, 5)])
def test_pythagoras(desk_lead, desk_dyn, k_small, k_big):
    big = assemble_dyn(desk_lead, desk_dyn, k_big)
    outside, inside = null_space_decomposition(big, assemble_dyn(desk_lead, desk_dyn, k_small))
    total = sensitivity(big).values
    assert np.sum(outside**2) + np.sum(inside**2) == pytest.approx(np.sum(total**2), rel=1e-8)
    assert np.sum(outside**2) == pytest.approx(np.linalg.norm(big.stacked - big.stacked @ _row_projector(
        assemble_dyn(desk_lead, desk_dyn, k_small))) ** 2, rel=1e-8)


def _row_projector(m):
    from dynlead.analysis import row_space_basis
    v = row_space_basis(m)
    return v.T @ v


def test_per_source_split_has_cross_terms(desk_lead, desk_dyn):
    # the row projector mixes sources, so the split is exact only in aggregate
    big = assemble_dyn(desk_lead, desk_dyn, 2)
    outside, inside = null_space_decomposition(big, assemble_dyn(desk_lead, desk_dyn, 1))
    total = sensitivity(big).values
    assert np.max(np.abs(outside**2 + inside**2 - total**2) / total**2) > 1e-3


def test_null_space_argument_checks(desk_lead, desk_dyn, small_model):
    a = assemble_dyn(desk_lead, desk_dyn, 2)
    with pytest.raises(ValueError, match="k_small"):
        null_space_decomposition(assemble_dyn(desk_lead, desk_dyn, 0), a)
    with pytest.raises(ValueError, match="model"):
        null_space_decomposition(a, assemble_ind(desk_lead, 0))
    with pytest.raises(ValueError):
        _, lead, dyn = small_model
        null_space_decomposition(a, assemble_dyn(lead, dyn, 0))
    with pytest.raises(ValueError, match="different lead"):
        null_space_decomposition(a, assemble_dyn(2 * desk_lead.gain, desk_dyn, 0))


# -- depth ---------------------------------------------------------------------


def test_source_depth():
    d = source_depth([[0.0, 0.0, 0.05], [0.03, 0.04, 0.0], [0.0, 0.0, 0.0]], 0.09)
    np.testing.assert_allclose(d, [0.04, 0.04, 0.09])


def test_depth_correlation_ignores_masked():
    depth = np.array([1.0, 2.0, 3.0, 4.0])
    gain = np.ma.masked_array([1.0, 2.0, 3.0, -100.0], mask=[False, False, False, True])
    assert depth_gain_correlation(depth, gain) == pytest.approx(1.0)


def test_desk_depth_effect(desk_geometry, desk_lead, desk_dyn, sts_window):
    cfg, geo = desk_geometry
    s0 = sensitivity(assemble_dyn(desk_lead, desk_dyn, 0))
    s5 = sensitivity(assemble_dyn(desk_lead, desk_dyn, 5))
    rho = depth_gain_correlation(source_depth(geo.sources.positions, cfg.sphere_radius),
                                 relative_sensitivity(s5, s0))
    assert rho > 0
    g, t = sts_window
    diff = sensitivity_difference(s5, sensitivity(assemble_sts(desk_lead, g, t, 5)))
    assert np.mean(diff > 0) > 0.5
