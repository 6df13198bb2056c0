"""Diagnostics: dCor oracle, calibration, variability checks, equivalence."""

import numpy as np
import pytest
from scipy import stats as sps

from bgmflow.diagnostics import (
    InsufficientSupportError,
    conditional_independence_test,
    distance_correlation,
    equivalence_check,
    independence_test,
    monotonicity_check,
    variability_bc,
    variability_iv,
)
from bgmflow.flows import build_flow
from bgmflow.scm import gen_abr_like, gen_ellipse


def perturbed_flow(cond_dim=1, var_dim=1, seed=0, scale=0.1):
    flow = build_flow(cond_dim, var_dim, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in flow.parameters():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)
    return flow


# -- distance correlation ------------------------------------------------------


def _dcor_bruteforce(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    n = len(a)
    da = np.zeros((n, n))
    db = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            da[i, j] = np.sqrt(np.sum((a[i] - a[j]) ** 2))
            db[i, j] = np.sqrt(np.sum((b[i] - b[j]) ** 2))

    def center(d):
        out = np.zeros_like(d)
        for i in range(n):
            for j in range(n):
                out[i, j] = d[i, j] - d[i].mean() - d[:, j].mean() + d.mean()
        return out

    ca, cb = center(da), center(db)
    dcov2 = (ca * cb).mean()
    return np.sqrt(max(dcov2, 0.0) / np.sqrt((ca**2).mean() * (cb**2).mean()))


def test_dcor_matches_bruteforce_definition():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(40)
    b = rng.standard_normal((40, 2))
    assert abs(distance_correlation(a, b) - _dcor_bruteforce(a, b)) < 1e-12


def test_dcor_identical_inputs_score_one():
    a = np.random.default_rng(1).standard_normal(300)
    assert abs(distance_correlation(a, a) - 1.0) < 1e-12
    rep = independence_test(a, a, n_perm=99, seed=0)
    assert rep.p_value == pytest.approx(1.0 / 100.0)


def test_dcor_independent_samples():
    rng = np.random.default_rng(2)
    rep = independence_test(rng.standard_normal(2000), rng.standard_normal(2000),
                            n_perm=199, seed=3)
    assert rep.statistic < 0.05
    assert rep.p_value > 0.05


def test_dcor_detects_quadratic_dependence():
    rng = np.random.default_rng(3)
    a = rng.standard_normal(1200)
    b = a**2 + 0.1 * rng.standard_normal(1200)
    assert abs(sps.pearsonr(a, b).statistic) < 0.1  # invisible to linear correlation
    rep = independence_test(a, b, n_perm=99, seed=4)
    assert rep.p_value <= 0.01 + 1e-12


def test_permutation_pvalues_uniform_under_null():
    rng = np.random.default_rng(4)
    ps = []
    for t in range(200):
        a = rng.standard_normal(128)
        b = rng.standard_normal(128)
        ps.append(independence_test(a, b, n_perm=99, seed=t).p_value)
    assert sps.kstest(ps, "uniform").pvalue > 0.01


def test_independence_test_input_checks():
    with pytest.raises(ValueError):
        independence_test(np.zeros(100), np.zeros(50))
    with pytest.raises(InsufficientSupportError):
        independence_test(np.zeros(10), np.zeros(10))


# -- conditional independence ---------------------------------------------------


def test_conditional_test_separates_common_cause():
    # noise and action of the elliptical benchmark share only the covariate:
    # dependent marginally, independent once z is conditioned away
    data = gen_ellipse(5000, seed=11)
    u0 = np.asarray(data.frame["u0_hidden"])
    x = np.asarray(data.frame["x"])
    z = np.asarray(data.frame["z"])

    marginal = independence_test(u0, x, n_perm=99, seed=11)
    assert marginal.p_value < 0.02

    conditional = conditional_independence_test(u0, x, z, n_bins=10, n_perm=99, seed=11)
    assert conditional.p_value >= 0.05
    assert conditional.conditioning == "z-bins:10"
    assert len(conditional.per_bin) == 10


def test_conditional_test_detects_direct_dependence():
    rng = np.random.default_rng(6)
    z = rng.standard_normal(3000)
    a = z + 0.5 * rng.standard_normal(3000)
    b = a + z + 0.2 * rng.standard_normal(3000)
    rep = conditional_independence_test(a, b, z, n_bins=10, n_perm=99, seed=8)
    assert rep.p_value < 0.01


def test_conditional_test_requires_bin_mass():
    rng = np.random.default_rng(7)
    with pytest.raises(InsufficientSupportError):
        conditional_independence_test(rng.standard_normal(500),
                                      rng.standard_normal(500),
                                      rng.standard_normal(500), n_bins=10)


def test_conditional_test_with_constant_z_is_unconditional():
    rng = np.random.default_rng(8)
    a = rng.standard_normal(400)
    b = a + rng.standard_normal(400)
    cond = conditional_independence_test(a, b, np.ones(400), n_bins=10,
                                         n_perm=99, seed=10)
    flat = independence_test(a, b, n_perm=99, seed=10 + 9)  # bin id is 9
    assert cond.statistic == flat.statistic
    assert cond.p_value == pytest.approx(flat.p_value, rel=1e-12)


# -- variability: instrument ----------------------------------------------------


def test_variability_iv_passes_on_policy_dataset():
    data = gen_abr_like(20000, seed=0, structure="iv")
    rep = variability_iv(data.frame["i"], data.frame["x"], data.frame["u_hidden"])
    assert rep.passed
    assert rep.abs_det >= 1e-4
    assert len(rep.dets) == 9
    m = np.asarray(rep.matrix)
    assert m.shape == (10, 10)
    assert np.allclose(m.sum(axis=0), 1.0, atol=1e-9)  # columns are conditionals


def test_variability_iv_fails_when_instrument_disconnected():
    data = gen_abr_like(20000, seed=1, structure="iv", disconnect_instrument=True)
    rep = variability_iv(data.frame["i"], data.frame["x"], data.frame["u_hidden"])
    assert not rep.passed
    assert rep.abs_det < 1e-4


def test_variability_iv_single_value_is_trivially_full_rank():
    rng = np.random.default_rng(9)
    rep = variability_iv(np.zeros(200), np.ones(200), rng.standard_normal(200))
    assert rep.passed
    assert rep.abs_det == pytest.approx(1.0)


def test_variability_iv_relabeling_keeps_abs_det():
    data = gen_abr_like(8000, seed=2, structure="iv")
    i = np.asarray(data.frame["i"])
    x = np.asarray(data.frame["x"])
    u = np.asarray(data.frame["u_hidden"])
    grid = np.quantile(u, [0.3, 0.5, 0.7])
    a = variability_iv(i, x, u, u_grid=grid,
                       i_values=np.arange(10.0), x_values=np.unique(x))
    b = variability_iv(i, x, u, u_grid=grid,
                       i_values=np.arange(10.0)[::-1], x_values=np.unique(x)[::-1])
    assert np.allclose(a.dets, b.dets, rtol=1e-9)


def test_variability_iv_reports_thin_support():
    rng = np.random.default_rng(10)
    i = np.zeros(500)
    i[:3] = 1.0  # nearly unobserved instrument level
    x = rng.choice([0.5, 1.0], size=500)
    with pytest.raises(InsufficientSupportError):
        variability_iv(i, x, rng.standard_normal(500))


def test_variability_iv_rejects_rectangular():
    rng = np.random.default_rng(11)
    with pytest.raises(ValueError):
        variability_iv(rng.integers(0, 2, 300), rng.choice([1.0, 2.0, 3.0], 300),
                       rng.standard_normal(300))


# -- variability: backdoor covariate ---------------------------------------------


def test_variability_bc_passes_on_covariate_driven_noise():
    data = gen_ellipse(6000, seed=3)
    u = np.column_stack([data.frame["u0_hidden"], data.frame["u1_hidden"]])
    rep = variability_bc(u, data.frame["z"], seed=0)
    assert rep.passed
    assert np.asarray(rep.matrix).shape == (3, 3)


def test_variability_bc_fails_when_covariate_is_independent():
    data = gen_ellipse(6000, seed=4)
    u = np.column_stack([data.frame["u0_hidden"], data.frame["u1_hidden"]])
    z = np.random.default_rng(12).permutation(np.asarray(data.frame["z"]))
    rep = variability_bc(u, z, seed=0)
    assert not rep.passed


def test_variability_bc_scalar_two_groups():
    rng = np.random.default_rng(13)
    z = rng.uniform(0, 1, size=4000)
    u = 5.0 * z + rng.standard_normal(4000)
    rep = variability_bc(u, z, seed=1)
    assert rep.passed
    assert np.asarray(rep.matrix).shape == (2, 2)

    u_free = rng.standard_normal(4000)
    assert not variability_bc(u_free, z, seed=1).passed


def test_variability_bc_validates_inputs():
    rng = np.random.default_rng(14)
    with pytest.raises(ValueError):
        variability_bc(rng.standard_normal((200, 2)), rng.standard_normal(200), d=1)
    with pytest.raises(ValueError):
        variability_bc(rng.standard_normal(200), rng.standard_normal(200),
                       z_candidates=[0.5])
    with pytest.raises(InsufficientSupportError):
        variability_bc(rng.standard_normal(20), rng.standard_normal(20))


# -- monotonicity -----------------------------------------------------------------


def test_monotonicity_passes_for_flows():
    for var_dim in (1, 2):
        flow = perturbed_flow(var_dim=var_dim, seed=var_dim)
        rep = monotonicity_check(flow, x_grid=np.linspace(0, 2, 5))
        assert rep.passed, rep.violations[:2]
        assert rep.checked > 0


def test_monotonicity_passes_for_true_elliptical_mechanism():
    def mech(x, u):
        return u * np.column_stack([2.0 + np.sin(x[:, 0]), 2.0 + np.cos(x[:, 0])])

    rep = monotonicity_check(mech, x_grid=np.linspace(0, 2 * np.pi, 7), var_dim=2)
    assert rep.passed


def test_monotonicity_catches_decreasing_region():
    def mech(x, u):
        return np.sin(u)

    rep = monotonicity_check(mech, x_grid=[0.0], var_dim=1)
    assert not rep.passed
    first = rep.violations[0]
    assert first["v_lo"] >= first["v_hi"]
    assert first["coord"] == 0


# -- equivalence -------------------------------------------------------------------


class _Warped:
    """bgm_a with its noise re-encoded through a fixed invertible map."""

    def __init__(self, base, warp_inv):
        self.base = base
        self.warp_inv = warp_inv
        self.var_dim = base.var_dim

    def inverse(self, x, v):
        u, ld = self.base.inverse(x, v)
        return self.warp_inv(u), ld


class _ClosedForm:
    def __init__(self, inv, var_dim=1):
        self._inv = inv
        self.var_dim = var_dim

    def inverse(self, x, v):
        x = np.asarray(x, dtype=np.float64).reshape(len(v), -1)
        v = np.asarray(v, dtype=np.float64).reshape(len(x), -1)
        return self._inv(x, v), None


def test_equivalence_recovers_monotone_warp():
    flow = perturbed_flow(seed=20)
    rng = np.random.default_rng(15)
    x = rng.uniform(0, 2, size=(10000, 1))
    v = rng.uniform(-2, 2, size=(10000, 1))
    rep = equivalence_check(flow, _Warped(flow, np.arcsinh), x, v)
    assert rep.mode == "rank_corr"
    assert abs(rep.value) >= 0.999
    assert rep.cross_condition_residual < 0.2
    assert rep.passed
    # the recovered map should look like sinh (we predict u_a from u_b)
    knots = np.asarray(rep.g_knots)
    values = np.asarray(rep.g_values)
    mid = (knots > -1.5) & (knots < 1.5)
    assert np.allclose(values[mid], np.sinh(knots[mid]), atol=0.1)


def test_equivalence_rejects_counterexample_pair():
    # observationally identical mechanisms with different counterfactuals:
    # star abducts v+1 when x=0, hat abducts -v when x=0; both are v at x=1
    star = _ClosedForm(lambda x, v: np.where(x == 1.0, v, v + 1.0))
    hat = _ClosedForm(lambda x, v: np.where(x == 1.0, v, -v))
    rng = np.random.default_rng(16)
    x = rng.integers(0, 2, size=6000).astype(float)
    u = rng.uniform(0, 1, size=6000)
    v = np.where(x == 1.0, u, u - 1.0)  # star's observational law
    rep = equivalence_check(star, hat, x, v)
    assert not rep.passed
    assert rep.cross_condition_residual > 0.2


def test_equivalence_rejects_action_dependent_reencoding():
    identity = perturbed_flow(seed=21, scale=0.0)
    skewed = _ClosedForm(lambda x, v: (v - x) ** 3)
    rng = np.random.default_rng(17)
    x = rng.uniform(0, 2, size=(8000, 1))
    v = rng.uniform(-1, 1, size=(8000, 1))
    rep = equivalence_check(identity, skewed, x, v)
    assert abs(rep.value) < 0.99
    assert not rep.passed


def test_equivalence_multid_warp_and_mismatch():
    flow = perturbed_flow(var_dim=2, seed=22)
    rng = np.random.default_rng(18)
    x = rng.uniform(0, 2, size=(6000, 1))
    v = rng.uniform(-1.5, 1.5, size=(6000, 2))

    def warp_inv(u):
        return np.column_stack([np.arcsinh(u[:, 0]), np.cbrt(u[:, 1])])

    good = equivalence_check(flow, _Warped(flow, warp_inv), x, v)
    assert good.mode == "functional_r2"
    assert good.value >= 0.95
    assert good.passed

    class _ActionScaled:
        var_dim = 2

        def inverse(self, x, v):
            return v * (0.2 + x), None

    bad = equivalence_check(flow, _ActionScaled(), x, v)
    assert bad.value < 0.95
    assert not bad.passed


def test_equivalence_dimension_mismatch():
    with pytest.raises(ValueError):
        equivalence_check(perturbed_flow(var_dim=1), perturbed_flow(var_dim=2),
                          np.zeros((100, 1)), np.zeros((100, 1)))
