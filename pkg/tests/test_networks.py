"""Structured networks: wiring, exact joint densities, sampling."""

import numpy as np
import pytest

from bgmflow import autodiff as ad
from bgmflow.networks import (
    CategoricalHead,
    StructuredGenerativeNetwork,
    build_network,
)
from bgmflow.scm import BITRATE_GRID, gen_abr_like

HALF_LOG_2PI = 0.9189385332046727


def perturb(net, seed=0, scale=0.1):
    rng = np.random.default_rng(seed)
    for p in net.parameters():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)
    return net


# -- construction -----------------------------------------------------------


def test_build_kinds_attach_the_right_auxiliaries():
    m = build_network("markovian")
    assert m.aux_u is None and m.aux_x_flow is None and m.aux_z is None

    iv = build_network("iv", i_values=range(3), x_grid=BITRATE_GRID)
    assert iv.aux_x_flow is not None and iv.aux_x_cat is None

    ivc = build_network("iv", i_values=range(3), x_grid=BITRATE_GRID,
                        aux_mode="categorical")
    assert ivc.aux_x_cat is not None and ivc.aux_x_flow is None

    bc = build_network("bc", z_dim=1)
    assert bc.aux_u is not None and bc.aux_z is None

    bcc = build_network("bc", z_dim=1, dgm_variant="c")
    assert bcc.aux_z is not None and bcc.aux_u is None

    ivbc = build_network("ivbc", z_dim=1)
    assert ivbc.aux_u is not None and ivbc.aux_x_flow is None


def test_build_validation():
    with pytest.raises(ValueError):
        build_network("frontdoor")
    with pytest.raises(ValueError):
        build_network("bc")  # no z
    with pytest.raises(ValueError):
        build_network("iv")  # no instrument values or grid
    with pytest.raises(ValueError):
        build_network("iv", i_values=[0, 1], x_grid=[1.0, 2.0], aux_mode="table")
    with pytest.raises(ValueError):
        build_network("bc", z_dim=1, dgm_variant="d")


# -- likelihood decompositions ----------------------------------------------


def test_markovian_log_joint_equals_flow_density():
    net = perturb(build_network("markovian", seed=3), seed=1)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 2, size=(64, 1))
    v = rng.uniform(-2, 2, size=(64, 1))
    batch = net.prepare({"x": x[:, 0], "v": v[:, 0]})
    assert np.array_equal(net.log_joint(batch), net.bgm.log_density(x, v))


def test_bc_identity_network_scores_standard_normal():
    net = build_network("bc", z_dim=1)  # both flows start at identity
    v = np.array([0.0, 1.0, -2.0])
    batch = net.prepare({"x": np.zeros(3), "z": np.ones(3), "v": v})
    expected = -0.5 * v**2 - HALF_LOG_2PI
    assert np.allclose(net.log_joint(batch), expected, atol=1e-12)


def _local_quadrature(u_lo, u_hi, integrand, points=201):
    grid = np.linspace(u_lo, u_hi, points)
    return np.trapezoid(integrand(grid), grid)


def test_iv_categorical_joint_matches_quadrature_oracle():
    """log_joint must equal d/dv P(X=x, V<=v | i) from brute-force integration.

    The oracle never touches the logdet path: it integrates the base
    density times the action pmf between the abducted noise values at
    v-h and v+h, then divides by 2h.
    """
    grid = np.array([0.5, 1.0, 2.0, 3.5, 4.0])
    net = perturb(build_network("iv", i_values=[0, 1], x_grid=grid,
                                aux_mode="categorical", seed=5), seed=7)
    h = 1e-4
    rows = [(0, 0.5, 0.3), (0, 2.0, -1.1), (1, 4.0, 0.9), (1, 1.0, 0.0), (0, 3.5, 2.2)]
    for i_val, x_val, v_val in rows:
        batch = net.prepare({"i": [i_val], "x": [x_val], "v": [v_val]})
        got = net.log_joint(batch)[0]

        onehot = net._onehot(np.array([float(i_val)]))
        j = int(np.argmin(np.abs(grid - x_val)))

        def integrand(u):
            cond = np.concatenate([np.tile(onehot, (len(u), 1)), u[:, None]], axis=1)
            log_pmf = net.aux_x_cat.log_pmf(ad.asvar(cond), np.full(len(u), j)).data
            return np.exp(-0.5 * u**2 - HALF_LOG_2PI + log_pmf)

        u_lo = net.bgm.inverse([[x_val]], [[v_val - h]])[0][0, 0]
        u_hi = net.bgm.inverse([[x_val]], [[v_val + h]])[0][0, 0]
        oracle = np.log(_local_quadrature(u_lo, u_hi, integrand) / (2 * h))
        assert abs(got - oracle) < 1e-3, f"{(i_val, x_val, v_val)}: {got} vs {oracle}"


def test_iv_categorical_action_marginal_matches_sampling():
    grid = np.array([0.5, 1.0, 2.0, 3.5])
    net = perturb(build_network("iv", i_values=[0, 1], x_grid=grid,
                                aux_mode="categorical", seed=2), seed=9)
    onehot = net._onehot(np.zeros(1))
    u = np.linspace(-10, 10, 20001)
    cond = np.concatenate([np.tile(onehot, (len(u), 1)), u[:, None]], axis=1)
    base = np.exp(-0.5 * u**2 - HALF_LOG_2PI)
    marginal = np.empty(len(grid))
    for j in range(len(grid)):
        pmf = np.exp(net.aux_x_cat.log_pmf(ad.asvar(cond), np.full(len(u), j)).data)
        marginal[j] = np.trapezoid(base * pmf, u)
    assert abs(marginal.sum() - 1.0) < 1e-6

    frame = net.sample({"i": np.zeros(50000)}, seed=3)
    freq = np.array([(np.abs(frame["x"] - g) < 1e-9).mean() for g in grid])
    assert np.all(np.abs(freq - marginal) < 0.015)


def test_bc_conditional_matches_quadrature_oracle():
    """log_joint under bc is log p(v | x, z); check it against d/dv of
    the abduction CDF integrated under the covariate-conditional noise law."""
    net = perturb(build_network("bc", z_dim=1, seed=11), seed=13)
    h = 1e-4
    rows = [(0.2, 1.0, 0.4), (-1.0, 0.3, -0.8), (0.9, 2.0, 1.5)]
    for z_val, x_val, v_val in rows:
        batch = net.prepare({"z": [z_val], "x": [x_val], "v": [v_val]})
        got = net.log_joint(batch)[0]

        def integrand(u):
            z = np.full((len(u), 1), z_val)
            return np.exp(net.aux_u.log_density(z, u[:, None]))

        u_lo = net.bgm.inverse([[x_val]], [[v_val - h]])[0][0, 0]
        u_hi = net.bgm.inverse([[x_val]], [[v_val + h]])[0][0, 0]
        oracle = np.log(_local_quadrature(u_lo, u_hi, integrand) / (2 * h))
        assert abs(got - oracle) < 1e-3


def test_bc_variant_c_terms_assemble():
    net = perturb(build_network("bc", z_dim=1, dgm_variant="c", seed=17), seed=19)
    rng = np.random.default_rng(4)
    z = rng.standard_normal((32, 1))
    x = rng.uniform(0, 2, size=(32, 1))
    v = rng.uniform(-1.5, 1.5, size=(32, 1))
    batch = net.prepare({"z": z[:, 0], "x": x[:, 0], "v": v[:, 0]})

    u, ld = net.bgm.inverse(x, v)
    manual = (-0.5 * u[:, 0] ** 2 - HALF_LOG_2PI
              + net.aux_z.log_density(u, z) + ld)
    assert np.allclose(net.log_joint(batch), manual, atol=1e-12)


def test_gradients_reach_every_component():
    cases = [
        ("markovian", {}),
        ("iv", {"i_values": [0, 1], "x_grid": [0.5, 1.0, 2.0]}),
        ("iv", {"i_values": [0, 1], "x_grid": [0.5, 1.0, 2.0], "aux_mode": "categorical"}),
        ("bc", {"z_dim": 1}),
        ("bc", {"z_dim": 1, "dgm_variant": "c"}),
        ("ivbc", {"z_dim": 1, "i_values": [0, 1], "x_grid": [0.5, 1.0, 2.0]}),
    ]
    rng = np.random.default_rng(8)
    n = 16
    frame = {
        "x": rng.choice([0.5, 1.0, 2.0], size=n),
        "v": rng.standard_normal(n),
        "z": rng.standard_normal(n),
        "i": rng.integers(0, 2, size=n).astype(float),
    }
    for kind, kw in cases:
        net = perturb(build_network(kind, seed=21, **kw), seed=23)
        batch = net.prepare(frame)
        params = net.parameters()
        with ad.record():
            loss = net.joint_nll(batch)
        grads = ad.gradients(loss, params)
        bgm_ids = {id(p) for p in net.bgm.parameters()}
        bgm_hit = any(np.any(g != 0) for p, g in zip(params, grads) if id(p) in bgm_ids)
        aux_hit = any(np.any(g != 0) for p, g in zip(params, grads) if id(p) not in bgm_ids)
        assert bgm_hit, f"{kind}/{kw}: no gradient reached the outcome flow"
        if len(bgm_ids) < len(params):
            assert aux_hit, f"{kind}/{kw}: no gradient reached the auxiliary model"


# -- data plumbing ----------------------------------------------------------


def test_prepare_extracts_vector_outcomes():
    net = build_network("markovian", v_dim=2)
    frame = {"x": np.arange(4.0), "v0": np.arange(4.0), "v1": -np.arange(4.0)}
    batch = net.prepare(frame)
    assert batch["x"].shape == (4, 1)
    assert batch["v"].shape == (4, 2)
    assert np.array_equal(batch["v"][:, 1], -np.arange(4.0))
    with pytest.raises(ValueError):
        net.prepare({"x": np.arange(4.0), "v0": np.arange(4.0)})


def test_prepare_snaps_actions_to_grid():
    net = build_network("iv", i_values=range(10), x_grid=BITRATE_GRID)
    data = gen_abr_like(200, seed=0, structure="iv")
    batch = net.prepare(data)
    assert batch["i_onehot"].shape == (200, 10)
    assert np.all(batch["i_onehot"].sum(axis=1) == 1.0)
    assert np.array_equal(
        BITRATE_GRID[batch["x_idx"][:, 0]], batch["x"][:, 0])
    assert np.all(np.abs(batch["x_deq"][:, 0] - batch["x_idx"][:, 0]) <= 0.5)


def test_dequantization_is_fixed_per_seed():
    net = build_network("iv", i_values=range(10), x_grid=BITRATE_GRID, seed=6)
    data = gen_abr_like(100, seed=1, structure="iv")
    a = net.prepare(data)["x_deq"]
    b = net.prepare(data)["x_deq"]
    assert np.array_equal(a, b)


# -- sampling ---------------------------------------------------------------


def test_markovian_sampling_uses_fresh_standard_noise():
    net = build_network("markovian")
    x = np.random.default_rng(0).uniform(0, 2, size=4000)
    frame = net.sample({"x": x}, seed=5)
    assert np.array_equal(frame["x"].to_numpy(), x)
    u = frame["u_hidden"].to_numpy()
    assert abs(u.mean()) < 0.06 and abs(u.std() - 1.0) < 0.06
    # identity-initialized mechanism passes the noise straight through
    assert np.allclose(frame["v"], u, atol=1e-12)


def test_iv_sampling_lands_on_grid_and_keeps_instrument():
    net = perturb(build_network("iv", i_values=range(10), x_grid=BITRATE_GRID,
                                seed=31), seed=33)
    i = np.random.default_rng(1).integers(0, 10, size=500).astype(float)
    frame = net.sample({"i": i}, seed=2)
    assert np.array_equal(frame["i"].to_numpy(), i)
    assert np.all(np.isin(frame["x"], BITRATE_GRID))
    assert {"x", "v", "u_hidden", "i"} <= set(frame.columns)


def test_bc_sampling_carries_covariate_pairs():
    net = build_network("bc", z_dim=1)
    rng = np.random.default_rng(3)
    z = rng.standard_normal(300)
    x = rng.uniform(0.5, 2.0, size=300)
    frame = net.sample({"z": z, "x": x}, seed=7)
    assert np.array_equal(frame["z"].to_numpy(), z)
    assert np.array_equal(frame["x"].to_numpy(), x)
    assert len(frame) == 300

    more = net.sample({"z": z, "x": x}, n=1000, seed=8)
    assert len(more) == 1000
    assert set(np.round(more["x"], 12)) <= set(np.round(x, 12))


def test_bc_variant_c_sampling_generates_covariate():
    net = perturb(build_network("bc", z_dim=1, dgm_variant="c", seed=41), seed=43)
    rng = np.random.default_rng(4)
    source = {"z": rng.standard_normal(200), "x": rng.uniform(0, 1, size=200)}
    frame = net.sample(source, seed=9)
    assert "z" in frame.columns
    assert set(np.round(frame["x"], 12)) <= set(np.round(source["x"], 12))


# -- abduction and persistence -----------------------------------------------


def test_abduct_matches_bgm_inverse():
    net = perturb(build_network("markovian", seed=51), seed=53)
    x = np.full((8, 1), 0.7)
    v = np.linspace(-1, 1, 8).reshape(-1, 1)
    assert np.array_equal(net.abduct(x, v), net.bgm.inverse(x, v)[0])
    assert net.extract_bgm() is net.bgm


def test_serialization_roundtrip_bitexact(tmp_path):
    data = gen_abr_like(64, seed=2, structure="iv")
    for mode in ("flow", "categorical"):
        net = perturb(build_network("iv", i_values=range(10),
                                    x_grid=BITRATE_GRID, aux_mode=mode,
                                    seed=61), seed=63)
        path = tmp_path / f"net_{mode}.json"
        net.save(path)
        back = StructuredGenerativeNetwork.load(path)
        batch = net.prepare(data)
        assert np.array_equal(net.log_joint(batch), back.log_joint(batch))

    bc = perturb(build_network("ivbc", z_dim=1, i_values=range(10),
                               x_grid=BITRATE_GRID, seed=65), seed=67)
    doc = bc.to_dict()
    back = StructuredGenerativeNetwork.from_dict(doc)
    batch = bc.prepare(gen_abr_like(64, seed=3, structure="ivbc"))
    assert np.array_equal(bc.log_joint(batch), back.log_joint(batch))

    doc["format"] = "something.else"
    with pytest.raises(ValueError):
        StructuredGenerativeNetwork.from_dict(doc)
    doc["format"] = "bgmflow.network"
    doc["version"] = 99
    with pytest.raises(ValueError):
        StructuredGenerativeNetwork.from_dict(doc)


def test_categorical_head_roundtrip():
    head = CategoricalHead(3, 4, hidden=(8,), rng=np.random.default_rng(0))
    back = CategoricalHead.from_dict(head.to_dict())
    cond = np.random.default_rng(1).standard_normal((5, 3))
    idx = np.array([0, 1, 2, 3, 0])
    assert np.array_equal(head.log_pmf(ad.asvar(cond), idx).data,
                          back.log_pmf(ad.asvar(cond), idx).data)
