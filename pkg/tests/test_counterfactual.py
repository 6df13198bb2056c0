"""Counterfactual engine: abduction round trips, sweeps, the quantile oracle."""

import numpy as np
import pytest

from bgmflow.counterfactual import (
    CounterfactualQuery,
    abduct,
    answer_query,
    ett_counterfactuals,
    match_window,
    point_counterfactual,
    quantile_oracle,
    sweep,
)
from bgmflow.flows import build_flow


def perturbed_flow(cond_dim=1, var_dim=1, seed=0, scale=0.1):
    flow = build_flow(cond_dim, var_dim, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in flow.parameters():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)
    return flow


def test_consistency_null_action_returns_evidence():
    flow = perturbed_flow(seed=1)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 2, size=(40, 1))
    v = rng.uniform(-2, 2, size=(40, 1))
    vn = point_counterfactual(flow, x, v, x)
    assert np.allclose(vn, v, atol=1e-6)


def test_involution_round_trips_through_the_action():
    flow = perturbed_flow(seed=2)
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 2, size=(40, 1))
    v = rng.uniform(-2, 2, size=(40, 1))
    xn = rng.uniform(0, 2, size=(40, 1))
    vn = point_counterfactual(flow, x, v, xn)
    back = point_counterfactual(flow, xn, vn, x)
    assert np.allclose(back, v, atol=1e-6)


@pytest.mark.parametrize("var_dim", [1, 2])
def test_point_counterfactual_matches_manual_assembly(var_dim):
    flow = perturbed_flow(var_dim=var_dim, seed=3)
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 2, size=(16, 1))
    v = rng.uniform(-1.5, 1.5, size=(16, var_dim))
    xn = rng.uniform(0, 2, size=(16, 1))
    manual = flow.forward(xn, flow.inverse(x, v)[0])[0]
    assert np.array_equal(point_counterfactual(flow, x, v, xn), manual)
    assert np.array_equal(abduct(flow, x, v), flow.inverse(x, v)[0])


def test_single_action_broadcasts_over_evidence():
    flow = perturbed_flow(seed=4)
    x = np.linspace(0, 2, 10).reshape(-1, 1)
    v = np.linspace(-1, 1, 10).reshape(-1, 1)
    a = point_counterfactual(flow, x, v, [[0.7]])
    b = point_counterfactual(flow, x, v, np.full((10, 1), 0.7))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        point_counterfactual(flow, x, v, np.full((3, 1), 0.7))


def test_sweep_stacks_point_answers():
    flow = perturbed_flow(seed=5)
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 2, size=(7, 1))
    v = rng.uniform(-1, 1, size=(7, 1))
    grid = np.array([[0.1], [0.9], [1.8]])
    cube = sweep(flow, x, v, grid)
    assert cube.shape == (7, 3, 1)
    for j in range(3):
        point = point_counterfactual(flow, x, v, grid[[j]])
        assert np.array_equal(cube[:, j], point)


def test_match_window_exact_and_tolerant():
    x = np.array([0.5, 1.0, 0.5, 2.0, 0.5000001])
    assert np.array_equal(match_window(x, 0.5), [0, 2])
    assert np.array_equal(match_window(x, 0.5, window=1e-3), [0, 2, 4])
    assert len(match_window(x, 9.0)) == 0


def test_ett_counterfactuals_selects_subgroup():
    flow = perturbed_flow(seed=6)
    rng = np.random.default_rng(4)
    x = rng.choice([0.5, 1.0, 2.0], size=200)
    v = rng.uniform(-1, 1, size=200)
    frame = ett_counterfactuals(flow, x, v, x_value=1.0, x_new=2.0)
    assert set(frame.columns) == {"row", "v_obs", "u_hat", "v_new"}
    assert len(frame) == int(np.sum(x == 1.0))
    assert np.array_equal(frame["v_obs"], v[x == 1.0])
    expected = point_counterfactual(flow, x[x == 1.0], v[x == 1.0], [[2.0]])
    assert np.array_equal(frame["v_new"].to_numpy(), expected[:, 0])
    with pytest.raises(ValueError):
        ett_counterfactuals(flow, x, v, x_value=9.0, x_new=1.0)


def _monotone_scalar_data(n, seed, decreasing=False):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 2.0, size=n)
    u = rng.uniform(0.0, 1.0, size=n)
    v = (1.0 + x) * (1.0 - u if decreasing else u)
    return x, u, v


@pytest.mark.parametrize("decreasing", [False, True])
def test_quantile_oracle_recovers_closed_form(decreasing):
    x, u, v = _monotone_scalar_data(100000, seed=7, decreasing=decreasing)
    take = np.arange(40)
    keep = (v[take] / (1.0 + x[take]) > 0.2) & (v[take] / (1.0 + x[take]) < 0.8)
    idx = take[keep]
    x_new = 2.0 - x[idx]
    truth = v[idx] * (1.0 + x_new) / (1.0 + x[idx])
    got = quantile_oracle(x, v, x[idx], v[idx], x_new)
    mape = np.mean(np.abs(got - truth) / np.abs(truth))
    assert mape < 0.08, f"quantile oracle MAPE {mape:.4f}"


def test_quantile_oracle_refuses_thin_data():
    x, _, v = _monotone_scalar_data(30, seed=8)
    with pytest.raises(ValueError):
        quantile_oracle(x, v, [1.0], [1.0], [1.5])


def test_quantile_oracle_default_window_size():
    x, _, v = _monotone_scalar_data(60, seed=9)
    out = quantile_oracle(x, v, [1.0], [1.2], [1.1])  # k = max(50, 0.6) = 50
    assert out.shape == (1,)
    assert np.isfinite(out[0])


def test_query_json_roundtrip(tmp_path):
    q = CounterfactualQuery([0.5, 1.5], [0.1, -0.2], [2.0], mode="paired")
    path = tmp_path / "query.json"
    q.to_json(path)
    back = CounterfactualQuery.from_json(path)
    assert np.array_equal(back.x_obs, q.x_obs)
    assert np.array_equal(back.v_obs, q.v_obs)
    assert np.array_equal(back.x_new, q.x_new)
    assert back.mode == "paired"

    path.write_text('{"evidence": {"x": [1], "v": [1]}}')
    with pytest.raises(ValueError):
        CounterfactualQuery.from_json(path)
    with pytest.raises(ValueError):
        CounterfactualQuery([1.0], [1.0], [1.0], mode="grid")


def test_answer_query_paired_and_sweep():
    flow = perturbed_flow(seed=10)
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 2, size=4)
    v = rng.uniform(-1, 1, size=4)

    paired = answer_query(flow, CounterfactualQuery(x, v, [0.3]))
    assert list(paired.columns) == ["row", "x_new", "u_hat", "v_new"]
    assert len(paired) == 4
    assert np.all(paired["x_new"] == 0.3)
    expected = point_counterfactual(flow, x, v, [[0.3]])
    assert np.array_equal(paired["v_new"].to_numpy(), expected[:, 0])

    grid = np.array([0.2, 1.0, 1.9])
    swept = answer_query(flow, CounterfactualQuery(x, v, grid, mode="sweep"))
    assert len(swept) == 12
    assert np.array_equal(swept["row"].to_numpy(), np.repeat(np.arange(4), 3))
    cube = sweep(flow, x, v, grid)
    assert np.array_equal(swept["v_new"].to_numpy(), cube.reshape(-1))
