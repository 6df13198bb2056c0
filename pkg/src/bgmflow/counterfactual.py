"""Counterfactual queries: abduction, action, prediction.

Given a fitted outcome mechanism and observed evidence (x, v), the noise
u is abducted by inverting the mechanism at x, the action replaces x
with x', and the prediction pushes the same u forward through the
mechanism at x'.  A model-free quantile oracle provides reference
answers on scalar outcomes directly from observational data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd


def _rows(arr, dim: int, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim == 0:
        out = out.reshape(1, 1)
    elif out.ndim == 1:
        out = out[:, None] if dim == 1 else out[None, :]
    if out.ndim != 2 or out.shape[1] != dim:
        raise ValueError(f"{name} must have shape (n, {dim}), got {np.shape(arr)}")
    return out


def abduct(bgm, x_obs, v_obs) -> np.ndarray:
    """Noise values that reproduce the evidence under the mechanism."""
    x = _rows(x_obs, bgm.cond_dim, "x_obs")
    v = _rows(v_obs, bgm.var_dim, "v_obs")
    if len(x) != len(v):
        raise ValueError("x_obs and v_obs must have the same number of rows")
    return bgm.inverse(x, v)[0]


def point_counterfactual(bgm, x_obs, v_obs, x_new) -> np.ndarray:
    """Outcome each evidence row would have shown under action x_new."""
    x = _rows(x_obs, bgm.cond_dim, "x_obs")
    u = abduct(bgm, x, v_obs)
    xn = _rows(x_new, bgm.cond_dim, "x_new")
    if len(xn) == 1 and len(x) > 1:
        xn = np.repeat(xn, len(x), axis=0)
    if len(xn) != len(x):
        raise ValueError("x_new must broadcast against the evidence rows")
    return bgm.forward(xn, u)[0]


def sweep(bgm, x_obs, v_obs, x_values) -> np.ndarray:
    """Counterfactual outcomes on a grid of actions, per evidence row.

    Returns an array of shape (n_evidence, n_actions, v_dim).
    """
    x = _rows(x_obs, bgm.cond_dim, "x_obs")
    u = abduct(bgm, x, v_obs)
    grid = _rows(x_values, bgm.cond_dim, "x_values")
    n, k = len(x), len(grid)
    xn = np.repeat(grid, n, axis=0)
    un = np.tile(u, (k, 1))
    out = bgm.forward(xn, un)[0]
    return out.reshape(k, n, bgm.var_dim).transpose(1, 0, 2)


def match_window(x_data, x_value: float, window: float | None = None) -> np.ndarray:
    """Indices of rows whose action matches x_value.

    window=None means exact match (discrete action grids); otherwise
    rows within |x - x_value| <= window are kept.
    """
    x = np.asarray(x_data, dtype=np.float64).ravel()
    tol = 1e-9 if window is None else float(window)
    return np.flatnonzero(np.abs(x - float(x_value)) <= tol)


def ett_counterfactuals(bgm, x_data, v_data, x_value: float, x_new: float,
                        window: float | None = None) -> pd.DataFrame:
    """Counterfactuals for the subgroup observed at action x_value.

    Answers "what would the rows treated at x_value have shown under
    x_new"; rows are selected by match_window.
    """
    idx = match_window(x_data, x_value, window)
    if len(idx) == 0:
        raise ValueError(f"no rows observed at action {x_value}")
    x = _rows(np.asarray(x_data)[idx], bgm.cond_dim, "x_data")
    v = _rows(np.asarray(v_data)[idx], bgm.var_dim, "v_data")
    u = abduct(bgm, x, v)
    vn = bgm.forward(np.full_like(x, x_new), u)[0]
    out = {"row": idx}
    for j in range(bgm.var_dim):
        tag = "" if bgm.var_dim == 1 else str(j)
        out[f"v_obs{tag}"] = v[:, j]
        out[f"u_hat{tag}"] = u[:, j]
        out[f"v_new{tag}"] = vn[:, j]
    return pd.DataFrame(out)


def quantile_oracle(x_data, v_data, x_obs, v_obs, x_new,
                    k: int | None = None) -> np.ndarray:
    """Model-free counterfactual estimates for scalar monotone mechanisms.

    When the outcome is monotone in a scalar noise with consistent
    orientation across actions and the noise is independent of the
    action, the counterfactual preserves the conditional quantile: the
    rank of v among outcomes observed near x_obs is looked up in the
    outcome window near x_new.  k defaults to max(50, n/100) nearest
    neighbours; fewer than 50 data rows is refused as insufficient
    support.
    """
    x = np.asarray(x_data, dtype=np.float64).ravel()
    v = np.asarray(v_data, dtype=np.float64).ravel()
    if x.shape != v.shape:
        raise ValueError("x_data and v_data must have equal length")
    n = len(x)
    if n < 50:
        raise ValueError(f"quantile oracle needs at least 50 rows, got {n}")
    if k is None:
        k = max(50, int(round(n / 100)))
    k = min(k, n)

    xo = np.atleast_1d(np.asarray(x_obs, dtype=np.float64)).ravel()
    vo = np.atleast_1d(np.asarray(v_obs, dtype=np.float64)).ravel()
    xn = np.atleast_1d(np.asarray(x_new, dtype=np.float64)).ravel()
    if not (len(xo) == len(vo) == len(xn)):
        raise ValueError("x_obs, v_obs and x_new must have equal length")

    out = np.empty(len(xo))
    for q in range(len(xo)):
        near_obs = np.argpartition(np.abs(x - xo[q]), k - 1)[:k]
        rank = np.mean(v[near_obs] <= vo[q])
        near_new = np.argpartition(np.abs(x - xn[q]), k - 1)[:k]
        out[q] = np.quantile(v[near_new], rank)
    return out


@dataclass
class CounterfactualQuery:
    """Evidence rows plus the action(s) to impose on them.

    mode "paired" applies x_new row-wise (a single action row broadcasts
    to all evidence); mode "sweep" evaluates every evidence row under
    every action row.
    """

    x_obs: np.ndarray
    v_obs: np.ndarray
    x_new: np.ndarray
    mode: str = "paired"

    def __post_init__(self):
        self.x_obs = np.atleast_1d(np.asarray(self.x_obs, dtype=np.float64))
        self.v_obs = np.atleast_1d(np.asarray(self.v_obs, dtype=np.float64))
        self.x_new = np.atleast_1d(np.asarray(self.x_new, dtype=np.float64))
        if self.mode not in ("paired", "sweep"):
            raise ValueError(f"mode must be paired or sweep, got {self.mode!r}")

    def to_json(self, path) -> None:
        doc = {
            "evidence": {"x": self.x_obs.tolist(), "v": self.v_obs.tolist()},
            "do": {"x": self.x_new.tolist()},
            "mode": self.mode,
        }
        Path(path).write_text(json.dumps(doc, indent=2))

    @classmethod
    def from_json(cls, path) -> "CounterfactualQuery":
        doc = json.loads(Path(path).read_text())
        for key in ("evidence", "do"):
            if key not in doc:
                raise ValueError(f"query file is missing the {key!r} section")
        return cls(doc["evidence"]["x"], doc["evidence"]["v"],
                   doc["do"]["x"], doc.get("mode", "paired"))


def answer_query(bgm, query: CounterfactualQuery) -> pd.DataFrame:
    """Evaluate a query against a mechanism; one output row per answer."""
    x = _rows(query.x_obs, bgm.cond_dim, "evidence x")
    v = _rows(query.v_obs, bgm.var_dim, "evidence v")
    u = abduct(bgm, x, v)

    def frame(rows, xn, vn, un):
        out = {"row": rows}
        for j in range(bgm.cond_dim):
            tag = "" if bgm.cond_dim == 1 else str(j)
            out[f"x_new{tag}"] = xn[:, j]
        for j in range(bgm.var_dim):
            tag = "" if bgm.var_dim == 1 else str(j)
            out[f"u_hat{tag}"] = un[:, j]
            out[f"v_new{tag}"] = vn[:, j]
        return pd.DataFrame(out)

    if query.mode == "paired":
        vn = point_counterfactual(bgm, x, v, query.x_new)
        xn = _rows(query.x_new, bgm.cond_dim, "x_new")
        if len(xn) == 1:
            xn = np.repeat(xn, len(x), axis=0)
        return frame(np.arange(len(x)), xn, vn, u)

    grid = _rows(query.x_new, bgm.cond_dim, "x_new")
    cube = sweep(bgm, x, v, grid)
    rows = np.repeat(np.arange(len(x)), len(grid))
    xn = np.tile(grid, (len(x), 1))
    vn = cube.reshape(len(x) * len(grid), bgm.var_dim)
    un = np.repeat(u, len(grid), axis=0)
    return frame(rows, xn, vn, un)
