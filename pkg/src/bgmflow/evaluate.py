"""Counterfactual accuracy metrics against ground-truth mechanisms.

Both evaluations run the full abduction-action-prediction loop on
held-out rows and score it against the closed-form answer of the
generating mechanism.  The baselines are the methods the metrics are
designed to expose: structure-blind conditional generators that resample
the outcome instead of carrying the evidence row's noise (ellipse), and
replaying the observed outcome as if the action had no effect (bitrate
benchmark).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .counterfactual import point_counterfactual, sweep
from .flows import build_flow
from .scm import BITRATE_GRID, abr_true_counterfactual, ellipse_true_counterfactual
from .training import TrainConfig, train

MAPE_FLOOR = 1e-6


class OracleUnavailableError(ValueError):
    """Raised when a dataset lacks the ground-truth columns an oracle needs."""


@dataclass
class MetricsReport:
    scheme: str
    mape: float | None = None
    normalized_mse: float | None = None
    baselines: dict = field(default_factory=dict)
    schemes: dict = field(default_factory=dict)
    n_rows: int = 0
    sweep_k: int | None = None
    wall_time_s: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "mape": self.mape,
            "normalized_mse": self.normalized_mse,
            "baselines": self.baselines,
            "schemes": self.schemes,
            "n_rows": self.n_rows,
            "sweep_k": self.sweep_k,
            "wall_time_s": self.wall_time_s,
            "seed": self.seed,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _as_bgm(model):
    return model.extract_bgm() if hasattr(model, "extract_bgm") else model


def _scheme(model) -> str:
    return getattr(model, "kind", "bgm")


def _require(frame, columns, what: str) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise OracleUnavailableError(
            f"{what} needs ground-truth columns {missing}; "
            "only synthetic datasets carry them")


def _mape(pred: np.ndarray, truth: np.ndarray) -> float:
    denom = np.maximum(np.abs(truth), MAPE_FLOOR)
    return float(np.mean(np.abs(pred - truth) / denom) * 100.0)


def fit_baseline_cgms(reference, config: TrainConfig | None = None,
                      seed: int = 0) -> dict:
    """Train the structure-blind reference generators for eval_ellipse.

    baseline-x fits the outcome given the action alone, baseline-xz
    given action and covariate.  Same flow family as the causal model;
    the only difference is what they condition on and that evaluation
    samples them instead of abducting noise.
    """
    x = np.asarray(reference["x"], dtype=np.float64)
    z = np.asarray(reference["z"], dtype=np.float64)
    v = np.column_stack([reference["v0"], reference["v1"]]).astype(np.float64)
    if config is None:
        config = TrainConfig(lr=3e-3, lr_final=1e-3, batch_size=1024,
                             max_epochs=40, window=40, tol=0.0, seed=seed)
    loc, scale = v.mean(axis=0), v.std(axis=0)
    cgm_x = build_flow(1, 2, out_loc=loc, out_scale=scale, seed=seed + 1)
    cgm_xz = build_flow(2, 2, out_loc=loc, out_scale=scale, seed=seed + 2)
    train(cgm_x, {"x": x[:, None], "v": v}, config)
    train(cgm_xz, {"x": np.column_stack([x, z]), "v": v}, config)
    return {"baseline-x": cgm_x, "baseline-xz": cgm_xz}


def eval_ellipse(model, frame, sweep_k: int = 64, actions=None, reference=None,
                 include_baselines: bool = True, baseline_models: dict | None = None,
                 baseline_config: TrainConfig | None = None,
                 seed: int = 0) -> MetricsReport:
    """Percent error of counterfactual outcome sweeps on held-out rows.

    Every evidence row is pushed through each action on the sweep grid
    and compared against the closed-form answer.  actions="observed"
    replays each row's own action instead (a consistency probe: any
    invertible mechanism must return the observed outcome).  Baselines
    are conditional generators with no causal structure, trained on
    `reference` rows (the evaluation frame itself by default) and freshly
    sampled at each new action; pass baseline_models to reuse fitted ones.
    """
    start = time.perf_counter()
    _require(frame, ("u0_hidden", "u1_hidden"), "ellipse evaluation")
    bgm = _as_bgm(model)
    x = np.asarray(frame["x"], dtype=np.float64)
    v = np.column_stack([frame["v0"], frame["v1"]]).astype(np.float64)
    n = len(x)
    rng = np.random.default_rng(seed)

    if isinstance(actions, str) and actions == "observed":
        grid = None
        answers = point_counterfactual(bgm, x[:, None], v, x[:, None])[:, None, :]
        truth = v[:, None, :]
        k = 1
    else:
        if actions is None:
            grid = (np.arange(sweep_k) + 0.5) / sweep_k * 2.0 * np.pi
        else:
            grid = np.asarray(actions, dtype=np.float64).ravel()
        k = len(grid)
        answers = sweep(bgm, x[:, None], v, grid[:, None])
        truth = ellipse_true_counterfactual(
            x[:, None], v[:, None, :], grid[None, :])

    report = MetricsReport(scheme=_scheme(model), mape=_mape(answers, truth),
                           n_rows=n, sweep_k=k, seed=seed)

    if include_baselines and grid is not None:
        if baseline_models is None:
            ref = frame if reference is None else reference
            baseline_models = fit_baseline_cgms(ref, baseline_config, seed)
        z = np.asarray(frame["z"], dtype=np.float64)
        base_x = np.empty((n, k, 2))
        base_xz = np.empty((n, k, 2))
        for j, xp in enumerate(grid):
            base_x[:, j, :] = baseline_models["baseline-x"].sample(
                np.full((n, 1), xp), rng)
            base_xz[:, j, :] = baseline_models["baseline-xz"].sample(
                np.column_stack([np.full(n, xp), z]), rng)
        report.baselines = {
            "baseline-x": _mape(base_x, truth),
            "baseline-xz": _mape(base_xz, truth),
        }

    report.wall_time_s = time.perf_counter() - start
    return report


def eval_abr(model, frame, x_new=None, seed: int = 0) -> MetricsReport:
    """Counterfactual throughput error as a percentage of biased replay.

    The benchmark mistake this measures is assuming the action does not
    affect the outcome: the replay baseline predicts the observed value
    unchanged and defines 100%.  x_new defaults to one uniformly random
    grid bitrate per row; a scalar or per-row array overrides it.
    """
    start = time.perf_counter()
    _require(frame, ("u_hidden",), "bitrate evaluation")
    bgm = _as_bgm(model)
    x = np.asarray(frame["x"], dtype=np.float64)
    v = np.asarray(frame["v"], dtype=np.float64)
    n = len(x)
    rng = np.random.default_rng(seed)

    if x_new is None:
        x_new = rng.choice(BITRATE_GRID, size=n)
    else:
        x_new = np.broadcast_to(
            np.asarray(x_new, dtype=np.float64).ravel(), (n,)).copy()

    answers = point_counterfactual(bgm, x[:, None], v[:, None], x_new[:, None])[:, 0]
    truth = abr_true_counterfactual(x, v, x_new)
    mse_model = float(np.mean((answers - truth) ** 2))
    mse_replay = float(np.mean((v - truth) ** 2))
    if mse_replay <= max(1e-30, 1e-18 * float(np.mean(v * v))):
        raise ValueError("replay baseline MSE is zero: the probe actions "
                         "never move the outcome, nothing to normalize by")

    kind = _scheme(model)
    value = 100.0 * mse_model / mse_replay
    return MetricsReport(scheme=kind, normalized_mse=value,
                         baselines={"replay": 100.0}, schemes={kind: value},
                         n_rows=n, wall_time_s=time.perf_counter() - start,
                         seed=seed)
