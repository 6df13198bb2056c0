"""High-level estimator: fit a causal mechanism from a table, query it.

Wraps network assembly, training and the abduction-action-prediction
loop behind one object with sklearn-style hyperparameter handling, so a
whole study is:

    est = BgmEstimator(structure="bc").fit(frame)
    v_new = est.counterfactual(x_obs, v_obs, x_new)
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .counterfactual import ett_counterfactuals, point_counterfactual, sweep
from .networks import KINDS, StructuredGenerativeNetwork, build_network
from .training import TrainConfig, train


def _dim_of(frame, base: str) -> int:
    if base in frame.columns:
        return 1
    d = 0
    while f"{base}{d}" in frame.columns:
        d += 1
    return d


def _block(frame, base: str, dim: int) -> np.ndarray:
    names = [base] if dim == 1 and base in frame.columns else [
        f"{base}{j}" for j in range(dim)]
    return np.column_stack(
        [np.asarray(frame[c], dtype=np.float64) for c in names])


class BgmEstimator(BaseEstimator):
    """Bijective-mechanism learner over a tabular dataset.

    structure selects the assumed causal wiring (markovian, iv, bc or
    ivbc); columns are discovered by name (x/x0.., v/v0.., z/z0.., i).
    All constructor arguments are hyperparameters in the sklearn sense:
    stored verbatim, validated in fit.
    """

    def __init__(self, structure: str = "markovian", dgm_variant: str = "a",
                 bins: int = 16, bound: float = 3.0,
                 hidden: tuple[int, ...] = (64, 64), layers: int | None = None,
                 aux_mode: str = "flow", lr: float = 1e-3,
                 lr_final: float | None = None, batch_size: int = 4096,
                 max_epochs: int = 200, window: int = 20, tol: float = 1e-4,
                 seed: int = 0, verbose: bool = False):
        self.structure = structure
        self.dgm_variant = dgm_variant
        self.bins = bins
        self.bound = bound
        self.hidden = hidden
        self.layers = layers
        self.aux_mode = aux_mode
        self.lr = lr
        self.lr_final = lr_final
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.window = window
        self.tol = tol
        self.seed = seed
        self.verbose = verbose

    # -- training ------------------------------------------------------------

    def _train_config(self, **overrides) -> TrainConfig:
        base = dict(lr=self.lr, lr_final=self.lr_final,
                    batch_size=self.batch_size, max_epochs=self.max_epochs,
                    window=self.window, tol=self.tol, seed=self.seed,
                    verbose=self.verbose)
        base.update(overrides)
        return TrainConfig(**base)

    def fit(self, data, checkpoint_path=None, checkpoint_every: int = 0,
            history_path=None, resume: bool = False) -> "BgmEstimator":
        """Train on a data frame (or Dataset); returns self.

        The optional paths stream checkpoints and the loss history to
        disk during the run; resume picks an interrupted run back up.
        """
        frame = getattr(data, "frame", data)
        if self.structure not in KINDS:
            raise ValueError(
                f"structure must be one of {KINDS}, got {self.structure!r}")
        x_dim = _dim_of(frame, "x")
        v_dim = _dim_of(frame, "v")
        if x_dim == 0 or v_dim == 0:
            raise ValueError("data needs x and v columns (x/x0.., v/v0..)")
        z_dim = _dim_of(frame, "z")
        if self.structure in ("bc", "ivbc") and z_dim == 0:
            raise ValueError(f"{self.structure} needs a z column")
        i_values = x_grid = None
        if self.structure in ("iv", "ivbc"):
            if "i" not in frame.columns:
                raise ValueError(f"{self.structure} needs an i column")
            i_values = np.unique(np.asarray(frame["i"], dtype=np.float64))
        if self.structure == "iv":
            x_grid = np.unique(np.asarray(frame["x"], dtype=np.float64))

        v = _block(frame, "v", v_dim)
        self.network_ = build_network(
            self.structure, x_dim=x_dim, v_dim=v_dim, z_dim=z_dim,
            i_values=i_values, x_grid=x_grid, bin_count=self.bins,
            bound=self.bound, hidden=tuple(self.hidden),
            bgm_layers=self.layers, aux_mode=self.aux_mode,
            dgm_variant=self.dgm_variant, v_loc=v.mean(axis=0),
            v_scale=np.maximum(v.std(axis=0), 1e-12), seed=self.seed)
        config = self._train_config(
            checkpoint_path=checkpoint_path, checkpoint_every=checkpoint_every,
            history_path=history_path, resume=resume)
        self.result_ = train(self.network_, frame, config)
        self.x_dim_, self.v_dim_, self.z_dim_ = x_dim, v_dim, z_dim
        self._fit_x = _block(frame, "x", x_dim)
        self._fit_v = v
        return self

    def _require_fit(self) -> StructuredGenerativeNetwork:
        if not hasattr(self, "network_"):
            raise RuntimeError("estimator is not fitted; call fit first")
        return self.network_

    # -- queries ---------------------------------------------------------------

    def abduct(self, x_obs, v_obs) -> np.ndarray:
        """Noise encodings recovered from observed action/outcome rows."""
        net = self._require_fit()
        return net.abduct(np.atleast_2d(np.asarray(x_obs, dtype=np.float64)),
                          np.atleast_2d(np.asarray(v_obs, dtype=np.float64)))

    def counterfactual(self, x_obs, v_obs, x_new) -> np.ndarray:
        """Outcome each evidence row would have shown under action x_new."""
        net = self._require_fit()
        return point_counterfactual(net.extract_bgm(), x_obs, v_obs, x_new)

    def sweep(self, x_obs, v_obs, x_values) -> np.ndarray:
        """Counterfactual outcomes of every evidence row under every action."""
        net = self._require_fit()
        return sweep(net.extract_bgm(), x_obs, v_obs, x_values)

    def ett(self, x_value: float, x_new: float, data=None,
            window: float | None = None):
        """Counterfactual table for the rows observed at action x_value.

        data defaults to the rows the estimator was fitted on.
        """
        net = self._require_fit()
        if data is None:
            if not hasattr(self, "_fit_x"):
                raise ValueError("no stored training rows (model was loaded "
                                 "from disk); pass data explicitly")
            x, v = self._fit_x, self._fit_v
        else:
            frame = getattr(data, "frame", data)
            x = _block(frame, "x", self.x_dim_)
            v = _block(frame, "v", self.v_dim_)
        return ett_counterfactuals(net.extract_bgm(), x, v, x_value, x_new,
                                   window=window)

    def sample(self, conditions, n: int | None = None, seed: int = 0):
        """Synthetic records from the fitted structure (see network.sample)."""
        return self._require_fit().sample(conditions, n=n, seed=seed)

    def score(self, data) -> float:
        """Mean log joint per row; higher is better (sklearn convention)."""
        net = self._require_fit()
        return float(np.mean(net.log_joint(net.prepare(data))))

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        doc = {"params": {k: (list(v) if isinstance(v, tuple) else v)
                          for k, v in self.get_params().items()},
               "network": self._require_fit().to_dict()}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "BgmEstimator":
        doc = json.loads(Path(path).read_text())
        params = dict(doc["params"])
        if isinstance(params.get("hidden"), list):
            params["hidden"] = tuple(params["hidden"])
        est = cls(**params)
        est.network_ = StructuredGenerativeNetwork.from_dict(doc["network"])
        est.x_dim_ = est.network_.x_dim
        est.v_dim_ = est.network_.v_dim
        est.z_dim_ = est.network_.z_dim
        return est
