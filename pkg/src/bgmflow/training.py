"""Maximum-likelihood training loop with Adam.

Deterministic given the seed: each epoch visits a fresh permutation of
the data without replacement, and convergence triggers once the epoch
NLL stops improving by a relative tolerance over a trailing window.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite; carries the last good state."""

    def __init__(self, epoch: int, last_loss: float | None, history: list[float],
                 state: list[np.ndarray] | None):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch
        self.last_loss = last_loss
        self.history = history
        self.state = state


class Adam:
    def __init__(self, params: list[Var], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [m.tolist() for m in self.m],
            "v": [v.tolist() for v in self.v],
        }

    def load_state_dict(self, d: dict) -> None:
        self.t = d["t"]
        self.m = [np.asarray(m, dtype=np.float64) for m in d["m"]]
        self.v = [np.asarray(v, dtype=np.float64) for v in d["v"]]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_final: float | None = None
    batch_size: int = 4096
    max_epochs: int = 200
    window: int = 20
    tol: float = 1e-4
    seed: int = 0
    checkpoint_path: str | None = None
    checkpoint_every: int = 0
    history_path: str | None = None
    resume: bool = False
    verbose: bool = False


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for an epoch: constant, or a geometric decay.

    With lr_final set, the rate interpolates geometrically from lr at
    epoch 0 to lr_final at the last epoch.  A function of the epoch index
    only, so resumed runs stay on the same schedule.
    """
    if config.lr_final is None or config.max_epochs <= 1:
        return config.lr
    if config.lr_final <= 0 or config.lr <= 0:
        raise ValueError("lr and lr_final must be positive for a geometric schedule")
    frac = min(epoch, config.max_epochs - 1) / (config.max_epochs - 1)
    return config.lr * (config.lr_final / config.lr) ** frac


@dataclass
class TrainResult:
    history: list[float] = field(default_factory=list)
    epochs: int = 0
    converged: bool = False
    wall_time: float = 0.0


def nll_loss(model, batch: dict):
    """Mean negative log-likelihood of a batch as a differentiable scalar."""
    if hasattr(model, "joint_nll"):
        return model.joint_nll(batch)
    x = model._check("x", batch["x"], model.cond_dim)
    v = model._check("v", batch["v"], model.var_dim)
    return -ad.vmean(model._log_density(x, v))


def write_history(path, history: list[float]) -> None:
    lines = ["epoch,nll"] + [f"{i},{h!r}" for i, h in enumerate(history)]
    Path(path).write_text("\n".join(lines) + "\n")


def _save_checkpoint(path, model, adam: Adam, rng: np.random.Generator,
                     epoch: int, history: list[float]) -> None:
    doc = {
        "epoch": epoch,
        "params": [p.data.tolist() for p in model.parameters()],
        "adam": adam.state_dict(),
        "rng": rng.bit_generator.state,
        "history": history,
    }
    Path(path).write_text(json.dumps(doc))


def train(model, data, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit a model exposing joint_nll/parameters on column data.

    ``data`` is a mapping of column name to array (or anything the
    model's ``prepare`` accepts).  Raises TrainingDivergedError on a
    non-finite loss, carrying the last finite epoch state.
    """
    if hasattr(model, "prepare"):
        arrays = model.prepare(data)
    else:
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in dict(data).items()}
    n = len(next(iter(arrays.values())))
    if n == 0:
        raise ValueError("cannot train on an empty dataset")

    params = model.parameters()
    adam = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history: list[float] = []
    start_epoch = 0

    if config.resume and config.checkpoint_path and Path(config.checkpoint_path).exists():
        doc = json.loads(Path(config.checkpoint_path).read_text())
        for p, saved in zip(params, doc["params"]):
            p.data = np.asarray(saved, dtype=np.float64)
        adam.load_state_dict(doc["adam"])
        rng.bit_generator.state = doc["rng"]
        history = list(doc["history"])
        start_epoch = doc["epoch"]

    snapshot = [p.data.copy() for p in params]
    last_finite: float | None = history[-1] if history else None
    t0 = time.perf_counter()
    result = TrainResult(history=history)

    for epoch in range(start_epoch, config.max_epochs):
        adam.lr = lr_at(config, epoch)
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            sel = perm[lo : lo + config.batch_size]
            batch = {k: a[sel] for k, a in arrays.items()}
            with ad.record():
                loss = nll_loss(model, batch)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, last_finite, history, snapshot)
            last_finite = value
            ad.gradients(loss, params)
            adam.step()
            total += value * len(sel)
        history.append(total / n)
        snapshot = [p.data.copy() for p in params]
        if config.verbose:
            print(f"epoch {epoch}: nll {history[-1]:.6f}")

        if config.checkpoint_every and config.checkpoint_path:
            if (epoch + 1) % config.checkpoint_every == 0:
                _save_checkpoint(config.checkpoint_path, model, adam, rng,
                                 epoch + 1, history)
        if config.history_path:
            write_history(config.history_path, history)

        if len(history) > config.window:
            before = history[-config.window - 1]
            if (before - history[-1]) < config.tol * max(1.0, abs(before)):
                result.converged = True
                break

    result.epochs = len(history)
    result.wall_time = time.perf_counter() - t0
    return result
