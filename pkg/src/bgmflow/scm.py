"""Ground-truth synthetic structural models and dataset handling.

Every generator records the hidden exogenous draw alongside the
observed columns so that true counterfactuals are available to
evaluations.  Datasets are written as CSV plus a JSON sidecar carrying
provenance; the column order is instrument, confounder proxy, action,
outcome, hidden noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

COLUMN_ORDER = ["i", "z", "x", "v", "v0", "v1", "u_hidden", "u0_hidden", "u1_hidden"]


@dataclass
class Dataset:
    """Tabular draw from a generator plus its provenance."""

    frame: pd.DataFrame
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.frame)

    def columns(self, *names: str) -> np.ndarray:
        return self.frame[list(names)].to_numpy(dtype=np.float64)

    def save(self, basepath) -> None:
        base = Path(basepath)
        base.parent.mkdir(parents=True, exist_ok=True)
        ordered = [c for c in COLUMN_ORDER if c in self.frame.columns]
        ordered += [c for c in self.frame.columns if c not in ordered]
        # %.17g keeps every float64 bit-exact through the text roundtrip
        self.frame[ordered].to_csv(base.with_suffix(".csv"), index=False,
                                   float_format="%.17g")
        sidecar = dict(self.meta)
        sidecar["columns"] = ordered
        sidecar["n"] = self.n
        base.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, basepath) -> "Dataset":
        base = Path(basepath)
        frame = pd.read_csv(base.with_suffix(".csv"), float_precision="round_trip")
        meta = json.loads(base.with_suffix(".json").read_text())
        return cls(frame, meta)


@dataclass
class GroundTruthSCM:
    """Callable bundle describing one synthetic benchmark."""

    name: str
    v_dim: int
    sample: Callable[..., Dataset]
    true_counterfactual: Callable[..., np.ndarray]
    true_inverse: Callable[..., np.ndarray]
    sample_do: Callable[..., Dataset]
    x_grid: np.ndarray | None = None


_REGISTRY: dict[str, GroundTruthSCM] = {}


def get_scm(name: str) -> GroundTruthSCM:
    if name not in _REGISTRY:
        raise KeyError(f"unknown SCM {name!r}; available: {sorted(_REGISTRY)}")
    return _REGISTRY[name]


def _register(scm: GroundTruthSCM) -> GroundTruthSCM:
    _REGISTRY[scm.name] = scm
    return scm


# -- ellipse benchmark ----------------------------------------------------
#
# Two-dimensional outcome traced on an ellipse-like figure:
#   Z  ~ U(-0.5, 0.5)
#   X  = (1.44254843 Z + 0.59701923 + eps_x) mod 2 pi,  eps_x ~ N(0, 1)
#   U0 = exp(1.64985274 Z + 0.2656131) + eps_0,         eps_0 ~ U(0, 1)
#   U1 = U0 (1 + eps_1 exp(1.61323358 Z - 0.18070237)), eps_1 ~ Exp(1)
#   V0 = U0 (2 + sin X)
#   V1 = U1 (2 + cos X)
# The confounder Z drives both the action X and the outcome noise, and
# the map u -> v is strictly increasing in each coordinate for every x.

_EL_A_X, _EL_B_X = 1.44254843, 0.59701923
_EL_A_0, _EL_B_0 = 1.64985274, 0.2656131
_EL_A_1, _EL_B_1 = 1.61323358, -0.18070237


def _ellipse_exogenous(n: int, rng: np.random.Generator):
    z = rng.uniform(-0.5, 0.5, size=n)
    eps_x = rng.standard_normal(n)
    eps_0 = rng.uniform(0.0, 1.0, size=n)
    eps_1 = rng.standard_exponential(n)
    u0 = np.exp(_EL_A_0 * z + _EL_B_0) + eps_0
    u1 = u0 * (1.0 + eps_1 * np.exp(_EL_A_1 * z + _EL_B_1))
    return z, eps_x, u0, u1


def _ellipse_outcome(x: np.ndarray, u0: np.ndarray, u1: np.ndarray):
    return u0 * (2.0 + np.sin(x)), u1 * (2.0 + np.cos(x))


def gen_ellipse(n: int, seed: int = 0, shuffle_x: bool = False) -> Dataset:
    """Confounded ellipse draw; shuffle_x breaks the X dependence while
    keeping the outcome mechanism intact (X becomes exogenous)."""
    rng = np.random.default_rng(seed)
    z, eps_x, u0, u1 = _ellipse_exogenous(n, rng)
    x = np.mod(_EL_A_X * z + _EL_B_X + eps_x, 2.0 * np.pi)
    if shuffle_x:
        x = rng.permutation(x)
    v0, v1 = _ellipse_outcome(x, u0, u1)
    frame = pd.DataFrame(
        {"z": z, "x": x, "v0": v0, "v1": v1, "u0_hidden": u0, "u1_hidden": u1}
    )
    meta = {"scm": "ellipse", "seed": seed, "shuffle_x": shuffle_x,
            "structure": "markovian" if shuffle_x else "bc"}
    return Dataset(frame, meta)


def ellipse_true_counterfactual(x, v, x_prime) -> np.ndarray:
    """Closed-form answer: invert at (x, v), push through x_prime."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x_prime = np.asarray(x_prime, dtype=np.float64)
    u0 = v[..., 0] / (2.0 + np.sin(x))
    u1 = v[..., 1] / (2.0 + np.cos(x))
    v0, v1 = _ellipse_outcome(x_prime, u0, u1)
    return np.stack([v0, v1], axis=-1)


def ellipse_true_inverse(x, v) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack(
        [v[..., 0] / (2.0 + np.sin(x)), v[..., 1] / (2.0 + np.cos(x))], axis=-1
    )


def _ellipse_do(x_value, n: int, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    z, _, u0, u1 = _ellipse_exogenous(n, rng)
    x = np.broadcast_to(np.asarray(x_value, dtype=np.float64), (n,)).copy()
    v0, v1 = _ellipse_outcome(x, u0, u1)
    frame = pd.DataFrame(
        {"z": z, "x": x, "v0": v0, "v1": v1, "u0_hidden": u0, "u1_hidden": u1}
    )
    return Dataset(frame, {"scm": "ellipse", "seed": seed, "do_x": True})


_register(GroundTruthSCM(
    name="ellipse",
    v_dim=2,
    sample=gen_ellipse,
    true_counterfactual=ellipse_true_counterfactual,
    true_inverse=ellipse_true_inverse,
    sample_do=_ellipse_do,
))


# -- indistinguishable counterexample -------------------------------------
#
# Two mechanisms over X ~ Bernoulli(1/2), U ~ U(0, 1), X independent of U:
#   star: V = U if X = 1 else U - 1
#   hat:  V = U if X = 1 else -U
# Both induce the same observational law (V | X=0 is uniform on (-1, 0))
# yet answer the counterfactual "V had X been 1, given X=0, V=v" as
# v + 1 versus -v: observational data cannot tell them apart.


def _counterexample_forward(mechanism: str, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    if mechanism == "star":
        return np.where(x == 1, u, u - 1.0)
    if mechanism == "hat":
        return np.where(x == 1, u, -u)
    raise ValueError(f"unknown mechanism {mechanism!r}")


def _counterexample_inverse(mechanism: str, x, v) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if mechanism == "star":
        return np.where(x == 1, v, v + 1.0)
    if mechanism == "hat":
        return np.where(x == 1, v, -v)
    raise ValueError(f"unknown mechanism {mechanism!r}")


def gen_counterexample(n: int, seed: int = 0, mechanism: str = "star") -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, size=n).astype(np.float64)
    u = rng.uniform(0.0, 1.0, size=n)
    v = _counterexample_forward(mechanism, x, u)
    frame = pd.DataFrame({"x": x, "v": v, "u_hidden": u})
    return Dataset(frame, {"scm": f"counterexample_{mechanism}", "seed": seed,
                           "structure": "markovian"})


def _make_counterexample(mechanism: str) -> GroundTruthSCM:
    def cf(x, v, x_prime):
        u = _counterexample_inverse(mechanism, x, v)
        return _counterexample_forward(mechanism, np.asarray(x_prime, dtype=np.float64), u)

    def inv(x, v):
        return _counterexample_inverse(mechanism, x, v)

    def do(x_value, n, seed=0):
        rng = np.random.default_rng(seed)
        u = rng.uniform(0.0, 1.0, size=n)
        x = np.broadcast_to(np.asarray(x_value, dtype=np.float64), (n,)).copy()
        v = _counterexample_forward(mechanism, x, u)
        return Dataset(pd.DataFrame({"x": x, "v": v, "u_hidden": u}),
                       {"scm": f"counterexample_{mechanism}", "do_x": True})

    return _register(GroundTruthSCM(
        name=f"counterexample_{mechanism}",
        v_dim=1,
        sample=lambda n, seed=0: gen_counterexample(n, seed, mechanism),
        true_counterfactual=cf,
        true_inverse=inv,
        sample_do=do,
        x_grid=np.array([0.0, 1.0]),
    ))


_make_counterexample("star")
_make_counterexample("hat")


# -- scalar monotone benchmark ---------------------------------------------
#
# V = (1 + X) U with X ~ U(0, 2) independent of U ~ U(0, 1): the textbook
# identifiable scalar case, used to compare learned counterfactuals with
# the conditional-quantile construction.


def gen_monotone_scalar(n: int, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 2.0, size=n)
    u = rng.uniform(0.0, 1.0, size=n)
    v = (1.0 + x) * u
    frame = pd.DataFrame({"x": x, "v": v, "u_hidden": u})
    return Dataset(frame, {"scm": "monotone_scalar", "seed": seed,
                           "structure": "markovian"})


def _monotone_cf(x, v, x_prime):
    u = np.asarray(v, dtype=np.float64) / (1.0 + np.asarray(x, dtype=np.float64))
    return (1.0 + np.asarray(x_prime, dtype=np.float64)) * u


def _monotone_do(x_value, n, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.uniform(0.0, 1.0, size=n)
    x = np.broadcast_to(np.asarray(x_value, dtype=np.float64), (n,)).copy()
    frame = pd.DataFrame({"x": x, "v": (1.0 + x) * u, "u_hidden": u})
    return Dataset(frame, {"scm": "monotone_scalar", "do_x": True})


_register(GroundTruthSCM(
    name="monotone_scalar",
    v_dim=1,
    sample=gen_monotone_scalar,
    true_counterfactual=_monotone_cf,
    true_inverse=lambda x, v: np.asarray(v, dtype=np.float64)
    / (1.0 + np.asarray(x, dtype=np.float64)),
    sample_do=_monotone_do,
))


# -- adaptive-bitrate-like benchmark ----------------------------------------
#
# Scalar throughput under a saturating shared-capacity mechanism:
#   U (hidden capacity) ~ LogNormal(0, 0.5)
#   Z (capacity proxy)  = ln U + N(0, 0.3^2)
#   X (chosen bitrate)  in a fixed 10-value grid
#   V = X U / (X + U)
# V is strictly increasing in U for every X > 0 (dV/dU = X^2/(X+U)^2),
# saturates at min(X, U), and inverts in closed form U = X V / (X - V).
#
# Policy k is "sticky": it keeps its preferred bitrate k except that with
# probability 0.4 it defers to a shared proxy-driven controller, and with
# probability 0.1 it explores uniformly.  The conditional bitrate matrix
# given (u*, policy) is then a diagonal matrix plus a rank-one update, so
# its determinant equals ((1-0.1)(1-0.4))^9 ~ 4e-3 at every u*: distinct
# policies stay distinguishable while the controller injects confounding.

BITRATE_GRID = np.geomspace(0.3, 4.0, 10)
_ABR_EXPLORE = 0.1
_ABR_REACT = 0.4
_ABR_Z_LO, _ABR_Z_HI = -1.2, 1.2


def _abr_policy_index(policy: np.ndarray, z: np.ndarray, rng: np.random.Generator):
    base = np.clip(np.rint((z - _ABR_Z_LO) / (_ABR_Z_HI - _ABR_Z_LO) * 9.0), 0, 9)
    react = rng.uniform(size=len(z)) < _ABR_REACT
    idx = np.where(react, base, policy).astype(np.int64)
    explore = rng.uniform(size=len(z)) < _ABR_EXPLORE
    idx[explore] = rng.integers(0, 10, size=int(explore.sum()))
    return idx


def abr_forward(x, u) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return x * u / (x + u)


def abr_true_inverse(x, v) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return x * v / (x - v)


def abr_true_counterfactual(x, v, x_prime) -> np.ndarray:
    return abr_forward(x_prime, abr_true_inverse(x, v))


def gen_abr_like(n: int, seed: int = 0, structure: str = "iv",
                 disconnect_instrument: bool = False,
                 independent_z: bool = False) -> Dataset:
    """Draw one ABR-like dataset under the requested causal structure.

    markovian: X uniform on the grid, independent of U (z, u recorded).
    iv:        ten policies indexed by a randomized instrument I read the
               hidden proxy Z, so X is confounded with U; Z is dropped.
    bc:        one policy reads the recorded proxy Z.
    ivbc:      randomized policies and the recorded proxy.
    """
    if structure not in ("markovian", "iv", "bc", "ivbc"):
        raise ValueError(f"unknown structure {structure!r}")
    rng = np.random.default_rng(seed)
    u = np.exp(rng.standard_normal(n) * 0.5)
    z = np.log(u) + rng.standard_normal(n) * 0.3
    if independent_z:
        z = rng.permutation(z)

    if structure == "markovian":
        idx = rng.integers(0, 10, size=n)
        i = None
    else:
        if structure == "bc":
            i = np.full(n, 4.0)
        else:
            i = rng.integers(0, 10, size=n).astype(np.float64)
        policy = np.full(n, 4.0) if disconnect_instrument else i
        idx = _abr_policy_index(policy, z, rng)
    x = BITRATE_GRID[idx]
    v = abr_forward(x, u)

    cols: dict[str, np.ndarray] = {}
    if structure in ("iv", "ivbc"):
        cols["i"] = i
    if structure in ("markovian", "bc", "ivbc"):
        cols["z"] = z
    cols.update({"x": x, "v": v, "u_hidden": u})
    meta = {"scm": "abr_like", "seed": seed, "structure": structure,
            "x_grid": BITRATE_GRID.tolist(),
            "disconnect_instrument": disconnect_instrument,
            "independent_z": independent_z}
    return Dataset(pd.DataFrame(cols), meta)


def _abr_do(x_value, n, seed=0):
    rng = np.random.default_rng(seed)
    u = np.exp(rng.standard_normal(n) * 0.5)
    z = np.log(u) + rng.standard_normal(n) * 0.3
    x = np.broadcast_to(np.asarray(x_value, dtype=np.float64), (n,)).copy()
    frame = pd.DataFrame({"z": z, "x": x, "v": abr_forward(x, u), "u_hidden": u})
    return Dataset(frame, {"scm": "abr_like", "do_x": True})


_register(GroundTruthSCM(
    name="abr_like",
    v_dim=1,
    sample=gen_abr_like,
    true_counterfactual=abr_true_counterfactual,
    true_inverse=abr_true_inverse,
    sample_do=_abr_do,
    x_grid=BITRATE_GRID,
))


def sample_interventional(scm: GroundTruthSCM | str, x_value, n: int,
                          seed: int = 0) -> Dataset:
    """Interventional draw: exogenous noise per the ground truth, X forced."""
    if isinstance(scm, str):
        scm = get_scm(scm)
    return scm.sample_do(x_value, n, seed)
