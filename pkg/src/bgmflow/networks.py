"""Structured generative networks for causal-structure-aware training.

Each network owns a bgm flow (the outcome mechanism v = f(x, u)) plus
auxiliary models determined by the assumed structure, and exposes the
exact per-row log joint implied by that wiring:

  markovian: u ~ N(0, I) independent of x
             log p(v | x) = log N(u) + log|det df^-1/dv|
  iv:        an instrument i randomizes the action; x depends on (i, u)
             log p(x, v | i) = log N(u) + log p_aux(x | i, u) + logdet
  bc:        a backdoor covariate z blocks confounding; u depends on z
             log p(v | x, z) = log p_aux(u | z) + logdet
  ivbc:      both i and z observed; x depends on (i, z) so the aux model
             over u | z is all that is needed, as in bc
  bc variant c reverses the covariate edge (u -> z -> x):
             log p(v, z | x) = log N(u) + log p_aux(z | u) + logdet

Variants a (z -> u, z -> x) and b (x -> z -> u) share the same trainable
objective because x and z are both observed; they differ only in how
synthetic records are produced.  All losses use u = f^-1(x, v).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .flows import ConditionalBijection, Mlp, build_flow

FORMAT_NAME = "bgmflow.network"
FORMAT_VERSION = 1
KINDS = ("markovian", "iv", "bc", "ivbc")
_LOG_2PI = float(np.log(2.0 * np.pi))


def _std_normal_logpdf(u) -> Var:
    u = ad.asvar(u)
    return ad.vsum(-0.5 * (u * u) - 0.5 * _LOG_2PI, axis=1)


class CategoricalHead:
    """Conditional pmf over a finite action grid, logits from an MLP."""

    def __init__(self, cond_dim: int, n_values: int, hidden=(64, 64),
                 rng: np.random.Generator | None = None, mlp: Mlp | None = None):
        self.cond_dim = cond_dim
        self.n_values = n_values
        self.hidden = tuple(hidden)
        self.mlp = mlp if mlp is not None else Mlp(
            [cond_dim] + list(self.hidden) + [n_values], rng, zero_last=False)

    def log_pmf(self, cond, idx: np.ndarray) -> Var:
        logits = self.mlp(cond)
        shift = np.max(logits.data, axis=-1, keepdims=True)
        lse = ad.log(ad.vsum(ad.exp(logits - shift), axis=-1)) + shift[:, 0]
        picked = ad.take_along_last(logits, idx.reshape(-1, 1))[:, 0]
        return picked - lse

    def sample(self, cond: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        logits = self.mlp(cond).data
        logits = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
        cum = np.cumsum(p, axis=-1)
        r = rng.uniform(size=(len(cond), 1))
        return np.sum(r > cum, axis=-1)

    def parameters(self) -> list[Var]:
        return self.mlp.parameters()

    def to_dict(self) -> dict:
        return {
            "cond_dim": self.cond_dim,
            "n_values": self.n_values,
            "hidden": list(self.hidden),
            "mlp": {
                "dims": self.mlp.dims,
                "weights": [w.data.tolist() for w in self.mlp.weights],
                "biases": [b.data.tolist() for b in self.mlp.biases],
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CategoricalHead":
        mlp = Mlp(d["mlp"]["dims"])
        for w, data in zip(mlp.weights, d["mlp"]["weights"]):
            w.data = np.asarray(data, dtype=np.float64)
        for b, data in zip(mlp.biases, d["mlp"]["biases"]):
            b.data = np.asarray(data, dtype=np.float64)
        return cls(d["cond_dim"], d["n_values"], tuple(d["hidden"]), mlp=mlp)


def _columns(frame, base: str, dim: int) -> np.ndarray:
    if dim == 1 and base in frame:
        return np.asarray(frame[base], dtype=np.float64).reshape(-1, 1)
    names = [f"{base}{j}" for j in range(dim)]
    missing = [c for c in names if c not in frame]
    if missing:
        raise ValueError(f"data is missing columns {missing}")
    return np.column_stack([np.asarray(frame[c], dtype=np.float64) for c in names])


class StructuredGenerativeNetwork:
    """bgm plus structure-specific auxiliaries with an exact joint NLL."""

    def __init__(self, kind: str, bgm: ConditionalBijection,
                 aux_u: ConditionalBijection | None = None,
                 aux_x_flow: ConditionalBijection | None = None,
                 aux_x_cat: CategoricalHead | None = None,
                 aux_z: ConditionalBijection | None = None,
                 x_dim: int = 1, v_dim: int = 1, z_dim: int = 0,
                 i_values: np.ndarray | None = None,
                 x_grid: np.ndarray | None = None,
                 dgm_variant: str = "a", deq_seed: int = 0):
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
        if kind in ("bc", "ivbc") and dgm_variant not in ("a", "b", "c"):
            raise ValueError(f"dgm_variant must be a, b or c, got {dgm_variant!r}")
        self.kind = kind
        self.dgm_variant = dgm_variant if kind in ("bc", "ivbc") else "a"
        self.bgm = bgm
        self.aux_u = aux_u
        self.aux_x_flow = aux_x_flow
        self.aux_x_cat = aux_x_cat
        self.aux_z = aux_z
        self.x_dim = x_dim
        self.v_dim = v_dim
        self.z_dim = z_dim
        self.i_values = None if i_values is None else np.asarray(i_values, dtype=np.float64)
        self.x_grid = None if x_grid is None else np.asarray(x_grid, dtype=np.float64)
        self.deq_seed = deq_seed

    # -- data plumbing ------------------------------------------------------

    def _grid_index(self, x: np.ndarray) -> np.ndarray:
        return np.argmin(np.abs(x.reshape(-1, 1) - self.x_grid[None, :]), axis=1)

    def _onehot(self, i: np.ndarray) -> np.ndarray:
        idx = np.argmin(np.abs(i.reshape(-1, 1) - self.i_values[None, :]), axis=1)
        out = np.zeros((len(idx), len(self.i_values)))
        out[np.arange(len(idx)), idx] = 1.0
        return out

    def prepare(self, data) -> dict[str, np.ndarray]:
        """Extract the column arrays this structure trains on."""
        frame = getattr(data, "frame", data)
        out = {
            "x": _columns(frame, "x", self.x_dim),
            "v": _columns(frame, "v", self.v_dim),
        }
        if self.kind in ("bc", "ivbc"):
            out["z"] = _columns(frame, "z", self.z_dim)
        if self.kind == "iv":
            out["i_onehot"] = self._onehot(_columns(frame, "i", 1)[:, 0])
            idx = self._grid_index(out["x"][:, 0])
            out["x_idx"] = idx.reshape(-1, 1)
            if self.aux_x_flow is not None:
                # fixed dequantization: index-scale noise drawn once per row
                noise = np.random.default_rng(self.deq_seed).uniform(
                    -0.5, 0.5, size=len(idx))
                out["x_deq"] = (idx + noise).reshape(-1, 1)
        return out

    # -- likelihood -----------------------------------------------------------

    def _log_joint(self, batch: dict) -> Var:
        x = ad.asvar(np.asarray(batch["x"], dtype=np.float64))
        v = ad.asvar(np.asarray(batch["v"], dtype=np.float64))
        u_hat, logdet = self.bgm._inverse(x, v)

        if self.kind == "markovian":
            return _std_normal_logpdf(u_hat) + logdet

        if self.kind == "iv":
            cond = ad.concatenate([ad.asvar(batch["i_onehot"]), u_hat], axis=1)
            if self.aux_x_cat is not None:
                aux = self.aux_x_cat.log_pmf(cond, batch["x_idx"][:, 0].astype(int))
            else:
                aux = self.aux_x_flow._log_density(cond, ad.asvar(batch["x_deq"]))
            return _std_normal_logpdf(u_hat) + aux + logdet

        # bc / ivbc
        if self.dgm_variant == "c":
            aux = self.aux_z._log_density(u_hat, ad.asvar(batch["z"]))
            return _std_normal_logpdf(u_hat) + aux + logdet
        aux = self.aux_u._log_density(ad.asvar(batch["z"]), u_hat)
        return aux + logdet

    def log_joint(self, batch: dict) -> np.ndarray:
        """Per-row log joint implied by the structure (see module docstring)."""
        return self._log_joint(batch).data

    def joint_nll(self, batch: dict) -> Var:
        """Mean negative log joint of a batch; the training objective."""
        return -ad.vmean(self._log_joint(batch))

    # -- abduction and generation ---------------------------------------------

    def abduct(self, x, v) -> np.ndarray:
        return self.bgm.inverse(x, v)[0]

    def extract_bgm(self) -> ConditionalBijection:
        """The outcome mechanism; all counterfactual queries run through it."""
        return self.bgm

    def sample(self, conditions, n: int | None = None, seed: int = 0):
        """Synthetic records obeying the structure's independencies.

        ``conditions`` supplies the observed roots as dataset columns:
        x for markovian, i for iv, (z, x) for bc, (i, z, x) for ivbc.
        Rows are resampled with replacement when n differs from the
        conditions length.
        """
        import pandas as pd

        rng = np.random.default_rng(seed)
        frame = getattr(conditions, "frame", conditions)
        m = len(next(iter(frame.values()))) if isinstance(frame, dict) else len(frame)
        if n is None:
            n = m
        take = rng.integers(0, m, size=n) if n != m else np.arange(n)

        def col(base, dim):
            return _columns(frame, base, dim)[take]

        u_noise = rng.standard_normal((n, self.v_dim))
        out: dict[str, np.ndarray] = {}

        if self.kind == "markovian":
            x = col("x", self.x_dim)
            u_hat = u_noise
        elif self.kind == "iv":
            i = col("i", 1)
            u_hat = u_noise
            cond = np.concatenate([self._onehot(i[:, 0]), u_hat], axis=1)
            if self.aux_x_cat is not None:
                idx = self.aux_x_cat.sample(cond, rng)
            else:
                x_deq = self.aux_x_flow.sample(cond, rng)[:, 0]
                idx = np.clip(np.rint(x_deq), 0, len(self.x_grid) - 1).astype(int)
            x = self.x_grid[idx].reshape(-1, 1)
            out["i"] = i[:, 0]
        elif self.dgm_variant == "c":
            u_hat = u_noise
            z = self.aux_z.sample(u_hat, rng)
            src_z = _columns(frame, "z", self.z_dim)[:, 0]
            src_x = _columns(frame, "x", self.x_dim)
            order = np.argsort(src_z)
            pos = np.searchsorted(src_z[order], z[:, 0]).clip(0, m - 1)
            x = src_x[order[pos]]
            out["z"] = z[:, 0]
        else:  # bc variants a/b and ivbc: u | z from the aux flow
            z = col("z", self.z_dim)
            x = col("x", self.x_dim)
            u_hat = self.aux_u.forward(z, u_noise)[0]
            out["z"] = z[:, 0]
            if self.kind == "ivbc":
                out["i"] = col("i", 1)[:, 0]

        v = self.bgm.forward(x, u_hat)[0]
        if self.x_dim == 1:
            out["x"] = x[:, 0]
        else:
            out.update({f"x{j}": x[:, j] for j in range(self.x_dim)})
        if self.v_dim == 1:
            out["v"] = v[:, 0]
            out["u_hidden"] = u_hat[:, 0]
        else:
            out.update({f"v{j}": v[:, j] for j in range(self.v_dim)})
            out.update({f"u{j}_hidden": u_hat[:, j] for j in range(self.v_dim)})
        return pd.DataFrame(out)

    # -- parameters and serialization -----------------------------------------

    def parameters(self) -> list[Var]:
        out = list(self.bgm.parameters())
        for aux in (self.aux_u, self.aux_x_flow, self.aux_x_cat, self.aux_z):
            if aux is not None:
                out.extend(aux.parameters())
        return out

    def to_dict(self) -> dict:
        def opt(model):
            return None if model is None else model.to_dict()

        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "kind": self.kind,
            "dgm_variant": self.dgm_variant,
            "x_dim": self.x_dim,
            "v_dim": self.v_dim,
            "z_dim": self.z_dim,
            "i_values": None if self.i_values is None else self.i_values.tolist(),
            "x_grid": None if self.x_grid is None else self.x_grid.tolist(),
            "deq_seed": self.deq_seed,
            "bgm": self.bgm.to_dict(),
            "aux_u": opt(self.aux_u),
            "aux_x_flow": opt(self.aux_x_flow),
            "aux_x_cat": opt(self.aux_x_cat),
            "aux_z": opt(self.aux_z),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredGenerativeNetwork":
        if d.get("format") != FORMAT_NAME:
            raise ValueError(f"not a {FORMAT_NAME} document")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported network format version {d.get('version')!r}")

        def flow(doc):
            return None if doc is None else ConditionalBijection.from_dict(doc)

        return cls(
            kind=d["kind"],
            bgm=ConditionalBijection.from_dict(d["bgm"]),
            aux_u=flow(d["aux_u"]),
            aux_x_flow=flow(d["aux_x_flow"]),
            aux_x_cat=None if d["aux_x_cat"] is None else CategoricalHead.from_dict(d["aux_x_cat"]),
            aux_z=flow(d["aux_z"]),
            x_dim=d["x_dim"], v_dim=d["v_dim"], z_dim=d["z_dim"],
            i_values=d["i_values"], x_grid=d["x_grid"],
            dgm_variant=d["dgm_variant"], deq_seed=d["deq_seed"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "StructuredGenerativeNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_network(kind: str, x_dim: int = 1, v_dim: int = 1, z_dim: int = 0,
                  i_values=None, x_grid=None, bin_count: int = 16,
                  bound: float = 3.0, hidden: tuple[int, ...] = (64, 64),
                  bgm_layers: int | None = None, aux_mode: str = "flow",
                  dgm_variant: str = "a", v_loc=None, v_scale=None,
                  seed: int = 0) -> StructuredGenerativeNetwork:
    """Assemble the flows a structure needs, identity-initialized.

    v_loc / v_scale calibrate the bgm output affine layer; pass data
    statistics so outcomes land inside the spline box.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if kind in ("bc", "ivbc") and z_dim < 1:
        raise ValueError(f"{kind} requires a z column (z_dim >= 1)")
    if kind == "iv" and (i_values is None or x_grid is None):
        raise ValueError("iv requires i_values and x_grid")

    bgm = build_flow(x_dim, v_dim, bin_count, bound, hidden, bgm_layers,
                     out_loc=v_loc, out_scale=v_scale, seed=seed)
    aux_u = aux_x_flow = aux_x_cat = aux_z = None

    if kind == "iv":
        n_i = len(i_values)
        if aux_mode == "categorical":
            aux_x_cat = CategoricalHead(n_i + v_dim, len(x_grid), hidden,
                                        np.random.default_rng(seed + 1))
        elif aux_mode == "flow":
            g = len(x_grid)
            aux_x_flow = build_flow(n_i + v_dim, 1, bin_count, bound, hidden,
                                    out_loc=[(g - 1) / 2.0], out_scale=[g / 5.0],
                                    seed=seed + 1)
        else:
            raise ValueError(f"aux_mode must be flow or categorical, got {aux_mode!r}")
    elif kind in ("bc", "ivbc"):
        if dgm_variant == "c":
            aux_z = build_flow(v_dim, z_dim, bin_count, bound, hidden, seed=seed + 2)
        else:
            aux_u = build_flow(z_dim, v_dim, bin_count, bound, hidden, seed=seed + 2)

    return StructuredGenerativeNetwork(
        kind, bgm, aux_u=aux_u, aux_x_flow=aux_x_flow, aux_x_cat=aux_x_cat,
        aux_z=aux_z, x_dim=x_dim, v_dim=v_dim, z_dim=z_dim,
        i_values=i_values, x_grid=x_grid, dgm_variant=dgm_variant, deq_seed=seed)
