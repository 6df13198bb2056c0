"""Conditional monotone flows built from spline coupling layers.

A ConditionalBijection maps noise u to an outcome v, bijectively for
every value of the conditioning input x.  Scalar outcomes use a single
spline driven by a conditioner network reading x; vector outcomes use
coupling layers where each spline additionally reads the untouched
coordinates.  Affine calibration layers at the input and output move
data into the spline box.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import splines
from .autodiff import Var

FORMAT_NAME = "bgmflow.flow"
FORMAT_VERSION = 1
_LOG_2PI = float(np.log(2.0 * np.pi))


class Mlp:
    """Plain fully connected ReLU network."""

    def __init__(self, dims: list[int], rng: np.random.Generator | None = None,
                 zero_last: bool = True):
        self.dims = list(dims)
        self.weights: list[Var] = []
        self.biases: list[Var] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            if rng is None or (last and zero_last):
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.weights.append(Var(w, requires_grad=True))
            self.biases.append(Var(np.zeros(fan_out), requires_grad=True))

    def __call__(self, h):
        h = ad.asvar(h)
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.matmul(h, w) + b
            if i < n_layers - 1:
                h = ad.relu(h)
        return h

    def parameters(self) -> list[Var]:
        return self.weights + self.biases


def conditioner_eval(net: Mlp, cond: np.ndarray) -> np.ndarray:
    """Raw spline parameters produced by a conditioner for given inputs."""
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim == 1:
        cond = cond[None, :]
    return net(cond).data


class AffineLayer:
    """Fixed elementwise affine map v = u * scale + shift."""

    def __init__(self, scale, shift):
        self.scale = np.asarray(scale, dtype=np.float64)
        self.shift = np.asarray(shift, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ValueError("affine scale must be positive")

    def forward(self, cond, u):
        v = ad.asvar(u) * self.scale + self.shift
        ld = np.full(v.shape[:-1], float(np.sum(np.log(self.scale))))
        return v, Var(ld)

    def inverse(self, cond, v):
        u = (ad.asvar(v) - self.shift) / self.scale
        ld = np.full(u.shape[:-1], -float(np.sum(np.log(self.scale))))
        return u, Var(ld)

    def parameters(self) -> list[Var]:
        return []

    def to_dict(self) -> dict:
        return {"kind": "affine", "scale": self.scale.tolist(), "shift": self.shift.tolist()}


class SplineCouplingLayer:
    """Spline transform of selected coordinates, conditioned on others.

    The conditioner reads the conditioning input plus the `context`
    coordinates (all untransformed coordinates when context is None).
    Restricting context to strictly lower coordinates yields triangular
    maps whose compositions stay strictly increasing per coordinate.
    """

    def __init__(self, cond_dim: int, var_dim: int, transformed: tuple[int, ...],
                 bin_count: int, bound: float, hidden: tuple[int, ...],
                 rng: np.random.Generator | None = None, mlp: Mlp | None = None,
                 context: tuple[int, ...] | None = None):
        self.cond_dim = cond_dim
        self.var_dim = var_dim
        self.transformed = tuple(transformed)
        self.passthrough = tuple(j for j in range(var_dim) if j not in self.transformed)
        self.context = self.passthrough if context is None else tuple(context)
        if set(self.context) & set(self.transformed):
            raise ValueError("context coordinates must not be transformed")
        self.bin_count = bin_count
        self.bound = bound
        self.hidden = tuple(hidden)
        out_dim = len(self.transformed) * splines.raw_param_count(bin_count)
        in_dim = cond_dim + len(self.context)
        if mlp is None:
            mlp = Mlp([in_dim] + list(self.hidden) + [out_dim], rng)
        self.mlp = mlp

    def _raw(self, cond, u):
        parts = [ad.asvar(cond)]
        if self.context:
            parts.append(ad.asvar(u)[:, list(self.context)])
        h = parts[0] if len(parts) == 1 else ad.concatenate(parts, axis=1)
        raw = self.mlp(h)
        n = raw.shape[0]
        return ad.reshape(raw, (n, len(self.transformed), splines.raw_param_count(self.bin_count)))

    def _apply(self, cond, u, inverse: bool):
        u = ad.asvar(u)
        raw = self._raw(cond, u)
        t_in = u[:, list(self.transformed)]
        t_out, ld = splines.spline_transform(t_in, raw, self.bound, self.bin_count, inverse)
        cols = []
        for j in range(self.var_dim):
            if j in self.transformed:
                cols.append(t_out[:, [self.transformed.index(j)]])
            else:
                cols.append(u[:, [j]])
        out = cols[0] if len(cols) == 1 else ad.concatenate(cols, axis=1)
        return out, ad.vsum(ld, axis=1)

    def forward(self, cond, u):
        return self._apply(cond, u, inverse=False)

    def inverse(self, cond, v):
        return self._apply(cond, v, inverse=True)

    def parameters(self) -> list[Var]:
        return self.mlp.parameters()

    def to_dict(self) -> dict:
        return {
            "kind": "spline_coupling",
            "transformed": list(self.transformed),
            "context": list(self.context),
            "hidden": list(self.hidden),
            "mlp": {
                "dims": self.mlp.dims,
                "weights": [w.data.tolist() for w in self.mlp.weights],
                "biases": [b.data.tolist() for b in self.mlp.biases],
            },
        }


class ConditionalBijection:
    """Stack of layers forming a conditional bijection u <-> v."""

    def __init__(self, cond_dim: int, var_dim: int, layers: list,
                 bound: float = 3.0, bin_count: int = 16):
        self.cond_dim = cond_dim
        self.var_dim = var_dim
        self.layers = layers
        self.bound = bound
        self.bin_count = bin_count

    # -- shape handling ---------------------------------------------------

    def _check(self, name: str, arr, dim: int):
        if isinstance(arr, Var):
            return arr
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1 and dim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[1] != dim:
            raise ValueError(f"{name} must have shape (n, {dim}), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite values")
        return arr

    # -- graph-capable paths ----------------------------------------------

    def _forward(self, cond, u):
        total = None
        out = u
        for layer in self.layers:
            out, ld = layer.forward(cond, out)
            total = ld if total is None else total + ld
        return out, total

    def _inverse(self, cond, v):
        total = None
        out = v
        for layer in reversed(self.layers):
            out, ld = layer.inverse(cond, out)
            total = ld if total is None else total + ld
        return out, total

    def _log_density(self, cond, v):
        u, ld = self._inverse(cond, v)
        logp = ad.vsum(-0.5 * (u * u) - 0.5 * _LOG_2PI, axis=1)
        return logp + ld

    # -- public numpy API ---------------------------------------------------

    def forward(self, x, u):
        """Map noise to outcome; returns (v, log|det dv/du|)."""
        x = self._check("x", x, self.cond_dim)
        u = self._check("u", u, self.var_dim)
        v, ld = self._forward(x, u)
        return v.data, ld.data

    def inverse(self, x, v):
        """Recover noise from outcome; returns (u, log|det du/dv|)."""
        x = self._check("x", x, self.cond_dim)
        v = self._check("v", v, self.var_dim)
        u, ld = self._inverse(x, v)
        return u.data, ld.data

    def log_density(self, x, v) -> np.ndarray:
        """Conditional log density of v given x under standard normal noise."""
        x = self._check("x", x, self.cond_dim)
        v = self._check("v", v, self.var_dim)
        return self._log_density(x, v).data

    def sample(self, x, rng: np.random.Generator) -> np.ndarray:
        x = self._check("x", x, self.cond_dim)
        u = rng.standard_normal((x.shape[0], self.var_dim))
        return self.forward(x, u)[0]

    def parameters(self) -> list[Var]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "cond_dim": self.cond_dim,
            "var_dim": self.var_dim,
            "bound": self.bound,
            "bin_count": self.bin_count,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionalBijection":
        if d.get("format") != FORMAT_NAME:
            raise ValueError(f"not a {FORMAT_NAME} document")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported flow format version {d.get('version')!r}")
        layers = []
        for spec in d["layers"]:
            if spec["kind"] == "affine":
                layers.append(AffineLayer(spec["scale"], spec["shift"]))
            elif spec["kind"] == "spline_coupling":
                mlp = Mlp(spec["mlp"]["dims"])
                for w, data in zip(mlp.weights, spec["mlp"]["weights"]):
                    w.data = np.asarray(data, dtype=np.float64)
                for b, data in zip(mlp.biases, spec["mlp"]["biases"]):
                    b.data = np.asarray(data, dtype=np.float64)
                context = tuple(spec["context"]) if "context" in spec else None
                layers.append(SplineCouplingLayer(
                    d["cond_dim"], d["var_dim"], tuple(spec["transformed"]),
                    d["bin_count"], d["bound"], tuple(spec["hidden"]), mlp=mlp,
                    context=context))
            else:
                raise ValueError(f"unknown layer kind {spec['kind']!r}")
        return cls(d["cond_dim"], d["var_dim"], layers, d["bound"], d["bin_count"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ConditionalBijection":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_flow(cond_dim: int, var_dim: int, bin_count: int = 16, bound: float = 3.0,
               hidden: tuple[int, ...] = (64, 64), n_layers: int | None = None,
               out_loc=None, out_scale=None, seed: int = 0) -> ConditionalBijection:
    """Assemble the default architecture: affine in, splines, affine out.

    Scalar outcomes get a single conditional spline; vector outcomes get
    n_layers rounds of per-coordinate splines, each conditioned on the
    strictly lower coordinates.  That triangular arrangement keeps every
    outcome coordinate strictly increasing in its own noise coordinate,
    which alternating-mask couplings do not (a later layer's conditioner
    would feed a transformed coordinate back into an earlier one).  The
    output affine layer is meant to carry data location/scale so that
    calibrated outcomes land inside the spline box.
    """
    rng = np.random.default_rng(seed)
    if n_layers is None:
        n_layers = 1 if var_dim == 1 else 2
    layers: list = [AffineLayer(np.ones(var_dim), np.zeros(var_dim))]
    for _ in range(n_layers):
        for k in range(var_dim):
            layers.append(SplineCouplingLayer(cond_dim, var_dim, (k,),
                                              bin_count, bound, hidden, rng=rng,
                                              context=tuple(range(k))))
    loc = np.zeros(var_dim) if out_loc is None else np.asarray(out_loc, dtype=np.float64)
    scale = np.ones(var_dim) if out_scale is None else np.asarray(out_scale, dtype=np.float64)
    layers.append(AffineLayer(scale, loc))
    return ConditionalBijection(cond_dim, var_dim, layers, bound, bin_count)
