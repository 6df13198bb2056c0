"""Monotone linear rational spline transforms.

Each transform maps [-B, B] onto itself through ``bin_count`` bins and
continues as the identity outside the box.  A bin is a monotone rational
function of degree (1,1) on each half of the bin, glued at the midpoint
so that values and derivatives match the bin edges; positivity of the
edge derivatives makes the whole map strictly increasing and gives a
closed-form inverse.

Raw (unconstrained) parameter layout per transform, length 3K-1 for K
bins: K width logits, K height logits, K-1 interior derivative logits.
Widths and heights pass through a floored softmax scaled to 2B, so any
raw vector yields strictly increasing knots; derivatives pass through a
shifted softplus with a 1e-4 floor, and the boundary derivatives are
pinned to 1 to meet the identity tails smoothly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var

MIN_DERIVATIVE = 1e-4
MIN_BIN_FRACTION = 1e-3
# softplus(x + shift) + floor equals 1 at x = 0, so all-zero raw is the identity
_DERIV_SHIFT = float(np.log(np.expm1(1.0 - MIN_DERIVATIVE)))
_LAMBDA = 0.5  # segment split point inside each bin


def raw_param_count(bin_count: int) -> int:
    return 3 * bin_count - 1


@dataclass
class SplineParams:
    """Normalized knots of one monotone spline on [-bound, bound]."""

    knot_x: np.ndarray
    knot_y: np.ndarray
    derivs: np.ndarray
    bound: float

    @property
    def bin_count(self) -> int:
        return len(self.knot_x) - 1


def _normalize(raw, bound: float, bin_count: int):
    """Map raw logits to (knot_x, knot_y, derivs); works on Var or ndarray."""
    k = bin_count
    w_logit = raw[..., :k]
    h_logit = raw[..., k : 2 * k]
    d_logit = raw[..., 2 * k :]

    def knots(logit):
        frac = ad.softmax(logit, axis=-1)
        frac = MIN_BIN_FRACTION + (1.0 - k * MIN_BIN_FRACTION) * frac
        widths = 2.0 * bound * frac
        interior = ad.cumsum(widths, axis=-1)[..., :-1] - bound
        left = widths[..., :1] * 0.0 - bound
        right = widths[..., :1] * 0.0 + bound
        return ad.concatenate([left, interior, right], axis=-1)

    knot_x = knots(w_logit)
    knot_y = knots(h_logit)
    inner = MIN_DERIVATIVE + ad.softplus(d_logit + _DERIV_SHIFT)
    one = inner[..., :1] * 0.0 + 1.0
    derivs = ad.concatenate([one, inner, one], axis=-1)
    return knot_x, knot_y, derivs


def raw_to_spline(raw: np.ndarray, bound: float = 3.0, bin_count: int = 16) -> SplineParams:
    """Normalize one raw parameter vector into explicit knots."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (raw_param_count(bin_count),):
        raise ValueError(
            f"raw must have shape ({raw_param_count(bin_count)},) for "
            f"bin_count={bin_count}, got {raw.shape}"
        )
    kx, ky, d = _normalize(raw, bound, bin_count)
    return SplineParams(kx.data, ky.data, d.data, float(bound))


def _clip(v, lo, hi):
    lo_d = lo.data if isinstance(lo, Var) else lo
    hi_d = hi.data if isinstance(hi, Var) else hi
    v = ad.where(v.data < lo_d, lo, v)
    return ad.where(v.data > hi_d, hi, v)


def _evaluate(inputs, knot_x, knot_y, derivs, bound: float, inverse: bool):
    """Spline map with log|d out/d in|; identity with logdet 0 outside the box.

    All arguments may be Var or ndarray; knots carry the same leading
    shape as inputs plus a trailing knot axis.
    """
    inputs = ad.asvar(inputs)
    knot_x, knot_y, derivs = ad.asvar(knot_x), ad.asvar(knot_y), ad.asvar(derivs)
    x_data = inputs.data
    inside = (x_data > -bound) & (x_data < bound)

    in_knots = knot_y.data if inverse else knot_x.data
    idx = np.sum(x_data[..., None] >= in_knots, axis=-1) - 1
    idx = np.clip(idx, 0, in_knots.shape[-1] - 2)[..., None]

    def pick(arr, at):
        return ad.take_along_last(arr, at)[..., 0]

    x_lo, x_hi = pick(knot_x, idx), pick(knot_x, idx + 1)
    y_lo, y_hi = pick(knot_y, idx), pick(knot_y, idx + 1)
    d_lo, d_hi = pick(derivs, idx), pick(derivs, idx + 1)

    w = x_hi - x_lo
    s = (y_hi - y_lo) / w
    wb = ad.sqrt(d_lo / d_hi)
    wc = (_LAMBDA * d_lo + (1.0 - _LAMBDA) * wb * d_hi) / s
    yc = ((1.0 - _LAMBDA) * y_lo + _LAMBDA * wb * y_hi) / ((1.0 - _LAMBDA) + _LAMBDA * wb)

    if inverse:
        # grouped differences keep each term nonnegative: no cancellation
        y = _clip(inputs, y_lo, y_hi)
        seg1 = y.data <= yc.data
        y1, y2 = _clip(y, y_lo, yc), _clip(y, yc, y_hi)
        th1 = _LAMBDA * (y1 - y_lo) / ((y1 - y_lo) + wc * (yc - y1))
        th2 = (wc * (y2 - yc) + _LAMBDA * wb * (y_hi - y2)) / (
            wc * (y2 - yc) + wb * (y_hi - y2)
        )
        theta = ad.where(seg1, th1, th2)
    else:
        theta = _clip((inputs - x_lo) / w, 0.0, 1.0)
        seg1 = theta.data <= _LAMBDA

    th_a = _clip(theta, 0.0, _LAMBDA)
    th_b = _clip(theta, _LAMBDA, 1.0)
    den_a = (_LAMBDA - th_a) + wc * th_a
    den_b = wc * (1.0 - th_b) + wb * (th_b - _LAMBDA)
    # log of dy/dx for the forward map, evaluated on each segment
    ld_a = ad.log(_LAMBDA * wc * (yc - y_lo)) - 2.0 * ad.log(den_a) - ad.log(w)
    ld_b = ad.log((1.0 - _LAMBDA) * wb * wc * (y_hi - yc)) - 2.0 * ad.log(den_b) - ad.log(w)
    ld_fwd = ad.where(seg1, ld_a, ld_b)

    if inverse:
        out = x_lo + w * theta
        ld = -1.0 * ld_fwd
    else:
        out_a = y_lo + (yc - y_lo) * (wc * th_a) / den_a
        out_b = y_hi - (y_hi - yc) * (wc * (1.0 - th_b)) / den_b
        out = ad.where(seg1, out_a, out_b)
        ld = ld_fwd

    out = ad.where(inside, out, inputs)
    ld = ad.where(inside, ld, ld * 0.0)
    return out, ld


def spline_transform(inputs, raw, bound: float = 3.0, bin_count: int = 16, inverse: bool = False):
    """Batched spline driven by raw logits (..., 3K-1); inputs shaped (...)."""
    kx, ky, d = _normalize(raw, bound, bin_count)
    return _evaluate(inputs, kx, ky, d, bound, inverse)


def _eval_params(p: SplineParams, values, inverse: bool):
    values = np.asarray(values, dtype=np.float64)
    shape = values.shape
    flat = np.atleast_1d(values).ravel()
    tile = (len(flat), 1)
    out, ld = _evaluate(
        flat,
        np.tile(p.knot_x, tile),
        np.tile(p.knot_y, tile),
        np.tile(p.derivs, tile),
        p.bound,
        inverse,
    )
    return out.data.reshape(shape), ld.data.reshape(shape)


def spline_forward(p: SplineParams, u):
    """Apply the spline; returns (v, log|dv/du|) with u's shape."""
    return _eval_params(p, u, inverse=False)


def spline_inverse(p: SplineParams, v):
    """Invert the spline; returns (u, log|du/dv|) with v's shape."""
    return _eval_params(p, v, inverse=True)
