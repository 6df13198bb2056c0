"""Identifiability diagnostics: the theorem hypotheses made runnable.

Independence (marginal and covariate-conditional) is measured with
distance correlation plus a permutation null.  The variability
conditions are determinant checks on estimated conditional-probability
matrices: for instruments, M[j, k] = P(x_j | u*, i_k) by kernel-weighted
frequencies; for backdoor covariates, rows [P(u*|z_l), grad P(u*|z_l)]
from per-candidate kernel density estimates.  Monotonicity and
counterfactual-equivalence checks complete the set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.spatial.distance import pdist, squareform


class InsufficientSupportError(ValueError):
    """Raised when a diagnostic has too little data where it must look."""


# -- reports ------------------------------------------------------------------


@dataclass
class IndependenceReport:
    statistic: float
    p_value: float
    n: int
    conditioning: str = "none"
    per_bin: list | None = None

    @property
    def passed(self) -> bool:
        return self.p_value >= 0.05

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "n": self.n,
            "conditioning": self.conditioning,
            "per_bin": self.per_bin,
            "pass": self.passed,
        }


@dataclass
class VariabilityReport:
    matrix: list  # matrix at the weakest grid point
    abs_det: float  # min |det| over the grid
    u_star_grid: list
    passed: bool
    threshold: float
    criterion: str
    dets: list = field(default_factory=list)
    noise_scale: list | None = None
    noise_floor: list | None = None

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix,
            "abs_det": self.abs_det,
            "u_star_grid": self.u_star_grid,
            "pass": self.passed,
            "threshold": self.threshold,
            "criterion": self.criterion,
            "dets": self.dets,
            "noise_scale": self.noise_scale,
            "noise_floor": self.noise_floor,
        }


@dataclass
class EquivalenceReport:
    mode: str  # rank_corr (scalar) or functional_r2 (multi-d)
    value: float
    threshold: float
    passed: bool
    g_knots: list | None = None
    g_values: list | None = None
    cross_condition_residual: float | None = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "value": self.value,
            "threshold": self.threshold,
            "pass": self.passed,
            "g_knots": self.g_knots,
            "g_values": self.g_values,
            "cross_condition_residual": self.cross_condition_residual,
        }


@dataclass
class MonotonicityReport:
    passed: bool
    violations: list
    checked: int

    def to_dict(self) -> dict:
        return {"pass": self.passed, "violations": self.violations,
                "checked": self.checked}


def save_reports(path, reports: dict) -> None:
    doc = {name: r.to_dict() if hasattr(r, "to_dict") else r
           for name, r in reports.items()}
    Path(path).write_text(json.dumps(doc, indent=2))


# -- distance correlation ------------------------------------------------------


def _centered_distances(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    d = squareform(pdist(a))
    return d - d.mean(axis=0) - d.mean(axis=1)[:, None] + d.mean()

def _dcor_from_centered(ca: np.ndarray, cb: np.ndarray) -> float:
    dcov2 = (ca * cb).mean()
    denom = np.sqrt((ca * ca).mean() * (cb * cb).mean())
    if denom == 0.0:
        return 0.0
    return float(np.sqrt(max(dcov2, 0.0) / denom))


def distance_correlation(a, b) -> float:
    """Distance correlation in [0, 1]; zero iff independent (population)."""
    return _dcor_from_centered(_centered_distances(a), _centered_distances(b))


def independence_test(a, b, n_perm: int = 200, seed: int = 0,
                      max_n: int = 2000) -> IndependenceReport:
    """Distance-correlation permutation test of a independent-of b.

    Rows beyond max_n are subsampled (seeded) to bound the quadratic
    memory of the distance matrices.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise ValueError("a and b must have the same number of rows")
    if len(a) < 100:
        raise InsufficientSupportError(f"need at least 100 rows, got {len(a)}")
    rng = np.random.default_rng(seed)
    if len(a) > max_n:
        take = rng.choice(len(a), size=max_n, replace=False)
        a, b = a[take], b[take]
    n = len(a)

    ca, cb = _centered_distances(a), _centered_distances(b)
    stat = _dcor_from_centered(ca, cb)
    hits = 0
    for _ in range(n_perm):
        perm = rng.permutation(n)
        if _dcor_from_centered(ca, cb[np.ix_(perm, perm)]) >= stat:
            hits += 1
    p = (hits + 1) / (n_perm + 1)
    return IndependenceReport(statistic=stat, p_value=float(p), n=n)


def conditional_independence_test(a, b, z, n_bins: int = 10, n_perm: int = 200,
                                  seed: int = 0, max_n: int = 2000) -> IndependenceReport:
    """Independence of a and b given z, via equal-frequency z-bins.

    Runs the permutation test inside each bin and combines bin p-values
    with Fisher's method.  Each nonempty bin must hold at least 100 rows.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64).ravel()
    if not (len(a) == len(b) == len(z)):
        raise ValueError("a, b and z must have the same number of rows")

    edges = np.quantile(z, np.linspace(0, 1, n_bins + 1))[1:-1]
    which = np.searchsorted(edges, z, side="right")
    per_bin = []
    stats_list = []
    log_ps = []
    for bin_id in np.unique(which):
        rows = np.flatnonzero(which == bin_id)
        if len(rows) == 0:
            continue
        if len(rows) < 100:
            raise InsufficientSupportError(
                f"z-bin {bin_id} holds only {len(rows)} rows; need 100")
        rep = independence_test(a[rows], b[rows], n_perm=n_perm,
                                seed=seed + int(bin_id), max_n=max_n)
        per_bin.append({"bin": int(bin_id), "n": len(rows),
                        "statistic": rep.statistic, "p_value": rep.p_value})
        stats_list.append(rep.statistic)
        log_ps.append(np.log(rep.p_value))

    fisher = -2.0 * np.sum(log_ps)
    p = float(stats.chi2.sf(fisher, df=2 * len(log_ps)))
    return IndependenceReport(statistic=float(np.mean(stats_list)), p_value=p,
                              n=len(a), conditioning=f"z-bins:{len(log_ps)}",
                              per_bin=per_bin)


# -- variability: instrument ---------------------------------------------------


def _silverman(u: np.ndarray) -> float:
    iqr = np.subtract(*np.percentile(u, [75, 25]))
    spread = min(np.std(u), iqr / 1.34) if iqr > 0 else np.std(u)
    return 0.9 * spread * len(u) ** (-0.2)


def variability_iv(i, x, u, c: float = 1e-4, i_values=None, x_values=None,
                   u_grid=None, bandwidth: float | None = None) -> VariabilityReport:
    """Determinant check of M[j, k] = P(x_j | u*, i_k) over a u* grid.

    Entries are kernel-weighted frequencies around each u*; the check
    passes when min over the grid of |det M| reaches c.  Requires as
    many action values as instrument values (a square matrix).
    """
    i = np.asarray(i, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    u = np.asarray(u, dtype=np.float64).ravel()
    i_values = np.unique(i) if i_values is None else np.asarray(i_values, dtype=np.float64)
    x_values = np.unique(x) if x_values is None else np.asarray(x_values, dtype=np.float64)
    if len(i_values) != len(x_values):
        raise ValueError("variability needs |i_values| = |x_values| for a square M")
    if u_grid is None:
        u_grid = np.quantile(u, np.linspace(0.1, 0.9, 9))
    u_grid = np.atleast_1d(np.asarray(u_grid, dtype=np.float64))
    h = _silverman(u) if bandwidth is None else float(bandwidth)

    x_idx = np.argmin(np.abs(x[:, None] - x_values[None, :]), axis=1)
    i_idx = np.argmin(np.abs(i[:, None] - i_values[None, :]), axis=1)

    dets = []
    worst = None
    for u_star in u_grid:
        w = np.exp(-0.5 * ((u - u_star) / h) ** 2)
        m = np.zeros((len(x_values), len(i_values)))
        for k in range(len(i_values)):
            wk = w[i_idx == k]
            total = wk.sum()
            eff = total**2 / np.sum(wk**2) if total > 0 else 0.0
            if eff < 10.0:
                raise InsufficientSupportError(
                    f"instrument {i_values[k]} has effective weight {eff:.1f} "
                    f"near u*={u_star:.4g}; need 10")
            xk = x_idx[i_idx == k]
            m[:, k] = np.bincount(xk, weights=wk, minlength=len(x_values)) / total
        det = abs(float(np.linalg.det(m)))
        dets.append(det)
        if worst is None or det < worst[0]:
            worst = (det, m)

    abs_det = min(dets)
    return VariabilityReport(matrix=worst[1].tolist(), abs_det=abs_det,
                             u_star_grid=u_grid.tolist(), passed=abs_det >= c,
                             threshold=c, criterion="iv-min-abs-det", dets=dets)


# -- variability: backdoor covariate --------------------------------------------


def _bc_row(kde, u_star: np.ndarray, hs: np.ndarray, clips: np.ndarray) -> np.ndarray:
    """Row [1, grad log p(u*)] from central differences of the kde.

    The theorem's matrix row is [p, grad p]; dividing each row by its
    density (positive at supported candidates) leaves |det| = 0 exactly
    when the original determinant is zero while cancelling the common
    multiplicative noise of the density estimate.  Scores are clipped at
    the steepest slope the kernel can represent at a support edge, about
    1/bandwidth: beyond that the estimate is tail extrapolation whose
    magnitude grows with depth but carries no extra evidence, only
    bootstrap variance.
    """
    d = len(u_star)
    points = [u_star]
    for m in range(d):
        for sign in (1.0, -1.0):
            p = u_star.copy()
            p[m] += sign * hs[m]
            points.append(p)
    vals = np.maximum(kde(np.column_stack(points)), 1e-300)
    row = np.empty(1 + d)
    row[0] = 1.0
    for m in range(d):
        s = (np.log(vals[1 + 2 * m]) - np.log(vals[2 + 2 * m])) / (2.0 * hs[m])
        row[1 + m] = np.clip(s, -clips[m], clips[m])
    return row


def variability_bc(u, z, d: int | None = None, u_grid=None, z_candidates=None,
                   n_null: int = 30, threshold_factor: float = 3.0,
                   min_window: int = 50, seed: int = 0) -> VariabilityReport:
    """Determinant check of rows [P(u*|z_l), grad_u P(u*|z_l)] over candidates.

    Each candidate z_l contributes a kernel density estimate fitted on
    the rows nearest to it in z, and the (d+1)-subsets of the candidate
    pool are searched for the largest |det|.  The condition quantifies
    over u* and asks for the existence of candidates making the matrix
    nonsingular, so by default the pool at each grid point holds 2d+1
    quantiles of z among the rows nearest that point: global candidates
    can sit outside each other's support and report a spurious zero, and
    any single fixed tuple can land accidentally colinear.  Passing
    z_candidates overrides the pool with one fixed global set.

    "Nonsingular beyond estimation noise" is calibrated against the
    hypothesis the check must reject, u independent of z: the same
    statistic is recomputed under random permutations of z, and a grid
    point passes when its |det| exceeds the permutation mean by
    threshold_factor standard deviations.  An absolute-error scale (a
    bootstrap SE of the point estimate) does not separate here because
    |det| of a noisy matrix has a positive floor under independence and
    the estimate's own variance grows with the signal.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    z = np.asarray(z, dtype=np.float64).ravel()
    n, dim = u.shape
    d = dim if d is None else int(d)
    if d != dim:
        raise ValueError(f"d={d} does not match u dimension {dim}")
    if n < min_window:
        raise InsufficientSupportError(f"need at least {min_window} rows, got {n}")

    if z_candidates is not None:
        z_candidates = np.atleast_1d(np.asarray(z_candidates, dtype=np.float64))
        if len(z_candidates) < d + 1:
            raise ValueError(
                f"need at least {d + 1} z candidates, got {len(z_candidates)}")

    if u_grid is None:
        targets = [np.quantile(u, q, axis=0) for q in (0.25, 0.5, 0.75)]
        u_grid = np.stack([u[np.argmin(np.sum((u - t) ** 2, axis=1))] for t in targets])
    u_grid = np.asarray(u_grid, dtype=np.float64)
    if u_grid.ndim == 1:
        u_grid = u_grid[:, None]

    rng = np.random.default_rng(seed)
    n_local = max(min_window, n // 10)
    window = max(min_window, n // (2 * (d + 1)))
    subsets = None

    def candidates_for(u_star: np.ndarray, z_arr: np.ndarray) -> np.ndarray:
        if z_candidates is not None:
            return z_candidates
        near = np.argpartition(np.sum((u - u_star) ** 2, axis=1), n_local - 1)[:n_local]
        # quantiles reach the edges on purpose: families whose density ratio
        # is smooth in z often carry their variability at the edges of the
        # conditional support, so interior candidates see a singular matrix
        return np.quantile(z_arr[near], np.linspace(0.02, 0.98, 2 * d + 1))

    def bc_rows(z_arr, cands, u_star):
        # per-coordinate robust standardization: heavy-tailed coordinates
        # otherwise inflate the bandwidth and oversmooth the score exactly
        # where candidates differ
        rows = []
        for z_l in cands:
            samples = u[np.argsort(np.abs(z_arr - z_l))[:window]]
            med = np.median(samples, axis=0)
            iqr = np.subtract(*np.percentile(samples, [75, 25], axis=0))
            scale = np.where(iqr > 0, iqr / 1.349, np.maximum(samples.std(axis=0), 1e-3))
            kde = stats.gaussian_kde(((samples - med) / scale).T, bw_method="silverman")
            bw = np.full(samples.shape[1], kde.factor)
            row = _bc_row(kde, (u_star - med) / scale, 0.5 * bw, 1.0 / bw)
            row[1:] /= scale
            rows.append(row)
        return np.stack(rows)  # (candidates, d+1)

    def best_det(rows):
        best, best_m = -1.0, None
        for sub in subsets:
            m = rows[list(sub), :]
            det = abs(float(np.linalg.det(m)))
            if det > best:
                best, best_m = det, m
        return best, best_m

    def point_stat(z_arr, u_star):
        cands = candidates_for(u_star, z_arr)
        return best_det(bc_rows(z_arr, cands, u_star))

    dets, floors, sds, matrices, ok, ratios = [], [], [], [], [], []
    n_cands = (2 * d + 1) if z_candidates is None else len(z_candidates)
    subsets = list(combinations(range(n_cands), d + 1))
    for u_star in u_grid:
        det, m = point_stat(z, u_star)
        null = np.array([point_stat(rng.permutation(z), u_star)[0]
                         for _ in range(n_null)])
        floor, sd = float(null.mean()), float(null.std())
        dets.append(det)
        floors.append(floor)
        sds.append(sd)
        matrices.append(m)
        ok.append(det > floor + threshold_factor * sd)
        ratios.append((det - floor) / sd if sd > 0 else np.inf)

    weakest = int(np.argmin(ratios))
    return VariabilityReport(matrix=matrices[weakest].tolist(),
                             abs_det=float(min(dets)),
                             u_star_grid=u_grid.tolist(), passed=all(ok),
                             threshold=threshold_factor,
                             criterion="bc-det-vs-permutation-null",
                             dets=dets, noise_scale=sds, noise_floor=floors)


# -- monotonicity ---------------------------------------------------------------


def monotonicity_check(mechanism, x_grid, u_grid=None, var_dim: int | None = None,
                       anchors: int = 3, seed: int = 0) -> MonotonicityReport:
    """Scan forward(x, u) for strict increase in each noise coordinate.

    mechanism is either a flow (forward returning (v, logdet)) or a
    plain callable f(x, u) -> v.  Other coordinates are held at a few
    anchor draws while one coordinate sweeps the grid.
    """
    if hasattr(mechanism, "forward"):
        fwd = lambda x, u: mechanism.forward(x, u)[0]
        var_dim = mechanism.var_dim if var_dim is None else var_dim
    else:
        fwd = mechanism
        if var_dim is None:
            raise ValueError("var_dim is required for a bare callable")
    if u_grid is None:
        u_grid = np.linspace(-3.0, 3.0, 121)
    u_grid = np.asarray(u_grid, dtype=np.float64).ravel()
    x_grid = np.asarray(x_grid, dtype=np.float64)
    if x_grid.ndim == 1:
        x_grid = x_grid[:, None]

    rng = np.random.default_rng(seed)
    anchor_rows = rng.standard_normal((anchors, var_dim)) if var_dim > 1 else np.zeros((1, var_dim))

    violations = []
    checked = 0
    k = len(u_grid)
    for x_row in x_grid:
        for j in range(var_dim):
            for anchor in anchor_rows:
                u = np.tile(anchor, (k, 1))
                u[:, j] = u_grid
                x = np.tile(x_row, (k, 1))
                v = np.asarray(fwd(x, u), dtype=np.float64)
                if v.ndim == 1:
                    v = v[:, None]
                diffs = np.diff(v[:, j])
                checked += 1
                bad = np.flatnonzero(diffs <= 0)
                for b in bad[:3]:
                    violations.append({
                        "x": x_row.tolist(), "coord": j,
                        "u_lo": float(u_grid[b]), "u_hi": float(u_grid[b + 1]),
                        "v_lo": float(v[b, j]), "v_hi": float(v[b + 1, j]),
                    })
    return MonotonicityReport(passed=not violations, violations=violations,
                              checked=checked)


# -- equivalence -----------------------------------------------------------------


def _piecewise_linear_fit(u_b: np.ndarray, u_a: np.ndarray, knots: int = 21):
    order = np.argsort(u_b)
    xs, ys = u_b[order], u_a[order]
    qs = np.linspace(0, 1, knots)
    kx = np.quantile(xs, qs)
    edges = np.searchsorted(xs, kx)
    ky = np.empty(knots)
    for t in range(knots):
        lo = edges[t - 1] if t > 0 else 0
        hi = edges[t + 1] if t < knots - 1 else len(xs)
        wx, wy = xs[max(lo, 0):max(hi, lo + 2)], ys[max(lo, 0):max(hi, lo + 2)]
        if len(wx) > 2 and np.ptp(wx) > 0:
            # a windowed constant is biased at the extreme knots where the
            # window sits entirely to one side; a local line is not
            slope, intercept = np.polyfit(wx, wy, 1)
            ky[t] = slope * kx[t] + intercept
        else:
            ky[t] = np.median(wy)
    return kx, ky


def equivalence_check(bgm_a, bgm_b, x, v, threshold: float | None = None,
                      seed: int = 0) -> EquivalenceReport:
    """Do two mechanisms tell the same counterfactual story on this data?

    Equivalent mechanisms have noise encodings related by one fixed
    invertible map g.  Scalar case: Spearman rank correlation of the two
    abducted noises (|rho| = 1 under equivalence), plus the residual of
    a pooled piecewise-linear g fit evaluated per action group, which
    catches encodings that agree in rank per action but need a different
    g per action.  Multi-d: out-of-sample nearest-neighbour regression
    R^2 in both directions.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if bgm_a.var_dim != bgm_b.var_dim:
        raise ValueError("mechanisms disagree on outcome dimension")
    u_a = bgm_a.inverse(x, v)[0]
    u_b = bgm_b.inverse(x, v)[0]

    if bgm_a.var_dim == 1:
        threshold = 0.99 if threshold is None else threshold
        rho = float(stats.spearmanr(u_a[:, 0], u_b[:, 0]).statistic)
        kx, ky = _piecewise_linear_fit(u_b[:, 0], u_a[:, 0])
        pred = np.interp(u_b[:, 0], kx, ky)
        resid = np.abs(u_a[:, 0] - pred)
        scale = max(np.std(u_a[:, 0]), 1e-12)

        groups = []
        uniq = np.unique(x[:, 0])
        if len(uniq) <= 20:
            groups = [x[:, 0] == val for val in uniq]
        else:
            edges = np.quantile(x[:, 0], np.linspace(0, 1, 6))[1:-1]
            which = np.searchsorted(edges, x[:, 0], side="right")
            groups = [which == g for g in np.unique(which)]
        cross = max(float(resid[g].mean()) / scale for g in groups if g.any())

        passed = abs(rho) >= threshold and cross <= 0.2
        return EquivalenceReport(mode="rank_corr", value=rho, threshold=threshold,
                                 passed=passed, g_knots=kx.tolist(),
                                 g_values=ky.tolist(),
                                 cross_condition_residual=cross)

    from sklearn.neighbors import KNeighborsRegressor

    threshold = 0.95 if threshold is None else threshold
    rng = np.random.default_rng(seed)
    half = rng.permutation(len(u_a))
    tr, te = half[: len(half) // 2], half[len(half) // 2 :]

    def r2(src, dst):
        model = KNeighborsRegressor(n_neighbors=10).fit(src[tr], dst[tr])
        return float(model.score(src[te], dst[te]))

    value = min(r2(u_b, u_a), r2(u_a, u_b))
    return EquivalenceReport(mode="functional_r2", value=value,
                             threshold=threshold, passed=value >= threshold)
