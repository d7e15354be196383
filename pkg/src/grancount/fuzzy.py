"""Beta-type parametric fuzzy counts.

The family used throughout is the mode-normalised Beta kernel written in
divergence form: a fuzzy count with location c and precision h assigns grid
point y the membership exp(-h * kl(c/K, y/K)), where kl is the Bernoulli
Kullback-Leibler divergence. The shape is unimodal on [0, K], peaks at c,
and collapses to a crisp indicator as h grows.

Besides evaluation and alpha-cuts this module fits raw membership vectors to
(c, h) statistics by derivative-free least squares, and compresses fuzzy
counts to scalars (centroid defuzzification).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .possibility import MembershipVector

# Cap for the fitted precision of a point (crisp) fuzzy set; keeps the
# downstream densities that consume h finite.
CRISP_PRECISION_CEILING = 1.0e6

_MIN_PRECISION = 1.0e-3
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def bernoulli_kl(m, t):
    """KL divergence between Bernoulli(m) and Bernoulli(t), elementwise in t.

    Conventions: 0*log(0) = 0, and the divergence is +inf wherever t puts
    zero mass on a point m requires.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    scalar = t_arr.ndim == 0
    t_arr = np.atleast_1d(t_arr)
    if np.any((t_arr < 0.0) | (t_arr > 1.0)):
        raise ValidationError("t must lie in [0, 1]")
    if not 0.0 <= m <= 1.0:
        raise ValidationError("m must lie in [0, 1]")
    out = np.full(t_arr.shape, np.inf)
    if m == 0.0:
        inside = t_arr < 1.0
        out[inside] = -np.log1p(-t_arr[inside])
    elif m == 1.0:
        inside = t_arr > 0.0
        out[inside] = -np.log(t_arr[inside])
    else:
        inside = (t_arr > 0.0) & (t_arr < 1.0)
        ti = t_arr[inside]
        out[inside] = m * (math.log(m) - np.log(ti)) + (1.0 - m) * (
            math.log1p(-m) - np.log1p(-ti)
        )
    # rounding can leave a tiny negative residue near t == m; KL is >= 0
    np.maximum(out, 0.0, out=out)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class BetaFuzzy:
    """Parametric fuzzy count: location in [0, K], precision > 0."""

    location: float
    precision: float
    k_max: int

    def __post_init__(self):
        if self.k_max < 1:
            raise ValidationError("k_max must be at least 1")
        if not 0.0 <= self.location <= self.k_max:
            raise ValidationError(
                f"location {self.location} outside [0, {self.k_max}]"
            )
        if not self.precision > 0.0:
            raise ValidationError("precision must be strictly positive")

    @property
    def location_scaled(self) -> float:
        return self.location / self.k_max


def beta_membership(fz: BetaFuzzy, y: int) -> float:
    """Membership of the integer count y under the Beta-type fuzzy set."""
    if not 0 <= y <= fz.k_max:
        raise ValidationError(f"y={y} outside the count space [0, {fz.k_max}]")
    div = bernoulli_kl(fz.location_scaled, y / fz.k_max)
    return 0.0 if math.isinf(div) else math.exp(-fz.precision * div)


def membership_grid(fz: BetaFuzzy) -> np.ndarray:
    """Memberships on the full grid y = 0..K."""
    t = np.arange(fz.k_max + 1) / fz.k_max
    div = bernoulli_kl(fz.location_scaled, t)
    out = np.zeros(t.size)
    finite = np.isfinite(div)
    out[finite] = np.exp(-fz.precision * div[finite])
    return out


def unit_memberships(location_scaled, precision, t_grid: np.ndarray) -> np.ndarray:
    """Memberships of a unit-scaled Beta-type set on an arbitrary [0, 1] grid."""
    div = bernoulli_kl(float(location_scaled), t_grid)
    out = np.zeros(np.shape(div))
    finite = np.isfinite(div)
    out[finite] = np.exp(-float(precision) * div[finite])
    return out


def to_membership_vector(fz: BetaFuzzy) -> MembershipVector:
    grid = membership_grid(fz)
    if grid.max() <= 0.0:
        raise ValidationError(
            "membership underflows to zero on the whole grid; precision too large "
            "for a non-integral location"
        )
    return MembershipVector(grid)


def alpha_cut(fz: BetaFuzzy, alpha: float):
    """Integer interval [lo, hi] where membership reaches alpha; None if empty."""
    if not 0.0 < alpha <= 1.0:
        raise ValidationError("alpha must lie in (0, 1]")
    hits = np.flatnonzero(membership_grid(fz) >= alpha)
    if hits.size == 0:
        return None
    return int(hits[0]), int(hits[-1])


def defuzzify(mv: MembershipVector) -> float:
    """Centroid of a fuzzy count: sum(y * xi(y)) / sum(xi(y))."""
    weights = mv.memberships
    total = weights.sum()
    if total <= 0.0:
        raise ValidationError("empty fuzzy set")
    return float(np.arange(weights.size) @ weights / total)


def beta_centroid(fz: BetaFuzzy) -> float:
    """Centroid of the Beta-type set on its grid, stable for large precision."""
    t = np.arange(fz.k_max + 1) / fz.k_max
    div = bernoulli_kl(fz.location_scaled, t)
    finite = np.isfinite(div)
    # normalise by the smallest divergence so the weights never all underflow
    w = np.zeros(t.size)
    w[finite] = np.exp(-fz.precision * (div[finite] - div[finite].min()))
    return float(np.arange(t.size) @ w / w.sum())


@dataclass(frozen=True)
class FitResult:
    """Outcome of fitting a raw membership vector to (c, h)."""

    params: BetaFuzzy
    sse: float
    iterations: int
    converged: bool
    degenerate: bool = False


def _sse(mv_values: np.ndarray, t_grid: np.ndarray, c_scaled: float, h: float) -> float:
    div = bernoulli_kl(c_scaled, t_grid)
    fitted = np.zeros(t_grid.size)
    finite = np.isfinite(div)
    fitted[finite] = np.exp(-h * div[finite])
    resid = mv_values - fitted
    return float(resid @ resid)


def _scan_c(mv_values: np.ndarray, t_grid: np.ndarray, h: float) -> int:
    """Best integer location for a fixed precision (vectorised, chunked)."""
    t = t_grid[None, :]
    best_idx, best_sse = 0, np.inf
    for start in range(0, t_grid.size, 256):
        m = t_grid[start : start + 256, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(m > 0.0, m * (np.log(m) - np.log(t)), 0.0)
            right = np.where(m < 1.0, (1.0 - m) * (np.log1p(-m) - np.log1p(-t)), 0.0)
        fitted = np.exp(-h * (left + right))
        resid = fitted - mv_values[None, :]
        sse = np.einsum("ij,ij->i", resid, resid)
        j = int(np.argmin(sse))
        if sse[j] < best_sse:
            best_idx, best_sse = start + j, float(sse[j])
    return best_idx


_H_SCAN = np.exp(np.linspace(np.log(_MIN_PRECISION), np.log(CRISP_PRECISION_CEILING), 64))


def _golden_min(f, lo: float, hi: float, xtol: float) -> float:
    """Golden-section minimisation of a unimodal scalar function on [lo, hi]."""
    a, b = lo, hi
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > xtol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = f(x2)
    return 0.5 * (a + b)


def fit_beta(
    mv: MembershipVector,
    crisp_ceiling: float = CRISP_PRECISION_CEILING,
    tol: float = 1.0e-8,
    max_iter: int = 500,
) -> FitResult:
    """Least-squares fit of (location, precision) to a raw membership vector.

    The location starts at the argmax (ties average), the precision at the
    value matching the half-height crossing, and both are refined by
    alternating golden-section line searches until neither moves by more
    than `tol`. A single-point support is fitted exactly with the precision
    pinned at the crisp ceiling and flagged as degenerate.
    """
    values = mv.memberships
    k = mv.k_max
    if values.max() < 1.0 - 1.0e-9:
        raise ValidationError("membership vector must be normalized (max == 1)")
    support = mv.support()
    t_grid = np.arange(k + 1) / k

    if support.size == 1:
        c = float(support[0])
        fz = BetaFuzzy(c, crisp_ceiling, k)
        return FitResult(
            params=fz,
            sse=_sse(values, t_grid, c / k, crisp_ceiling),
            iterations=0,
            converged=True,
            degenerate=True,
        )

    peak = np.flatnonzero(values == values.max())
    c = float(peak.mean())
    m0 = c / k
    below_half = np.flatnonzero(values <= 0.5)
    if below_half.size:
        nearest = below_half[np.argmin(np.abs(below_half / k - m0))]
        div_half = bernoulli_kl(m0, nearest / k)
    else:
        farthest = np.argmax(np.abs(t_grid - m0))
        div_half = bernoulli_kl(m0, t_grid[farthest])
    h = math.log(2.0) / div_half if 0.0 < div_half < math.inf else 1.0
    h = min(max(h, _MIN_PRECISION), crisp_ceiling)

    # The loss surface ripples with period 1/K in c once h is large and is
    # multimodal in h for poorly matched shapes, so each line search scans
    # coarse candidates first and golden-refines only the bracketing basin.
    h_scan = _H_SCAN[_H_SCAN <= crisp_ceiling]
    converged = False
    iterations = 0
    last_sse = np.inf
    stalled = 0
    for iterations in range(1, max_iter + 1):
        c_star = _scan_c(values, t_grid, h)
        c_new = _golden_min(
            lambda x: _sse(values, t_grid, x / k, h),
            max(0.0, c_star - 1.0),
            min(float(k), c_star + 1.0),
            xtol=tol * 1.0e-2,
        )
        sse_scan = np.array([_sse(values, t_grid, c_new / k, hh) for hh in h_scan])
        j = int(np.argmin(sse_scan))
        log_h_new = _golden_min(
            lambda x: _sse(values, t_grid, c_new / k, math.exp(x)),
            math.log(h_scan[max(0, j - 1)]),
            math.log(h_scan[min(h_scan.size - 1, j + 1)]),
            xtol=tol * 1.0e-2,
        )
        h_new = math.exp(log_h_new)
        moved = max(abs(c_new - c), abs(math.log(h_new) - math.log(h)))
        c, h = c_new, h_new
        if moved < tol:
            converged = True
            break
        sse_now = _sse(values, t_grid, c / k, h)
        stalled = stalled + 1 if abs(last_sse - sse_now) <= 1.0e-15 * (1.0 + sse_now) else 0
        last_sse = sse_now
        if stalled >= 3:  # zigzag in a flat valley; keep converged honest
            break

    fz = BetaFuzzy(c, h, k)
    return FitResult(
        params=fz,
        sse=_sse(values, t_grid, c / k, h),
        iterations=iterations,
        converged=converged,
    )


def write_stats_csv(path, ids, fits) -> None:
    """Persist fitted statistics: sample_id, c, h, K, sse, converged."""
    fits = list(fits)
    if len(ids) != len(fits):
        raise ValidationError("ids and fits must have matching length")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "c", "h", "K", "sse", "converged"])
        for sample_id, fit in zip(ids, fits):
            writer.writerow(
                [
                    sample_id,
                    repr(float(fit.params.location)),
                    repr(float(fit.params.precision)),
                    fit.params.k_max,
                    repr(float(fit.sse)),
                    "true" if fit.converged else "false",
                ]
            )


def read_stats_csv(path):
    """Read fitted statistics; returns (ids, locations, precisions, k_maxes)."""
    ids, locs, precs, ks = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        expected = ["sample_id", "c", "h", "K"]
        if [h.strip() for h in header[:4]] != expected:
            raise ValidationError(
                f"{path}: expected columns {','.join(expected)}[,sse,converged]"
            )
        for i, row in enumerate(reader, start=2):
            if len(row) < 4:
                raise ValidationError(f"{path}: line {i}: too few cells")
            try:
                ids.append(row[0])
                locs.append(float(row[1]))
                precs.append(float(row[2]))
                ks.append(int(float(row[3])))
            except ValueError:
                raise ValidationError(f"{path}: line {i}: malformed numeric cell") from None
    if not ids:
        raise ValidationError(f"{path}: no data rows")
    return ids, np.array(locs), np.array(precs), np.array(ks, dtype=np.int64)
