"""Distance-binned amplitude statistics of processed envelopes.

Envelope samples are grouped into 0.25 m range bins (two-way travel time),
a Gamma distribution is fitted to each bin by maximum likelihood, and the
fitted (k, theta) pairs are tabulated over the (height, beta) grid.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import special, stats

from .conditions import Condition, Ground
from .errors import (
    DegenerateDataError,
    ExtrapolationError,
    InsufficientDataError,
    ParameterError,
    StructuralError,
)

log = logging.getLogger(__name__)

BIN_WIDTH_M = 0.25
SPEED_OF_SOUND_MPS = 343.0
MIN_FIT_SAMPLES = 50
DEFAULT_CELLS = 20
DEFAULT_SIGNIFICANCE = 0.05
DEFAULT_BINS = tuple(range(1, 9))


@dataclass(frozen=True, order=True)
class DistanceBin:
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ParameterError(f"bin index must be >= 0, got {self.index}")

    @property
    def lo_m(self) -> float:
        return BIN_WIDTH_M * self.index

    @property
    def hi_m(self) -> float:
        return BIN_WIDTH_M * (self.index + 1)

    @property
    def center_m(self) -> float:
        return BIN_WIDTH_M * (self.index + 0.5)

    @classmethod
    def containing(cls, distance_m: float) -> "DistanceBin":
        return cls(int(math.floor(distance_m / BIN_WIDTH_M)))


@dataclass(frozen=True)
class GammaParams:
    k: float
    theta: float
    converged: bool = True

    @property
    def mean(self) -> float:
        return self.k * self.theta

    @property
    def variance(self) -> float:
        return self.k * self.theta**2

    def loglik(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(np.sum(stats.gamma.logpdf(x, self.k, scale=self.theta)))


@dataclass(frozen=True)
class GofResult:
    statistic: float
    degrees_of_freedom: int
    accepted: bool
    p_value: float


def _round_half_up(x: float) -> int:
    # tiny guard so 58.5000000001-style float noise does not flip the rounding
    return int(math.floor(x + 0.5 + 1e-9))


def bin_sample_range(
    bin: DistanceBin, sample_rate_hz: float, speed_of_sound_mps: float = SPEED_OF_SOUND_MPS
) -> tuple[int, int]:
    """Half-open sample index range covered by a range bin (two-way travel)."""
    if sample_rate_hz <= 0 or speed_of_sound_mps <= 0:
        raise ParameterError("sample rate and speed of sound must be positive")
    start = _round_half_up(2 * bin.lo_m / speed_of_sound_mps * sample_rate_hz)
    end = _round_half_up(2 * bin.hi_m / speed_of_sound_mps * sample_rate_hz)
    if end <= start:
        raise ParameterError(f"bin {bin} covers no samples at {sample_rate_hz} Hz")
    return start, end


def collect_bin_amplitudes(
    signals,
    bin: DistanceBin,
    sample_rate_hz: float = 20_000.0,
    speed_of_sound_mps: float = SPEED_OF_SOUND_MPS,
) -> np.ndarray:
    """Pool the in-bin samples of many envelopes, dropping non-positive values.

    ``signals`` is a 2-D array (records x samples) or a sequence of
    ProcessedSignal / 1-D arrays of equal length.
    """
    arr = _as_matrix(signals)
    start, end = bin_sample_range(bin, sample_rate_hz, speed_of_sound_mps)
    pooled = arr[:, start:end].ravel()
    keep = pooled > 0
    excluded = int(pooled.size - keep.sum())
    if excluded:
        log.debug("bin %d: excluded %d non-positive samples of %d", bin.index, excluded, pooled.size)
    return pooled[keep].astype(np.float64)


def _as_matrix(signals) -> np.ndarray:
    if isinstance(signals, np.ndarray):
        arr = signals
    else:
        rows = [getattr(s, "samples", s) for s in signals]
        if not rows:
            raise ParameterError("empty signal set")
        lengths = {len(r) for r in rows}
        if len(lengths) != 1:
            raise ParameterError(f"signals have differing lengths {sorted(lengths)}")
        arr = np.vstack(rows)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[0] == 0:
        raise ParameterError("empty signal set")
    return arr


def fit_gamma(amplitudes, max_iter: int = 100, rtol: float = 1e-10) -> GammaParams:
    """Maximum-likelihood Gamma fit.

    Solves ln k - digamma(k) = ln(mean) - mean(ln x) by Newton's method,
    starting from the method-of-moments shape mean**2 / var.  If Newton fails
    to converge the moments estimate is returned with ``converged=False``.
    """
    x = np.asarray(amplitudes, dtype=np.float64)
    if x.size < MIN_FIT_SAMPLES:
        raise InsufficientDataError(f"need >= {MIN_FIT_SAMPLES} samples, got {x.size}")
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ParameterError("Gamma fit requires finite, strictly positive samples")
    mean = x.mean()
    var = x.var()
    if var <= 0 or var <= (np.finfo(float).eps * mean) ** 2:
        raise DegenerateDataError("samples have zero variance")
    k0 = mean**2 / var
    s = math.log(mean) - np.log(x).mean()
    if s <= 0:
        raise DegenerateDataError("samples have zero log-spread")

    k = k0
    for _ in range(max_iter):
        f = math.log(k) - special.digamma(k) - s
        fprime = 1.0 / k - special.polygamma(1, k)
        step = f / fprime
        k_new = k - step
        while k_new <= 0:
            step /= 2
            k_new = k - step
        if abs(k_new - k) / k < rtol:
            k = k_new
            break
        k = k_new
    else:
        log.warning("Gamma MLE did not converge; using moments estimate")
        return GammaParams(float(k0), float(mean / k0), converged=False)
    return GammaParams(float(k), float(mean / k))


def moments_gamma(amplitudes) -> GammaParams:
    x = np.asarray(amplitudes, dtype=np.float64)
    mean, var = x.mean(), x.var()
    return GammaParams(float(mean**2 / var), float(var / mean))


def chi_square_gof(
    amplitudes,
    params: GammaParams,
    cells: int = DEFAULT_CELLS,
    significance: float = DEFAULT_SIGNIFICANCE,
) -> GofResult:
    """Pearson chi-square test over equiprobable cells of the fitted Gamma."""
    if cells < 5:
        raise ParameterError(f"need at least 5 cells, got {cells}")
    x = np.asarray(amplitudes, dtype=np.float64)
    if x.size < 5 * cells:
        raise InsufficientDataError(f"need >= {5 * cells} samples for {cells} cells, got {x.size}")
    q = np.arange(1, cells) / cells
    edges = special.gammaincinv(params.k, q) * params.theta
    observed = np.bincount(np.searchsorted(edges, x, side="right"), minlength=cells)
    expected = x.size / cells
    statistic = float(np.sum((observed - expected) ** 2) / expected)
    dof = cells - 3
    critical = stats.chi2.ppf(1 - significance, dof)
    return GofResult(statistic, dof, statistic <= critical, float(stats.chi2.sf(statistic, dof)))


@dataclass(frozen=True)
class TrendEntry:
    params: GammaParams
    n_samples: int
    gof: GofResult | None


TrendKey = tuple  # (Ground, bin index, height_m, beta_deg)


@dataclass
class TrendTable:
    entries: dict = field(default_factory=dict)
    heights: dict = field(default_factory=dict)  # (ground, bin) -> sorted heights
    betas: dict = field(default_factory=dict)  # (ground, bin) -> sorted betas

    def __len__(self):
        return len(self.entries)

    def get(self, ground: Ground, bin: DistanceBin, height_m: float, beta_deg: float) -> GammaParams:
        c = Condition(height_m, beta_deg, ground)
        return self.entries[(c.ground, bin.index, c.height_m, c.beta_deg)].params

    def rows(self):
        for key in sorted(self.entries, key=lambda k: (k[0].value, k[1], k[2], k[3])):
            ground, b, h, beta = key
            e = self.entries[key]
            dbin = DistanceBin(b)
            yield {
                "ground": ground.value,
                "bin_lo_m": dbin.lo_m,
                "bin_hi_m": dbin.hi_m,
                "height_m": h,
                "beta_deg": beta,
                "k": e.params.k,
                "theta": e.params.theta,
                "n_samples": e.n_samples,
                "gof_accepted": "" if e.gof is None else int(e.gof.accepted),
            }

    def write_csv(self, path) -> None:
        columns = ["ground", "bin_lo_m", "bin_hi_m", "height_m", "beta_deg", "k", "theta", "n_samples", "gof_accepted"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def build_trend_table(
    groups: Mapping[Condition, np.ndarray],
    bins: Iterable[DistanceBin | int] = DEFAULT_BINS,
    sample_rate_hz: float = 20_000.0,
    speed_of_sound_mps: float = SPEED_OF_SOUND_MPS,
    cells: int = DEFAULT_CELLS,
    significance: float = DEFAULT_SIGNIFICANCE,
) -> TrendTable:
    """Fit one Gamma per (ground, bin, height, beta).

    ``groups`` maps each condition to its records (records x samples).
    The (height, beta) grid must be rectangular for every ground.
    """
    bins = [b if isinstance(b, DistanceBin) else DistanceBin(int(b)) for b in bins]
    if not groups:
        raise StructuralError("dataset has no records")
    by_ground: dict[Ground, set[Condition]] = defaultdict(set)
    for cond in groups:
        by_ground[cond.ground].add(cond)

    for ground, conds in by_ground.items():
        heights = sorted({c.height_m for c in conds})
        betas = sorted({c.beta_deg for c in conds})
        missing = [
            (h, b) for h in heights for b in betas if Condition(h, b, ground) not in conds
        ]
        if missing:
            shown = ", ".join(f"(h={h}, beta={b})" for h, b in missing[:20])
            raise StructuralError(f"{ground.value}: grid not rectangular; missing cells {shown}")

    table = TrendTable()
    for cond in sorted(groups):
        records = groups[cond]
        for dbin in bins:
            amps = collect_bin_amplitudes(records, dbin, sample_rate_hz, speed_of_sound_mps)
            try:
                params = fit_gamma(amps)
            except InsufficientDataError as exc:
                raise InsufficientDataError(f"{cond}, bin {dbin.index}: {exc}") from None
            gof = chi_square_gof(amps, params, cells, significance) if amps.size >= 5 * cells else None
            table.entries[(cond.ground, dbin.index, cond.height_m, cond.beta_deg)] = TrendEntry(
                params, int(amps.size), gof
            )
    for ground, conds in by_ground.items():
        heights = sorted({c.height_m for c in conds})
        betas = sorted({c.beta_deg for c in conds})
        for dbin in bins:
            table.heights[(ground, dbin.index)] = heights
            table.betas[(ground, dbin.index)] = betas
    return table


def _bracket(grid: Sequence[float], value: float, name: str) -> tuple[int, int, float]:
    tol = 1e-9
    if value < grid[0] - tol or value > grid[-1] + tol:
        raise ExtrapolationError(f"{name} {value} outside grid [{grid[0]}, {grid[-1]}]")
    if len(grid) == 1:
        return 0, 0, 0.0
    i = int(np.searchsorted(grid, value, side="right")) - 1
    i = min(max(i, 0), len(grid) - 2)
    w = (value - grid[i]) / (grid[i + 1] - grid[i])
    return i, i + 1, float(min(max(w, 0.0), 1.0))


def interpolate_params(
    table: TrendTable, ground: Ground | str, bin: DistanceBin, height_m: float, beta_deg: float
) -> GammaParams:
    """Bilinear interpolation of k and theta over the (height, beta) grid."""
    ground = Ground.parse(ground)
    key = (ground, bin.index)
    if key not in table.heights:
        raise ExtrapolationError(f"table has no entries for {ground.value}, bin {bin.index}")
    hs, bs = table.heights[key], table.betas[key]
    i0, i1, wh = _bracket(hs, height_m, "height")
    j0, j1, wb = _bracket(bs, beta_deg, "beta")

    def at(i, j):
        return table.entries[(ground, bin.index, hs[i], bs[j])].params

    corners = [(at(i0, j0), (1 - wh) * (1 - wb)), (at(i1, j0), wh * (1 - wb)),
               (at(i0, j1), (1 - wh) * wb), (at(i1, j1), wh * wb)]
    k = sum(p.k * w for p, w in corners)
    theta = sum(p.theta * w for p, w in corners)
    return GammaParams(float(k), float(theta))
