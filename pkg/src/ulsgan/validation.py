"""Generated-vs-reference comparison of per-bin Gamma parameters."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .conditions import Condition
from .dataset import Dataset
from .errors import InsufficientDataError, ParameterError, PersistenceError, StructuralError
from .signal_core import FilterKind, design_fir
from .statistics import (
    DEFAULT_BINS,
    DEFAULT_CELLS,
    DEFAULT_SIGNIFICANCE,
    MIN_FIT_SAMPLES,
    SPEED_OF_SOUND_MPS,
    DistanceBin,
    GammaParams,
    chi_square_gof,
    collect_bin_amplitudes,
    fit_gamma,
)

DEFAULT_POST_LOWPASS_HZ = 1_500.0
POST_LOWPASS_TAPS = 63
DEFAULT_TOLERANCE = 0.30

REPORT_COLUMNS = [
    "ground", "bin_lo_m", "bin_hi_m", "height_m", "beta_deg",
    "k_ref", "theta_ref", "k_gen", "theta_gen", "rel_err_k", "rel_err_theta",
    "gof_ref", "gof_gen", "n_ref", "n_gen",
]


def post_lowpass(signals, cutoff_hz: float = DEFAULT_POST_LOWPASS_HZ, sample_rate_hz: float = 20_000.0,
                 taps: int = POST_LOWPASS_TAPS) -> np.ndarray:
    """Zero-phase lowpass of envelopes (rows), then clamp negatives to zero.

    Edges are extended by mirror symmetry so a constant envelope passes
    unchanged.
    """
    if not 0 < cutoff_hz < sample_rate_hz / 2:
        raise ParameterError(f"cutoff {cutoff_hz} Hz must lie in (0, {sample_rate_hz / 2}) Hz")
    x = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    h = design_fir(FilterKind.LOWPASS, cutoff_hz, None, taps, sample_rate_hz).coefficients
    half = taps // 2
    if x.shape[1] <= half:
        raise ParameterError(f"signals of length {x.shape[1]} are too short for a {taps}-tap filter")
    padded = np.pad(x, ((0, 0), (half, half)), mode="symmetric")
    windows = np.lib.stride_tricks.sliding_window_view(padded, taps, axis=1)
    y = windows @ h[::-1]
    y = np.maximum(y, 0.0)
    return y if np.ndim(signals) > 1 else y[0]


@dataclass(frozen=True)
class CellComparison:
    condition: Condition
    bin: DistanceBin
    reference: GammaParams
    generated: GammaParams
    gof_ref: bool | None
    gof_gen: bool | None
    n_ref: int
    n_gen: int

    @property
    def rel_err_k(self) -> float:
        return abs(self.generated.k - self.reference.k) / self.reference.k

    @property
    def rel_err_theta(self) -> float:
        return abs(self.generated.theta - self.reference.theta) / self.reference.theta


@dataclass
class ValidationReport:
    cells: list[CellComparison] = field(default_factory=list)
    tol_k: float = DEFAULT_TOLERANCE
    tol_theta: float = DEFAULT_TOLERANCE

    @property
    def worst_k(self) -> float:
        return max((c.rel_err_k for c in self.cells), default=0.0)

    @property
    def worst_theta(self) -> float:
        return max((c.rel_err_theta for c in self.cells), default=0.0)

    @property
    def mean_k(self) -> float:
        return float(np.mean([c.rel_err_k for c in self.cells])) if self.cells else 0.0

    @property
    def mean_theta(self) -> float:
        return float(np.mean([c.rel_err_theta for c in self.cells])) if self.cells else 0.0

    @property
    def passed(self) -> bool:
        return all(c.rel_err_k <= self.tol_k and c.rel_err_theta <= self.tol_theta for c in self.cells)

    def cell(self, cond: Condition, dbin: DistanceBin | int) -> CellComparison:
        index = dbin.index if isinstance(dbin, DistanceBin) else int(dbin)
        for c in self.cells:
            if c.condition == cond and c.bin.index == index:
                return c
        raise KeyError((cond, index))

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}: {len(self.cells)} cells, worst |dk|/k {self.worst_k:.4f}, "
                f"worst |dtheta|/theta {self.worst_theta:.4f} (tolerances {self.tol_k}, {self.tol_theta})")


def _groups(ds) -> dict[Condition, np.ndarray]:
    if isinstance(ds, Dataset):
        if ds.kind != "processed":
            raise StructuralError(f"comparison needs processed datasets, got kind {ds.kind!r}")
        return ds.groups()
    return dict(ds)


def compare_populations(
    reference,
    generated,
    bins: Iterable[DistanceBin | int] | Callable[[Condition], Iterable[DistanceBin | int]] = DEFAULT_BINS,
    tol_k: float = DEFAULT_TOLERANCE,
    tol_theta: float = DEFAULT_TOLERANCE,
    min_samples: int = MIN_FIT_SAMPLES,
    cells: int = DEFAULT_CELLS,
    significance: float = DEFAULT_SIGNIFICANCE,
    sample_rate_hz: float = 20_000.0,
    speed_of_sound_mps: float = SPEED_OF_SOUND_MPS,
) -> ValidationReport:
    """Fit Gamma per (condition, bin) on both populations and compare.

    ``reference`` / ``generated`` are processed Datasets or mappings from
    Condition to a records-by-samples array.  ``bins`` is either one set of
    bins for every condition or a function from condition to its bins.
    """
    ref, gen = _groups(reference), _groups(generated)
    if set(ref) != set(gen):
        only_ref = sorted(set(ref) - set(gen))
        only_gen = sorted(set(gen) - set(ref))
        raise StructuralError(f"condition sets differ: only in reference {only_ref}, only in generated {only_gen}")
    bins_for = bins if callable(bins) else (lambda _cond, fixed=tuple(bins): fixed)
    report = ValidationReport(tol_k=tol_k, tol_theta=tol_theta)
    for cond in sorted(ref):
        for dbin in bins_for(cond):
            dbin = dbin if isinstance(dbin, DistanceBin) else DistanceBin(int(dbin))
            fits = []
            for name, pop in (("reference", ref[cond]), ("generated", gen[cond])):
                amps = collect_bin_amplitudes(pop, dbin, sample_rate_hz, speed_of_sound_mps)
                if amps.size < max(min_samples, MIN_FIT_SAMPLES):
                    raise InsufficientDataError(
                        f"{name} population, {cond}, bin {dbin.index}: {amps.size} samples < {min_samples}"
                    )
                params = fit_gamma(amps)
                gof = chi_square_gof(amps, params, cells, significance).accepted if amps.size >= 5 * cells else None
                fits.append((params, gof, int(amps.size)))
            (pr, gr, nr), (pg, gg, ng) = fits
            report.cells.append(CellComparison(cond, dbin, pr, pg, gr, gg, nr, ng))
    return report


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(report: ValidationReport, path) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for c in report.cells:
                writer.writerow([_fmt(v) for v in (
                    c.condition.ground.value, c.bin.lo_m, c.bin.hi_m, c.condition.height_m, c.condition.beta_deg,
                    c.reference.k, c.reference.theta, c.generated.k, c.generated.theta,
                    c.rel_err_k, c.rel_err_theta, c.gof_ref, c.gof_gen, c.n_ref, c.n_gen,
                )])
    except OSError as exc:
        raise PersistenceError(f"cannot write report {path}: {exc}") from exc
    return path
