"""Raw ultrasonic capture -> absolute complex envelope.

The chain is bandpass -> complex mixing -> lowpass -> rational resampling ->
head trim -> modulus.  Every stage is a pure function of its inputs.

Gain convention: mixing a real carrier to baseband keeps only one of the two
spectral images, halving in-band amplitude.  ``process_raw`` multiplies the
baseband signal by ``BASEBAND_GAIN`` (2) so a unit-amplitude carrier burst
produces a unit envelope.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .errors import ParameterError, PipelineError

BASEBAND_GAIN = 2.0
MAX_RATIO_DENOMINATOR = 1000


class FilterKind(str, enum.Enum):
    BANDPASS = "bandpass"
    LOWPASS = "lowpass"


@dataclass(frozen=True)
class RawSignal:
    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))


@dataclass(frozen=True)
class ComplexSignal:
    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.complex128)
        if not np.all(np.isfinite(samples)):
            raise ParameterError("complex signal contains non-finite values")
        object.__setattr__(self, "samples", samples)


@dataclass(frozen=True)
class ProcessedSignal:
    samples: np.ndarray
    sample_rate_hz: float = 20_000.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if np.any(samples < 0):
            raise ParameterError("processed envelope samples must be non-negative")
        object.__setattr__(self, "samples", samples)


@dataclass(frozen=True)
class FirFilter:
    coefficients: np.ndarray
    design_kind: FilterKind

    @property
    def taps(self) -> int:
        return len(self.coefficients)

    def response(self, freqs_hz, sample_rate_hz: float) -> np.ndarray:
        """Complex frequency response at the given frequencies."""
        freqs = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
        n = np.arange(self.taps)
        phase = np.exp(-2j * np.pi * np.outer(freqs / sample_rate_hz, n))
        return phase @ self.coefficients


@dataclass(frozen=True)
class PipelineConfig:
    carrier_hz: float = 51_200.0
    bandpass_half_width_hz: float = 5_000.0
    bandpass_taps: int = 255
    lowpass_cutoff_hz: float = 5_000.0
    lowpass_taps: int = 127
    output_rate_hz: float = 20_000.0
    output_len: int = 583
    transient_trim_samples: int = 17

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)


def _hamming(taps: int) -> np.ndarray:
    n = np.arange(taps)
    return 0.54 - 0.46 * np.cos(2 * np.pi * n / (taps - 1))


def design_fir(
    kind: FilterKind | str,
    center_or_cutoff_hz: float,
    half_width_hz: float | None,
    taps: int,
    sample_rate_hz: float,
) -> FirFilter:
    """Design a linear-phase windowed-sinc (Hamming) FIR filter.

    A lowpass is normalized to unit DC gain.  A bandpass is a lowpass of
    cutoff ``half_width_hz`` shifted to ``center_or_cutoff_hz`` by cosine
    modulation, normalized to unit gain at the center frequency.
    """
    kind = FilterKind(kind)
    if taps < 3 or taps % 2 == 0:
        raise ParameterError(f"tap count must be odd and >= 3, got {taps}")
    if sample_rate_hz <= 0:
        raise ParameterError("sample rate must be positive")
    nyquist = sample_rate_hz / 2
    if kind is FilterKind.LOWPASS:
        cutoff = center_or_cutoff_hz
        if not 0 < cutoff < nyquist:
            raise ParameterError(f"lowpass cutoff {cutoff} Hz outside (0, {nyquist}) Hz")
    else:
        if half_width_hz is None or half_width_hz <= 0:
            raise ParameterError("bandpass needs a positive half width")
        lo, hi = center_or_cutoff_hz - half_width_hz, center_or_cutoff_hz + half_width_hz
        if not (0 < lo and hi < nyquist):
            raise ParameterError(f"band edges [{lo}, {hi}] Hz outside (0, {nyquist}) Hz")
        cutoff = half_width_hz

    m = np.arange(taps) - (taps - 1) / 2
    fc = cutoff / sample_rate_hz
    h = 2 * fc * np.sinc(2 * fc * m) * _hamming(taps)
    if kind is FilterKind.LOWPASS:
        h = h / h.sum()
    else:
        h = 2 * h * np.cos(2 * np.pi * center_or_cutoff_hz / sample_rate_hz * m)
        gain = abs(np.sum(h * np.exp(-2j * np.pi * center_or_cutoff_hz / sample_rate_hz * m)))
        h = h / gain
    # exact symmetry regardless of rounding in the window
    h = 0.5 * (h + h[::-1])
    h.setflags(write=False)
    return FirFilter(h, kind)


def convolve(sig, filt: FirFilter):
    """Centered same-length convolution with zero-padded edges."""
    x = sig.samples
    if x.size == 0:
        raise ParameterError("cannot filter an empty signal")
    y = np.convolve(x, filt.coefficients, mode="same")
    return type(sig)(y, sig.sample_rate_hz)


def mix_to_baseband(sig, carrier_hz: float) -> ComplexSignal:
    fs = sig.sample_rate_hz
    if not 0 <= carrier_hz < fs / 2:
        raise ParameterError(f"carrier {carrier_hz} Hz at or above Nyquist ({fs / 2} Hz)")
    n = np.arange(len(sig.samples))
    return ComplexSignal(sig.samples * np.exp(-2j * np.pi * carrier_hz / fs * n), fs)


def rate_ratio(source_hz: float, target_hz: float) -> Fraction:
    """Exact up/down ratio for resampling, or ParameterError."""
    if source_hz <= 0 or target_hz <= 0:
        raise ParameterError("sample rates must be positive")
    exact = target_hz / source_hz
    ratio = Fraction(exact).limit_denominator(MAX_RATIO_DENOMINATOR)
    if abs(float(ratio) - exact) > 1e-12 * exact or ratio.numerator > MAX_RATIO_DENOMINATOR:
        raise ParameterError(
            f"rate ratio {target_hz}/{source_hz} is not a fraction with terms <= {MAX_RATIO_DENOMINATOR}"
        )
    return ratio


def resample(sig: ComplexSignal, target_rate_hz: float) -> ComplexSignal:
    """Polyphase rational resampling (330 kHz -> 20 kHz is up 2, down 33)."""
    ratio = rate_ratio(sig.sample_rate_hz, target_rate_hz)
    if ratio == 1:
        return ComplexSignal(sig.samples.copy(), sig.sample_rate_hz)
    y = sps.resample_poly(sig.samples, ratio.numerator, ratio.denominator, padtype="line")
    return ComplexSignal(y, float(target_rate_hz))


def envelope_abs(sig: ComplexSignal) -> ProcessedSignal:
    return ProcessedSignal(np.abs(sig.samples), sig.sample_rate_hz)


@functools.lru_cache(maxsize=32)
def _pipeline_filters(cfg: PipelineConfig, raw_rate_hz: float) -> tuple[FirFilter, FirFilter]:
    bp = design_fir(FilterKind.BANDPASS, cfg.carrier_hz, cfg.bandpass_half_width_hz, cfg.bandpass_taps, raw_rate_hz)
    lp = design_fir(FilterKind.LOWPASS, cfg.lowpass_cutoff_hz, None, cfg.lowpass_taps, raw_rate_hz)
    return bp, lp


def process_raw(raw: RawSignal, cfg: PipelineConfig | None = None) -> ProcessedSignal:
    """Bandpass, mix to baseband, lowpass, resample, trim and take the modulus."""
    cfg = cfg or PipelineConfig()
    fs = raw.sample_rate_hz
    if cfg.carrier_hz >= fs / 2:
        raise ParameterError(f"carrier {cfg.carrier_hz} Hz at or above Nyquist of raw rate {fs} Hz")
    bp, lp = _pipeline_filters(cfg, float(fs))
    filtered = convolve(raw, bp)
    base = mix_to_baseband(filtered, cfg.carrier_hz)
    base = ComplexSignal(BASEBAND_GAIN * base.samples, fs)
    base = convolve(base, lp)
    low = resample(base, cfg.output_rate_hz)
    trimmed = low.samples[cfg.transient_trim_samples:]
    if len(trimmed) < cfg.output_len:
        raise PipelineError(
            f"only {len(trimmed)} samples after trimming {cfg.transient_trim_samples}; "
            f"need {cfg.output_len}"
        )
    return envelope_abs(ComplexSignal(trimmed[: cfg.output_len], low.sample_rate_hz))
