"""Synthetic reference corpus standing in for the measurement campaign.

Every raw record is a 9,900-sample, 330 kHz monostatic capture made of

* a membrane reverberation burst: carrier times an exponential decay from t=0,
* ground clutter: a carrier modulated by a stochastic envelope whose
  per-range-bin marginal is a configured Gamma(k, theta),
* white Gaussian noise.

Clutter envelope construction: reflectors arrive as a Poisson process in
range (denser around the clutter peak); each contributes a Gaussian pulse of
the transmit bandwidth with a standard-normal weight.  The weighted pulse sum,
divided by the root of the summed squared pulses, is exactly standard normal
at every instant given the reflector positions.  Mapping it through the
normal CDF and the Gamma quantile function of the bin it falls into gives
the target Gamma marginal per bin, while the reflector layout sets the
texture (denser for gravel, sparser for asphalt).

Range zero is placed at the raw time that lands on processed sample 0
(the pipeline trims ``transient_trim_samples`` at ``output_rate_hz``), so
processed-envelope bin ranges line up with ``statistics.bin_sample_range``.

All numeric defaults are invented stand-ins, not measured values.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np
from scipy import special

from .conditions import BETA_RANGE_DEG, HEIGHT_RANGE_M, Condition, Ground
from .dataset import Dataset, DatasetWriter, RecordInfo, record_file_name
from .errors import ParameterError
from .signal_core import PipelineConfig, RawSignal, process_raw
from .statistics import BIN_WIDTH_M, DistanceBin, GammaParams

RAW_RATE_HZ = 330_000.0
RAW_LENGTH = 9_900
_MASK64 = (1 << 64) - 1
# envelope is built on a coarser grid, then linearly interpolated to 330 kHz
_ENVELOPE_DECIMATION = 5


@dataclass(frozen=True)
class GroundTrend:
    """Per-ground map (height, beta, bin) -> Gamma target.

    At the clutter peak the shape is ``k_peak + k_height_slope * (h - 0.35)``
    and the scale ``theta_peak * (1 + theta_height_slope * (h - 0.35))``;
    away from it both relax toward floors with the Gaussian clutter profile.
    """

    k_peak: float
    k_floor: float
    k_height_slope: float
    theta_peak: float
    theta_floor_fraction: float
    theta_height_slope: float
    reflector_count_mean: float


DEFAULT_TRENDS = {
    Ground.GRAVEL: GroundTrend(
        k_peak=2.0, k_floor=1.5, k_height_slope=2.0,
        theta_peak=0.15, theta_floor_fraction=0.25, theta_height_slope=-2.0,
        reflector_count_mean=400.0,
    ),
    Ground.ASPHALT: GroundTrend(
        k_peak=3.2, k_floor=2.2, k_height_slope=2.0,
        theta_peak=0.06, theta_floor_fraction=0.25, theta_height_slope=-2.0,
        reflector_count_mean=200.0,
    ),
}


@dataclass(frozen=True)
class CorpusParams:
    reverb_duration_s: float = 1.3e-3
    reverb_amplitude: float = 1.0
    # d_peak = peak_offset_m + peak_per_height * h + peak_per_degree * beta
    peak_offset_m: float = 0.0
    peak_per_height: float = 1.4
    peak_per_degree: float = -0.02
    clutter_spread_m: float = 0.3
    theta_per_degree: float = 0.03
    noise_std: float = 0.01
    pulse_bandwidth_hz: float = 3_000.0
    # fraction of reflectors clustered around the peak; the rest are uniform in range
    peak_reflector_fraction: float = 0.5
    reflector_rate_scale: float = 1.0
    speed_of_sound_mps: float = 343.0
    carrier_hz: float = 51_200.0
    sample_rate_hz: float = RAW_RATE_HZ
    record_length: int = RAW_LENGTH
    range_origin_s: float = 17 / 20_000.0
    trends: dict = field(default_factory=lambda: dict(DEFAULT_TRENDS))

    def __post_init__(self):
        scales = {
            "reverb_duration_s": self.reverb_duration_s,
            "clutter_spread_m": self.clutter_spread_m,
            "pulse_bandwidth_hz": self.pulse_bandwidth_hz,
            "speed_of_sound_mps": self.speed_of_sound_mps,
            "sample_rate_hz": self.sample_rate_hz,
        }
        for name, v in scales.items():
            if not v > 0:
                raise ParameterError(f"{name} must be > 0, got {v}")
        if self.noise_std < 0 or self.reverb_amplitude < 0 or self.reflector_rate_scale < 0:
            raise ParameterError("noise_std, reverb_amplitude and reflector_rate_scale must be >= 0")
        if not 0 <= self.peak_reflector_fraction <= 1:
            raise ParameterError("peak_reflector_fraction must lie in [0, 1]")
        trends = {Ground.parse(g): (t if isinstance(t, GroundTrend) else GroundTrend(**t))
                  for g, t in self.trends.items()}
        object.__setattr__(self, "trends", trends)
        for h in HEIGHT_RANGE_M:
            for b in BETA_RANGE_DEG:
                d = self.peak_distance(Condition(h, b, Ground.GRAVEL))
                if not 0.3 <= d <= 2.5:
                    raise ParameterError(f"clutter peak {d:.3f} m at h={h}, beta={b} outside [0.3, 2.5] m")

    def peak_distance(self, cond: Condition) -> float:
        return self.peak_offset_m + self.peak_per_height * cond.height_m + self.peak_per_degree * cond.beta_deg

    def dominant_bin(self, cond: Condition) -> DistanceBin:
        """Range bin holding the clutter peak."""
        return DistanceBin.containing(self.peak_distance(cond))

    def target(self, cond: Condition, dbin: DistanceBin | int) -> GammaParams:
        """Configured Gamma (k, theta) of the processed envelope in one bin."""
        dbin = dbin if isinstance(dbin, DistanceBin) else DistanceBin(int(dbin))
        trend = self.trends[cond.ground]
        dh = cond.height_m - HEIGHT_RANGE_M[0]
        w = math.exp(-0.5 * ((dbin.center_m - self.peak_distance(cond)) / self.clutter_spread_m) ** 2)
        k_peak = trend.k_peak + trend.k_height_slope * dh
        k = trend.k_floor + (k_peak - trend.k_floor) * w
        theta_peak = (trend.theta_peak * (1 + trend.theta_height_slope * dh)
                      * (1 + self.theta_per_degree * cond.beta_deg))
        theta = theta_peak * (trend.theta_floor_fraction + (1 - trend.theta_floor_fraction) * w)
        if not (k > 0 and theta > 0):
            raise ParameterError(f"trend yields non-positive Gamma target at {cond}, bin {dbin.index}")
        return GammaParams(k, theta)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trends"] = {g.value: asdict(t) for g, t in self.trends.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusParams":
        d = dict(d)
        if "trends" in d:
            base = {g: asdict(t) for g, t in DEFAULT_TRENDS.items()}
            for g, t in d["trends"].items():
                base[Ground.parse(g)] = {**base[Ground.parse(g)], **t}
            d["trends"] = base
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown corpus parameter keys: {sorted(unknown)}")
        return cls(**d)


def _default_heights() -> tuple[float, ...]:
    return tuple(round(0.35 + 0.01 * i, 2) for i in range(28))


def _default_betas() -> tuple[float, ...]:
    return tuple(float(b) for b in range(-8, 3))


@dataclass(frozen=True)
class MeasurementGrid:
    heights_m: tuple = field(default_factory=_default_heights)
    betas_deg: tuple = field(default_factory=_default_betas)
    rotations: int = 21
    repetitions: int = 10
    grounds: tuple = (Ground.GRAVEL, Ground.ASPHALT)

    def __post_init__(self):
        object.__setattr__(self, "heights_m", tuple(round(float(h), 9) for h in self.heights_m))
        object.__setattr__(self, "betas_deg", tuple(round(float(b), 9) for b in self.betas_deg))
        object.__setattr__(self, "grounds", tuple(Ground.parse(g) for g in self.grounds))
        if not (self.heights_m and self.betas_deg and self.grounds):
            raise ParameterError("grid needs at least one height, angle and ground")
        if self.rotations < 1 or self.repetitions < 1:
            raise ParameterError("rotations and repetitions must be >= 1")
        for h in self.heights_m:
            for b in self.betas_deg:
                Condition(h, b, Ground.GRAVEL).require_conformant()

    @property
    def record_count(self) -> int:
        return (len(self.heights_m) * len(self.betas_deg) * self.rotations
                * self.repetitions * len(self.grounds))

    def to_dict(self) -> dict:
        return {
            "heights_m": list(self.heights_m),
            "betas_deg": list(self.betas_deg),
            "rotations": self.rotations,
            "repetitions": self.repetitions,
            "grounds": [g.value for g in self.grounds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementGrid":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown grid keys: {sorted(unknown)}")
        return cls(**d)


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _ground_index(g: Ground) -> int:
    return 0 if g is Ground.GRAVEL else 1


def cell_indices(cond: Condition) -> tuple[int, int]:
    """Campaign-grid coordinates: 1 cm height steps from 0.35 m, 1 degree beta steps from -8."""
    return round((cond.height_m - HEIGHT_RANGE_M[0]) * 100), round(cond.beta_deg - BETA_RANGE_DEG[0])


def record_seed(master_seed: int, cond: Condition, rotation: int, repetition: int) -> int:
    """Mix (master seed, height idx, angle idx, rotation, repetition, ground) into 64 bits.

    Indices refer to the full campaign grid, so a restricted grid reproduces
    exactly the records of the full one.
    """
    hi, bi = cell_indices(cond)
    s = splitmix64(master_seed & _MASK64)
    for v in (hi, bi, rotation, repetition, _ground_index(cond.ground)):
        s = splitmix64(s ^ (v & _MASK64))
    return s


def plan_corpus(grid: MeasurementGrid, master_seed: int) -> list[RecordInfo]:
    """Record descriptors in grid order: ground, height, beta, rotation, repetition."""
    infos = []
    for g in grid.grounds:
        for h in grid.heights_m:
            for b in grid.betas_deg:
                cond = Condition(h, b, g)
                for rot in range(grid.rotations):
                    for rep in range(grid.repetitions):
                        infos.append(RecordInfo(
                            record_file_name(len(infos)), cond, rot, rep,
                            record_seed(master_seed, cond, rot, rep),
                        ))
    return infos


def _pulse_sigma_s(params: CorpusParams) -> float:
    # Gaussian pulse whose spectrum has 4 standard deviations across the bandwidth
    return 1.0 / (2 * math.pi * params.pulse_bandwidth_hz / 4)


def clutter_envelope(cond: Condition, params: CorpusParams, rng: np.random.Generator,
                     t: np.ndarray) -> np.ndarray:
    """Ground-clutter envelope at raw times ``t`` (seconds)."""
    trend = params.trends[cond.ground]
    c = params.speed_of_sound_mps
    tau = t - params.range_origin_s
    dist = c * tau / 2
    d_lo, d_hi = dist[0] - 0.2, dist[-1] + 0.2

    n = rng.poisson(trend.reflector_count_mean * params.reflector_rate_scale)
    if n == 0:
        return np.zeros_like(t)
    d_peak = params.peak_distance(cond)
    clustered = rng.random(n) < params.peak_reflector_fraction
    positions = np.where(
        clustered,
        rng.normal(d_peak, params.clutter_spread_m, n),
        rng.uniform(d_lo, d_hi, n),
    )
    weights = rng.standard_normal(n)

    sigma_d = c * _pulse_sigma_s(params) / 2
    logp = -0.5 * ((dist[:, None] - positions[None, :]) / sigma_d) ** 2
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    latent = (p @ weights) / np.sqrt(np.einsum("ij,ij->i", p, p))

    nbins = int(math.floor(max(dist[-1], 0) / BIN_WIDTH_M)) + 1
    targets = [params.target(cond, b) for b in range(nbins)]
    ks = np.array([g.k for g in targets])
    thetas = np.array([g.theta for g in targets])
    idx = np.clip(np.floor(dist / BIN_WIDTH_M).astype(int), 0, nbins - 1)
    q = np.clip(special.ndtr(latent), 1e-15, 1 - 1e-15)
    return special.gammaincinv(ks[idx], q) * thetas[idx]


def synth_raw_signal(cond: Condition, params: CorpusParams, seed: int) -> RawSignal:
    cond.require_conformant()
    rng = np.random.default_rng(seed)
    fs = params.sample_rate_hz
    n = params.record_length
    t = np.arange(n) / fs
    phase = rng.uniform(0, 2 * np.pi)

    coarse = t[::_ENVELOPE_DECIMATION]
    if coarse[-1] < t[-1]:
        coarse = np.append(coarse, t[-1])
    env = np.interp(t, coarse, clutter_envelope(cond, params, rng, coarse))

    reverb = params.reverb_amplitude * np.exp(-5.0 * t / params.reverb_duration_s)
    carrier = 2 * np.pi * params.carrier_hz * t
    x = reverb * np.cos(carrier) + env * np.cos(carrier + phase)
    if params.noise_std > 0:
        x = x + rng.normal(0.0, params.noise_std, n)
    return RawSignal(x, fs)


def iter_corpus(grid: MeasurementGrid, params: CorpusParams, master_seed: int,
                pipeline: PipelineConfig | None = None) -> Iterator[tuple[RecordInfo, np.ndarray]]:
    """Yield (info, samples); processed envelopes instead of raw when ``pipeline`` is given."""
    for info in plan_corpus(grid, master_seed):
        raw = synth_raw_signal(info.condition, params, info.seed)
        if pipeline is None:
            yield info, raw.samples
        else:
            yield info, process_raw(raw, pipeline).samples


def synth_corpus(grid: MeasurementGrid, params: CorpusParams, master_seed: int,
                 pipeline: PipelineConfig | None = None) -> Dataset:
    """In-memory corpus; see ``write_corpus`` for the streaming variant."""
    infos, rows = [], []
    for info, samples in iter_corpus(grid, params, master_seed, pipeline):
        infos.append(info)
        rows.append(np.asarray(samples, dtype=np.float32))
    if pipeline is None:
        kind, rate, length = "raw", params.sample_rate_hz, params.record_length
    else:
        kind, rate, length = "processed", pipeline.output_rate_hz, pipeline.output_len
    return Dataset(kind, rate, length, infos, np.vstack(rows))


def write_corpus(path, grid: MeasurementGrid, params: CorpusParams, master_seed: int,
                 pipeline: PipelineConfig | None = None):
    if pipeline is None:
        writer = DatasetWriter(path, "raw", params.sample_rate_hz, params.record_length)
    else:
        writer = DatasetWriter(path, "processed", pipeline.output_rate_hz, pipeline.output_len)
    for info, samples in iter_corpus(grid, params, master_seed, pipeline):
        writer.add(info, samples)
    return writer.close()
