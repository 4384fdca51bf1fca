"""Conditional GAN over processed envelopes.

Generator: [noise, condition] -> 4 leaky-ReLU layers -> tanh output of the
record length.  Discriminator: [envelope, condition] -> 3 leaky-ReLU layers
-> 2-way softmax with class order (real, generated).

Training objective per minibatch:

    d_loss = -mean(ln D_real(x, y) + ln(1 - D_real(x, G(x, z))))
    g_loss = -mean(ln D_real(x, G(x, z)))          (non-saturating)

where D_real is the softmax probability of the "real" class.  One
discriminator update is followed by one generator update.

Two conditioning choices keep small-corpus training out of the saturated
regime.  The envelope part of the discriminator input is centered by the
per-sample training mean (a fixed shift, equivalent to a first-layer bias
offset).  The generator's output bias starts at atanh of that mean, so its
first outputs sit on the mean profile instead of near zero.  The
discriminator also runs a faster Adam step than the generator
(``discriminator_lr``).
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .conditions import BETA_RANGE_DEG, HEIGHT_RANGE_M, Condition, Ground
from .dataset import Dataset
from .errors import (
    CorruptionError,
    ExtrapolationError,
    FormatError,
    ParameterError,
    PersistenceError,
    TrainingDivergedError,
    VersionError,
)
from .neuralnet import (
    Activation,
    AdamState,
    DenseLayer,
    MlpNetwork,
    backward,
    forward,
    init_network,
    optimizer_step,
    predict,
)

log = logging.getLogger(__name__)

MAGIC = b"ULSG"
CHECKPOINT_VERSION = 1
PROB_CLAMP = 1e-7
REAL, GENERATED = 0, 1
# keeps atanh of the initial output bias finite
BIAS_INIT_CLIP = 0.99


@dataclass(frozen=True)
class GanConfig:
    noise_dim: int = 100
    generator_hidden: tuple = (256, 512, 512, 1024)
    discriminator_hidden: tuple = (512, 256, 128)
    output_dim: int = 583
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    lr: float = 2e-4
    discriminator_lr: float = 1.6e-3
    # decay of the running average of generator weights kept for sampling; 0 disables
    generator_ema: float = 0.0
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "generator_hidden", tuple(int(d) for d in self.generator_hidden))
        object.__setattr__(self, "discriminator_hidden", tuple(int(d) for d in self.discriminator_hidden))
        if len(self.generator_hidden) != 4:
            raise ParameterError("generator needs exactly 4 hidden layers")
        if len(self.discriminator_hidden) != 3:
            raise ParameterError("discriminator needs exactly 3 hidden layers")
        for name in ("noise_dim", "output_dim", "batch_size"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if any(d < 1 for d in self.generator_hidden + self.discriminator_hidden):
            raise ParameterError("hidden widths must be >= 1")
        if not (self.lr > 0 and self.discriminator_lr > 0):
            raise ParameterError("learning rates must be positive")
        if not 0.0 <= self.generator_ema < 1.0:
            raise ParameterError("generator_ema must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator_hidden"] = list(self.generator_hidden)
        d["discriminator_hidden"] = list(self.discriminator_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown gan config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class NormalizedCondition:
    h_norm: float
    beta_norm: float
    ground_flag: float

    def as_array(self) -> np.ndarray:
        return np.array([self.h_norm, self.beta_norm, self.ground_flag])


def normalize_condition(cond: Condition) -> NormalizedCondition:
    cond.require_conformant()
    h_lo, h_hi = HEIGHT_RANGE_M
    b_lo, b_hi = BETA_RANGE_DEG
    return NormalizedCondition(
        2 * (cond.height_m - h_lo) / (h_hi - h_lo) - 1,
        2 * (cond.beta_deg - b_lo) / (b_hi - b_lo) - 1,
        cond.ground.flag,
    )


def denormalize_condition(nc: NormalizedCondition) -> Condition:
    h_lo, h_hi = HEIGHT_RANGE_M
    b_lo, b_hi = BETA_RANGE_DEG
    if not (-1 - 1e-9 <= nc.h_norm <= 1 + 1e-9 and -1 - 1e-9 <= nc.beta_norm <= 1 + 1e-9):
        raise ParameterError(f"normalized condition {nc} outside [-1, 1]")
    if nc.ground_flag not in (0.0, 1.0):
        raise ParameterError(f"ground flag must be 0 or 1, got {nc.ground_flag}")
    return Condition(
        (nc.h_norm + 1) / 2 * (h_hi - h_lo) + h_lo,
        (nc.beta_norm + 1) / 2 * (b_hi - b_lo) + b_lo,
        Ground.GRAVEL if nc.ground_flag == 1.0 else Ground.ASPHALT,
    )


def build_generator(cfg: GanConfig, seed: int | None = None) -> MlpNetwork:
    dims = [cfg.noise_dim + 3, *cfg.generator_hidden, cfg.output_dim]
    acts = [Activation.LEAKY_RELU] * 4 + [Activation.TANH]
    return init_network(dims, acts, cfg.seed if seed is None else seed)


def build_discriminator(cfg: GanConfig, seed: int | None = None) -> MlpNetwork:
    dims = [cfg.output_dim + 3, *cfg.discriminator_hidden, 2]
    acts = [Activation.LEAKY_RELU] * 3 + [Activation.SOFTMAX]
    return init_network(dims, acts, (cfg.seed + 1) if seed is None else seed)


def gan_losses(d_real, d_fake) -> tuple[float, float]:
    """(discriminator loss, generator loss) from real-class probabilities.

    ``d_real`` is D's real-class probability on real data, ``d_fake`` on
    generated data; arrays are averaged.
    """
    pr = np.clip(np.asarray(d_real, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    pf = np.clip(np.asarray(d_fake, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    d_loss = float(np.mean(-(np.log(pr) + np.log1p(-pf))))
    g_loss = float(np.mean(-np.log(pf)))
    return d_loss, g_loss


@dataclass
class Checkpoint:
    config: GanConfig
    generator: MlpNetwork
    discriminator: MlpNetwork
    normalization: float
    metadata: dict = field(default_factory=dict)
    # subtracted from the tanh-domain envelope before it enters the discriminator
    d_input_mean: np.ndarray | None = None

    def __post_init__(self):
        if not (self.normalization > 0 and math.isfinite(self.normalization)):
            raise ParameterError("normalization constant must be positive and finite")
        if self.d_input_mean is None:
            self.d_input_mean = np.zeros(self.config.output_dim)
        self.d_input_mean = np.asarray(self.d_input_mean, dtype=np.float64)
        if self.d_input_mean.shape != (self.config.output_dim,):
            raise ParameterError("discriminator input mean must have output_dim entries")

    @property
    def sample_rate_hz(self) -> float:
        return float(self.metadata.get("sample_rate_hz", 20_000.0))

    def discriminate(self, envelopes, cond: Condition) -> np.ndarray:
        """Probability that each envelope (count x output_dim, amplitude units) is real."""
        y = 2.0 * np.atleast_2d(np.asarray(envelopes, dtype=np.float64)) / self.normalization - 1.0
        c = np.tile(normalize_condition(cond).as_array(), (len(y), 1))
        x = np.hstack([y - self.d_input_mean, c])
        return predict(self.discriminator, x)[:, REAL]


def check_training_hull(ckpt: Checkpoint, cond: Condition) -> None:
    """Raise ExtrapolationError if ``cond`` lies outside the conditions seen in training."""
    meta = ckpt.metadata
    h_lo, h_hi = meta.get("height_range_m", HEIGHT_RANGE_M)
    b_lo, b_hi = meta.get("beta_range_deg", BETA_RANGE_DEG)
    grounds = meta.get("grounds", [g.value for g in Ground])
    problems = []
    if not h_lo - 1e-9 <= cond.height_m <= h_hi + 1e-9:
        problems.append(f"height {cond.height_m} m outside trained [{h_lo}, {h_hi}] m")
    if not b_lo - 1e-9 <= cond.beta_deg <= b_hi + 1e-9:
        problems.append(f"beta {cond.beta_deg} deg outside trained [{b_lo}, {b_hi}] deg")
    if cond.ground.value not in grounds:
        problems.append(f"ground {cond.ground.value} not in trained {grounds}")
    if problems:
        raise ExtrapolationError("; ".join(problems))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_log: list[dict]
    d_updates: int
    g_updates: int


def _round_to_float32(net: MlpNetwork) -> None:
    for p in net.parameters():
        p[...] = p.astype(np.float32).astype(np.float64)


def _condition_matrix(conditions: Sequence[Condition]) -> np.ndarray:
    return np.array([normalize_condition(c).as_array() for c in conditions], dtype=np.float64)


def train(
    dataset: Dataset,
    cfg: GanConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train generator and discriminator; deterministic given ``cfg.seed``."""
    if dataset.kind != "processed":
        raise ParameterError(f"training needs a processed dataset, got kind {dataset.kind!r}")
    if len(dataset) == 0:
        raise ParameterError("training dataset is empty")
    if dataset.record_length != cfg.output_dim:
        raise ParameterError(
            f"records have length {dataset.record_length}, generator output_dim is {cfg.output_dim}"
        )
    amps = dataset.samples.astype(np.float64)
    if not np.all(np.isfinite(amps)):
        raise ParameterError("training amplitudes contain NaN or Inf")
    norm = float(amps.max())
    if not norm > 0:
        raise ParameterError("training amplitudes are all zero")
    targets = 2.0 * (amps / norm) - 1.0
    conds = _condition_matrix(dataset.conditions)
    d_mean = targets.mean(axis=0)

    gen = build_generator(cfg)
    disc = build_discriminator(cfg)
    gen.layers[-1].biases[:] = np.arctanh(np.clip(d_mean, -BIAS_INIT_CLIP, BIAS_INIT_CLIP))
    rng = np.random.default_rng([cfg.seed, 2])
    hyper = dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    g_opt = AdamState.for_params(gen.parameters(), lr=cfg.lr, **hyper)
    d_opt = AdamState.for_params(disc.parameters(), lr=cfg.discriminator_lr, **hyper)
    ema = [p.copy() for p in gen.parameters()] if cfg.generator_ema > 0 else None

    n = len(dataset)
    out_dim = cfg.output_dim
    d_updates = g_updates = 0
    loss_log: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b = len(idx)
            real = targets[idx]
            c = conds[idx]

            # discriminator step on real + generated rows
            z = rng.standard_normal((b, cfg.noise_dim))
            fake = predict(gen, np.hstack([z, c]))
            d_in = np.vstack([np.hstack([real - d_mean, c]), np.hstack([fake - d_mean, c])])
            probs, d_cache = forward(disc, d_in)
            onehot = np.zeros_like(probs)
            onehot[:b, REAL] = 1.0
            onehot[b:, GENERATED] = 1.0
            d_loss, _ = gan_losses(probs[:b, REAL], probs[b:, REAL])
            d_grads, _ = backward(disc, d_cache, (probs - onehot) / b, wrt_logits=True)
            optimizer_step(disc, d_grads, d_opt)
            d_updates += 1

            # generator step through the updated discriminator
            z = rng.standard_normal((b, cfg.noise_dim))
            fake, g_cache = forward(gen, np.hstack([z, c]))
            probs_f, df_cache = forward(disc, np.hstack([fake - d_mean, c]))
            target = np.zeros_like(probs_f)
            target[:, REAL] = 1.0
            _, g_loss = gan_losses(probs[:b, REAL], probs_f[:, REAL])
            _, d_input_grad = backward(disc, df_cache, (probs_f - target) / b, wrt_logits=True)
            g_grads, _ = backward(gen, g_cache, d_input_grad[:, :out_dim])
            optimizer_step(gen, g_grads, g_opt)
            g_updates += 1
            if ema is not None:
                for avg, p in zip(ema, gen.parameters()):
                    avg *= cfg.generator_ema
                    avg += (1.0 - cfg.generator_ema) * p

            sums += (d_loss, g_loss, probs[:b, REAL].mean(), probs[b:, REAL].mean())
            batches += 1

        mean = sums / batches
        row = {"epoch": epoch, "d_loss": float(mean[0]), "g_loss": float(mean[1]),
               "d_real": float(mean[2]), "d_fake": float(mean[3])}
        if not all(math.isfinite(v) for v in row.values()):
            raise TrainingDivergedError(epoch)
        loss_log.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d d_loss %.4f g_loss %.4f", epoch, row["d_loss"], row["g_loss"])

    if ema is not None:
        for avg, p in zip(ema, gen.parameters()):
            p[...] = avg
    # weights live on disk as float32; round now so save/load is lossless
    _round_to_float32(gen)
    _round_to_float32(disc)
    heights = [c.height_m for c in dataset.conditions]
    betas = [c.beta_deg for c in dataset.conditions]
    meta = {
        "epochs_completed": cfg.epochs,
        "final_d_loss": loss_log[-1]["d_loss"] if loss_log else None,
        "final_g_loss": loss_log[-1]["g_loss"] if loss_log else None,
        "seed": cfg.seed,
        "training_records": n,
        "height_range_m": [min(heights), max(heights)],
        "beta_range_deg": [min(betas), max(betas)],
        "grounds": sorted({c.ground.value for c in dataset.conditions}),
        "sample_rate_hz": dataset.sample_rate_hz,
    }
    ckpt = Checkpoint(cfg, gen, disc, norm, meta, d_mean)
    return TrainResult(ckpt, loss_log, d_updates, g_updates)


def sample(
    ckpt: Checkpoint,
    cond: Condition,
    count: int,
    seed: int,
    post_lowpass_hz: float | None = None,
) -> np.ndarray:
    """Generate ``count`` envelopes (count x output_dim), all samples >= 0."""
    cond.require_conformant()
    cfg = ckpt.config
    if count < 0:
        raise ParameterError("count must be >= 0")
    if count == 0:
        return np.zeros((0, cfg.output_dim))
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, cfg.noise_dim))
    c = np.tile(normalize_condition(cond).as_array(), (count, 1))
    y = predict(ckpt.generator, np.hstack([z, c]))
    out = np.maximum((y + 1.0) / 2.0 * ckpt.normalization, 0.0)
    if post_lowpass_hz is not None:
        from .validation import post_lowpass

        out = post_lowpass(out, post_lowpass_hz, ckpt.sample_rate_hz)
    return out


# -- checkpoint file ---------------------------------------------------------

def _net_header(net: MlpNetwork) -> dict:
    return {"dims": net.dims, "activations": [a.value for a in net.activations]}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``ULSG | u32 version | u64 header length | JSON header | float32 blob``."""
    header = {
        "config": ckpt.config.to_dict(),
        "generator": _net_header(ckpt.generator),
        "discriminator": _net_header(ckpt.discriminator),
        "normalization": ckpt.normalization,
        "metadata": ckpt.metadata,
        "d_input_mean": [float(v) for v in ckpt.d_input_mean],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = [p.astype("<f4").tobytes() for net in (ckpt.generator, ckpt.discriminator)
             for p in net.parameters()]
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
            fh.write(hbytes)
            for blob in blobs:
                fh.write(blob)
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def _net_from_blob(spec: dict, blob: memoryview, offset: int) -> tuple[MlpNetwork, int]:
    dims = [int(d) for d in spec["dims"]]
    acts = [Activation(a) for a in spec["activations"]]
    if len(acts) != len(dims) - 1:
        raise FormatError("checkpoint header: activation count does not match layer dims")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], acts):
        arrays = []
        for shape in ((fan_out, fan_in), (fan_out,)):
            nbytes = 4 * int(np.prod(shape))
            if offset + nbytes > len(blob):
                raise CorruptionError("checkpoint weight blob is shorter than its header declares")
            arr = np.frombuffer(blob[offset:offset + nbytes], dtype="<f4").astype(np.float64).reshape(shape)
            arrays.append(arr)
            offset += nbytes
        layers.append(DenseLayer(arrays[0], arrays[1], act))
    return MlpNetwork(layers, dims[0]), offset


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic bytes)")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    if 16 + hlen > len(data):
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    try:
        cfg = GanConfig.from_dict(header["config"])
        blob = memoryview(data)[16 + hlen:]
        gen, off = _net_from_blob(header["generator"], blob, 0)
        disc, off = _net_from_blob(header["discriminator"], blob, off)
        norm = float(header["normalization"])
        ckpt = Checkpoint(cfg, gen, disc, norm, header.get("metadata", {}),
                          np.array(header["d_input_mean"], dtype=np.float64))
    except KeyError as exc:
        raise FormatError(f"{path}: header missing {exc}") from exc
    except (ParameterError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: inconsistent header ({exc})") from exc
    if off != len(blob):
        raise CorruptionError(f"{path}: {len(blob) - off} trailing bytes after weight blob")
    if gen.dims != [cfg.noise_dim + 3, *cfg.generator_hidden, cfg.output_dim]:
        raise FormatError(f"{path}: generator dims disagree with config")
    if disc.dims != [cfg.output_dim + 3, *cfg.discriminator_hidden, 2]:
        raise FormatError(f"{path}: discriminator dims disagree with config")
    return ckpt
