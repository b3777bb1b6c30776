"""Loss functions, generator pre-initialization, the alternating
adversarial training loop, and checkpoint persistence.

The generator loss weights the adversarial term by the per-sample squared
error itself (the "mse_scaled" variant, the default), which keeps the
two-player training stable; the "sigma_weighted" variant uses an explicit
fixed trade-off weight and requires sigma_sq to be configured.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datapipe import NormStats, SamplePair, normalize
from .errors import (
    CheckpointFormatError,
    CheckpointManifestError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    NumericError,
    ShapeError,
)
from .networks import (
    Discriminator,
    DiscriminatorSpec,
    InstanceConfig,
    ZipNet,
    ZipNetSpec,
)
from .optim import AdamState, adam_step, collect_grads, zero_grads
from . import tensor as T
from .tensor import Tensor

LOSS_VARIANTS = ("mse_scaled", "sigma_weighted")


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 0.0001
    n_g: int = 1
    n_d: int = 1
    pretrain_epochs: int = 50
    gan_epochs: int = 50
    loss_variant: str = "mse_scaled"
    sigma_sq: float | None = None
    log_clip: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.n_g < 1 or self.n_d < 1:
            raise ConfigError(f"sub-epoch counts must be >= 1, got n_g={self.n_g}, n_d={self.n_d}")
        if self.pretrain_epochs < 0 or self.gan_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if not 0 < self.log_clip <= 1e-3:
            raise ConfigError(f"log_clip must be in (0, 1e-3], got {self.log_clip}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"loss_variant must be one of {LOSS_VARIANTS}, got {self.loss_variant!r}")
        if self.loss_variant == "sigma_weighted":
            if self.sigma_sq is None or self.sigma_sq <= 0:
                raise ConfigError("sigma_weighted loss requires an explicit positive sigma_sq")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "n_g": self.n_g,
            "n_d": self.n_d,
            "pretrain_epochs": self.pretrain_epochs,
            "gan_epochs": self.gan_epochs,
            "loss_variant": self.loss_variant,
            "sigma_sq": self.sigma_sq,
            "log_clip": self.log_clip,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _per_sample_sq_norm(pred: Tensor, truth: Tensor) -> Tensor:
    if pred.data.shape != truth.data.shape:
        raise ShapeError(f"prediction shape {pred.data.shape} != truth shape {truth.data.shape}")
    if pred.data.ndim < 1 or pred.data.shape[0] == 0:
        raise ShapeError("empty batch")
    diff = T.sub(truth, pred)
    return T.sum_(T.square(diff), axes=tuple(range(1, pred.data.ndim)))


def mse_loss(pred: Tensor, truth: Tensor) -> Tensor:
    """Batch mean of the per-sample squared L2 distance."""
    return T.mean(_per_sample_sq_norm(pred, truth))


def _clipped(p: Tensor, log_clip: float) -> Tensor:
    return T.clip(p, log_clip, 1.0 - log_clip)


def d_loss(d_real: Tensor, d_fake: Tensor, log_clip: float = 1e-7) -> Tensor:
    """Discriminator objective (to be maximized): mean log D(real) + log(1 - D(fake))."""
    if d_real.data.size == 0 or d_fake.data.size == 0:
        raise ShapeError("empty batch")
    dr = _clipped(d_real, log_clip)
    df = _clipped(d_fake, log_clip)
    return T.mean(T.add(T.log(dr), T.log(T.sub(1.0, df))))


def g_loss(pred: Tensor, truth: Tensor, d_fake: Tensor, log_clip: float = 1e-7) -> Tensor:
    """Generator objective: mean (1 - 2 log D(fake)) * ||truth - pred||^2."""
    per = _per_sample_sq_norm(pred, truth)
    df = _clipped(d_fake, log_clip)
    factor = T.sub(1.0, T.mul(T.log(df), 2.0))
    return T.mean(T.mul(factor, per))


def g_loss_sigma(pred: Tensor, truth: Tensor, d_fake: Tensor, sigma_sq: float,
                 log_clip: float = 1e-7) -> Tensor:
    """Fixed-weight generator objective: mean ||truth - pred||^2 - 2 sigma^2 log D(fake)."""
    if sigma_sq < 0:
        raise ConfigError(f"sigma_sq must be non-negative, got {sigma_sq}")
    per = _per_sample_sq_norm(pred, truth)
    df = _clipped(d_fake, log_clip)
    return T.mean(T.sub(per, T.mul(T.log(df), 2.0 * sigma_sq)))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def stack_samples(dataset: list[SamplePair], stats: NormStats | None, dtype):
    """Normalized, stacked (inputs [M,S,ch,cw], targets [M,w,w]) arrays."""
    if not dataset:
        raise ConfigError("dataset is empty")
    inputs = np.stack([p.input for p in dataset])
    targets = np.stack([p.target for p in dataset])
    if stats is not None:
        inputs = normalize(inputs, stats)
        targets = normalize(targets, stats)
    return inputs.astype(dtype), targets.astype(dtype)


def _check_finite(value: float, where: str):
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} during {where}; aborting run")


def pretrain_generator(model, dataset: list[SamplePair], config: TrainConfig,
                       stats: NormStats | None = None) -> list[float]:
    """Adam descent on the MSE objective; returns the per-epoch loss trace.

    Stops early once the epoch-mean loss improves by less than 0.1% for
    five consecutive epochs, else at the pretrain_epochs cap.
    """
    inputs, targets = stack_samples(dataset, stats, model.dtype)
    m_total = inputs.shape[0]
    rng = np.random.default_rng(config.seed)
    state = AdamState(model.params)
    trace: list[float] = []
    stall = 0
    for epoch in range(config.pretrain_epochs):
        perm = rng.permutation(m_total)
        total, seen = 0.0, 0
        for lo in range(0, m_total, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            x = Tensor(model.prepare_input(inputs[idx]))
            truth = Tensor(targets[idx][:, None])
            zero_grads(model.params)
            pred = model.forward(x, mode="train")
            loss = mse_loss(pred, truth)
            value = loss.item()
            _check_finite(value, f"pretraining epoch {epoch}")
            loss.backward()
            adam_step(model.params, collect_grads(model.params), state, config.learning_rate)
            total += value * len(idx)
            seen += len(idx)
        trace.append(total / seen)
        if len(trace) >= 2:
            prev = trace[-2]
            improved = (prev - trace[-1]) / max(abs(prev), 1e-12)
            stall = stall + 1 if improved < 1e-3 else 0
            if stall >= 5:
                break
    first = trace[:10]
    if any(b > a for a, b in zip(first, first[1:])):
        warnings.warn("pretraining loss increased within the first 10 epochs", RuntimeWarning)
    return trace


class _Frozen:
    """Temporarily stop gradient tracking for a network's parameters."""

    def __init__(self, net):
        self.net = net

    def __enter__(self):
        self.net.set_requires_grad(False)
        return self.net

    def __exit__(self, *exc):
        self.net.set_requires_grad(True)
        return False


def train_gan(gen: ZipNet, disc: Discriminator, dataset: list[SamplePair],
              config: TrainConfig, stats: NormStats | None = None):
    """Alternating adversarial training.

    Per outer epoch: n_d discriminator sub-epochs (ascent on the
    classifier objective) then n_g generator sub-epochs (descent on the
    configured generator objective). Each sub-epoch samples one
    minibatch of size batch_size with the run's seeded generator.
    Returns (gen, disc, history) with one (epoch, phase, loss) row per
    sub-epoch.
    """
    inputs, targets = stack_samples(dataset, stats, gen.dtype)
    m_total = inputs.shape[0]
    if m_total < config.batch_size:
        raise ConfigError(f"dataset size {m_total} smaller than batch_size {config.batch_size}")
    rng = np.random.default_rng(config.seed)
    g_state = AdamState(gen.params)
    d_state = AdamState(disc.params)
    history: list[tuple[int, str, float]] = []

    for epoch in range(config.gan_epochs):
        for _ in range(config.n_d):
            idx = rng.choice(m_total, size=config.batch_size, replace=False)
            real = Tensor(targets[idx][:, None])
            with _Frozen(gen), T.no_grad():
                fake = gen.forward(Tensor(gen.prepare_input(inputs[idx])),
                                   mode="train", update_stats=False)
            zero_grads(disc.params)
            d_real = disc.forward(real, mode="train")
            d_fake = disc.forward(Tensor(fake.data), mode="train")
            loss = d_loss(d_real, d_fake, config.log_clip)
            value = loss.item()
            _check_finite(value, f"discriminator update, epoch {epoch}")
            T.neg(loss).backward()  # ascent via descent on the negated objective
            adam_step(disc.params, collect_grads(disc.params), d_state, config.learning_rate)
            history.append((epoch, "D", value))

        for _ in range(config.n_g):
            idx = rng.choice(m_total, size=config.batch_size, replace=False)
            truth = Tensor(targets[idx][:, None])
            zero_grads(gen.params)
            pred = gen.forward(Tensor(gen.prepare_input(inputs[idx])), mode="train")
            with _Frozen(disc):
                d_fake = disc.forward(pred, mode="train", update_stats=False)
            if config.loss_variant == "sigma_weighted":
                loss = g_loss_sigma(pred, truth, d_fake, config.sigma_sq, config.log_clip)
            else:
                loss = g_loss(pred, truth, d_fake, config.log_clip)
            value = loss.item()
            _check_finite(value, f"generator update, epoch {epoch}")
            loss.backward()
            adam_step(gen.params, collect_grads(gen.params), g_state, config.learning_rate)
            history.append((epoch, "G", value))
    return gen, disc, history


def write_history(path, rows):
    """History CSV with one row per sub-epoch: epoch, phase, loss."""
    with open(path, "w") as fh:
        fh.write("epoch,phase,loss\n")
        for epoch, phase, loss in rows:
            fh.write(f"{epoch},{phase},{float(loss):.17g}\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"MTSRCKP1"
VERSION = 1


@dataclass
class Checkpoint:
    instance: InstanceConfig
    train_config: TrainConfig
    norm_stats: NormStats
    zipnet_spec: ZipNetSpec
    disc_spec: DiscriminatorSpec | None
    epoch: int
    arrays: dict[str, np.ndarray]

    @classmethod
    def from_models(cls, gen: ZipNet, disc: Discriminator | None, train_config: TrainConfig,
                    norm_stats: NormStats, epoch: int = 0) -> "Checkpoint":
        arrays: dict[str, np.ndarray] = {}
        _pack_net(arrays, "g", gen)
        if disc is not None:
            _pack_net(arrays, "d", disc)
        return cls(
            instance=gen.instance,
            train_config=train_config,
            norm_stats=norm_stats,
            zipnet_spec=gen.spec,
            disc_spec=disc.spec if disc is not None else None,
            epoch=epoch,
            arrays=arrays,
        )

    @property
    def has_discriminator(self) -> bool:
        return self.disc_spec is not None

    def restore_generator(self, dtype=None) -> ZipNet:
        dtype = dtype or self.arrays["g.param.entry.conv.kernel"].dtype
        gen = ZipNet(self.instance, self.zipnet_spec, seed=0, dtype=dtype)
        _unpack_net(self.arrays, "g", gen)
        return gen

    def restore_discriminator(self, dtype=None) -> Discriminator:
        if not self.has_discriminator:
            raise ConfigError("checkpoint holds no discriminator")
        dtype = dtype or self.arrays["d.param.head.weight"].dtype
        disc = Discriminator(self.instance.window_side, self.disc_spec, seed=0, dtype=dtype)
        _unpack_net(self.arrays, "d", disc)
        return disc

    def require_instance(self, other: InstanceConfig):
        if self.instance != other:
            raise ConfigError(
                f"checkpoint instance {self.instance.to_dict()} does not match {other.to_dict()}"
            )


def _pack_net(arrays: dict, prefix: str, net):
    for name, p in net.params.items():
        arrays[f"{prefix}.param.{name}"] = p.data
    for name, st in net.bn_stats.items():
        arrays[f"{prefix}.stats.{name}.mean"] = st.mean
        arrays[f"{prefix}.stats.{name}.var"] = st.var


def _unpack_net(arrays: dict, prefix: str, net):
    for name, p in net.params.items():
        key = f"{prefix}.param.{name}"
        if key not in arrays:
            raise CheckpointManifestError(f"checkpoint missing array {key!r}")
        arr = arrays[key]
        if arr.shape != p.data.shape:
            raise CheckpointManifestError(
                f"array {key!r} shape {arr.shape} does not match model shape {p.data.shape}"
            )
        p.data = arr.astype(p.data.dtype, copy=True)
    for name, st in net.bn_stats.items():
        st.mean = arrays[f"{prefix}.stats.{name}.mean"].astype(st.mean.dtype, copy=True)
        st.var = arrays[f"{prefix}.stats.{name}.var"].astype(st.var.dtype, copy=True)


def save_checkpoint(path, ckpt: Checkpoint):
    """Self-describing container: magic, version, JSON manifest, raw
    little-endian arrays (32-bit in the training pipeline)."""
    entries = []
    offset = 0
    payload = []
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name])
        if arr.dtype == np.float64:
            dtype = "<f8"
        else:
            arr = arr.astype(np.float32, copy=False)
            dtype = "<f4"
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype,
            "offset": offset,
            "nbytes": len(raw),
        })
        payload.append(raw)
        offset += len(raw)
    manifest = {
        "arrays": entries,
        "instance": ckpt.instance.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "norm_stats": ckpt.norm_stats.to_dict(),
        "zipnet_spec": ckpt.zipnet_spec.to_dict(),
        "disc_spec": ckpt.disc_spec.to_dict() if ckpt.disc_spec else None,
        "epoch": ckpt.epoch,
        "payload_nbytes": offset,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payload:
            fh.write(raw)
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise CheckpointTruncatedError(f"{path}: file too short for header")
    if data[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes {data[:8]!r}")
    (version,) = struct.unpack("<I", data[8:12])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: version {version} not supported (expected {VERSION})")
    (mlen,) = struct.unpack("<Q", data[12:20])
    if len(data) < 20 + mlen:
        raise CheckpointTruncatedError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(data[20 : 20 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: manifest is not valid JSON: {exc}") from None
    payload = data[20 + mlen :]
    expected = manifest.get("payload_nbytes", 0)
    if len(payload) < expected:
        raise CheckpointTruncatedError(
            f"{path}: payload holds {len(payload)} bytes, manifest declares {expected}"
        )
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if entry["nbytes"] != count * dt.itemsize:
            raise CheckpointManifestError(
                f"{path}: array {entry['name']!r} declares {entry['nbytes']} bytes "
                f"for shape {shape} of {dt}"
            )
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointTruncatedError(f"{path}: array {entry['name']!r} extends past payload")
        arrays[entry["name"]] = np.frombuffer(payload[lo:hi], dtype=dt).reshape(shape).copy()
    return Checkpoint(
        instance=InstanceConfig.from_dict(manifest["instance"]),
        train_config=TrainConfig.from_dict(manifest["train_config"]),
        norm_stats=NormStats.from_dict(manifest["norm_stats"]),
        zipnet_spec=ZipNetSpec.from_dict(manifest["zipnet_spec"]),
        disc_spec=DiscriminatorSpec.from_dict(manifest["disc_spec"]) if manifest["disc_spec"] else None,
        epoch=manifest["epoch"],
        arrays=arrays,
    )
