"""Two-branch training loop, SGD with momentum, cosine schedule, checkpoints.

Each step forwards the (possibly flipped) original image, builds the
attention-guided crop from that pass, forwards the crop as a second branch,
and backpropagates the sum of both cross-entropy losses through one tape.
Every source of randomness is derived from (seed, step, position), so runs
are bit-reproducible and resumable from any checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import data as data_mod
from . import tensor as T
from .augment import THETA_RANGE, build_crop_plan, horizontal_flip
from .backbone import ViTConfig, init_params
from .errors import CheckpointError, ConfigError, DataError, GradientError
from .has import FUSION_MODES, davt_forward
from .tensor import Tape, Tensor

_FLIP_STREAM = 60013

CHECKPOINT_MAGIC = b"DAVTCKPT"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "step,lr,loss_v,loss_c,loss_total,eval_top1"


def default_attention_layer(layers):
    """Shipped default for the crop-guidance layer: mid-depth, capped at 5."""
    return min(5, math.ceil((layers - 1) / 2))


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.02
    momentum: float = 0.9
    batch_size: int = 6
    total_steps: int = 2000
    theta_c: float = 0.5
    xi: Optional[int] = None  # None picks default_attention_layer(layers)
    fusion: str = "pairwise"
    seed: int = 0
    eval_interval: int = 100
    checkpoint_interval: int = 0  # 0 keeps only the final checkpoint
    has: bool = True
    crop: bool = True
    flip: bool = True

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be at least 1")
        lo, hi = THETA_RANGE
        if not lo <= self.theta_c <= hi:
            raise ConfigError(
                f"theta_c {self.theta_c} outside [{lo}, {hi}]")
        if self.xi is not None and self.xi < 1:
            raise ConfigError(f"xi must be at least 1, got {self.xi}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(
                f"fusion {self.fusion!r} not one of {FUSION_MODES}")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be at least 1")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be nonnegative")

    def resolved_xi(self, vit_config):
        xi = self.xi if self.xi is not None else default_attention_layer(
            vit_config.layers)
        if not 1 <= xi <= vit_config.layers - 1:
            raise ConfigError(
                f"xi {xi} outside 1..{vit_config.layers - 1}")
        return xi


@dataclass
class SGDState:
    velocity: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class LossReport:
    loss_v: float
    loss_c: float
    loss_total: float


@dataclass
class MetricRow:
    step: int
    lr: float
    loss_v: float
    loss_c: float
    loss_total: float
    eval_top1: Optional[float]


@dataclass
class TrainResult:
    params: dict
    state: SGDState
    history: list


@dataclass
class Checkpoint:
    vit: ViTConfig
    train: TrainConfig
    params: dict
    state: SGDState
    history: list


def cross_entropy(logits, label):
    """Stable negative log-likelihood of ``label`` under softmax(logits)."""
    return T.cross_entropy_with_logits(logits, label)


def cosine_lr(step, total_steps, lr0):
    """Single half-cosine from lr0 down to zero over ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside 0..{total_steps}")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(params, state, lr, momentum):
    """Classic momentum update: v <- momentum*v + g, p <- p - lr*v.

    Absent gradients count as zero.  Gradients are cleared afterwards so a
    stale value can never leak into the next step.
    """
    for name in sorted(params):
        p = params[name]
        g = p.grad
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.velocity[name] = v
        if g is not None:
            if g.shape != p.data.shape:
                raise GradientError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name} shape {p.data.shape}")
            v *= momentum
            v += g
        else:
            v *= momentum
        p.data -= lr * v
        p.grad = None


def _branch_mean(losses):
    acc = losses[0]
    for item in losses[1:]:
        acc = T.add(acc, item)
    return T.mul(acc, 1.0 / len(losses))


def _flip_coin(seed, step, position):
    return np.random.default_rng([seed, _FLIP_STREAM, step, position]).random()


def train_step(batch, params, state, train_config, vit_config):
    """One optimizer step over a batch; returns the loss report and lr used."""
    if not batch:
        raise DataError("train_step needs a nonempty batch")
    lr = cosine_lr(state.step, train_config.total_steps, train_config.lr0)
    xi = train_config.resolved_xi(vit_config)
    with Tape() as tape:
        original_losses = []
        crop_losses = []
        for position, sample in enumerate(batch):
            image = sample.image
            if train_config.flip:
                image = horizontal_flip(
                    image, _flip_coin(train_config.seed, state.step, position))
            out = davt_forward(image, params, vit_config,
                               has_enabled=train_config.has,
                               fusion=train_config.fusion)
            original_losses.append(cross_entropy(out.logits, sample.label))
            if train_config.crop:
                plan = build_crop_plan(image, out.attention, xi,
                                       train_config.theta_c, vit_config)
                crop_out = davt_forward(plan.image, params, vit_config,
                                        has_enabled=train_config.has,
                                        fusion=train_config.fusion)
                crop_losses.append(cross_entropy(crop_out.logits, sample.label))
        loss_v = _branch_mean(original_losses)
        if crop_losses:
            loss_c = _branch_mean(crop_losses)
            total = T.add(loss_v, loss_c)
        else:
            loss_c = None
            total = loss_v
    tape.backward(total)
    sgd_step(params, state, lr, train_config.momentum)
    state.step += 1
    report = LossReport(loss_v=loss_v.item(),
                        loss_c=loss_c.item() if loss_c is not None else 0.0,
                        loss_total=total.item())
    return report, lr


def evaluate(samples, params, vit_config, has_enabled=True, fusion="pairwise"):
    """Top-1 accuracy plus per-label (correct, total) counts. No augmentation."""
    if not samples:
        raise DataError("evaluate needs a nonempty dataset")
    per_label = {}
    correct = 0
    for sample in samples:
        out = davt_forward(sample.image, params, vit_config,
                           has_enabled=has_enabled, fusion=fusion)
        predicted = int(np.argmax(out.logits.data))
        hit = predicted == sample.label
        correct += hit
        got, total = per_label.get(sample.label, (0, 0))
        per_label[sample.label] = (got + hit, total + 1)
    return correct / len(samples), per_label


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

def _pack_tensors(chunks, arrays):
    chunks.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, count):
        if self.pos + count > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + count]
        self.pos += count
        return out

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self):
        return self.take(1)[0]


def _unpack_tensors(reader):
    arrays = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u16()).decode("utf-8")
        ndim = reader.u8()
        shape = struct.unpack(f"<{ndim}Q", reader.take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(
            reader.take(8 * size), dtype="<f8").reshape(shape).copy()
    return arrays


def save_checkpoint(path, vit_config, train_config, params, state, history):
    """Versioned binary snapshot; the trailing 64-bit digest guards the rest."""
    header = json.dumps(
        {"step": state.step, "vit": asdict(vit_config),
         "train": asdict(train_config)},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack("<Q", len(header)), header]
    _pack_tensors(chunks, {k: v.data for k, v in params.items()})
    _pack_tensors(chunks, state.velocity)
    chunks.append(struct.pack("<Q", len(history)))
    for row in history:
        top1 = math.nan if row.eval_top1 is None else row.eval_top1
        chunks.append(struct.pack("<6d", float(row.step), row.lr, row.loss_v,
                                  row.loss_c, row.loss_total, top1))
    body = b"".join(chunks)
    digest = hashlib.blake2b(body, digest_size=8).digest()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(body)
        f.write(digest)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read and fully validate a checkpoint; never returns a partial load."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 12:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    body, digest = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    reader = _Reader(body)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version {version} unsupported, expected "
            f"{CHECKPOINT_VERSION}")
    meta = json.loads(reader.take(reader.u64()).decode("utf-8"))
    vit = ViTConfig(**meta["vit"])
    train = TrainConfig(**meta["train"])
    params = {name: Tensor(arr, requires_grad=True)
              for name, arr in _unpack_tensors(reader).items()}
    velocity = _unpack_tensors(reader)
    history = []
    for _ in range(reader.u64()):
        step, lr, lv, lc, lt, top1 = struct.unpack("<6d", reader.take(48))
        history.append(MetricRow(int(step), lr, lv, lc, lt,
                                 None if math.isnan(top1) else top1))
    state = SGDState(velocity=velocity, step=meta["step"])
    return Checkpoint(vit=vit, train=train, params=params, state=state,
                      history=history)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def _format_metric_row(row):
    top1 = "" if row.eval_top1 is None else repr(row.eval_top1)
    return (f"{row.step},{row.lr!r},{row.loss_v!r},{row.loss_c!r},"
            f"{row.loss_total!r},{top1}")


def write_metrics_csv(history, path):
    with open(path, "w", newline="") as f:
        f.write(METRICS_HEADER + "\n")
        for row in history:
            f.write(_format_metric_row(row) + "\n")


def run_training(train_samples, vit_config, train_config, eval_samples=None,
                 out_dir=None, params=None, state=None, history=None,
                 early_stop_top1=None, progress=None):
    """Drive train_step to total_steps, logging metrics and checkpoints.

    Pass ``params``/``state``/``history`` from a loaded checkpoint to resume;
    batch order and flip coins are recomputed from (seed, step), so a resumed
    run reproduces the uninterrupted one bit-exactly.  ``eval_samples``
    defaults to the training set.  ``early_stop_top1`` stops once an
    evaluation reaches that accuracy.
    """
    if not train_samples:
        raise DataError("training needs a nonempty dataset")
    if params is None:
        params = init_params(vit_config)
    if state is None:
        state = SGDState()
    history = list(history) if history else []
    eval_set = eval_samples if eval_samples is not None else train_samples
    count = len(train_samples)
    per_epoch = math.ceil(count / train_config.batch_size)
    cached_epoch = -1
    epoch_batches = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    while state.step < train_config.total_steps:
        epoch = state.step // per_epoch
        if epoch != cached_epoch:
            epoch_batches = data_mod.batches(count, train_config.batch_size,
                                             train_config.seed, epoch)
            cached_epoch = epoch
        picks = epoch_batches[state.step % per_epoch]
        batch = [train_samples[int(j)] for j in picks]
        report, lr = train_step(batch, params, state, train_config, vit_config)
        step_number = state.step
        top1 = None
        if (step_number % train_config.eval_interval == 0
                or step_number == train_config.total_steps):
            top1, _ = evaluate(eval_set, params, vit_config,
                               has_enabled=train_config.has,
                               fusion=train_config.fusion)
        row = MetricRow(step_number, lr, report.loss_v, report.loss_c,
                        report.loss_total, top1)
        history.append(row)
        if progress is not None:
            progress(row)
        if (out_dir and train_config.checkpoint_interval
                and step_number % train_config.checkpoint_interval == 0
                and step_number < train_config.total_steps):
            save_checkpoint(
                os.path.join(out_dir, f"checkpoint-{step_number:06d}.bin"),
                vit_config, train_config, params, state, history)
        if early_stop_top1 is not None and top1 is not None \
                and top1 >= early_stop_top1:
            break
    if out_dir:
        write_metrics_csv(history, os.path.join(out_dir, "metrics.csv"))
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"),
                        vit_config, train_config, params, state, history)
    return TrainResult(params=params, state=state, history=history)
