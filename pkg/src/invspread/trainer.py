"""Two-branch training loop, momentum SGD and resumable checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import losses
from . import rng as rngmod
from .augment import AugmentConfig, augment_batch, plain_view
from .dataio import Dataset, minibatches
from .encoder import EncoderConfig
from .errors import ContractError, FormatError, TrainingAborted
from .losses import ClassifierWeights, LossConfig, MemoryBank
from .serialization import read_tensor_file, write_tensor_file

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "train-state"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 200
    lr_initial: float = 0.03
    lr_milestones: tuple[int, ...] = (120, 160)
    lr_factors: tuple[float, ...] = (0.1, 0.01)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    master_seed: int = 0
    loss_reduction: str = "mean"  # "mean" divides the summed batch loss by the batch size
    augment_branch1: bool = True
    no_augmentation: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if not self.lr_initial > 0:
            raise ContractError("lr_initial must be > 0")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ContractError("lr_milestones must be strictly increasing")
        if len(self.lr_milestones) != len(self.lr_factors):
            raise ContractError("lr_milestones and lr_factors must have equal length")
        if self.loss_reduction not in ("mean", "sum"):
            raise ContractError("loss_reduction must be 'mean' or 'sum'")

    def branch_augment(self, branch: int) -> AugmentConfig:
        """Augmentation applied on branch 1 (first view) or 2 (second view)."""
        if self.no_augmentation or (branch == 1 and not self.augment_branch1):
            return self.augment.disabled()
        return self.augment



@dataclass
class TrainState:
    params: enc.EncoderParams
    velocity: dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    master_seed: int = 0
    bank: MemoryBank | None = None
    classifier: ClassifierWeights | None = None

    def trainables(self) -> dict[str, ad.Tensor]:
        out = dict(self.params.tensors)
        if self.classifier is not None:
            out["classifier"] = self.classifier.W
        return out


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    lr: float
    batch_losses: list[float]
    wall_seconds: float


def init_state(cfg: TrainConfig, n_instances: int) -> TrainState:
    params = enc.init(cfg.encoder)
    state = TrainState(params, {}, master_seed=cfg.master_seed)
    d = cfg.encoder.embed_dim
    if cfg.loss.variant == "memory_softmax":
        state.bank = MemoryBank(n_instances, d, seed=cfg.master_seed)
    if cfg.loss.variant == "classifier_softmax":
        state.classifier = ClassifierWeights(n_instances, d, seed=cfg.master_seed)
    state.velocity = {k: np.zeros_like(t.data) for k, t in state.trainables().items()}
    return state


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Initial rate times the factor of the last milestone reached (inclusive)."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    factor = 1.0
    for milestone, f in zip(cfg.lr_milestones, cfg.lr_factors):
        if epoch >= milestone:
            factor = f
    return cfg.lr_initial * factor


def sgd_step(tensors: dict[str, ad.Tensor], velocity: dict[str, np.ndarray], lr: float, momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + grad + weight_decay*p ; p <- p - lr*v (missing grads count as zero)."""
    for name, p in tensors.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = velocity[name]
        v *= np.float32(momentum)
        v += g
        v += np.float32(weight_decay) * p.data
        p.data = p.data - np.float32(lr) * v
        p.grad = None


def _sample_seeds(master: int, epoch: int, ids: np.ndarray, branch: int) -> list[int]:
    return [rngmod.derive_seed(master, epoch, int(i), branch) for i in ids]


def batch_loss(state: TrainState, cfg: TrainConfig, ids: np.ndarray, x1: np.ndarray, x2: np.ndarray):
    """Embed both views and evaluate the configured loss; returns (loss, pending bank update)."""
    lc = cfg.loss
    m = len(ids)
    update = None
    if lc.variant in ("classifier_softmax", "memory_softmax"):
        Fhat = enc.embed(state.params, x2)
        if lc.variant == "classifier_softmax":
            loss = losses.classifier_softmax_loss(Fhat, ids, state.classifier.W, lc.classifier_temperature)
        else:
            loss, update = losses.memory_softmax_loss(Fhat, ids, state.bank, lc.temperature)
    else:
        Z = enc.embed(state.params, np.concatenate([x1, x2]))
        F = ad.take_rows(Z, np.arange(m))
        Fhat = ad.take_rows(Z, np.arange(m, 2 * m))
        if lc.variant == "instance_softmax":
            loss = losses.instance_loss(F, Fhat, lc.temperature, lc.denominator_scheme, lc.negative_filter)
        else:
            seed = rngmod.derive_seed(cfg.master_seed, state.epoch, state.step, "triplet")
            loss = losses.triplet_loss(F, Fhat, lc.triplet_margin, hard=lc.variant == "triplet_hard", seed=seed)
            return loss, update
    if cfg.loss_reduction == "mean":
        loss = ad.scale(loss, 1.0 / m)
    return loss, update


def train_epoch(state: TrainState, dataset: Dataset, cfg: TrainConfig, on_batch: Callable | None = None):
    """One pass over ``dataset``; mutates and returns ``state`` with the epoch's metrics."""
    t0 = time.perf_counter()
    lr = lr_at(state.epoch, cfg)
    aug1, aug2 = cfg.branch_augment(1), cfg.branch_augment(2)
    epoch_seed = rngmod.derive_seed(cfg.master_seed, state.epoch, "epoch")
    batch_losses = []
    for b, (ids, pixels) in enumerate(minibatches(dataset, cfg.batch_size, epoch_seed)):
        x1 = augment_batch(pixels, aug1, _sample_seeds(cfg.master_seed, state.epoch, ids, 1))
        x2 = augment_batch(pixels, aug2, _sample_seeds(cfg.master_seed, state.epoch, ids, 2))
        with ad.Tape():
            loss, update = batch_loss(state, cfg, ids, x1, x2)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAborted(f"non-finite loss {value}", state.epoch, b, cfg.master_seed)
            ad.backward(loss)
        sgd_step(state.trainables(), state.velocity, lr, cfg.momentum, cfg.weight_decay)
        if update is not None:
            state.bank.apply(update, cfg.loss.memory_momentum)
        state.step += 1
        batch_losses.append(value)
        if on_batch is not None:
            on_batch(state, b, value)
    metrics = EpochMetrics(
        epoch=state.epoch,
        mean_loss=float(np.mean(batch_losses)) if batch_losses else float("nan"),
        lr=lr,
        batch_losses=batch_losses,
        wall_seconds=time.perf_counter() - t0,
    )
    state.epoch += 1
    return state, metrics


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(state: TrainState, path) -> None:
    arrays = {f"param/{k}": t.data for k, t in state.params.items()}
    arrays.update({f"velocity/{k}": v for k, v in state.velocity.items()})
    if state.bank is not None:
        arrays["bank"] = state.bank.features
    if state.classifier is not None:
        arrays["classifier"] = state.classifier.W.data
    meta = {
        "epoch": state.epoch,
        "step": state.step,
        "master_seed": state.master_seed,
        "encoder": enc.encoder_meta(state.params.config),
    }
    write_tensor_file(path, arrays, meta, kind=CHECKPOINT_KIND)


def load_checkpoint(path, encoder_cfg: enc.EncoderConfig) -> TrainState:
    arrays, meta = read_tensor_file(path, kind=CHECKPOINT_KIND)
    try:
        epoch, step, seed = int(meta["epoch"]), int(meta["step"]), int(meta["master_seed"])
    except (KeyError, TypeError, ValueError):
        raise FormatError("checkpoint metadata lacks epoch/step/master_seed", path=path) from None
    param_arrays = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    params = enc.params_from_arrays(param_arrays, encoder_cfg)
    state = TrainState(params, {}, epoch=epoch, step=step, master_seed=seed)
    if "bank" in arrays:
        state.bank = MemoryBank(*arrays["bank"].shape, features=arrays["bank"])
    if "classifier" in arrays:
        state.classifier = ClassifierWeights.__new__(ClassifierWeights)
        state.classifier.W = ad.Tensor(arrays["classifier"], requires_grad=True, name="classifier")
    for name, t in state.trainables().items():
        v = arrays.get(f"velocity/{name}")
        if v is None or v.shape != t.shape:
            raise FormatError(f"checkpoint velocity for {name!r} missing or misshaped", path=path)
        state.velocity[name] = v.copy()
    return state


def load_encoder(path, encoder_cfg: enc.EncoderConfig) -> enc.EncoderParams:
    """Encoder parameters from either a training checkpoint or an encoder file."""
    arrays, _ = read_tensor_file(path)
    if any(k.startswith("param/") for k in arrays):
        arrays = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    return enc.params_from_arrays(arrays, encoder_cfg)


# ---------------------------------------------------------------- driver

METRICS_FIELDS = ("epoch", "mean_loss", "lr")
TIMING_FIELDS = ("epoch", "wall_seconds")


def train(
    cfg: TrainConfig,
    dataset: Dataset,
    out_dir=None,
    state: TrainState | None = None,
    epochs: int | None = None,
) -> tuple[TrainState, list[EpochMetrics]]:
    """Train until ``epochs`` (default ``cfg.epochs``) have been completed.

    With ``out_dir`` a checkpoint is written after every epoch
    (``checkpoint_epochNNN.bin`` and ``last.bin``), losses are appended to
    ``metrics.csv`` and wall-clock times to ``timing.csv``.
    """
    state = state or init_state(cfg, len(dataset))
    target = cfg.epochs if epochs is None else epochs
    history = []
    out = Path(out_dir) if out_dir is not None else None
    while state.epoch < target:
        state, metrics = train_epoch(state, dataset, cfg)
        history.append(metrics)
        log.info("epoch %d loss %.6f lr %.5g (%.1fs)", metrics.epoch, metrics.mean_loss, metrics.lr, metrics.wall_seconds)
        if out is not None:
            _append_csv(out / "metrics.csv", METRICS_FIELDS, (metrics.epoch, repr(metrics.mean_loss), repr(metrics.lr)))
            _append_csv(out / "timing.csv", TIMING_FIELDS, (metrics.epoch, f"{metrics.wall_seconds:.3f}"))
            save_checkpoint(state, out / f"checkpoint_epoch{state.epoch:03d}.bin")
            save_checkpoint(state, out / "last.bin")
    return state, history


def _append_csv(path: Path, header, row) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(header)
        w.writerow(row)


def plain_inputs(dataset: Dataset, aug: AugmentConfig) -> np.ndarray:
    return plain_view(dataset.pixels, aug)
