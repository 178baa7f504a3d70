"""Training phases: self-supervised pretraining, detection and regression
fine-tuning, and distillation from a frozen teacher.

All phases share one AdamW loop with linear-warmup half-cosine scheduling,
global-norm gradient clipping at 1.0, and per-epoch shuffling seeded from
(plan.seed, epoch) so runs are bit-reproducible.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import mae_model
from .errors import ConfigError, DataError, DivergenceError, EmptyInputError
from .mae_model import MaeModel, save_model as save_checkpoint, load_model as load_checkpoint  # noqa: F401
from .signal_pipeline import TAG_ANOMALY

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.95
ADAM_EPS = 1e-8
CLIP_NORM = 1.0

PHASES = ("pretrain", "finetune_ad", "finetune_tle", "finetune_kd")


@dataclass(frozen=True)
class TrainPlan:
    """Optimizer and schedule settings for one training phase."""

    phase: str = "pretrain"
    base_lr: float = 2.5e-4
    weight_decay: float = 0.0
    epochs: int = 200
    batch_size: int = 128
    warmup_epochs: int = 100
    mask_ratio: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("need 0 <= warmup_epochs <= epochs")


def pretrain_plan(**overrides) -> TrainPlan:
    """Pretraining defaults: lr 2.5e-4, 200 epochs, batch 128, 100 warmup."""
    base = dict(phase="pretrain", base_lr=2.5e-4, weight_decay=0.0,
                epochs=200, batch_size=128, warmup_epochs=100)
    base.update(overrides)
    return TrainPlan(**base)


def finetune_ad_plan(**overrides) -> TrainPlan:
    """Detection fine-tune defaults: lr 2.5e-3, 400 epochs, batch 64."""
    base = dict(phase="finetune_ad", base_lr=2.5e-3, weight_decay=0.05,
                epochs=400, batch_size=64, warmup_epochs=0)
    base.update(overrides)
    return TrainPlan(**base)


def finetune_tle_plan(**overrides) -> TrainPlan:
    """Regression fine-tune defaults: lr 2.5e-6, 500 epochs, batch 8."""
    base = dict(phase="finetune_tle", base_lr=2.5e-6, weight_decay=0.05,
                epochs=500, batch_size=8, warmup_epochs=0)
    base.update(overrides)
    return TrainPlan(**base)


@dataclass(frozen=True)
class KDConfig:
    """Loss mix for distilled fine-tuning; the two weights must sum to 1."""

    alpha_task: float = 0.5
    alpha_kd: float = 0.5

    def __post_init__(self):
        if abs(self.alpha_task + self.alpha_kd - 1.0) > 1e-12:
            raise ConfigError("alpha_task + alpha_kd must equal 1")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    val_metric: Optional[float]
    seconds: float


@dataclass
class TrainLog:
    """Per-epoch training records plus the raw per-step loss trajectory."""

    records: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("epoch,lr,loss,val_metric,seconds\n")
            for r in self.records:
                val = "" if r.val_metric is None else repr(float(r.val_metric))
                f.write(f"{r.epoch},{float(r.lr)!r},{float(r.loss)!r},"
                        f"{val},{r.seconds:.3f}\n")

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss


def lr_at(plan: TrainPlan, epoch: int) -> float:
    """Linear ramp 0 -> base_lr over warmup, then half-cosine decay to ~0."""
    if not 0 <= epoch < plan.epochs:
        raise ConfigError(f"epoch {epoch} outside [0,{plan.epochs})")
    if epoch < plan.warmup_epochs:
        return plan.base_lr * epoch / plan.warmup_epochs
    span = plan.epochs - plan.warmup_epochs
    if span == 0:
        return plan.base_lr
    t = (epoch - plan.warmup_epochs) / span
    return float(plan.base_lr * 0.5 * (1.0 + np.cos(np.pi * t)))


def clip_gradients(grads: dict, max_norm: float = CLIP_NORM) -> dict:
    """Scale all gradients by max_norm/||g|| when the global L2 norm exceeds it."""
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    sq = 0.0
    for g in grads.values():
        s = float(np.dot(g.reshape(-1), g.reshape(-1)))
        if not np.isfinite(s):
            raise DivergenceError("non-finite gradient encountered")
        sq += s
    norm = np.sqrt(sq)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


class AdamW:
    """Decoupled-weight-decay Adam; decay applies to 2-D weight matrices only."""

    def __init__(self, params: dict, weight_decay: float,
                 betas=(ADAM_BETA1, ADAM_BETA2), eps: float = ADAM_EPS):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k].astype(p.dtype, copy=False)
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.ndim == 2:
                update = update + self.weight_decay * p
            p -= lr * update


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _stack_images(windows, dtype) -> np.ndarray:
    if len(windows) == 0:
        raise EmptyInputError("no training windows")
    return np.stack([w.image for w in windows]).astype(dtype)


def _run_loop(model: MaeModel, n: int, plan: TrainPlan,
              step_fn: Callable[[np.ndarray, np.random.Generator], float],
              log_every: int = 50) -> TrainLog:
    opt = AdamW(model.params, plan.weight_decay)
    log = TrainLog()
    for epoch in range(plan.epochs):
        t0 = time.perf_counter()
        rng = _epoch_rng(plan.seed, epoch)
        order = rng.permutation(n)
        lr = lr_at(plan, epoch)
        losses = []
        for start in range(0, n, plan.batch_size):
            idx = order[start:start + plan.batch_size]
            loss, grads = step_fn(idx, rng)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {len(losses)}")
            grads = clip_gradients(grads)
            opt.step(model.params, grads, lr)
            losses.append(loss)
            log.step_losses.append(loss)
        rec = EpochRecord(epoch=epoch, lr=lr, loss=float(np.mean(losses)),
                          val_metric=None, seconds=time.perf_counter() - t0)
        log.records.append(rec)
        if epoch % log_every == 0 or epoch == plan.epochs - 1:
            logger.info("%s epoch %d/%d lr %.3g loss %.5g",
                        plan.phase, epoch, plan.epochs, lr, rec.loss)
    return log


def pretrain(model: MaeModel, windows: Sequence, plan: TrainPlan) -> TrainLog:
    """Self-supervised masked-reconstruction training; labels are ignored.

    Every step draws a fresh mask per sample at plan.mask_ratio, computes the
    masked-patch MSE, clips the global gradient norm, and applies AdamW.
    """
    if not model.has_decoder:
        raise ConfigError("pretraining needs the full encoder-decoder model")
    images = _stack_images(windows, model.dtype)
    num_patches = model.config.num_patches

    def step(idx, rng):
        masked, visible = mae_model.sample_mask_batch(
            num_patches, plan.mask_ratio, len(idx), rng)
        return mae_model.pretrain_loss_and_grads(model, images[idx], masked, visible)

    return _run_loop(model, len(windows), plan, step)


def finetune_ad(model: MaeModel, normal_windows: Sequence, plan: TrainPlan) -> TrainLog:
    """Continue masked-reconstruction training on normal-state data only."""
    for i, w in enumerate(normal_windows):
        if w.tag == TAG_ANOMALY:
            raise DataError(f"window {i} is tagged anomalous; detection "
                            "fine-tuning uses normal data only")
    return pretrain(model, normal_windows, plan)


def _targets_of(windows) -> np.ndarray:
    targets = []
    for i, w in enumerate(windows):
        if w.target is None:
            raise DataError(f"window {i} has no regression target")
        targets.append(w.target)
    return np.asarray(targets, dtype=np.float64)


def _regression_loop(model: MaeModel, windows, plan: TrainPlan,
                     loss_fn: Callable) -> TrainLog:
    if not model.has_reg_head:
        raise ConfigError("attach_regression_head before regression fine-tuning")
    images = _stack_images(windows, model.dtype)
    targets = _targets_of(windows)

    def step(idx, rng):
        yhat, cache = mae_model.regress_forward_batch(model, images[idx])
        loss, dyhat = loss_fn(yhat.astype(np.float64), targets[idx])
        grads = mae_model.regress_backward(model, cache, dyhat)
        return loss, grads

    return _run_loop(model, len(windows), plan, step)


def mse_loss(yhat: np.ndarray, y: np.ndarray):
    diff = yhat - y
    return float(np.mean(diff ** 2)), 2.0 * diff / len(y)


def mae_loss(yhat: np.ndarray, y: np.ndarray):
    diff = yhat - y
    return float(np.mean(np.abs(diff))), np.sign(diff) / len(y)


def finetune_tle(model: MaeModel, labeled_windows: Sequence, plan: TrainPlan,
                 loss: str = "mse") -> TrainLog:
    """Supervised regression fine-tuning with squared-error loss.

    ``loss="mae"`` gives the plain absolute-error variant that distillation
    with alpha_kd=0 must reproduce step for step.
    """
    loss_fn = {"mse": mse_loss, "mae": mae_loss}[loss]
    return _regression_loop(model, labeled_windows, plan, loss_fn)


def kd_loss(y_s: np.ndarray, y_t: np.ndarray, y_true: np.ndarray, kd: KDConfig):
    """Distillation objective: alpha_task * MAE(y_s, y_true) + alpha_kd * RMSE(y_s, y_t).

    Returns (loss, dloss/dy_s).
    """
    n = len(y_s)
    task = float(np.mean(np.abs(y_s - y_true)))
    rmse = float(np.sqrt(np.mean((y_s - y_t) ** 2)))
    loss = kd.alpha_task * task + kd.alpha_kd * rmse
    grad = kd.alpha_task * np.sign(y_s - y_true) / n
    if kd.alpha_kd != 0.0 and rmse > 0.0:
        grad = grad + kd.alpha_kd * (y_s - y_t) / (n * rmse)
    return loss, grad


def finetune_kd(student: MaeModel, teacher: Optional[MaeModel], labeled_windows,
                plan: TrainPlan, kd: KDConfig) -> TrainLog:
    """Distilled fine-tuning: the frozen teacher's predictions steer the student.

    Gradients flow only to the student; the teacher runs in inference mode.
    With alpha_kd = 0 the teacher is unused and the loop degenerates to plain
    absolute-error fine-tuning.
    """
    if kd.alpha_kd != 0.0:
        if teacher is None:
            raise ConfigError("distillation with alpha_kd > 0 needs a teacher")
        if not teacher.has_reg_head:
            raise ConfigError("teacher has no regression head")
    if not student.has_reg_head:
        raise ConfigError("student has no regression head")
    images = _stack_images(labeled_windows, student.dtype)
    targets = _targets_of(labeled_windows)
    if kd.alpha_kd != 0.0:
        t_images = images.astype(teacher.dtype, copy=False)
        teacher_preds, _ = mae_model.regress_forward_batch(teacher, t_images)
        teacher_preds = teacher_preds.astype(np.float64)
    else:
        teacher_preds = np.zeros(len(labeled_windows))

    def step(idx, rng):
        yhat, cache = mae_model.regress_forward_batch(student, images[idx])
        loss, dyhat = kd_loss(yhat.astype(np.float64), teacher_preds[idx],
                              targets[idx], kd)
        grads = mae_model.regress_backward(student, cache, dyhat)
        return loss, grads

    return _run_loop(student, len(labeled_windows), plan, step)


_PLAN_FIELD_TYPES = {
    "phase": str, "base_lr": float, "weight_decay": float, "epochs": int,
    "batch_size": int, "warmup_epochs": int, "mask_ratio": float, "seed": int,
}


def parse_train_plan(values: dict) -> TrainPlan:
    """Build a TrainPlan from string-valued key=value pairs."""
    kwargs = {}
    for key, raw in values.items():
        if key not in _PLAN_FIELD_TYPES:
            raise ConfigError(f"unknown train plan key {key!r}")
        try:
            kwargs[key] = _PLAN_FIELD_TYPES[key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return TrainPlan(**kwargs)


def load_train_plan(path) -> TrainPlan:
    """Parse a plain key=value text file into a TrainPlan."""
    values = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: malformed line {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
    return parse_train_plan(values)
