"""Training loops for scratch, fine-tune, attention copy and attention distillation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, NonFiniteLossError
from .transfer import (
    TeacherContext,
    TransferSpec,
    attention_distill_loss,
    combined_loss,
    feature_distill_loss,
    q_distill_loss,
    teacher_overrides,
)
from .vit import ViTConfig, ViTParams, init_params, vit_forward

logger = logging.getLogger(__name__)

REGIMES = ("scratch", "finetune", "copy", "distill")
METRIC_FIELDS = ("epoch", "split", "loss", "acc", "lr", "dist_loss")


@dataclass
class TrainConfig:
    regime: str = "scratch"
    transfer: TransferSpec = field(default_factory=TransferSpec)
    epochs: int = 30
    batch_size: int = 128
    base_lr: float = 1e-3
    min_lr: float = 0.0
    warmup_epochs: float = 5.0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    layerwise_lr_decay: float = 1.0
    label_smoothing: float = 0.1
    mixup_alpha: float = 0.0
    ema_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    init_checkpoint: str | None = None

    def validate(self) -> "TrainConfig":
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if self.regime in ("copy", "distill") and not self.transfer.teacher_checkpoint:
            raise ConfigurationError(f"regime={self.regime} requires a teacher checkpoint (key 'teacher')")
        if self.regime == "finetune" and not self.init_checkpoint:
            raise ConfigurationError("regime=finetune requires an init checkpoint (key 'init')")
        if not 0 < self.layerwise_lr_decay <= 1:
            raise ConfigurationError("layerwise_lr_decay must be in (0, 1]")
        if not 0 <= self.ema_decay < 1:
            raise ConfigurationError("ema_decay must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        self.transfer.validate()
        if self.regime == "copy" and self.transfer.mode != "copy":
            raise ConfigurationError("regime=copy needs transfer mode copy")
        if self.regime == "distill" and self.transfer.mode not in ("distill", "feature_distill"):
            raise ConfigurationError("regime=distill needs transfer mode distill or feature_distill")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ----------------------------------------------------------------------
# optimizer pieces
# ----------------------------------------------------------------------
@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr_mult: dict[str, float] = field(default_factory=dict)
    decay_mask: dict[str, bool] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], lr_mult=None, decay_mask=None) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            lr_mult=dict(lr_mult or {}),
            decay_mask=dict(decay_mask or {}),
        )


def adamw_step(params, grads, state: OptimizerState, lr: float, wd: float, beta1: float, beta2: float, eps: float = 1e-8):
    """In-place AdamW update with bias correction and decoupled weight decay.

    ``params``/``grads`` map names to arrays.  A parameter's effective lr is
    ``lr * state.lr_mult.get(name, 1)``; weight decay skips names whose
    ``state.decay_mask`` entry is False.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        lr_p = lr * state.lr_mult.get(name, 1.0)
        if wd and state.decay_mask.get(name, True):
            p -= lr_p * wd * p
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr_p * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def lr_schedule(step: float, total_steps: float, warmup_steps: float, base_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def layerwise_decay_multipliers(depth: int, factor: float) -> list[float]:
    """lr multipliers indexed by layer group: 0 = embeddings, 1..L = blocks, L+1 = head."""
    if not 0 < factor <= 1:
        raise ContractError("layerwise decay factor must be in (0, 1]")
    return [factor ** (depth + 1 - g) for g in range(depth + 2)]


def mixup_batch(images: np.ndarray, labels: np.ndarray, alpha: float, rng: np.random.Generator, lam: float | None = None):
    """Convex mix of each example with a shuffled partner; ``alpha == 0`` is a no-op."""
    if alpha < 0:
        raise ContractError("mixup alpha must be >= 0")
    if alpha == 0 and lam is None:
        return images, labels
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(len(images))
    return lam * images + (1 - lam) * images[perm], lam * labels + (1 - lam) * labels[perm]


def ema_update(ema: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    if not 0 <= decay < 1:
        raise ContractError("EMA decay must be in [0, 1)")
    for k, p in params.items():
        ema[k] *= decay
        ema[k] += (1.0 - decay) * p
    return ema


def smooth_labels(labels: np.ndarray, num_classes: int, eps: float) -> np.ndarray:
    onehot = np.eye(num_classes)[labels]
    return onehot * (1.0 - eps) + eps / num_classes


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ----------------------------------------------------------------------
# loops
# ----------------------------------------------------------------------
@dataclass
class TrainResult:
    params: ViTParams
    ema: dict[str, np.ndarray] | None
    optimizer: OptimizerState
    metrics: list[dict]
    teacher: TeacherContext | None = None

    @property
    def final_val_acc(self) -> float | None:
        vals = [m["acc"] for m in self.metrics if m["split"] == "val"]
        return vals[-1] if vals else None


def _forward_with_teacher(params, images, cfg: TrainConfig, teacher: TeacherContext | None, key=None):
    """Student forward plus whatever auxiliary loss the regime needs."""
    spec = cfg.transfer
    if cfg.regime == "copy":
        overrides, _ = teacher_overrides(spec, teacher, images, params.cfg, key=key)
        logits, rec = vit_forward(images, params, overrides)
        return logits, None
    logits, rec = vit_forward(images, params)
    if cfg.regime != "distill":
        return logits, None
    trec = teacher.record(images, key=key)
    if spec.mode == "feature_distill":
        feats = [f.data for f in trec.features]
        return logits, feature_distill_loss(rec.features, feats, spec.resolve_layers(params.cfg.depth))
    if spec.target == "Q":
        return logits, q_distill_loss(rec.queries, trec.q, spec)
    return logits, attention_distill_loss(rec.scores, trec.maps, spec)


def evaluate(params: ViTParams, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig | None = None,
             teacher: TeacherContext | None = None, batch_size: int = 256) -> tuple[float, float, np.ndarray]:
    """Hard-label loss, accuracy and softmax probabilities; copy regime uses the teacher's maps."""
    frozen = params.frozen()
    copy = cfg is not None and cfg.regime == "copy"
    probs, loss_sum = [], 0.0
    for s in range(0, len(images), batch_size):
        x = images[s : s + batch_size]
        if copy:
            overrides, _ = teacher_overrides(cfg.transfer, teacher, x, params.cfg)
            logits, _ = vit_forward(x, frozen, overrides)
        else:
            logits, _ = vit_forward(x, frozen)
        ls = T.log_softmax_array(logits.data, axis=1)
        y = labels[s : s + batch_size]
        loss_sum -= float(ls[np.arange(len(y)), y].sum())
        probs.append(np.exp(ls))
    p = np.concatenate(probs, axis=0) if probs else np.zeros((0, params.cfg.num_classes))
    n = max(len(images), 1)
    acc = float(np.mean(np.argmax(p, axis=1) == labels)) if len(images) else 0.0
    return loss_sum / n, acc, p


def _param_groups(params: ViTParams, cfg: TrainConfig) -> tuple[dict[str, float], dict[str, bool]]:
    depth = params.cfg.depth
    if cfg.regime == "finetune" and cfg.layerwise_lr_decay < 1:
        mults = layerwise_decay_multipliers(depth, cfg.layerwise_lr_decay)
        lr_mult = {n: mults[params.layer_group(n)] for n in params}
    else:
        lr_mult = {n: 1.0 for n in params}
    # no decay on biases, norms, and embeddings that are not projections
    decay = {n: params[n].ndim >= 2 and n != "pos_embed" for n in params}
    return lr_mult, decay


def run_training(
    cfg: TrainConfig,
    model_cfg: ViTConfig,
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray] | None = None,
    teacher: TeacherContext | None = None,
    init: ViTParams | None = None,
    reference_images: np.ndarray | None = None,
    log_path: str | Path | None = None,
    on_epoch: Callable[[int, ViTParams], None] | None = None,
) -> TrainResult:
    """Train one model under ``cfg.regime`` and return params plus per-epoch metrics.

    The metric log (if ``log_path``) gets one CSV row per split per epoch.
    """
    cfg.validate()
    if cfg.regime in ("copy", "distill") and teacher is None:
        raise ConfigurationError(f"regime={cfg.regime} needs a teacher")
    if cfg.regime == "finetune" and init is None:
        raise ConfigurationError("regime=finetune needs init params")
    ss = np.random.SeedSequence(cfg.seed)
    init_rng, data_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    params = init.copy() if init is not None else init_params(model_cfg, init_rng)
    if params.cfg != model_cfg:
        raise ConfigurationError("init params do not match the model config")
    if cfg.regime == "copy" and cfg.transfer.aggregate_axis == "examples":
        ref = reference_images if reference_images is not None else train_data[0]
        teacher.set_reference(ref[: cfg.transfer.reference_size])

    lr_mult, decay = _param_groups(params, cfg)
    arrays = params.arrays()
    state = OptimizerState.zeros_like(arrays, lr_mult, decay)
    ema = {k: v.copy() for k, v in arrays.items()} if cfg.ema_decay > 0 else None

    x_train, y_train = train_data
    n = len(x_train)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    K = model_cfg.num_classes
    metrics: list[dict] = []

    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.DictWriter(log_file, fieldnames=METRIC_FIELDS)
        writer.writeheader()

    def emit(row):
        metrics.append(row)
        if writer is not None:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
            log_file.flush()

    try:
        step = 0
        for epoch in range(cfg.epochs):
            t0 = time.time()
            order = data_rng.permutation(n)
            loss_sum = dist_sum = correct = 0.0
            lr = 0.0
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                x = x_train[idx]
                y = smooth_labels(y_train[idx], K, cfg.label_smoothing)
                x, y = mixup_batch(x, y, cfg.mixup_alpha, data_rng)
                lr = lr_schedule(step, total_steps, warmup_steps, cfg.base_lr, cfg.min_lr)

                params.zero_grad()
                logits, dist = _forward_with_teacher(params, x, cfg, teacher)
                task = T.cross_entropy_soft(logits, y)
                loss = combined_loss(task, dist, cfg.transfer.distill_weight) if dist is not None else task
                lv = loss.item()
                if not math.isfinite(lv):
                    raise NonFiniteLossError(f"non-finite loss {lv} at epoch {epoch} step {b} (regime {cfg.regime})")
                loss.backward()
                grads = {k: t.grad for k, t in params.items()}
                clip_grad_norm(grads, cfg.grad_clip)
                adamw_step(arrays, grads, state, lr, cfg.weight_decay, *cfg.betas)
                if ema is not None:
                    ema_update(ema, arrays, cfg.ema_decay)

                loss_sum += lv * len(idx)
                dist_sum += (dist.item() if dist is not None else 0.0) * len(idx)
                correct += float(np.sum(np.argmax(logits.data, axis=1) == np.argmax(y, axis=1)))
                step += 1
            emit({"epoch": epoch, "split": "train", "loss": loss_sum / n, "acc": correct / n, "lr": lr,
                  "dist_loss": dist_sum / n})
            if val_data is not None:
                vl, va, _ = evaluate(params, val_data[0], val_data[1], cfg, teacher)
                emit({"epoch": epoch, "split": "val", "loss": vl, "acc": va, "lr": lr, "dist_loss": 0.0})
                logger.info("%s epoch %d: train loss %.4f val acc %.4f (%.1fs)",
                            cfg.regime, epoch, loss_sum / n, va, time.time() - t0)
            if on_epoch is not None:
                on_epoch(epoch, params)
    finally:
        if log_file is not None:
            log_file.close()
    for t in params.tensors.values():
        t.grad = None
    return TrainResult(params=params, ema=ema, optimizer=state, metrics=metrics, teacher=teacher)
