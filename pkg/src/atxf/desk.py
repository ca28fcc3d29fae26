"""Desk-scale transfer experiment on the synthetic shapes corpus.

A teacher is trained on a held-out split, then students are trained on a
smaller disjoint split under scratch, copy, distill and fine-tune, plus a
copy run from an untrained teacher.  Everything runs single-threaded on a
CPU in about 17 minutes end to end.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import ensemble_eval
from .checkpoint import Checkpoint, save_checkpoint
from .data import DatasetSpec, load_dataset, make_shapes, write_cifar_binary
from .train import TrainConfig, evaluate, run_training
from .transfer import TeacherContext, TransferSpec
from .vit import ViTConfig, init_params

logger = logging.getLogger(__name__)

# 8000 holdout (teacher) / 4000 train (students) / 2000 val
DESK_SIZE = 14000
DESK_SPLIT = (4 / 14, 2 / 14, 8 / 14)


def desk_model_config() -> ViTConfig:
    # patch 8 keeps N=17 tokens; about 2 ms per image per step on one core
    return ViTConfig(image_size=32, patch_size=8, depth=4, heads=4, dim=64, num_classes=10)


def write_desk_dataset(path: str | Path, n: int = DESK_SIZE, seed: int = 0) -> Path:
    path = Path(path)
    x, y = make_shapes(n, seed=seed)
    write_cifar_binary(path, x, y)
    return path


@dataclass
class DeskResult:
    acc: dict[str, float] = field(default_factory=dict)
    curves: dict[str, list[float]] = field(default_factory=dict)
    ensemble_acc: float = float("nan")
    self_ensemble_acc: float = float("nan")
    seconds: dict[str, float] = field(default_factory=dict)

    def summary(self) -> str:
        rows = [f"{k:>12s}  {v:.4f}" for k, v in self.acc.items()]
        rows.append(f"{'ensemble':>12s}  {self.ensemble_acc:.4f}  (distill + finetune)")
        return "\n".join(rows)


def run_desk_experiment(data_path: str | Path, out_dir: str | Path | None = None, teacher_epochs: int = 30,
                        student_epochs: int = 10, seed: int = 0) -> DeskResult:
    model = desk_model_config()
    ds = load_dataset(DatasetSpec(path=str(data_path), split=DESK_SPLIT, split_seed=seed))
    train, val, hold = ds.split("train"), ds.split("val"), ds.split("holdout")
    common = dict(batch_size=128, base_lr=1e-3, warmup_epochs=1, weight_decay=0.05, label_smoothing=0.1)
    res = DeskResult()
    params = {}

    def run(name, cfg, data, **kw):
        t0 = time.time()
        r = run_training(cfg, model, data, val, **kw)
        res.seconds[name] = time.time() - t0
        res.curves[name] = [m["acc"] for m in r.metrics if m["split"] == "val"]
        res.acc[name] = r.final_val_acc
        params[name] = r.params
        logger.info("%s: val acc %.4f (%.0fs)", name, r.final_val_acc, res.seconds[name])
        if out_dir is not None:
            meta = {"regime": cfg.regime, "epoch": cfg.epochs, "seed": cfg.seed, "parent_digest": None,
                    "transfer": cfg.transfer.to_dict(), "final_val_acc": r.final_val_acc}
            save_checkpoint(Path(out_dir) / f"{name}.ckpt", Checkpoint(model, r.params.arrays(), meta))
        return r

    run("teacher", TrainConfig(epochs=teacher_epochs, seed=seed + 1, **common), hold)
    teacher = TeacherContext(params["teacher"])
    copy_spec = TransferSpec(mode="copy", teacher_checkpoint="teacher.ckpt")
    distill_spec = TransferSpec(mode="distill", teacher_checkpoint="teacher.ckpt")
    s = seed + 2
    run("scratch", TrainConfig(epochs=student_epochs, seed=s, **common), train)
    run("copy", TrainConfig(regime="copy", transfer=copy_spec, epochs=student_epochs, seed=s, **common), train,
        teacher=teacher)
    run("distill", TrainConfig(regime="distill", transfer=distill_spec, epochs=student_epochs, seed=s, **common),
        train, teacher=teacher)
    run("finetune", TrainConfig(regime="finetune", init_checkpoint="teacher.ckpt", layerwise_lr_decay=0.75,
                                epochs=student_epochs, seed=s, **common), train, init=params["teacher"])
    random_teacher = TeacherContext(init_params(model, np.random.default_rng(seed + 99)))
    run("copy_random", TrainConfig(regime="copy", transfer=copy_spec, epochs=student_epochs, seed=s, **common),
        train, teacher=random_teacher)

    _, _, p_distill = evaluate(params["distill"], *val)
    _, _, p_ft = evaluate(params["finetune"], *val)
    res.ensemble_acc = ensemble_eval(p_distill, p_ft, val[1])
    res.self_ensemble_acc = ensemble_eval(p_distill, p_distill, val[1])
    return res
