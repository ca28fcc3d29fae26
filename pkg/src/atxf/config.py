"""Sectioned ``key=value`` experiment configs.

Keys may appear before any section header or inside their own section
(``[model]``, ``[train]``, ``[transfer]``, ``[data]``).  Unknown keys, keys
in the wrong section and badly typed values are rejected.  Every key and
its default is listed in ``KEYS``.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .errors import ConfigurationError
from .train import TrainConfig
from .transfer import TransferSpec
from .vit import ViTConfig

# key -> (section, type, default, description)
KEYS: dict[str, tuple[str, str, object, str]] = {
    "image_size": ("model", "int", 32, "input side length in pixels"),
    "patch_size": ("model", "int", 4, "patch side length in pixels"),
    "depth": ("model", "int", 6, "number of transformer layers"),
    "heads": ("model", "int", 4, "attention heads per layer"),
    "dim": ("model", "int", 128, "embedding width"),
    "mlp_ratio": ("model", "float", 4.0, "MLP hidden width / dim"),
    "num_classes": ("model", "int", 10, "classifier outputs"),
    "channels": ("model", "int", 3, "image channels"),
    "cls_token": ("model", "bool", True, "prepend a CLS token"),
    "regime": ("train", "str", "scratch", "scratch | finetune | copy | distill"),
    "epochs": ("train", "int", 30, "training epochs"),
    "batch_size": ("train", "int", 128, "examples per step"),
    "lr": ("train", "float", 1e-3, "base learning rate"),
    "min_lr": ("train", "float", 0.0, "cosine floor"),
    "warmup_epochs": ("train", "float", 5.0, "linear warmup length"),
    "weight_decay": ("train", "float", 0.05, "decoupled weight decay"),
    "beta1": ("train", "float", 0.9, "AdamW beta1"),
    "beta2": ("train", "float", 0.999, "AdamW beta2"),
    "layer_decay": ("train", "float", 0.75, "layerwise lr decay (finetune only)"),
    "label_smoothing": ("train", "float", 0.1, "label smoothing epsilon"),
    "mixup": ("train", "float", 0.8, "mixup Beta alpha; 0 disables"),
    "ema": ("train", "float", 0.0, "EMA decay; 0 disables"),
    "grad_clip": ("train", "float", 1.0, "global gradient-norm clip"),
    "seed": ("train", "int", 0, "training seed"),
    "init": ("train", "path", None, "checkpoint to start from (finetune)"),
    "train_split": ("train", "str", "train", "split to train on: train | holdout"),
    "eval_split": ("train", "str", "val", "split to evaluate on"),
    "mode": ("transfer", "str", None, "none | copy | distill | feature_distill (default from regime)"),
    "target": ("transfer", "str", "attn_map", "attn_map | Q | K | V | QK"),
    "layers": ("transfer", "str", None, "all | first:k | last:k | i,j,..."),
    "heads_per_layer": ("transfer", "int", None, "transfer the first k heads of each layer"),
    "aggregate": ("transfer", "str", "none", "none | examples | layers | heads | query_tokens"),
    "lambda": ("transfer", "float", 3.0, "distillation loss weight"),
    "teacher": ("transfer", "path", None, "teacher checkpoint"),
    "reference_size": ("transfer", "int", 1024, "reference set size for examples aggregation"),
    "format": ("data", "str", "cifar_binary", "idx | cifar_binary | raw_dir"),
    "path": ("data", "path", "", "images file or directory"),
    "labels": ("data", "path", None, "labels file (idx only)"),
    "split": ("data", "floats", (0.8, 0.2), "train,val[,holdout] fractions"),
    "mean": ("data", "floats", (0.5,), "per-channel mean (one value = all channels)"),
    "std": ("data", "floats", (0.25,), "per-channel std"),
    "split_seed": ("data", "int", 0, "seed for the split permutation"),
    "limit": ("data", "int", None, "use only the first n examples"),
}
SECTIONS = ("model", "train", "transfer", "data")
_ROOT = "__root__"


@dataclass
class ExperimentConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    train_split: str = "train"
    eval_split: str = "val"
    values: dict = field(default_factory=dict)

    @property
    def transfer(self) -> TransferSpec:
        return self.train.transfer


def _convert(key: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"key {key!r}: cannot parse {raw!r} as {kind}") from exc


def _format(kind: str, value) -> str:
    if kind == "floats":
        return ",".join(repr(float(v)) for v in value)
    if kind == "bool":
        return "true" if value else "false"
    return repr(value) if kind == "float" else str(value)


def parse_config_text(text: str, base_dir: str | Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",), interpolation=None,
                                       default_section="__defaults_unused__")
    parser.optionxform = str
    try:
        parser.read_string(f"[{_ROOT}]\n" + text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    values: dict = {}
    for section in parser.sections():
        if section != _ROOT and section not in SECTIONS:
            raise ConfigurationError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in KEYS:
                raise ConfigurationError(f"unknown key {key!r}")
            want, kind, _, _ = KEYS[key]
            if section != _ROOT and section != want:
                raise ConfigurationError(f"key {key!r} belongs in [{want}], found in [{section}]")
            if key in values:
                raise ConfigurationError(f"duplicate key {key!r}")
            val = _convert(key, kind, raw)
            if kind == "path" and val and base_dir is not None and not Path(val).is_absolute():
                val = str(Path(base_dir) / val)
            values[key] = val
    return build_config(values)


def build_config(values: dict) -> ExperimentConfig:
    """Fill defaults, build the typed config objects and check invariants."""
    unknown = set(values) - set(KEYS)
    if unknown:
        raise ConfigurationError(f"unknown key {sorted(unknown)[0]!r}")
    v = {k: spec[2] for k, spec in KEYS.items()}
    v.update(values)
    regime = v["regime"]
    if regime in ("copy", "distill") and not v["teacher"]:
        raise ConfigurationError(f"regime={regime} requires key 'teacher'")
    if regime == "finetune" and not v["init"]:
        raise ConfigurationError("regime=finetune requires key 'init'")
    mode = v["mode"] or {"copy": "copy", "distill": "distill"}.get(regime, "none")
    try:
        model = ViTConfig(image_size=v["image_size"], patch_size=v["patch_size"], depth=v["depth"],
                          heads=v["heads"], dim=v["dim"], mlp_ratio=v["mlp_ratio"],
                          num_classes=v["num_classes"], channels=v["channels"], use_cls_token=v["cls_token"])
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    transfer = TransferSpec(mode=mode, target=v["target"], layers=v["layers"], heads_per_layer=v["heads_per_layer"],
                            aggregate_axis=v["aggregate"], distill_weight=v["lambda"],
                            teacher_checkpoint=v["teacher"], reference_size=v["reference_size"])
    train = TrainConfig(regime=regime, transfer=transfer, epochs=v["epochs"], batch_size=v["batch_size"],
                        base_lr=v["lr"], min_lr=v["min_lr"], warmup_epochs=v["warmup_epochs"],
                        weight_decay=v["weight_decay"], betas=(v["beta1"], v["beta2"]),
                        layerwise_lr_decay=v["layer_decay"], label_smoothing=v["label_smoothing"],
                        mixup_alpha=v["mixup"], ema_decay=v["ema"], grad_clip=v["grad_clip"], seed=v["seed"],
                        init_checkpoint=v["init"]).validate()
    data = DatasetSpec(format=v["format"], path=v["path"], labels_path=v["labels"], split=v["split"],
                       mean=v["mean"], std=v["std"], num_classes=v["num_classes"], split_seed=v["split_seed"],
                       limit=v["limit"]).validate()
    for key in ("train_split", "eval_split"):
        if v[key] not in ("train", "val", "holdout"):
            raise ConfigurationError(f"key {key!r} must be train, val or holdout")
    return ExperimentConfig(model=model, train=train, data=data, train_split=v["train_split"],
                            eval_split=v["eval_split"], values=dict(values))


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid UTF-8") from exc
    return parse_config_text(text, base_dir=path.parent)


def resolved_values(cfg: ExperimentConfig) -> dict:
    v = {k: spec[2] for k, spec in KEYS.items()}
    v.update(cfg.values)
    if v["mode"] is None:
        v["mode"] = cfg.transfer.mode
    return v


def render_config(cfg: ExperimentConfig) -> str:
    """Every key with its resolved value, grouped by section; parses back to the same config."""
    v = resolved_values(cfg)
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, (sec, kind, _, desc) in KEYS.items():
            if sec != section:
                continue
            if v[key] is None:
                lines.append(f"# {key} = (unset)  -- {desc}")
            else:
                lines.append(f"{key} = {_format(kind, v[key])}")
        lines.append("")
    return "\n".join(lines)
