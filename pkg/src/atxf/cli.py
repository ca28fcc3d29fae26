"""Command-line entry point: ``atxf <subcommand> ...``.

Every subcommand writes into a run directory (``--out``, else
``$ATXF_RUN_DIR/<subcommand>``, else ``./runs/<subcommand>``) and returns a
nonzero exit code with a one-line message on any contract violation.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import Checkpoint, checkpoint_digest, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, build_config, parse_config, render_config
from .data import load_dataset
from .errors import ATXFError, ConfigurationError
from .train import evaluate, run_training
from .transfer import TeacherContext, check_geometry
from .vit import vit_forward


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get("ATXF_RUN_DIR") or "runs") / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _experiment(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else build_config({})
    if args.seed is not None:
        cfg = build_config({**cfg.values, "seed": args.seed})
    return cfg


def _teacher_from(path: str | None, student_cfg) -> TeacherContext | None:
    if not path:
        return None
    ckpt = load_checkpoint(path)
    check_geometry(ckpt.config, student_cfg)
    return TeacherContext(ckpt.to_params(requires_grad=False))


def _split_data(exp: ExperimentConfig, name: str):
    if not exp.data.path:
        raise ConfigurationError("no dataset configured; set [data] path= in --config")
    return load_dataset(exp.data).split(name)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def cmd_train(args) -> int:
    exp = _experiment(args)
    out = run_dir(args, "train")
    atomic_write_text(out / "config.cfg", render_config(exp))
    ds = load_dataset(exp.data)
    train_data = ds.split(exp.train_split)
    val_data = ds.split(exp.eval_split)
    teacher = _teacher_from(exp.transfer.teacher_checkpoint, exp.model)
    init = None
    parent = None
    if exp.train.init_checkpoint:
        ic = load_checkpoint(exp.train.init_checkpoint, exp.model)
        init = ic.to_params()
        parent = checkpoint_digest(exp.train.init_checkpoint)

    fd, tmp_log = tempfile.mkstemp(dir=out, prefix="metrics.csv.", suffix=".tmp")
    os.close(fd)
    try:
        res = run_training(exp.train, exp.model, train_data, val_data, teacher=teacher, init=init, log_path=tmp_log)
        os.replace(tmp_log, out / "metrics.csv")
    finally:
        if os.path.exists(tmp_log):
            os.unlink(tmp_log)
    meta = {
        "regime": exp.train.regime,
        "epoch": exp.train.epochs,
        "seed": exp.train.seed,
        "parent_digest": parent,
        "teacher": exp.transfer.teacher_checkpoint,
        "transfer": exp.transfer.to_dict(),
        "final_val_acc": res.final_val_acc,
    }
    opt = res.optimizer
    digest = save_checkpoint(out / "checkpoint.ckpt", Checkpoint(
        exp.model, res.params.arrays(), meta, res.ema, opt.step, opt.m, opt.v))
    print(f"final {exp.eval_split} acc {res.final_val_acc!r}")
    print(f"checkpoint {out / 'checkpoint.ckpt'} sha256 {digest}")
    return 0


def _eval_probs(ckpt: Checkpoint, exp: ExperimentConfig, x: np.ndarray, y: np.ndarray):
    """Loss, accuracy and probabilities, replaying the teacher for copy-trained checkpoints."""
    from .train import TrainConfig
    from .transfer import TransferSpec

    params = ckpt.to_params(requires_grad=False)
    meta = ckpt.metadata
    if meta.get("regime") == "copy":
        spec = TransferSpec(**meta["transfer"])
        teacher = _teacher_from(meta.get("teacher"), ckpt.config)
        if spec.aggregate_axis == "examples":
            ref = _split_data(exp, exp.train_split)[0]
            teacher.set_reference(ref[: spec.reference_size])
        return evaluate(params, x, y, TrainConfig(regime="copy", transfer=spec), teacher)
    return evaluate(params, x, y)


def cmd_eval(args) -> int:
    exp = _experiment(args)
    ckpt = load_checkpoint(args.checkpoint)
    x, y = _split_data(exp, args.data or exp.eval_split)
    loss, acc, _ = _eval_probs(ckpt, exp, x, y)
    out = run_dir(args, "eval")
    atomic_write_text(out / "eval.json", json.dumps({"checkpoint": str(args.checkpoint), "loss": loss, "acc": acc}))
    print(f"loss {loss!r}")
    print(f"acc {acc!r}")
    return 0


def cmd_ensemble(args) -> int:
    exp = _experiment(args)
    x, y = _split_data(exp, args.data or exp.eval_split)
    probs, accs = [], []
    for path in (args.checkpoint_a, args.checkpoint_b):
        _, acc, p = _eval_probs(load_checkpoint(path), exp, x, y)
        probs.append(p)
        accs.append(acc)
    ens = analysis.ensemble_eval(probs[0], probs[1], y)
    out = run_dir(args, "ensemble")
    atomic_write_text(out / "ensemble.json", json.dumps({"acc_a": accs[0], "acc_b": accs[1], "acc_ensemble": ens}))
    print(f"acc_a {accs[0]!r}")
    print(f"acc_b {accs[1]!r}")
    print(f"acc_ensemble {ens!r}")
    return 0


def _records(args, exp):
    x, _ = _split_data(exp, args.data or exp.eval_split)
    x = x[: args.limit]
    a = load_checkpoint(args.checkpoint_a).to_params(requires_grad=False)
    b = load_checkpoint(args.checkpoint_b).to_params(requires_grad=False)
    return a, b, x


def cmd_analyze_cka(args) -> int:
    exp = _experiment(args)
    a, b, x = _records(args, exp)
    scores = analysis.cka_by_layer(analysis.feature_stack(a, x, args.pool), analysis.feature_stack(b, x, args.pool),
                                   debiased=args.debiased)
    out = run_dir(args, "analyze-cka")
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["layer", "cka"])
    for l, s in enumerate(scores):
        w.writerow([l, repr(float(s))])
        print(f"layer {l} cka {s:.6f}")
    atomic_write_text(out / "cka.csv", buf.getvalue())
    return 0


def cmd_analyze_jsd(args) -> int:
    exp = _experiment(args)
    a, b, x = _records(args, exp)
    check_geometry(a.cfg, b.cfg)
    maps_a = np.concatenate([vit_forward(x[s : s + 128], a)[1].stacked_maps() for s in range(0, len(x), 128)], axis=1)
    maps_b = np.concatenate([vit_forward(x[s : s + 128], b)[1].stacked_maps() for s in range(0, len(x), 128)], axis=1)
    out = run_dir(args, "analyze-jsd")
    for strategy in args.strategy:
        report = analysis.head_match_report(maps_a, maps_b, strategy)
        report.write_csv(out / f"jsd_{strategy}.csv")
        for s in report.layers:
            print(f"{strategy} layer {s.layer} mean_jsd {s.mean:.6f}")
    return 0


def cmd_export_attn(args) -> int:
    exp = _experiment(args)
    ckpt = load_checkpoint(args.checkpoint)
    x, _ = _split_data(exp, args.data or exp.eval_split)
    img = x[args.index : args.index + 1]
    _, rec = vit_forward(img, ckpt.to_params(requires_grad=False))
    layers = list(range(ckpt.config.depth)) if args.layers is None else [int(v) for v in args.layers.split(",")]
    out = run_dir(args, "export-attn")
    for p in analysis.export_cls_attention(rec, img[0], layers, out, ckpt.config, prefix=f"img{args.index}"):
        print(p)
    return 0


def cmd_count_activations(args) -> int:
    dims = dict(depth=args.depth, heads=args.heads, tokens=args.tokens, head_dim=args.head_dim)
    if args.config:
        model = _experiment(args).model
        dims = {k: (v if v is not None else getattr(model, {"tokens": "num_tokens"}.get(k, k))) for k, v in dims.items()}
    missing = [k for k, v in dims.items() if v is None]
    if missing:
        raise ConfigurationError(f"count-activations needs --{missing[0].replace('_', '-')} (or --config)")
    qk = analysis.count_transferred_activations(accounting="qk_sizes", **dims)
    mp = analysis.count_transferred_activations(accounting="map_size", **dims)
    print(f"qk_sizes {qk:,}")
    print(f"map_size {mp:,}")
    return 0


def cmd_info(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    n = sum(int(np.prod(v.shape)) for v in ckpt.params.values())
    print(f"sha256 {checkpoint_digest(args.checkpoint)}")
    print(f"config {json.dumps(ckpt.config.to_dict(), sort_keys=True)}")
    print(f"metadata {json.dumps(ckpt.metadata, sort_keys=True)}")
    print(f"parameters {n:,} in {len(ckpt.params)} tensors")
    print(f"ema {'yes' if ckpt.ema is not None else 'no'}; optimizer step {ckpt.optimizer_step}")
    return 0


# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--out", help="run directory (default: $ATXF_RUN_DIR/<subcommand>)")
    common.add_argument("--seed", type=int, help="override the config seed")

    p = argparse.ArgumentParser(prog="atxf", description="Attention transfer experiments on small ViTs.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="train one model")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--data", choices=("train", "val", "holdout"))
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ensemble", parents=[common], help="averaged-softmax ensemble of two checkpoints")
    s.add_argument("checkpoint_a")
    s.add_argument("checkpoint_b")
    s.add_argument("--data", choices=("train", "val", "holdout"))
    s.set_defaults(fn=cmd_ensemble)

    for name, fn in (("analyze-cka", cmd_analyze_cka), ("analyze-jsd", cmd_analyze_jsd)):
        s = sub.add_parser(name, parents=[common], help=f"{name[8:].upper()} between two checkpoints")
        s.add_argument("checkpoint_a")
        s.add_argument("checkpoint_b")
        s.add_argument("--data", choices=("train", "val", "holdout"))
        s.add_argument("--limit", type=int, default=512, help="examples to analyze")
        s.set_defaults(fn=fn)
        if name == "analyze-cka":
            s.add_argument("--pool", choices=("cls", "mean"), default="cls")
            s.add_argument("--debiased", action="store_true")
        else:
            s.add_argument("--strategy", nargs="+", choices=analysis.STRATEGIES, default=list(analysis.STRATEGIES))

    s = sub.add_parser("export-attn", parents=[common], help="write CLS attention overlays")
    s.add_argument("checkpoint")
    s.add_argument("--data", choices=("train", "val", "holdout"))
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--layers", help="comma-separated layer indices (default: all)")
    s.set_defaults(fn=cmd_export_attn)

    s = sub.add_parser("count-activations", parents=[common], help="activations transferred per example")
    s.add_argument("--depth", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--tokens", type=int)
    s.add_argument("--head-dim", type=int)
    s.set_defaults(fn=cmd_count_activations)

    s = sub.add_parser("info", parents=[common], help="print checkpoint header and metadata")
    s.add_argument("checkpoint")
    s.set_defaults(fn=cmd_info)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ATXFError, OSError, ValueError) as exc:
        print(f"atxf {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
