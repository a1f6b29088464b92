"""Command-line entry points: train, generate, evaluate, ablate, sweep,
dump-attention.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Any nonzero exit
writes a single line ``error: <kind>: <message>`` to stderr.  Datasets can
be given as a manifest path or inline as
``synthetic:seed=7,n=64,size=64,classes=4``.
"""

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np
import torch

from . import checkpoint as ckpt
from .attention import dump_selection
from .config import TrainConfig, AttentionConfig
from .data import (AugmentConfig, DatasetError, PairedBatch, image_to_tensor,
                   load_all, load_manifest, parse_synth_uri, generate_synthetic,
                   save_png, tensor_to_image)
from .metrics import compute_report, load_classifier
from .trainer import (attention_sweep, ablation_table, build_ablation,
                      load_checkpoint, run_training, synthesize)

from PIL import Image


class UsageError(Exception):
    """Bad flags or config; maps to exit code 1."""


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_image_tensor(path):
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise RuntimeError(f"cannot decode {path}: {exc}") from exc
    return image_to_tensor(arr)


def _resolve_data(uri, workdir):
    """Manifest path or synthetic:... URI -> list of PairedSamples."""
    if uri.startswith("synthetic:"):
        spec = parse_synth_uri(uri)
        data_dir = os.path.join(workdir, f"synthetic_seed{spec.seed}_n{spec.n_samples}")
        manifest, _ = generate_synthetic(spec, data_dir)
        return load_all(manifest), spec.image_size
    manifest = load_manifest(uri)
    return load_all(manifest), manifest.image_size


_CONFIG_KEYS = {"train", "attention", "baseline", "batch_size", "epochs",
                "steps", "augment", "image_size", "n_channels",
                "checkpoint_interval", "d_steps"}


def _read_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config key: {sorted(unknown)[0]}")
    for section, cls in (("train", TrainConfig), ("attention", AttentionConfig)):
        body = cfg.get(section) or {}
        fields = {f.name for f in dataclasses.fields(cls)}
        bad = set(body) - fields
        if bad:
            raise UsageError(f"unknown config key: {section}.{sorted(bad)[0]}")
    return cfg


def cmd_train(args):
    cfg = _read_config(args.config)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    samples, image_size = _resolve_data(args.data, out_dir)

    baseline = args.baseline or cfg.get("baseline", "H")
    n_channels = args.n_channels or cfg.get("n_channels", 10)
    try:
        train_cfg, attn_cfg, spec = build_ablation(
            baseline, n_channels=n_channels,
            train_overrides=cfg.get("train"), attn_overrides=cfg.get("attention"))
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc

    epochs = args.epochs if args.epochs is not None else cfg.get("epochs")
    steps = args.steps if args.steps is not None else cfg.get("steps")
    if epochs is None and steps is None:
        epochs = 1
    aug_body = cfg.get("augment", {})
    augment_cfg = None if (args.no_augment or aug_body is None) \
        else AugmentConfig(**aug_body)

    run_training(
        train_cfg, attn_cfg, spec, samples,
        epochs=epochs, max_steps=steps,
        batch_size=args.batch_size or cfg.get("batch_size", 4),
        seed=args.seed, out_dir=out_dir, augment_cfg=augment_cfg,
        checkpoint_interval=args.checkpoint_interval or cfg.get("checkpoint_interval", 0),
        resume_from=args.resume, d_steps=cfg.get("d_steps", 1),
        build_kwargs={"image_size": tuple(image_size)},
    )
    artifacts = [os.path.join(out_dir, "final.ckpt"), os.path.join(out_dir, "loss_log.csv")]
    return CommandResult(0, artifacts)


def cmd_generate(args):
    state = load_checkpoint(args.checkpoint)
    condition = _load_image_tensor(args.image)
    os.makedirs(args.out, exist_ok=True)
    artifacts = []
    for i, sem_path in enumerate(args.semantic):
        semantic = _load_image_tensor(sem_path)
        if semantic.shape != condition.shape:
            raise RuntimeError(
                f"semantic map {sem_path} shape {tuple(semantic.shape)} does not "
                f"match image shape {tuple(condition.shape)}")
        batch = PairedBatch(condition.unsqueeze(0), torch.zeros_like(condition).unsqueeze(0),
                            semantic.unsqueeze(0), [f"gen{i}"])
        stage1, selection = synthesize(state, batch)
        out = state.final_output(stage1, selection)[0]
        path = os.path.join(args.out, f"generated_{i:03d}.png")
        save_png(tensor_to_image(out), path)
        artifacts.append(path)
        if args.dump_internals:
            coarse_path = os.path.join(args.out, f"coarse_{i:03d}.png")
            save_png(tensor_to_image(stage1.coarse_image[0]), coarse_path)
            artifacts.append(coarse_path)
            if selection is not None:
                artifacts.extend(dump_selection(selection, args.out, prefix=f"internals_{i:03d}"))
                if selection.refined_semantic is not None:
                    sem_out = os.path.join(args.out, f"semantic_{i:03d}.png")
                    save_png(tensor_to_image(selection.refined_semantic[0]), sem_out)
                    artifacts.append(sem_out)
    return CommandResult(0, artifacts)


def _paired_pngs(real_dir, fake_dir):
    real = {f for f in os.listdir(real_dir) if f.lower().endswith(".png")}
    fake = {f for f in os.listdir(fake_dir) if f.lower().endswith(".png")}
    orphans = sorted(real ^ fake)
    if orphans:
        raise UsageError(f"unpaired files: {', '.join(orphans)}")
    return sorted(real)


def cmd_evaluate(args):
    names = _paired_pngs(args.real_dir, args.fake_dir)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    clf = None
    if args.classifier:
        clf = load_classifier(args.classifier)
    skipped = [m for m in metrics if m in ("kl", "is", "topk") and clf is None]
    if skipped:
        print(f"warning: no classifier given, skipping: {', '.join(skipped)}",
              file=sys.stderr)
        metrics = [m for m in metrics if m not in skipped]
    palette = None
    if args.palette:
        with open(args.palette, "r", encoding="utf-8") as fh:
            palette = np.asarray(json.load(fh), dtype=np.float64)
    if "miou" in metrics and palette is None:
        print("warning: no palette given, skipping: miou", file=sys.stderr)
        metrics = [m for m in metrics if m != "miou"]

    def read(dirname, name):
        with Image.open(os.path.join(dirname, name)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64)

    real = [read(args.real_dir, n) for n in names]
    fake = [read(args.fake_dir, n) for n in names]
    try:
        report, rows = compute_report(real, fake, metrics=metrics, clf=clf,
                                      palette=palette, sample_ids=names)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "evaluation_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json(indent=1) + "\n")
    csv_path = os.path.join(args.out, "evaluation_per_image.csv")
    cols = ["sample_id"] + sorted({k for r in rows for k in r} - {"sample_id"})
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r.get(c, "")) for c in cols) + "\n")
    print(report.to_json())
    return CommandResult(0, [report_path, csv_path])


def _write_table(rows, columns, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in columns) + "\n")


def cmd_ablate(args):
    ids = [b.strip().upper() for b in args.baselines.split(",") if b.strip()]
    for bid in ids:
        if bid not in "ABCDEFGH" or len(bid) != 1:
            raise UsageError(f"unknown baseline id {bid!r}")
    os.makedirs(args.out, exist_ok=True)
    samples, image_size = _resolve_data(args.data, args.out)
    rows = ablation_table(ids, samples, steps=args.steps, seed=args.seed,
                          batch_size=args.batch_size, image_size=image_size)
    path = os.path.join(args.out, "ablation_table.csv")
    _write_table(rows, ["baseline", "ssim", "psnr", "sd"], path)
    for row in rows:
        print(f"{row['baseline']},{row['ssim']:.4f},{row['psnr']:.4f},{row['sd']:.4f}")
    return CommandResult(0, [path])


def cmd_sweep(args):
    try:
        n_values = [int(v) for v in args.n.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad --n list: {exc}") from exc
    if any(n < 0 for n in n_values):
        raise UsageError("attention channel counts must be >= 0")
    os.makedirs(args.out, exist_ok=True)
    samples, image_size = _resolve_data(args.data, args.out)
    rows = attention_sweep(n_values, samples, steps=args.steps, seed=args.seed,
                           batch_size=args.batch_size, image_size=image_size)
    path = os.path.join(args.out, "attention_sweep.csv")
    _write_table(rows, ["n", "ssim", "psnr", "sd"], path)
    for row in rows:
        print(f"{row['n']},{row['ssim']:.4f},{row['psnr']:.4f},{row['sd']:.4f}")
    return CommandResult(0, [path])


def cmd_dump_attention(args):
    state = load_checkpoint(args.checkpoint)
    if state.ga is None:
        raise RuntimeError("checkpoint has no attention module (single-stage baseline)")
    condition = _load_image_tensor(args.image)
    semantic = _load_image_tensor(args.semantic)
    if semantic.shape != condition.shape:
        raise RuntimeError("semantic map and image disagree on shape")
    batch = PairedBatch(condition.unsqueeze(0), torch.zeros_like(condition).unsqueeze(0),
                        semantic.unsqueeze(0), ["dump"])
    _, selection = synthesize(state, batch)
    artifacts = dump_selection(selection, args.out, prefix="attention")
    return CommandResult(0, artifacts)


def build_parser():
    parser = _Parser(prog="crossview",
                     description="Two-stage cross-view image translation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[], description="Train a model")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", required=True, help="manifest path or synthetic:<spec>")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--baseline", help="ablation baseline A..H (default H)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-channels", type=int)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", description="Synthesize from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="condition image PNG")
    p.add_argument("--semantic", required=True, action="append",
                   help="target semantic map PNG (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-internals", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", description="Score paired image directories")
    p.add_argument("--real-dir", required=True)
    p.add_argument("--fake-dir", required=True)
    p.add_argument("--metrics", default="ssim,psnr,sd",
                   help="comma list from ssim,psnr,sd,kl,is,topk,miou")
    p.add_argument("--classifier", help="classifier checkpoint for kl/is/topk")
    p.add_argument("--palette", help="JSON palette file for miou")
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", description="Run ablation baselines")
    p.add_argument("--baselines", required=True, help="comma list from A..H")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=4)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep", description="Sweep attention channel counts")
    p.add_argument("--n", required=True, help="comma list of channel counts")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=4)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("dump-attention", description="Dump selection internals")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--semantic", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dump_attention)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        result = args.fn(args)
        if os.environ.get("CROSSVIEW_VERBOSE", "1") != "0":
            for path in result.artifacts:
                print(path)
        return result.exit_code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, ValueError, OSError, DatasetError, KeyError) as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
