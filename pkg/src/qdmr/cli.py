"""Command-line entry point: train / eval / predict / synth / analyze-saliency.

Exit codes: 0 ok, 2 config error, 3 data error, 4 checkpoint error. Every stdout
report line is machine-parseable `key: value`.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .data import (
    AnnotationError,
    FeatureFormatError,
    Sample,
    SynthSpec,
    load_dataset,
    synth_dataset,
    write_annotations,
    write_feature_matrix,
)
from .engine import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    TrainConfig,
    Trainer,
    apply_overrides,
    config_to_text,
    evaluate,
    load_checkpoint,
    parse_config_file,
    predict_records,
    save_checkpoint,
    synthetic_preset,
)
from .tensor import no_grad, reset_tape

LAMBDA_FLAGS = ("lambda_neg", "lambda_cont", "lambda_margin", "lambda_l1",
                "lambda_giou", "lambda_ce")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qdmr",
                                     description="moment retrieval and highlight "
                                                 "detection on precomputed features")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_flags(p, with_overrides: bool):
        p.add_argument("--config", type=Path, default=None,
                       help="flat key = value config file")
        p.add_argument("--data-root", type=Path, default=None,
                       help="dataset directory (env QD_DATA_ROOT as fallback)")
        p.add_argument("--synthetic", action="store_true",
                       help="use the built-in planted-window dataset")
        p.add_argument("--signal-strength", type=float, default=1.0)
        p.add_argument("--seed", type=int, default=None)
        if with_overrides:
            p.add_argument("--epochs", type=int, default=None)
            p.add_argument("--batch-size", type=int, default=None)
            p.add_argument("--lr", type=float, default=None)
            for name in LAMBDA_FLAGS:
                p.add_argument(f"--{name.replace('_', '-')}", type=float,
                               default=None, dest=name)
            p.add_argument("--tau", type=float, default=None)
            p.add_argument("--margin-delta", type=float, default=None)
            for name in ("cate", "neg-pair", "saliency-token", "dam"):
                p.add_argument(f"--no-{name}", action="store_true",
                               dest=f"no_{name.replace('-', '_')}")

    train = sub.add_parser("train", help="train a model and log metrics per epoch")
    add_data_flags(train, with_overrides=True)
    train.add_argument("--out-dir", type=Path, default=Path("qdmr_run"))

    for name, hint in (("eval", "print the metric block for a checkpoint"),
                       ("predict", "dump ranked moment predictions as JSONL"),
                       ("analyze-saliency", "saliency histograms under own vs "
                                            "rolled negative queries")):
        p = sub.add_parser(name, help=hint)
        p.add_argument("--checkpoint", type=Path, required=True)
        add_data_flags(p, with_overrides=False)
        p.add_argument("--out-dir", type=Path, default=None)

    synth = sub.add_parser("synth", help="materialize a synthetic dataset on disk")
    synth.add_argument("--out-dir", type=Path, required=True)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--signal-strength", type=float, default=1.0)
    synth.add_argument("--n-train", type=int, default=None)
    synth.add_argument("--n-val", type=int, default=None)
    return parser


# -- config and data resolution ------------------------------------------------------


def _resolve_train_config(args) -> TrainConfig:
    cfg = synthetic_preset() if args.synthetic else TrainConfig()
    if args.config is not None:
        cfg = apply_overrides(cfg, parse_config_file(args.config))
    overrides = {}
    for name in ("epochs", "batch_size", "lr", "seed"):
        if getattr(args, name, None) is not None:
            overrides[name] = getattr(args, name)
    for name in LAMBDA_FLAGS + ("tau", "margin_delta"):
        if getattr(args, name, None) is not None:
            overrides[f"loss.{name}"] = getattr(args, name)
    for flag, fld in (("no_cate", "use_cate"), ("no_neg_pair", "use_neg_pair"),
                      ("no_saliency_token", "use_saliency_token"),
                      ("no_dam", "use_dam")):
        if getattr(args, flag, False):
            overrides[fld] = False
    return apply_overrides(cfg, overrides)


def _data_root(args) -> Path | None:
    if args.data_root is not None:
        return args.data_root
    env = os.environ.get("QD_DATA_ROOT")
    return Path(env) if env else None


def _samples(pairs) -> list[Sample]:
    return [s for _, s in pairs]


def _load_splits(args, cfg: TrainConfig, need_train: bool,
                 ) -> tuple[list[Sample], list[Sample]]:
    root = _data_root(args)
    if args.synthetic and root is not None:
        raise ConfigError("choose one of --synthetic or --data-root, not both")
    if args.synthetic:
        seed = args.seed if args.seed is not None else cfg.seed
        train, val = synth_dataset(SynthSpec(), args.signal_strength, seed)
        return _samples(train), _samples(val)
    if root is None:
        raise ConfigError("no data source: pass --synthetic or --data-root "
                          "(or set QD_DATA_ROOT)")
    if need_train:
        return (_samples(load_dataset(root / "train")),
                _samples(load_dataset(root / "val")))
    split = root / "val" if (root / "val").is_dir() else root
    return [], _samples(load_dataset(split))


def _load_trainer(args) -> Trainer:
    config_path = args.config
    if config_path is None:
        config_path = args.checkpoint.parent / "config.txt"
    cfg = apply_overrides(TrainConfig(), parse_config_file(config_path))
    return load_checkpoint(args.checkpoint, cfg)


def _print_report(report) -> None:
    for key, value in report.summary().items():
        print(f"{key}: {value:.4f}")


# -- commands ------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    train_samples, val_samples = _load_splits(args, cfg, need_train=True)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")

    trainer = Trainer(cfg)
    best_map = -1.0
    with (out / "metrics.jsonl").open("w", encoding="utf-8") as log:
        for epoch in range(1, cfg.epochs + 1):
            stats = trainer.train_epoch(train_samples)
            record = {"epoch": epoch, **stats}
            line = f"epoch: {epoch}  loss: {stats['loss']:.4f}"
            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                report = evaluate(trainer.model, val_samples)
                record["val"] = report.summary()
                line += f"  mAP-Avg: {report.map_avg:.4f}"
                if report.map_avg > best_map:
                    best_map = report.map_avg
                    save_checkpoint(out / "best.ckpt", trainer)
            log.write(json.dumps(record) + "\n")
            print(line)
            save_checkpoint(out / "last.ckpt", trainer)

    report = evaluate(trainer.model, val_samples)
    _print_report(report)
    print(f"best_checkpoint: {out / 'best.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    trainer = _load_trainer(args)
    _, val_samples = _load_splits(args, trainer.cfg, need_train=False)
    report = evaluate(trainer.model, val_samples)
    _print_report(report)
    if args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / "eval_report.json").write_text(report.to_json(),
                                                       encoding="utf-8")
    return 0


def cmd_predict(args) -> int:
    trainer = _load_trainer(args)
    _, val_samples = _load_splits(args, trainer.cfg, need_train=False)
    records = predict_records(trainer.model, val_samples)
    out = args.out_dir if args.out_dir is not None else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "predictions.jsonl"
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    print(f"n_queries: {len(records)}")
    print(f"predictions: {path}")
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec()
    if args.n_train is not None:
        spec.n_train = args.n_train
    if args.n_val is not None:
        spec.n_val = args.n_val
    train, val = synth_dataset(spec, args.signal_strength, args.seed)
    for split, pairs in (("train", train), ("val", val)):
        root = args.out_dir / split
        (root / "features").mkdir(parents=True, exist_ok=True)
        (root / "queries").mkdir(parents=True, exist_ok=True)
        write_annotations(root / "annotations.jsonl", [ann for ann, _ in pairs])
        for ann, sample in pairs:
            write_feature_matrix(root / "features" / f"{ann.vid}.qdft",
                                 sample.video_feat.data)
            write_feature_matrix(root / "queries" / f"{ann.qid}.qdft",
                                 sample.text_feat.data)
        print(f"{split}_dir: {root}")
        print(f"n_{split}: {len(pairs)}")
    return 0


# -- saliency analysis ---------------------------------------------------------------


def _saliency_means(trainer: Trainer, samples: list[Sample],
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Mean in-GT saliency per sample under its own query and a rolled one."""
    own, neg = [], []
    n = len(samples)
    with no_grad():
        for i, sample in enumerate(samples):
            rolled = samples[(i + 1) % n]
            o = trainer.model.forward(sample.video_feat.data,
                                      sample.text_feat.data, decode=False)
            r = trainer.model.forward(sample.video_feat.data,
                                      rolled.text_feat.data, decode=False)
            own.append(float(np.mean(o.saliency.data[sample.in_moment])))
            neg.append(float(np.mean(r.saliency.data[sample.in_moment])))
    reset_tape()
    return np.array(own), np.array(neg)


def _write_histogram_csv(path: Path, edges, own_counts, neg_counts) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "positive_count", "negative_count"])
        for i in range(len(own_counts)):
            writer.writerow([f"{edges[i]:.6f}", f"{edges[i + 1]:.6f}",
                             int(own_counts[i]), int(neg_counts[i])])


def _write_histogram_svg(path: Path, edges, own_counts, neg_counts,
                         own_mean: float, neg_mean: float) -> None:
    width, height, pad = 640, 360, 40
    top = max(1, int(max(own_counts.max(), neg_counts.max())))
    lo, hi = float(edges[0]), float(edges[-1])
    span = hi - lo or 1.0

    def x(v):
        return pad + (v - lo) / span * (width - 2 * pad)

    def bar_h(c):
        return c / top * (height - 2 * pad)

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                     width=str(width), height=str(height))
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width), height=str(height),
                  fill="white")
    for counts, color in ((own_counts, "#1b7837"), (neg_counts, "#b2182b")):
        for i, c in enumerate(counts):
            if c == 0:
                continue
            h = bar_h(int(c))
            ET.SubElement(svg, "rect", x=f"{x(edges[i]):.2f}",
                          y=f"{height - pad - h:.2f}",
                          width=f"{max(x(edges[i + 1]) - x(edges[i]) - 1, 1):.2f}",
                          height=f"{h:.2f}", fill=color, opacity="0.5")
    for mean, color, label in ((own_mean, "#1b7837", "positive mean"),
                               (neg_mean, "#b2182b", "negative mean")):
        ET.SubElement(svg, "line", x1=f"{x(mean):.2f}", x2=f"{x(mean):.2f}",
                      y1=str(pad), y2=str(height - pad), stroke=color,
                      attrib={"stroke-width": "2", "stroke-dasharray": "6,3"})
        text = ET.SubElement(svg, "text", x=f"{x(mean) + 4:.2f}", y=str(pad + 12),
                             fill=color, attrib={"font-size": "12"})
        text.text = f"{label} = {mean:.2f}"
    axis = ET.SubElement(svg, "text", x=str(width // 2 - 80), y=str(height - 8),
                         fill="black", attrib={"font-size": "12"})
    axis.text = "mean in-GT saliency per sample"
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)


def cmd_analyze_saliency(args) -> int:
    trainer = _load_trainer(args)
    _, val_samples = _load_splits(args, trainer.cfg, need_train=False)
    own, neg = _saliency_means(trainer, val_samples)
    own_mean, neg_mean = float(own.mean()), float(neg.mean())

    out = args.out_dir if args.out_dir is not None else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    edges = np.histogram_bin_edges(np.concatenate([own, neg]), bins=20)
    own_counts, _ = np.histogram(own, bins=edges)
    neg_counts, _ = np.histogram(neg, bins=edges)
    csv_path = out / "saliency_hist.csv"
    svg_path = out / "saliency_hist.svg"
    _write_histogram_csv(csv_path, edges, own_counts, neg_counts)
    _write_histogram_svg(svg_path, edges, own_counts, neg_counts,
                         own_mean, neg_mean)

    print(f"positive_mean: {own_mean:.4f}")
    print(f"negative_mean: {neg_mean:.4f}")
    print(f"gap: {own_mean - neg_mean:.4f}")
    print(f"histogram_csv: {csv_path}")
    print(f"histogram_svg: {svg_path}")
    return 0


# -- dispatch ------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
               "synth": cmd_synth, "analyze-saliency": cmd_analyze_saliency}
    try:
        return handler[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 4
    except (AnnotationError, FeatureFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
