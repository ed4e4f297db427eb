"""Command-line entry point: ``multires-fer <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .augment import dump_augment_pairs
from .dataset import (
    EXPRESSIONS,
    build_index,
    class_statistics,
    counts_csv,
    counts_table,
    index_from_images,
    load_sample,
    stratified_subsample,
)
from .engine import TrainConfig, evaluate_confusion, load_config, predict, resolve_workers, select_model, train
from .metrics import ConfusionMatrix, MetricsReport, build_report
from .model import load_checkpoint, read_metadata
from .synthetic import generate_synthetic

log = logging.getLogger("multires_fer")

TABLE1_FIXTURE = "table1_counts.json"


def _data_dirs(args):
    ann = Path(args.annotations) if args.annotations else Path(args.data) / "annotations"
    img = Path(args.images) if args.images else (Path(args.data) / "images" if args.data else None)
    return ann, img


def load_counts_fixture(path=None) -> dict:
    if path is None:
        text = resources.files("multires_fer").joinpath("fixtures", TABLE1_FIXTURE).read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def cmd_stats(args) -> int:
    if args.counts or args.table1:
        fixture = load_counts_fixture(None if args.table1 else args.counts)
        rows = [(split, class_statistics(fixture[split])) for split in (args.split or fixture)]
    else:
        if not (args.annotations or args.data):
            raise ValueError("stats needs --data, --annotations, --counts or --table1")
        ann, img = _data_dirs(args)
        rows = [(split, class_statistics(build_index(ann, img, split))) for split in (args.split or ["train", "validation"])]
    sys.stdout.write(counts_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.txt").write_text(counts_table(rows))
        (out / "stats.csv").write_text(counts_csv(rows))
    if args.csv:
        sys.stdout.write(counts_csv(rows))
    return 0


def _split_indexes(ann, img, config: TrainConfig):
    train_index = build_index(ann, img, "train")
    validation = build_index(ann, img, "validation")
    selection = stratified_subsample(validation, config.selection_fraction, config.seed)
    return train_index, validation, selection


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size"),
                      ("seed", "seed"), ("depth", "model.depth"), ("weights", "model.pretrained_weights_path")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    config = load_config(args.config, overrides)
    ann, img = _data_dirs(args)
    train_index, _, selection = _split_indexes(ann, img, config)
    out = Path(args.out)
    if args.dump_augment:
        images = [load_sample(train_index, i)[0] for i in range(min(args.dump_augment, len(train_index)))]
        dump_augment_pairs(images, config.augment, out / "augment_audit", config.seed)
    checkpoints = train(config, train_index, selection, out,
                        extra_metadata={"data": {"annotations": str(ann), "images": str(img)}})
    best = select_model(checkpoints)
    (out / "best_checkpoint.txt").write_text(f"{best.path.name}\n")
    print(f"trained {config.epochs} epochs; best {best.path.name} "
          f"(selection challenge score {best.metrics.challenge_score:.4f})")
    return 0


def _best_or_given(path: Path) -> Path:
    marker = path / "best_checkpoint.txt"
    if marker.is_file():
        return path / marker.read_text().strip()
    return path


def write_report(report: MetricsReport, out_dir, cm: ConfusionMatrix = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "per_class_f1.txt").write_text(report.per_class_table())
    (out / "summary.txt").write_text(report.summary_table())
    if cm is not None:
        (out / "confusion.csv").write_text(
            "\n".join(",".join(str(int(v)) for v in row) for row in cm.counts) + "\n"
        )


def run_eval(model, index, augment, out_dir, batch_size=64, shards=1, workers=0) -> MetricsReport:
    cm = evaluate_confusion(model, index, augment, batch_size, shards, workers)
    report = build_report(cm)
    write_report(report, out_dir, cm)
    return report


def cmd_eval(args) -> int:
    ckpt = _best_or_given(Path(args.checkpoint))
    model, meta = load_checkpoint(ckpt, force=args.force)
    config = TrainConfig.from_dict(meta["config"])
    if args.data or args.annotations:
        ann, img = _data_dirs(args)
    else:
        ann, img = Path(meta["data"]["annotations"]), Path(meta["data"]["images"])
    index = build_index(ann, img, args.split)
    if args.split == "validation" and not (args.include_selection or config.include_selection_in_report):
        index = index.without(stratified_subsample(index, config.selection_fraction, config.seed))
    report = run_eval(model, index, config.augment, args.out, config.batch_size, args.shards,
                      resolve_workers(config.workers))
    sys.stdout.write(report.per_class_table() + "\n" + report.summary_table())
    return 0


def cmd_predict(args) -> int:
    ckpt = _best_or_given(Path(args.checkpoint))
    model, meta = load_checkpoint(ckpt, force=args.force)
    config = TrainConfig.from_dict(meta["config"])
    if args.frames:
        index = index_from_images(args.frames, args.split)
    else:
        ann, img = _data_dirs(args)
        index = build_index(ann, img, args.split)
    out = predict(model, index, config.augment, args.out, config.batch_size, resolve_workers(config.workers))
    print(f"predictions written to {out}")
    return 0


def cmd_report(args) -> int:
    source = Path(args.input)
    if source.is_dir():
        report = MetricsReport.from_dict(read_metadata(_best_or_given(source))["metrics"])
    elif source.suffix == ".csv":
        counts = np.loadtxt(source, delimiter=",", dtype=np.int64, ndmin=2)
        report = build_report(ConfusionMatrix(counts))
    else:
        data = json.loads(source.read_text())
        if "confusion" in data:
            report = build_report(ConfusionMatrix(np.asarray(data["confusion"], dtype=np.int64)))
        else:
            report = MetricsReport.from_dict(data)
    sys.stdout.write(report.per_class_table() + "\n" + report.summary_table())
    if args.json:
        sys.stdout.write(report.to_json())
    if args.out:
        write_report(report, args.out)
    return 0


def cmd_gen_synthetic(args) -> int:
    out = generate_synthetic(args.out, args.per_class, args.seed if args.seed is not None else 0)
    print(f"synthetic dataset ({args.per_class} per class per split, {len(EXPRESSIONS)} classes) in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multires-fer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="TOML run config")
        p.add_argument("--out", required=out_required, default=None)

    def data_args(p):
        p.add_argument("--data", help="dataset root holding annotations/ and images/")
        p.add_argument("--annotations", help="annotation root (contains <split>/<video>.txt)")
        p.add_argument("--images", help="image root (contains <video>/<frame>.jpg)")

    p = sub.add_parser("stats", help="class cardinality table")
    common(p)
    data_args(p)
    p.add_argument("--split", action="append")
    p.add_argument("--counts", help="JSON file {split: [7 counts]}")
    p.add_argument("--table1", action="store_true", help="use the bundled Table 1 counts")
    p.add_argument("--csv", action="store_true", help="also print CSV to stdout")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train and checkpoint")
    common(p, out_required=True)
    data_args(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--depth", choices=["resnet50", "resnet-small"])
    p.add_argument("--weights", help="pretrained weight directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    p.add_argument("--dump-augment", type=int, default=0, metavar="N",
                   help="write N before/after augmentation pairs to <out>/augment_audit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, out_required=True)
    data_args(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint dir or training run dir")
    p.add_argument("--split", default="validation")
    p.add_argument("--include-selection", action="store_true")
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--force", action="store_true", help="load despite a config digest mismatch")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write per-frame predictions")
    common(p, out_required=True)
    data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", help="image root to predict without annotations")
    p.add_argument("--split", default="test")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="print Table 2/3 style metrics")
    common(p)
    p.add_argument("input", help="report.json, confusion .csv/.json, or checkpoint dir")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-synthetic", help="write a synthetic 7-class dataset")
    common(p, out_required=True)
    p.add_argument("--per-class", type=int, default=64)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
