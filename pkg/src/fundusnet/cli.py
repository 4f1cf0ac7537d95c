"""Command-line entry point: ``fundusnet prepare|train|evaluate|compare``.

Exit codes: 0 success, 2 input or configuration error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as dt
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import plots
from .dataset import (DEFAULT_RATIOS, class_distribution, read_manifest, scan_dataset,
                      stratified_split, write_manifest, write_skip_list)
from .errors import ConfigError, DatasetError, DivergenceError, FundusNetError
from .evaluation import (MODEL_LABELS, ConfusionMatrix, build_report, confusion,
                         predict_labels, render_report, render_table)
from .models import FreezePolicy, build_baseline_cnn, build_transfer_model
from .training import ImageCache, TrainConfig, evaluate_partition, load_run, save_run, train
from .weights import fetch_pretrained

logger = logging.getLogger("fundusnet")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3


@dataclass
class RunConfig:
    data_root: Path | None = None
    manifest: Path | None = None
    ratios: tuple[float, float, float] = DEFAULT_RATIOS  # (train, test, val)
    split_seed: int = 0
    backbone_id: str = "efficientnet_b0"
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: Path = Path("runs")

    def validate(self):
        if self.manifest is not None and self.manifest.exists():
            return self
        if self.data_root is None:
            raise ConfigError("either [data] root or an existing [data] manifest is required")
        if not self.data_root.is_dir():
            raise DatasetError(f"dataset root does not exist: {self.data_root}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1, got {self.ratios}")
        return self


def _opt(section, key, cast, default=None):
    raw = section.get(key, fallback="").strip() if section is not None else ""
    return cast(raw) if raw else default


def load_run_config(path: str | Path | None, **overrides) -> RunConfig:
    """Read an INI-style config; keyword overrides win over file values."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser.read(path)
        base = path.parent

    def section(name):
        return parser[name] if parser.has_section(name) else None

    def resolve(p):
        p = Path(p).expanduser()
        return p if p.is_absolute() else base / p

    data, split, model, tr, out = (section(s) for s in ("data", "split", "model", "train", "output"))
    ratios = (
        _opt(split, "train", float, DEFAULT_RATIOS[0]),
        _opt(split, "test", float, DEFAULT_RATIOS[1]),
        _opt(split, "val", float, DEFAULT_RATIOS[2]),
    )
    mode = _opt(model, "freeze_mode", str, "fine_tune")
    tail = _opt(model, "trainable_tail", int, 1)
    values = dict(
        epochs=_opt(tr, "epochs", int, 10),
        batch_size=_opt(tr, "batch_size", int, 16),
        learning_rate=_opt(tr, "learning_rate", float),
        seed=_opt(tr, "seed", int, 0),
        model_kind=_opt(model, "kind", str, "baseline"),
        early_stop_patience=_opt(tr, "early_stop_patience", int),
        input_side=_opt(model, "input_side", int, 224),
        workers=_opt(tr, "workers", int, 0),
    )
    cfg = RunConfig(
        data_root=_opt(data, "root", resolve),
        manifest=_opt(data, "manifest", resolve),
        ratios=ratios,
        split_seed=_opt(split, "seed", int, 0),
        backbone_id=_opt(model, "backbone", str, "efficientnet_b0"),
        output_dir=_opt(out, "dir", resolve, Path("runs")),
    )

    for key in ("data_root", "manifest", "output_dir"):
        if overrides.get(key) is not None:
            setattr(cfg, key, Path(overrides[key]))
    if overrides.get("kind") is not None:
        values["model_kind"] = overrides["kind"]
    for key in ("epochs", "seed"):
        if overrides.get(key) is not None:
            values[key] = overrides[key]
    policy = FreezePolicy(mode, tail if mode == "fine_tune" else 0)
    cfg.train = TrainConfig(freeze_policy=policy, **values)
    return cfg.validate()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise ConfigError(f"--ratios needs three comma-separated values (train,test,val), got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad --ratios value {text!r}") from exc


# --- commands ---------------------------------------------------------------

def cmd_prepare(data: str | Path, out: str | Path, seed: int = 0,
                ratios=DEFAULT_RATIOS) -> Path:
    """Scan, split and write ``manifest.json``, ``distribution.csv/png`` and ``skipped.txt``."""
    out = Path(out)
    index = scan_dataset(data)
    split = stratified_split(index, ratios, seed)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_manifest(out / "manifest.json", index, split)
    report = class_distribution(index)
    (out / "distribution.csv").write_text(report.to_csv())
    plots.plot_distribution(report, out / "distribution.png")
    write_skip_list(out / "skipped.txt", index)
    sizes = split.sizes()
    print(f"{len(index)} images in {index.num_classes} classes; "
          f"train {sizes['train']}, val {sizes['val']}, test {sizes['test']}")
    for name, count, pct in zip(report.class_names, report.counts, report.percentages):
        print(f"  {name:<24} {count:>6}  {pct:6.2f}%")
    print(f"manifest: {manifest}")
    return manifest


def _new_run_dir(root: Path, kind: str, seed: int) -> Path:
    stamp = dt.datetime.now().strftime("%Y%m%dT%H%M%S")
    run_dir = root / f"{kind}-{seed}-{stamp}"
    n = 1
    while run_dir.exists():
        run_dir = root / f"{kind}-{seed}-{stamp}-{n}"
        n += 1
    run_dir.mkdir(parents=True)
    return run_dir


def build_model(cfg: RunConfig, num_classes: int):
    tc = cfg.train
    if tc.model_kind == "baseline":
        return build_baseline_cnn(tc.input_side, num_classes, seed=tc.seed)
    bundle = fetch_pretrained(cfg.backbone_id)
    return build_transfer_model(bundle, num_classes, tc.freeze_policy, tc.input_side, seed=tc.seed)


def cmd_train(cfg: RunConfig) -> Path:
    """Train one model; returns the run directory."""
    if cfg.manifest is not None and cfg.manifest.exists():
        manifest = cfg.manifest
    else:
        manifest = cmd_prepare(cfg.data_root, cfg.output_dir, cfg.split_seed, cfg.ratios)
    index, split = read_manifest(manifest)

    tc = cfg.train
    model = build_model(cfg, index.num_classes)
    run_dir = _new_run_dir(cfg.output_dir, tc.model_kind, tc.seed)
    result = train(model, split, index, tc)
    save_run(result, run_dir, tc, extra={
        "manifest": str(manifest.resolve()),
        "manifest_sha256": _sha256(manifest),
        "split_seed": split.seed,
        "class_names": list(index.class_names),
        "backbone_id": cfg.backbone_id if tc.model_kind == "transfer" else None,
    })
    title = f"Training accuracy and loss ({MODEL_LABELS[tc.model_kind]})"
    plots.plot_history(result.history, run_dir / "curves.png", title)
    best = result.checkpoint
    print(f"run: {run_dir}")
    print(f"best epoch {best.epoch}, selection metric {best.metric}")
    return run_dir


def cmd_evaluate(run: str | Path, manifest: str | Path, partition: str = "test",
                 batch_size: int = 32) -> Path:
    """Score the run's selected checkpoint on one manifest partition."""
    run = Path(run)
    manifest = Path(manifest)
    result, tc, meta = load_run(run)
    index, split = read_manifest(manifest)
    if tuple(meta["class_names"]) != index.class_names:
        raise ConfigError(
            f"checkpoint classes {meta['class_names']} do not match manifest classes "
            f"{list(index.class_names)}")
    indices = list(split.partition(partition))
    if not indices:
        raise DatasetError(f"{partition} partition of {manifest} is empty")

    model = result.checkpoint.model()
    images = ImageCache(index, tc.input_side, tc.workers)
    _, _, probs = evaluate_partition(model, images, indices, batch_size)
    y_pred = predict_labels(probs)
    y_true = index.labels[indices]
    cm = confusion(y_true, y_pred, index.num_classes, index.class_names)
    label = MODEL_LABELS[tc.model_kind]
    report = build_report(cm, index.class_names, label)

    out = run / f"eval-{partition}"
    out.mkdir(exist_ok=True)
    (out / "report.txt").write_text(render_report(report))
    (out / "report.csv").write_text(report.to_csv())
    (out / "confusion.csv").write_text(cm.to_csv())
    plots.plot_confusion(cm, out / "confusion.png", f"Confusion matrix ({label})")
    (out / "eval.json").write_text(json.dumps({
        "partition": partition,
        "manifest_sha256": _sha256(manifest),
        "split_seed": split.seed,
        "class_names": list(index.class_names),
        "model_kind": tc.model_kind,
        "model_label": label,
        "accuracy": report.accuracy,
        "confusion": cm.counts.tolist(),
    }, indent=2) + "\n")
    print(render_report(report), end="")
    return out


def _load_eval(run: Path, partition: str) -> dict:
    path = run / f"eval-{partition}" / "eval.json"
    if not path.exists():
        raise ConfigError(f"{run} has no {partition} evaluation; run `fundusnet evaluate` first")
    return json.loads(path.read_text())


def verdict(label_a: str, acc_a: float, label_b: str, acc_b: float) -> str:
    delta = 100.0 * (acc_a - acc_b)
    if delta == 0:
        return f"Accuracies are equal: {label_a} {100 * acc_a:.1f}% vs {label_b} {100 * acc_b:.1f}% (delta 0.0 points)"
    hi, lo = ((label_a, acc_a), (label_b, acc_b)) if delta > 0 else ((label_b, acc_b), (label_a, acc_a))
    return (f"{hi[0]} accuracy is higher by {abs(delta):.1f} points "
            f"({100 * hi[1]:.1f}% vs {100 * lo[1]:.1f}% for {lo[0]})")


def cmd_compare(run_a: str | Path, run_b: str | Path, partition: str = "test",
                out: str | Path | None = None) -> str:
    """Two-block comparison table plus a one-line accuracy verdict."""
    run_a, run_b = Path(run_a), Path(run_b)
    ea, eb = _load_eval(run_a, partition), _load_eval(run_b, partition)
    if ea["manifest_sha256"] != eb["manifest_sha256"]:
        if ea["split_seed"] != eb["split_seed"]:
            why = f"the runs use different split seeds ({ea['split_seed']} vs {eb['split_seed']})"
        else:
            why = "the runs were evaluated on different split manifests"
        raise ConfigError(f"refusing to compare: {why}, so their {partition} sets differ")
    if ea["class_names"] != eb["class_names"]:
        raise ConfigError("refusing to compare: class lists differ")

    label_a, label_b = ea["model_label"], eb["model_label"]
    if label_a == label_b:
        label_a, label_b = f"{label_a} ({run_a.name})", f"{label_b} ({run_b.name})"
    reports = [
        build_report(ConfusionMatrix(e["confusion"], tuple(e["class_names"])), e["class_names"], label)
        for e, label in ((ea, label_a), (eb, label_b))
    ]
    text = render_table(reports) + verdict(label_a, reports[0].accuracy,
                                           label_b, reports[1].accuracy) + "\n"
    if out is not None:
        Path(out).write_text(text)
    print(text, end="")
    return text


# --- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fundusnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="scan a corpus and write the split manifest")
    p.add_argument("--data", required=True, help="folder-per-class image root")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default="0.7,0.2,0.1", help="train,test,val fractions")

    p = sub.add_parser("train", help="train the baseline or transfer model")
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--kind", choices=("baseline", "transfer"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="override [data] root")
    p.add_argument("--manifest", help="override [data] manifest")
    p.add_argument("--out", help="override [output] dir")

    p = sub.add_parser("evaluate", help="score a run on a manifest partition")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--partition", default="test", choices=("train", "val", "test"))
    p.add_argument("--batch-size", type=int, default=32)

    p = sub.add_parser("compare", help="side-by-side report for two evaluated runs")
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--partition", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="also write the comparison to this file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "prepare":
            cmd_prepare(args.data, args.out, args.seed, parse_ratios(args.ratios))
        elif args.command == "train":
            cfg = load_run_config(args.config, kind=args.kind, epochs=args.epochs, seed=args.seed,
                                  data_root=args.data, manifest=args.manifest,
                                  output_dir=args.out)
            cmd_train(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(args.run, args.manifest, args.partition, args.batch_size)
        elif args.command == "compare":
            cmd_compare(args.run_a, args.run_b, args.partition, args.out)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FundusNetError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
