"""``binet`` command line: train, eval, bench, inspect, export.

Errors are reported on stderr as one JSON object
``{"error": <category>, "message": <text>}`` with a category-specific
exit code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import DatasetError, augment_crop_flip, load_dataset
from .io_utils import atomic_write_bytes, atomic_write_text
from .model import build_model, zoo_spec
from .packed_model import ExportError, PackedFormatError, export_model, from_bytes, to_bytes
from .train import (
    CheckpointError,
    MetricsRecord,
    Trainer,
    TrainSettings,
    activation_entropies,
    evaluate,
    layer_diagnostics,
    load_checkpoint,
    save_checkpoint,
)

EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "config": 3,
    "dataset": 4,
    "format": 5,
    "export": 6,
    "io": 7,
    "invalid": 8,
}

INSPECT_FIELDS = (
    "layer",
    "numel",
    "shift",
    "entropy",
    "p_plus",
    "act_entropy",
    "t",
    "k",
    "t_eps",
    "t_100",
    "updatable_fraction",
    "error_l1",
    "error_l2",
)


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# -- helpers -------------------------------------------------------------------
def _settings(cfg: RunConfig) -> TrainSettings:
    return TrainSettings(
        epochs=cfg.epochs,
        lr0=cfg.lr0,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        augment=cfg.augment,
    )


def _limit(n: int) -> Optional[int]:
    return n if n > 0 else None


def _load_splits(cfg: RunConfig):
    return load_dataset(cfg.dataset, cfg.data_dir or None, cfg.seed, _limit(cfg.train_limit), _limit(cfg.test_limit))


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise CliError("io", f"cannot read {path}: {e.strerror}") from None


def inspect_rows(trainer: Trainer, act_entropy: Optional[dict] = None) -> list[list[str]]:
    net = trainer.net
    diag = layer_diagnostics(net)
    rows = []
    for layer in net.binary_layers():
        d = dict(diag[layer.name])
        d["layer"] = layer.name
        d["numel"] = layer.weight.size
        d["shift"] = layer.weight_scale(layer.weights_std())[1]
        if act_entropy is not None:
            d["act_entropy"] = act_entropy.get(layer.name, float("nan"))
        rows.append([_fmt(d[f]) for f in INSPECT_FIELDS])
    return rows


# -- subcommands ---------------------------------------------------------------
def cmd_train(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "report").mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.snapshot", cfg.to_text())
    train_split, test_split = _load_splits(cfg)
    spec = zoo_spec(cfg.model, train_split.images.shape[1:], train_split.num_classes, cfg.binarizer, cfg.width or None)
    net = build_model(spec, cfg.seed, cfg.estimator_kwargs())
    trainer = Trainer(net, _settings(cfg))
    header: list[str] = []
    csv_rows: list[list[str]] = []
    json_lines: list[str] = []

    def on_epoch(rec: MetricsRecord, tr: Trainer) -> None:
        nonlocal header
        if not header:
            header = rec.csv_header()
        csv_rows.append(rec.csv_row())
        json_lines.append(rec.to_json())
        atomic_write_text(out / "metrics.csv", _csv_text(header, csv_rows))
        atomic_write_text(out / "metrics.jsonl", "\n".join(json_lines) + "\n")
        atomic_write_bytes(out / "checkpoints" / f"epoch_{rec.epoch}.bin", save_checkpoint(tr, {"config": asdict(cfg)}))

    augment = augment_crop_flip if cfg.augment else None
    history = trainer.fit(train_split, test_split, on_epoch, augment)
    last = history[-1]
    atomic_write_text(out / "report" / "layers.csv", _csv_text(INSPECT_FIELDS, inspect_rows(trainer)))
    summary = {
        "epochs": len(history),
        "train_acc": last.train_acc,
        "test_acc": last.test_acc,
        "test_loss": last.test_loss,
        "checkpoint": str(out / "checkpoints" / f"epoch_{last.epoch}.bin"),
    }
    atomic_write_text(out / "report" / "summary.json", json.dumps(_clean(summary), indent=2) + "\n")
    return summary


def _clean(o):
    if isinstance(o, float) and not np.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    return o


def _dataset_for_eval(args, cfg_dict: Optional[dict]):
    base = RunConfig(**cfg_dict) if cfg_dict else RunConfig()
    over = {}
    if args.dataset:
        over["dataset"] = args.dataset
    if args.data_dir:
        over["data_dir"] = args.data_dir
    if args.test_limit is not None:
        over["test_limit"] = args.test_limit
    if args.seed is not None:
        over["seed"] = args.seed
    over["train_limit"] = 1  # evaluation only reads the test split
    cfg = base.with_overrides(over)
    return load_dataset(cfg.dataset, cfg.data_dir or None, cfg.seed, 1, _limit(cfg.test_limit))[1]


def cmd_eval(args) -> dict:
    data = _read_bytes(args.model)
    if data[:4] == b"BNCK":
        trainer, header = load_checkpoint(data)
        split = _dataset_for_eval(args, header.get("extra", {}).get("config"))
        acc, loss = evaluate(trainer.net, split)
        kind = "checkpoint"
    else:
        model = from_bytes(data)
        split = _dataset_for_eval(args, None)
        acc, loss = model.evaluate(split)
        kind = "packed"
    return {"kind": kind, "accuracy": acc, "loss": loss, "n": len(split)}


def cmd_bench(args) -> dict:
    from .bench import Geometry, benchmark

    geoms = [Geometry.parse(g) for g in args.geometry] if args.geometry else [Geometry()]
    results = [benchmark(g, args.reps, args.seed) for g in geoms]
    report = {"results": results}
    if args.out:
        atomic_write_text(args.out, json.dumps(report, indent=2) + "\n")
    return report


def cmd_inspect(args) -> str:
    trainer, header = load_checkpoint(_read_bytes(args.checkpoint))
    acts = None
    if args.dataset:
        cfg_dict = header.get("extra", {}).get("config")
        split = _dataset_for_eval(args, cfg_dict)
        acts = activation_entropies(trainer.net, split.images[: args.samples])
    text = _csv_text(INSPECT_FIELDS, inspect_rows(trainer, acts))
    if args.out:
        atomic_write_text(args.out, text)
    return text


def cmd_export(args) -> dict:
    data = _read_bytes(args.checkpoint)
    trainer, _ = load_checkpoint(data)
    model = export_model(trainer.net)
    blob = to_bytes(model)
    atomic_write_bytes(args.out, blob)
    return {
        "path": str(args.out),
        "bytes": len(blob),
        "checkpoint_bytes": len(data),
        "ratio": len(blob) / len(data),
        "breakdown": model.size_breakdown(),
    }


# -- argument parsing -----------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="binet", description="Binary neural network training and bit-packed inference.")
    p.add_argument("--version", action="version", version=f"binet {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write metrics and checkpoints")
    t.add_argument("--config", help="key=value or JSON config file")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--estimator")
    t.add_argument("--clamp-mode", dest="clamp_mode")
    t.add_argument("--epsilon", type=float)
    t.add_argument("--dataset")
    t.add_argument("--epochs", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")

    e = sub.add_parser("eval", help="accuracy of a checkpoint or packed model on the test split")
    e.add_argument("model")
    e.add_argument("--seed", type=int, help="dataset seed; defaults to the checkpoint's")
    e.add_argument("--dataset")
    e.add_argument("--data-dir", dest="data_dir")
    e.add_argument("--test-limit", dest="test_limit", type=int)

    b = sub.add_parser("bench", help="packed vs naive float convolution timing")
    b.add_argument("--geometry", action="append", help="cin,cout,k,h,w[,stride,padding]")
    b.add_argument("--reps", type=int, default=100)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")

    i = sub.add_parser("inspect", help="per-layer entropy, estimator state and updatable fraction as CSV")
    i.add_argument("checkpoint")
    i.add_argument("--out")
    i.add_argument("--seed", type=int, help="dataset seed; defaults to the checkpoint's")
    i.add_argument("--dataset", help="also measure activation entropy on this dataset's test split")
    i.add_argument("--data-dir", dest="data_dir")
    i.add_argument("--test-limit", dest="test_limit", type=int)
    i.add_argument("--samples", type=int, default=1000)

    x = sub.add_parser("export", help="write the packed deployment model")
    x.add_argument("checkpoint")
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int, default=0)
    return p


def _train_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over: dict = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    for key in ("seed", "out", "estimator", "clamp_mode", "epsilon", "dataset", "epochs"):
        v = getattr(args, key)
        if v is not None:
            over[key] = v
    return cfg.with_overrides(over) if over else cfg


def _classify(exc: BaseException) -> tuple[str, str]:
    if isinstance(exc, CliError):
        return exc.category, str(exc)
    if isinstance(exc, ConfigError):
        return "config", str(exc)
    if isinstance(exc, DatasetError):
        return "dataset", str(exc)
    if isinstance(exc, (CheckpointError, PackedFormatError)):
        return "format", str(exc)
    if isinstance(exc, ExportError):
        return "export", str(exc)
    if isinstance(exc, OSError):
        return "io", str(exc)
    if isinstance(exc, ValueError):
        return "invalid", str(exc)
    return "internal", f"{type(exc).__name__}: {exc}"


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "train":
            result = cmd_train(_train_config(args))
        elif args.command == "eval":
            result = cmd_eval(args)
        elif args.command == "bench":
            result = cmd_bench(args)
        elif args.command == "inspect":
            sys.stdout.write(cmd_inspect(args))
            return 0
        else:
            result = cmd_export(args)
        sys.stdout.write(json.dumps(_clean(result), indent=2) + "\n")
        return 0
    except KeyboardInterrupt:
        raise
    except BaseException as exc:  # noqa: BLE001 - every failure maps to a category
        if isinstance(exc, SystemExit):
            return int(exc.code or 0)
        category, message = _classify(exc)
        sys.stderr.write(json.dumps({"error": category, "message": message}) + "\n")
        return EXIT_CODES[category]


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
