"""Command-line front end: ``pneumocnn train|evaluate|diagnose|metrics|synth``.

Exit codes: 0 success, 2 usage or data error, 3 corrupt checkpoint, 4 I/O
failure on output. Errors go to stderr as ``<category>: <message>``.

A run config is a flat ``key = value`` file (``#`` comments). Flags override
file values; ``--set key=value`` overrides any key without a dedicated flag.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import data, metrics, ontology
from .errors import ConfigError, DataError, OutputError, PneumoError, UsageError
from .model import ModelConfig, build_model, load_checkpoint, predict_proba, save_checkpoint
from .tensor import PCG32
from .train import TrainConfig, predict_batch, train

INIT_STREAM = 3

# key -> parser; TrainConfig and AugmentConfig fields are added below
_KEYS = {
    "manifest": str,
    "ontology": str,
    "checkpoint": str,
    "out": str,
    "threshold": float,
    "image_size": int,
    "augment": None,  # bool, parsed by _parse_bool
    "train_ratio": float,
    "val_ratio": float,
    "test_ratio": float,
    "target": str,
}
for _f in fields(TrainConfig) + fields(data.AugmentConfig):
    _KEYS[_f.name] = int if _f.type == "int" else float

_DEFAULTS = {
    "out": "out",
    "image_size": data.IMAGE_SIZE,
    "augment": True,
    "train_ratio": 0.8,
    "val_ratio": 0.1,
    "test_ratio": 0.1,
    "target": "Pneumonia",
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(key: str, text: str, where: str):
    if key not in _KEYS:
        raise ConfigError(f"{where}unknown key {key!r}")
    conv = _KEYS[key] or _parse_bool
    try:
        return conv(text.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}bad value for {key}: {text.strip()!r}") from exc


def parse_run_config(text: str) -> dict:
    """Parse ``key = value`` lines; unknown keys and malformed lines are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        out[key.strip()] = _convert(key.strip(), value, f"line {lineno}: ")
    return out


def _read_text(path, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {what} {path}: {getattr(exc, 'strerror', None) or exc}") from exc


def resolve_config(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(_DEFAULTS)
    if args.config:
        cfg.update(parse_run_config(_read_text(args.config, "config file")))
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        cfg[key.strip()] = _convert(key.strip(), value, "--set: ")
    for key in ("seed", "threshold", "out", "manifest", "ontology", "checkpoint"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    keys = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg.items() if k in keys}).validate()


def _augment_config(cfg: dict) -> data.AugmentConfig:
    keys = {f.name for f in fields(data.AugmentConfig)}
    return data.AugmentConfig(**{k: v for k, v in cfg.items() if k in keys}).validate()


def _require(cfg: dict, key: str, what: str) -> Path:
    if not cfg.get(key):
        raise UsageError(f"no {what} given (--{key} or '{key}' in the config file)")
    path = Path(cfg[key])
    if not path.is_file():
        category = DataError if key in ("manifest", "ontology") else UsageError
        raise category(f"{what} {path} does not exist")
    return path


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _write(path: Path, payload) -> None:
    try:
        if isinstance(payload, bytes):
            path.write_bytes(payload)
        else:
            path.write_text(payload)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from exc


def _guard_output(fn, *args):
    try:
        return fn(*args)
    except OSError as exc:
        if isinstance(exc, OutputError):
            raise
        raise OutputError(f"cannot write output: {exc.strerror or exc}") from exc


def _absolute(manifest: data.Manifest) -> str:
    """Manifest text with every image path resolved, so it can live anywhere."""
    recs = [replace(r, image_path=str(manifest.resolve(r).resolve())) for r in manifest]
    return data.dump_manifest(recs)


def _load_ontology(cfg: dict) -> ontology.Ontology:
    if cfg.get("ontology"):
        return ontology.parse_ontology(_read_text(_require(cfg, "ontology", "ontology"), "ontology"))
    return ontology.load_default_ontology()


def _load_model(cfg: dict):
    path = _require(cfg, "checkpoint", "checkpoint")
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc


# --- commands ----------------------------------------------------------------

def cmd_train(cfg: dict, stdout) -> int:
    manifest_path = _require(cfg, "manifest", "manifest")
    tcfg = _train_config(cfg)
    aug = _augment_config(cfg) if cfg["augment"] else None
    size = cfg["image_size"]
    ratios = (cfg["train_ratio"], cfg["val_ratio"], cfg["test_ratio"])
    manifest = data.read_manifest(manifest_path)
    train_m, val_m, test_m = data.split_dataset(manifest, ratios, tcfg.seed)
    model_cfg = ModelConfig(height=size, width=size)
    model = build_model(model_cfg, PCG32(tcfg.seed, INIT_STREAM))
    train_set = data.load_images(train_m, size)
    val_set = data.load_images(val_m, size)
    out = _out_dir(cfg)

    def report(log):
        print(f"epoch {log.epoch} train_loss {log.train_loss:.6f} train_acc {log.train_accuracy:.4f} "
              f"val_loss {log.val_loss:.6f} val_acc {log.val_accuracy:.4f} lr {log.learning_rate:.6g}",
              file=stdout, flush=True)

    model, logs = train(model, train_set, val_set, tcfg, aug, report)
    for name, subset in (("train", train_m), ("val", val_m), ("test", test_m)):
        _write(out / f"{name}_manifest.txt", _absolute(subset))
    _guard_output(save_checkpoint, model, out / "model.ckpt")
    _guard_output(metrics.write_history_csv, logs, out / "history.csv")
    _write(out / "curves.svg", metrics.render_svg(logs))
    print(f"wrote {out / 'model.ckpt'} after {len(logs)} epochs", file=stdout)
    return 0


def _print_report(report: metrics.MetricsReport, stdout, auc=None):
    cm = report.confusion
    for key in ("tn", "fp", "fn", "tp"):
        print(f"{key} {getattr(cm, key)}", file=stdout)
    for key in ("accuracy", "precision", "recall", "f1"):
        print(f"{key} {getattr(report, key):.4f}", file=stdout)
    if auc is not None:
        print(f"auc {auc:.4f}", file=stdout)
    for flag in sorted(report.degenerate):
        print(f"degenerate {flag}", file=stdout)


def _roc_or_warn(pairs, stderr):
    try:
        return metrics.roc_auc(pairs)
    except DataError as exc:
        print(f"warning: ROC skipped: {exc}", file=stderr)
        return None


def cmd_evaluate(cfg: dict, stdout, stderr) -> int:
    manifest_path = _require(cfg, "manifest", "test manifest")
    model = _load_model(cfg)
    manifest = data.read_manifest(manifest_path)
    if len(manifest) == 0:
        raise DataError(f"test manifest {manifest_path} has no records")
    threshold = cfg.get("threshold", 0.5)
    images, labels = data.load_images(manifest, model.config.height)
    probs = predict_batch(model, images)
    pairs = list(zip(probs.tolist(), labels.tolist()))
    report = metrics.compute_metrics(metrics.confusion_from_predictions(pairs, threshold))
    roc = _roc_or_warn(pairs, stderr)
    out = _out_dir(cfg)
    _guard_output(metrics.write_metrics_csv, report, out / "metrics.csv", roc, threshold)
    if roc is not None:
        _guard_output(metrics.write_roc_csv, roc, out / "roc.csv")
    _print_report(report, stdout, roc.auc if roc else None)
    return 0


def _meta_pairs(items) -> tuple:
    pairs = []
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--meta expects key=value, got {item!r}")
        pairs.append((key.strip(), value.strip()))
    return tuple(pairs)


def cmd_diagnose(cfg: dict, args, stdout) -> int:
    if not args.image:
        raise UsageError("diagnose needs --image")
    onto = _load_ontology(cfg)
    model = _load_model(cfg)
    image = data.preprocess(data.read_image(args.image), model.config.height)
    p = predict_proba(model, image)
    record = data.SampleRecord(str(args.image), 0, args.age, _meta_pairs(args.meta))
    dx = ontology.diagnose_case(p, record, onto, cfg["target"], cfg.get("threshold", ontology.DEFAULT_THRESHOLD))
    print(f"p_cnn {p:.4f}", file=stdout)
    print(f"findings {' '.join(sorted(dx.asserted)) or '-'}", file=stdout)
    print(f"inferred {' '.join(sorted(dx.inferred)) or '-'}", file=stdout)
    print(f"trace {' '.join(dx.trace) or '-'}", file=stdout)
    print(f"verdict {dx.verdict}", file=stdout)
    return 0


def read_predictions(text: str) -> list:
    """Parse ``p,label`` lines; a first line that is not numeric is taken as a header."""
    pairs = []
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    for n, row in enumerate(rows):
        if len(row) != 2:
            raise DataError(f"row {n + 1}: expected 'p,label', got {','.join(row)!r}")
        try:
            p, label = float(row[0]), row[1].strip()
        except ValueError:
            if n == 0:
                continue
            raise DataError(f"row {n + 1}: probability {row[0]!r} is not a number") from None
        if label not in ("0", "1"):
            raise DataError(f"row {n + 1}: label must be 0 or 1, got {label!r}")
        if not (0.0 <= p <= 1.0):
            raise DataError(f"row {n + 1}: probability {p} outside [0, 1]")
        pairs.append((p, int(label)))
    if not pairs:
        raise DataError("predictions file has no rows")
    return pairs


def cmd_metrics(cfg: dict, args, stdout, stderr) -> int:
    pairs = read_predictions(_read_text(args.predictions, "predictions file"))
    threshold = cfg.get("threshold", 0.5)
    report = metrics.compute_metrics(metrics.confusion_from_predictions(pairs, threshold))
    roc = _roc_or_warn(pairs, stderr)
    _print_report(report, stdout, roc.auc if roc else None)
    return 0


def cmd_synth(cfg: dict, args, stdout) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    out = _out_dir(cfg)
    try:
        manifest, _ = data.synth_dataset(args.n, cfg.get("seed", 0), out)
    except OSError as exc:
        raise OutputError(f"cannot write synthetic data to {out}: {exc.strerror}") from exc
    print(f"wrote {len(manifest)} images and {out / 'manifest.txt'}", file=stdout)
    return 0


# --- argument parsing --------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"usage: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file of 'key = value' lines")
    common.add_argument("--seed", type=int, help="seed for splitting, init, shuffling and synthesis")
    common.add_argument("--threshold", type=float,
                        help="decision threshold (evaluate/metrics default 0.5, diagnose 0.7)")
    common.add_argument("--out", help="output directory (default ./out)")
    common.add_argument("--manifest", help="image manifest: path,label[,age[,key=value;...]]")
    common.add_argument("--ontology", help="ontology file (default: built-in pneumonia ontology)")
    common.add_argument("--checkpoint", help="model checkpoint file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key; repeatable")

    parser = _Parser(prog="pneumocnn", description="Chest X-ray pneumonia CNN with ontology fusion.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="split a manifest, train, write checkpoint and curves")
    sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a test manifest")
    p = sub.add_parser("diagnose", parents=[common], help="fuse the CNN probability with ontology reasoning")
    p.add_argument("--image", help="PGM/PPM image to diagnose")
    p.add_argument("--meta", action="append", metavar="KEY=VALUE", help="clinical field, e.g. fever=yes; repeatable")
    p.add_argument("--age", type=int, help="patient age in months")
    p = sub.add_parser("metrics", parents=[common], help="metrics from a p,label predictions CSV")
    p.add_argument("predictions", help="CSV file of p,label rows (header optional)")
    p = sub.add_parser("synth", parents=[common], help="write a synthetic two-class image set")
    p.add_argument("--n", type=int, default=8, help="images per class (default 8)")
    return parser


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg, stdout)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, stdout, stderr)
        if args.command == "diagnose":
            return cmd_diagnose(cfg, args, stdout)
        if args.command == "metrics":
            return cmd_metrics(cfg, args, stdout, stderr)
        return cmd_synth(cfg, args, stdout)
    except PneumoError as exc:
        print(f"{exc.category}: {exc}", file=stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        # config values that pass parsing but fail a constructor check
        print(f"config: {exc}", file=stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
