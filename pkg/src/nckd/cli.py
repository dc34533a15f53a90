"""Command-line entry point: ``nckd train-teacher | distill | metrics | verify``.

Exit codes: 0 success, 1 verification or run failure, 2 configuration error,
3 I/O error. Every run directory receives a frozen copy of the resolved
config and a manifest of SHA-256 hashes of the files it wrote.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from .data import Dataset, MixtureSpec, gaussian_mixture, load_csv, save_csv, split, write_manifest
from .errors import ConfigError, ContractError, NckdError, ParseError
from .geometry import CentroidSet, pca_fit
from .losses import LossWeights
from .model import Mlp
from .numcore import Rng
from .trainer import DistillConfig, Teacher, distill, evaluate, extract_teacher_centroids, train_teacher
from . import verify as verify_mod

log = logging.getLogger("nckd")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

VARIANTS = ("plain", "kd-only", "nc1-only", "nc2-only", "full", "full+kd")
PROBE_ROWS = 4

# -- schemas ---------------------------------------------------------------

_NUM = {"type": "number"}
_INT = {"type": "integer"}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lr": {"type": "number", "minimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "ema_momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "head": {"enum": ["linear", "nc3"]},
        "nc3_scale": {"type": "number", "exclusiveMinimum": 0},
        "centroid_source": {"enum": ["student", "teacher"]},
        "distill_layer": _INT,
        "milestones": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 1}},
        "lr_factor": {"type": "number", "exclusiveMinimum": 0},
        "centered_prototypes": {"type": "boolean"},
    },
}

DATA_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"const": "mixture"},
                "k": {"type": "integer", "minimum": 2},
                "d": {"type": "integer", "minimum": 1},
                "n_per_class": {"type": "integer", "minimum": 2},
                "center_separation": {"type": "number", "exclusiveMinimum": 0},
                "within_class_std": {"type": "number", "minimum": 0},
                "placement": {"enum": ["etf", "orthogonal"]},
                "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "train"],
            "properties": {
                "kind": {"const": "csv"},
                "train": {"type": "string"},
                "test": {"type": ["string", "null"]},
                "k": {"type": "integer", "minimum": 2},
            },
        },
    ]
}

WEIGHTS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lambda1": {"type": "number", "minimum": 0},
        "lambda2": {"type": "number", "minimum": 0},
        "alpha": {"type": "number", "minimum": 0},
        "tau_proto": {"type": "number", "exclusiveMinimum": 0},
        "tau_kd": {"type": "number", "exclusiveMinimum": 0},
    },
}

TEACHER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "data": DATA_SCHEMA,
        "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "train": TRAIN_SCHEMA,
    },
}

DISTILL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["teacher"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "teacher": {"type": "string"},
        "data": DATA_SCHEMA,
        "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "weights": WEIGHTS_SCHEMA,
        "train": TRAIN_SCHEMA,
    },
}

TEACHER_DEFAULTS = {
    "seed": 0,
    "data": {"kind": "mixture", "test_fraction": 1 / 3},
    "hidden": [256, 256],
    "train": {},
}
DISTILL_DEFAULTS = {"seed": 0, "hidden": [16], "weights": {}, "train": {}}


class IoFailure(NckdError):
    """Reading or writing a run artifact failed."""


def _validate(doc, schema) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {err.message}")


def _unknown_keys(doc, schema, prefix="") -> list[str]:
    """Keys not declared in a closed schema, reported before any other schema error."""
    found = []
    if not isinstance(doc, dict):
        return found
    props = schema.get("properties")
    if props is None:
        return found
    for key, value in doc.items():
        if key not in props:
            found.append(prefix + key)
        elif isinstance(props[key], dict) and "properties" in props[key]:
            found.extend(_unknown_keys(value, props[key], f"{prefix}{key}."))
    return found


def load_config(path, schema, defaults) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    unknown = _unknown_keys(doc, schema)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    _validate(doc, schema)
    merged = json.loads(json.dumps(defaults))
    for key, value in doc.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != "data":
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


# -- output helpers --------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _write_json(path: Path, doc) -> Path:
    return _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_manifest(out: Path, command: str, files: list[Path]) -> None:
    outputs = {p.name: _sha256(p) for p in sorted(files, key=lambda p: p.name)}
    _write_json(out / "manifest.json", {"command": command, "outputs": outputs})


def _out_dir(args, cfg) -> Path:
    out = args.out or cfg.get("out")
    if not out:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from None
    return out


def _train_config(cfg: dict, weights: LossWeights | None = None) -> DistillConfig:
    opts = dict(cfg["train"])
    if opts.get("milestones") is not None:
        opts["milestones"] = tuple(opts["milestones"])
    try:
        return DistillConfig(weights=weights or LossWeights(), seed=cfg["seed"], **opts)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def _resolve(path: str, base: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


def _load_data(spec: dict, seed: int, base: Path) -> tuple[Dataset, Dataset | None, MixtureSpec | None]:
    if spec["kind"] == "mixture":
        fields = {k: v for k, v in spec.items() if k not in ("kind", "test_fraction")}
        try:
            mix = MixtureSpec(**fields)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
        rng = Rng(seed)
        full = gaussian_mixture(mix, rng.spawn("data"))
        train, test = split(full, spec.get("test_fraction", 1 / 3), rng.spawn("split"))
        return train, test, mix
    train = load_csv(_resolve(spec["train"], base), k=spec.get("k"))
    test = load_csv(_resolve(spec["test"], base), k=train.k) if spec.get("test") else None
    return train, test, None


def _variant_weights(variant: str | None, base: dict) -> LossWeights:
    w = dict(base)
    if variant is None:
        return LossWeights(**w)
    lam1, lam2 = w.get("lambda1", 1.0), w.get("lambda2", 1.0)
    alpha = w.get("alpha", 0.0) or 1.0
    table = {
        "plain": (0.0, 0.0, 0.0),
        "kd-only": (0.0, 0.0, alpha),
        "nc1-only": (lam1, 0.0, 0.0),
        "nc2-only": (0.0, lam2, 0.0),
        "full": (lam1, lam2, 0.0),
        "full+kd": (lam1, lam2, alpha),
    }
    w["lambda1"], w["lambda2"], w["alpha"] = table[variant]
    return LossWeights(**w)


# -- commands --------------------------------------------------------------


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config, TEACHER_SCHEMA, TEACHER_DEFAULTS)
    if args.seed is not None:
        cfg["seed"] = args.seed
    base = Path(args.config).resolve().parent
    out = _out_dir(args, cfg)
    tcfg = _train_config(cfg)
    train, test, mix = _load_data(cfg["data"], cfg["seed"], base)

    model, history = train_teacher(tcfg, train, tuple(cfg["hidden"]), test)
    centroids = extract_teacher_centroids(model, train)

    files = [
        _write_json(out / "config.json", {**cfg, "resolved_train": tcfg.to_dict()}),
        out / "train.csv",
        _write_json(out / "centroids.json", centroids.to_dict()),
        _write_text(out / "train_log.jsonl", history.to_jsonl()),
    ]
    save_csv(train, out / "train.csv")
    if test is not None:
        save_csv(test, out / "test.csv")
        files.append(out / "test.csv")
    write_manifest(out / "dataset_manifest.json", train, seed=cfg["seed"], spec=mix, test_n=None if test is None else test.n)
    files.append(out / "dataset_manifest.json")
    model.meta = {"seed": cfg["seed"], "role": "teacher"}
    model.save(out / "teacher.json", probe=train.X[:PROBE_ROWS])
    files.append(out / "teacher.json")
    if args.timing:
        _write_text(out / "timing.jsonl", history.timing_jsonl())
    _write_manifest(out, "train-teacher", files)
    last = history.final() if history else None
    if last is not None:
        print(f"teacher: train acc {last.acc_train:.4f}" + ("" if last.acc_test is None else f", test acc {last.acc_test:.4f}"))
    print(f"wrote {out}")
    return EXIT_OK


def _load_teacher(tdir: Path) -> tuple[Teacher, Path]:
    ckpt, cents = tdir / "teacher.json", tdir / "centroids.json"
    for p in (ckpt, cents):
        if not p.is_file():
            raise IoFailure(f"missing teacher artifact {p}")
    try:
        model = Mlp.load(ckpt)
        centroids = CentroidSet.from_dict(json.loads(cents.read_text()))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise IoFailure(f"cannot read teacher artifacts in {tdir}: {exc}") from None
    return Teacher(model, centroids), tdir


def cmd_distill(args) -> int:
    cfg = load_config(args.config, DISTILL_SCHEMA, DISTILL_DEFAULTS)
    if args.seed is not None:
        cfg["seed"] = args.seed
    base = Path(args.config).resolve().parent
    teacher, tdir = _load_teacher(_resolve(cfg["teacher"], base))
    out = _out_dir(args, cfg)
    try:
        weights = _variant_weights(args.variant, cfg["weights"])
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    dcfg = _train_config(cfg, weights)
    if "data" in cfg:
        train, test, _ = _load_data(cfg["data"], cfg["seed"], base)
    else:
        # default: the split the teacher was trained on
        test_csv = tdir / "test.csv"
        train = load_csv(tdir / "train.csv", k=teacher.model.n_classes)
        test = load_csv(test_csv, k=teacher.model.n_classes) if test_csv.is_file() else None

    student, history = distill(teacher, dcfg, train, tuple(cfg["hidden"]), test)
    final = evaluate(student, test if test is not None else train)
    report = {
        "split": "test" if test is not None else "train",
        "accuracy": final.accuracy,
        "variant": args.variant,
        "nc": None if final.report is None else final.report.to_dict(),
    }
    resolved = {**cfg, "variant": args.variant, "resolved_train": dcfg.to_dict()}
    files = [
        _write_json(out / "config.json", resolved),
        _write_text(out / "train_log.jsonl", history.to_jsonl()),
        _write_json(out / "nc_report.json", report),
    ]
    student.meta = {"seed": cfg["seed"], "role": "student", "variant": args.variant}
    student.save(out / "student.json", probe=train.X[:PROBE_ROWS])
    files.append(out / "student.json")
    if args.timing:
        _write_text(out / "timing.jsonl", history.timing_jsonl())
    _write_manifest(out, "distill", files)
    print(f"student ({args.variant or 'config weights'}): {report['split']} acc {final.accuracy:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    if args.pca and not args.out:
        raise ConfigError("--pca needs --out")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise IoFailure(f"missing checkpoint {ckpt}")
    try:
        model = Mlp.load(ckpt)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise IoFailure(f"cannot read checkpoint {ckpt}: {exc}") from None
    data = load_csv(args.data, k=model.n_classes)
    if data.d != model.widths[0]:
        raise ConfigError(f"dataset has {data.d} features, checkpoint expects {model.widths[0]}")
    result = evaluate(model, data)
    doc = {"accuracy": result.accuracy, "n": data.n, "nc": None if result.report is None else result.report.to_dict()}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        files = [_write_text(out / "nc_report.json", text)]
        if args.pca:
            feats = model.forward(data.X).penultimate
            coords = pca_fit(feats, 2).transform(feats) if feats.shape[1] >= 2 else np.column_stack([feats, np.zeros(data.n)])
            with open(out / "pca.csv", "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["label", "pc1", "pc2"])
                for label, (a, b) in zip(data.y, coords):
                    writer.writerow([int(label), format(a, ".17g"), format(b, ".17g")])
            files.append(out / "pca.csv")
        _write_manifest(out, "metrics", files)
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = verify_mod.run(args.suite, seed=args.seed or 0)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    if failed:
        print(f"{len(failed)} of {len(checks)} checks failed: " + ", ".join(c.name for c in failed))
        return EXIT_FAIL
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nckd", description="Neural-Collapse-guided knowledge distillation for MLPs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train the teacher and export checkpoint, centroids and data split")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--timing", action="store_true", help="also write per-epoch wall-clock to timing.jsonl")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a student from a trained teacher")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--timing", action="store_true")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("metrics", help="NC report (and optional PCA CSV) of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="CSV with a label column")
    p.add_argument("--out")
    p.add_argument("--pca", action="store_true", help="write a 2-D PCA projection of penultimate features")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("verify", help="run self-check suites")
    p.add_argument("--suite", choices=("etf", "grad", "ufm", "all"), default="all")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_verify)
    return parser


def _threads() -> int:
    raw = os.environ.get("NCKD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"NCKD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"NCKD_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IoFailure, ParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NckdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
