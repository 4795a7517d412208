"""Command line entry point: synth, validate, train, score, eval, ablate.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    FeatureSet,
    SyntheticConfig,
    load_manifest,
    load_split,
    write_synthetic_dataset,
    write_tensor_file,
)
from .evaluation import loss_grid, run_ablation, score_results, structure_grid, topk_grid, Variant
from .exceptions import (
    CheckpointError,
    DimensionError,
    EmptyExpertError,
    ManifestError,
    TensorFileError,
)
from .pipeline import InferenceFlags, TrainConfig, infer_images, train_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
DATA_ERRORS = (ManifestError, TensorFileError, DimensionError, CheckpointError,
               EmptyExpertError, FileNotFoundError)

log = logging.getLogger("adapted_moe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class _EpochFormatter(logging.Formatter):
    def __init__(self, as_json: bool):
        super().__init__()
        self.as_json = as_json

    def format(self, record):
        payload = getattr(record, "record", None)
        if self.as_json:
            body = payload if payload is not None else {"message": record.getMessage()}
            return json.dumps({"level": record.levelname.lower(), **body}, sort_keys=True)
        if payload is not None:
            return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                            for k, v in payload.items())
        return record.getMessage()


def _setup_logging(as_json: bool):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_EpochFormatter(as_json))
    root = logging.getLogger("adapted_moe")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False


# ---------------------------------------------------------------------------
# effective configuration
# ---------------------------------------------------------------------------

def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path}: expected a JSON object")
    return raw


_TRAIN_FLAGS = {  # argparse dest -> TrainConfig field
    "topk": "top_k", "alpha": "alpha", "sigma": "noise_std", "epochs": "epochs",
    "batch": "batch_size", "seed": "seed", "loss": "loss",
}


_SECTION_FIELDS = {
    "train": set(TrainConfig.__dataclass_fields__),
    "synthetic": set(SyntheticConfig.__dataclass_fields__),
}


def _parse_override(item: str):
    key, sep, text = item.partition("=")
    section, dot, field = key.partition(".")
    if not sep or not dot or not field:
        raise UsageError(f"--set {item}: expected SECTION.FIELD=VALUE")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text  # bare strings need no quoting
    return section, field, value


def effective_config(args) -> dict:
    """File values overlaid with command-line flags (flags win)."""
    raw = _load_config_file(getattr(args, "config", None))
    train = dict(raw.get("train", {}))
    synthetic = dict(raw.get("synthetic", {}))
    paths = dict(raw.get("paths", {}))
    sections = {"train": train, "synthetic": synthetic, "paths": paths}
    for item in getattr(args, "set", None) or []:
        section, field, value = _parse_override(item)
        if section not in sections:
            raise UsageError(f"--set {item}: section must be train, synthetic or paths")
        known = _SECTION_FIELDS.get(section)
        if known is not None and field not in known:
            raise UsageError(f"--set {item}: unknown {section} field {field!r}")
        sections[section][field] = value
    for dest, name in _TRAIN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            train[name] = value
    for flag in ("moe", "tta", "norm"):
        if getattr(args, f"no_{flag}", False):
            train[flag] = False
    if getattr(args, "seed", None) is not None:
        synthetic["seed"] = args.seed
    for key in ("manifest", "checkpoint", "scores"):
        value = getattr(args, key, None)
        if value is not None:
            paths[key] = value
    try:
        train_cfg = TrainConfig.from_dict(train)
        synth_cfg = SyntheticConfig.from_dict(synthetic)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return {"train": train_cfg.to_dict(), "synthetic": synth_cfg.to_dict(), "paths": paths}


def _require(cfg: dict, key: str) -> str:
    value = cfg["paths"].get(key)
    if not value:
        raise UsageError(f"--{key} is required (or set paths.{key} in --config)")
    return value


def _echo_config(out: Path, cfg: dict, command: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n"
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    out = Path(args.out)
    path = write_synthetic_dataset(SyntheticConfig.from_dict(cfg["synthetic"]), out)
    _echo_config(out, cfg, "synth")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_validate(args, cfg) -> int:
    manifest = load_manifest(_require(cfg, "manifest"))
    train = load_split(manifest, "train")
    test = load_split(manifest, "test") if manifest.split("test") else None
    report = {
        "counts": manifest.counts(),
        "channels": int(train.X.shape[1]),
        "grid": list(train.X.shape[2:]),
        "image_size": list(manifest.image_size) if manifest.image_size else None,
        "subclasses": np.bincount(train.subclass_labels).tolist(),
        "test_anomalous": int(test.anomaly_labels.sum()) if test is not None else 0,
    }
    if test is not None and test.X.shape[1:] != train.X.shape[1:]:
        raise DimensionError(
            f"channels/grid: test features {test.X.shape[1:]} differ from train {train.X.shape[1:]}"
        )
    print(json.dumps(report, sort_keys=True))
    if args.out:
        out = Path(args.out)
        _echo_config(out, cfg, "validate")
        (out / "validation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    manifest = load_manifest(_require(cfg, "manifest"))
    train = load_split(manifest, "train")
    bundle = train_model(train.X, train.subclass_labels, TrainConfig.from_dict(cfg["train"]),
                         manifest.image_size)
    out = Path(args.out)
    _echo_config(out, cfg, "train")
    save_checkpoint(out / "model.amoe", bundle)
    print(f"wrote {out / 'model.amoe'} ({bundle.n_experts} experts)")
    return EXIT_OK


def _inference_flags(cfg, bundle) -> InferenceFlags:
    t = cfg["train"]
    return InferenceFlags(tta=t["tta"], top_k=t["top_k"], smooth_sigma=bundle.config.smooth_sigma)


def cmd_score(args, cfg) -> int:
    manifest = load_manifest(_require(cfg, "manifest"))
    bundle = load_checkpoint(_require(cfg, "checkpoint"))
    test = load_split(manifest, "test")
    results = infer_images(test.X, bundle, _inference_flags(cfg, bundle))
    out = Path(args.out)
    _echo_config(out, cfg, "score")
    (out / "maps").mkdir(parents=True, exist_ok=True)
    scores = {}
    for sid, res in zip(test.ids, results):
        write_tensor_file(out / "maps" / f"{sid}.amoe", res.anomaly_map.astype(np.float32))
        scores[sid] = {
            "score": res.score,
            "experts": res.experts.tolist(),
            "weights": res.weights.tolist(),
            "map": f"maps/{sid}.amoe",
        }
    (out / "scores.json").write_text(json.dumps(scores, indent=2, sort_keys=True) + "\n")
    print(f"scored {len(scores)} test samples into {out}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from .data import read_tensor_file

    manifest = load_manifest(_require(cfg, "manifest"))
    scores_dir = Path(_require(cfg, "scores"))
    scored = json.loads((scores_dir / "scores.json").read_text())
    test = load_split(manifest, "test")
    missing = [sid for sid in test.ids if sid not in scored]
    if missing:
        raise ManifestError(f"scores missing for {len(missing)} test samples, e.g. {missing[0]}")
    scores = [scored[sid]["score"] for sid in test.ids]
    maps = [read_tensor_file(scores_dir / scored[sid]["map"]) for sid in test.ids]
    metrics = score_results(scores, maps, test, per_image=args.per_image)
    out = Path(args.out)
    _echo_config(out, cfg, "eval")
    (out / "eval.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
    print(f"I-AUROC {fmt(metrics['i_auroc'])}  P-AUROC {fmt(metrics['p_auroc'])}")
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    manifest = load_manifest(_require(cfg, "manifest"))
    train = load_split(manifest, "train")
    test = load_split(manifest, "test")
    base = TrainConfig.from_dict(cfg["train"])
    if args.grid == "structure":
        variants = structure_grid(base.top_k, base.loss)
    elif args.grid == "topk":
        variants = topk_grid(int(train.subclass_labels.max()) + 1, base.loss)
    elif args.grid == "loss":
        variants = loss_grid(base.top_k)
    elif args.grid == "none":
        variants = []
    else:
        variants = [Variant(**v) for v in json.loads(Path(args.grid).read_text())]
    report = run_ablation(train, test, base, variants, manifest.image_size,
                          replicates=args.replicates, per_image=args.per_image)
    out = Path(args.out)
    _echo_config(out, cfg, "ablate")
    report.write(out)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p, out_required=True):
    p.add_argument("--config", help="JSON file with train/synthetic/paths sections")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--log-json", action="store_true", help="JSONL logs on stderr")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                   help="override any config field, e.g. train.lr_start=0.001 (repeatable)")


def _add_train_flags(p):
    p.add_argument("--no-moe", action="store_true")
    p.add_argument("--no-tta", action="store_true")
    p.add_argument("--no-norm", action="store_true")
    p.add_argument("--topk", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--sigma", type=float, help="std of the noise added to expert training features")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--loss", choices=("center", "softmax"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adapted-moe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _add_common(p)

    p = sub.add_parser("validate", help="check a manifest and its files")
    _add_common(p, out_required=False)
    p.add_argument("--manifest")

    p = sub.add_parser("train", help="train a model bundle")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--manifest")

    p = sub.add_parser("score", help="score the test split with a checkpoint")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")

    p = sub.add_parser("eval", help="AUROCs from score outputs")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--scores", help="directory written by 'score'")
    p.add_argument("--per-image", action="store_true", help="average pixel AUROC per image")

    p = sub.add_parser("ablate", help="train and evaluate a variant grid")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--grid", default="structure",
                   help="structure, topk, loss, none, or a JSON file listing variants")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--per-image", action="store_true")
    return parser


COMMANDS = {
    "synth": cmd_synth, "validate": cmd_validate, "train": cmd_train,
    "score": cmd_score, "eval": cmd_eval, "ablate": cmd_ablate,
}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        _setup_logging(args.log_json)
        cfg = effective_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"adapted-moe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"adapted-moe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"adapted-moe: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
