"""Command-line entry point: dataset synthesis, training, evaluation and the
wide-precision gradient-check suite.

Every subcommand accepts --config FILE with line-based key=value settings
('#' starts a comment); explicit flags win over config values. Unknown keys
are rejected. Each run echoes its fully resolved settings to stderr.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import tensor as T
from .jpegdomain import FormatError, read_dataset, write_dataset
from .model import ABLATIONS
from .trainer import (
    TrainConfig, evaluate_model, init_params, load_checkpoint, model_gradient_check,
    rows_to_csv, save_checkpoint, synthesize_pairs, train,
)
from .util import atomic_write_bytes, substream

GRADCHECK_SCOPES = ("all", "preprocess", "sfe", "gal", "backbone")
GRADCHECK_TOLERANCE = 1e-3


class UsageError(ValueError):
    pass


def _parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key=value")
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    return values


def _resolve(args: argparse.Namespace, spec: dict[str, tuple]) -> dict:
    """Merge flags over config-file values over defaults.

    `spec` maps option keys (flag spelling, dashes) to (type, default,
    required). Flags were parsed with default=None so explicit use is
    detectable.
    """
    config = _parse_config_file(args.config) if args.config else {}
    unknown = set(config) - set(spec)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key, (typ, default, required) in spec.items():
        flag_val = getattr(args, key.replace("-", "_"))
        if flag_val is not None:
            resolved[key] = flag_val
        elif key in config:
            try:
                resolved[key] = typ(config[key])
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from exc
        elif required:
            raise UsageError(f"missing required option --{key}")
        else:
            resolved[key] = default
    return resolved


def _echo(command: str, resolved: dict) -> None:
    parts = " ".join(f"{k}={resolved[k]}" for k in sorted(resolved))
    print(f"[stegograph] {command} {parts}", file=sys.stderr)


def _epochs(text: str) -> tuple[int, int]:
    try:
        e1, e2 = (int(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"--epochs expects 'E1,E2', got {text!r}") from None
    return e1, e2


def _ablation(text: str) -> str:
    if text not in ABLATIONS:
        raise UsageError(f"--ablation must be one of {', '.join(ABLATIONS)}")
    return text


# ---------------------------------------------------------------------------
# subcommands

def _cmd_synth(args) -> int:
    spec = {
        "out": (str, None, True),
        "pairs": (int, None, True),
        "rate": (float, None, True),
        "qf": (int, 75, False),
        "size": (int, 64, False),
        "seed": (int, 0, False),
    }
    opts = _resolve(args, spec)
    _echo("synth", opts)
    pairs = synthesize_pairs(opts["pairs"], opts["size"], opts["rate"],
                             opts["qf"], opts["seed"])
    write_dataset(opts["out"], pairs)
    print(f"wrote {opts['pairs']} pairs to {opts['out']}")
    return 0


def _cmd_train(args) -> int:
    spec = {
        "data": (str, None, True),
        "val": (str, None, True),
        "out": (str, None, True),
        "log": (str, None, True),
        "init-from": (str, None, False),
        "ablation": (_ablation, "full", False),
        "epochs": (_epochs, (8, 2), False),
        "batch-pairs": (int, 16, False),
        "seed": (int, 0, False),
        "precision": (str, "standard", False),
        "tlu-threshold": (float, 3.0, False),
    }
    opts = _resolve(args, spec)
    _echo("train", opts)
    e1, e2 = opts["epochs"]
    cfg = TrainConfig(batch_pairs=opts["batch-pairs"], phase1_epochs=e1,
                      phase2_epochs=e2, seed=opts["seed"],
                      precision=opts["precision"], ablation=opts["ablation"],
                      init_from=opts["init-from"],
                      tlu_threshold=opts["tlu-threshold"])
    train_pairs = read_dataset(opts["data"])
    val_pairs = read_dataset(opts["val"])

    def progress(row):
        print(f"epoch {row.epoch} phase {row.phase} lr {row.lr:g} "
              f"train_loss {row.train_loss:.4f} train_acc {row.train_acc:.4f} "
              f"val_acc {row.val_acc:.4f} val_pe {row.val_pe:.4f}", file=sys.stderr)

    result = train(cfg, train_pairs, val_pairs, progress=progress)
    save_checkpoint(result.best_state, opts["out"])
    atomic_write_bytes(opts["log"], rows_to_csv(result.rows).encode("utf-8"))
    best = result.rows[result.best_epoch - 1]
    print(f"best_epoch={result.best_epoch} val_acc={best.val_acc:.4f} "
          f"val_pe={best.val_pe:.4f} checkpoint={opts['out']} log={opts['log']}")
    return 0


def _infer_ablation(state: dict) -> str:
    has_sfe = any(n.startswith("sfe1.") for n in state)
    has_gal = any(n.startswith("gal.") for n in state)
    if has_sfe and has_gal:
        return "full"
    if has_gal:
        return "no_sfe"
    if has_sfe:
        return "no_gal"
    return "neither"


def _cmd_eval(args) -> int:
    spec = {
        "data": (str, None, True),
        "ckpt": (str, None, True),
        "tlu-threshold": (float, 3.0, False),
    }
    opts = _resolve(args, spec)
    _echo("eval", opts)
    pairs = read_dataset(opts["data"])
    state = load_checkpoint(opts["ckpt"])
    h, w = pairs[0].cover.h, pairs[0].cover.w
    model = init_params(substream(0, "init"), h, w,
                        ablation=_infer_ablation(state),
                        tlu_threshold=opts["tlu-threshold"])
    model.apply_state(state)
    report = evaluate_model(model, pairs)
    print(f"P_E={report.p_e:.4f} P_FA={report.p_fa:.4f} "
          f"P_MD={report.p_md:.4f} ACC={report.accuracy:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    spec = {
        "scope": (str, "all", False),
        "seed": (int, 0, False),
    }
    opts = _resolve(args, spec)
    if opts["scope"] not in GRADCHECK_SCOPES:
        raise UsageError(f"--scope must be one of {', '.join(GRADCHECK_SCOPES)}")
    _echo("gradcheck", opts)
    errors = model_gradient_check(ablation="full", seed=opts["seed"])
    prefixes = {"preprocess": ("preprocess.",), "sfe": ("sfe1.", "sfe2."),
                "gal": ("gal.",), "backbone": ("backbone.",)}
    if opts["scope"] != "all":
        errors = {n: e for n, e in errors.items()
                  if n.startswith(prefixes[opts["scope"]])}
    worst = 0.0
    for name in sorted(errors):
        print(f"{name} max_rel_err={errors[name]:.3e}")
        worst = max(worst, errors[name])
    ok = worst < GRADCHECK_TOLERANCE
    print(f"worst={worst:.3e} tolerance={GRADCHECK_TOLERANCE:g} "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# dispatch

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stegograph",
        description="synthetic JPEG-domain steganalysis: synthesize data, "
                    "train, evaluate, gradient-check")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic SGDS cover/stego dataset")
    p.add_argument("--out")
    p.add_argument("--pairs", type=int)
    p.add_argument("--rate", type=float)
    p.add_argument("--qf", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")

    p = sub.add_parser("train", help="train a detector on SGDS datasets")
    p.add_argument("--data")
    p.add_argument("--val")
    p.add_argument("--out")
    p.add_argument("--log")
    p.add_argument("--init-from")
    p.add_argument("--ablation", type=_ablation)
    p.add_argument("--epochs", type=_epochs)
    p.add_argument("--batch-pairs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("standard", "wide"))
    p.add_argument("--tlu-threshold", type=float)
    p.add_argument("--config")

    p = sub.add_parser("eval", help="evaluate a checkpoint on an SGDS dataset")
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--tlu-threshold", type=float)
    p.add_argument("--config")

    p = sub.add_parser("gradcheck", help="wide-precision finite-difference suite")
    p.add_argument("--scope")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    return parser


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 1
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
