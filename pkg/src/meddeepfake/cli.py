"""Command-line entry point wiring every stage of the pipeline.

Subcommands: train, build-bank, bank-insert, detect, evaluate, ablate,
gen-toy.  Configuration layers as defaults <- INI file <- flags.  Exit
codes: 0 success, 1 internal error, 2 usage or input error.

``--single-thread`` must pin the BLAS thread pools before numpy loads,
so this module inspects ``sys.argv`` and sets the environment first; the
package ``__init__`` is import-light for the same reason.
"""

from __future__ import annotations

import os
import sys

_THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _apply_single_thread_env() -> None:
    if "--single-thread" in sys.argv:
        for var in _THREAD_ENV_VARS:
            os.environ[var] = "1"


_apply_single_thread_env()

import argparse          # noqa: E402
import json              # noqa: E402
import logging           # noqa: E402
import time              # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__                                    # noqa: E402
from .ablation import run_ablation                           # noqa: E402
from .adapters import LAMBDA_STREAMS, STREAM_MODES           # noqa: E402
from .config import RunConfig, load_run_config, resolve_backbone  # noqa: E402
from .detector import Detector                               # noqa: E402
from .errors import MedDeepfakeError                         # noqa: E402
from .manifest import LABEL_VALUES, load_manifest, resolve_image_path  # noqa: E402
from .metrics import GROUP_FIELDS, evaluate                  # noqa: E402
from .retrieval import build_bank, insert_samples, load_bank, save_bank  # noqa: E402
from .toydata import ARTIFACT_FAMILIES, generate_toy_corpus  # noqa: E402
from .training import train                                  # noqa: E402

log = logging.getLogger(__name__)

BANK_FILENAME = "bank.mfrm"


def _write_run_info(out_dir: Path, command: str, cfg: RunConfig) -> None:
    """Reproducibility bundle: resolved config, seed, version, argv."""
    out_dir.mkdir(parents=True, exist_ok=True)
    info = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out_dir / "run-info.json").write_text(json.dumps(info, indent=2) + "\n",
                                           encoding="utf-8")


def _config_from_args(args) -> RunConfig:
    overrides = {
        "backbone": getattr(args, "backbone", None),
        "seed": getattr(args, "seed", None),
        "alpha": getattr(args, "alpha", None),
        "beta": getattr(args, "beta", None),
        "shots_per_class": getattr(args, "shots", None),
        "streams": getattr(args, "streams", None),
        "lambda_on": getattr(args, "lambda_on", None),
        "out_dir": getattr(args, "out", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr": getattr(args, "lr", None),
        "momentum": getattr(args, "momentum", None),
        "weight_decay": getattr(args, "weight_decay", None),
        "val_fraction": getattr(args, "val_fraction", None),
        "prompt_real": getattr(args, "prompt_real", None),
        "prompt_fake": getattr(args, "prompt_fake", None),
    }
    return load_run_config(getattr(args, "config", None), overrides)


def _out_dir(args, cfg: RunConfig, command: str) -> Path:
    if getattr(args, "out", None) is not None:
        return Path(args.out)
    return cfg.out_dir / command


def _detector(cfg: RunConfig, checkpoint: str | None,
              bank_path: str | None) -> Detector:
    if checkpoint is not None:
        detector = Detector.from_checkpoint(checkpoint)
    else:
        detector = Detector.zero_shot(resolve_backbone(cfg),
                                      prompts=cfg.train.prompts)
    if bank_path is not None:
        detector = detector.with_bank(load_bank(bank_path))
    return detector


def _parse_label(raw: str) -> int:
    token = raw.strip().lower()
    if token in LABEL_VALUES:
        return LABEL_VALUES[token]
    if token in ("0", "1"):
        return int(token)
    raise MedDeepfakeError(f"label must be real/fake/0/1, got {raw!r}")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_toy(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(args, cfg, "toy")
    manifest = generate_toy_corpus(
        n_per_class=args.n_per_class, seed=cfg.seed, out_dir=out,
        family=args.family, image_size=args.image_size, amplitude=args.amplitude,
        train_fraction=args.train_fraction)
    _write_run_info(out, "gen-toy", cfg)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    backbone = resolve_backbone(cfg)
    out = _out_dir(args, cfg, "train")
    _write_run_info(out, "train", cfg)
    result = train(args.data, backbone, cfg.train, out_dir=out,
                   resume_from=args.resume, streams=cfg.streams,
                   lambda_on=cfg.lambda_on)
    last = result.epoch_logs[-1] if result.epoch_logs else None
    if last is not None:
        print(f"trained {cfg.train.epochs} epochs: loss {last['loss']:.6f} "
              f"acc {last['acc']:.4f} val {last['val_loss']:.6f}")
    print(f"best checkpoint: {result.best_checkpoint}")
    print(f"last checkpoint: {result.last_checkpoint}")
    print(f"log: {result.log_path}")
    return 0


def cmd_build_bank(args) -> int:
    cfg = _config_from_args(args)
    detector = _detector(cfg, args.checkpoint, None)
    bank = build_bank(args.data, detector, n_per_class=cfg.shots_per_class,
                      seed=cfg.seed, alpha=cfg.alpha, beta=cfg.beta)
    out = _out_dir(args, cfg, "bank")
    out.mkdir(parents=True, exist_ok=True)
    bank_path = out / BANK_FILENAME
    save_bank(bank, bank_path)
    _write_run_info(out, "build-bank", cfg)
    n_real, n_fake = bank.class_counts()
    print(f"bank: {bank.n_rows} rows ({n_real} real / {n_fake} fake) -> {bank_path}")
    return 0


def cmd_bank_insert(args) -> int:
    if len(args.image) != len(args.label):
        raise MedDeepfakeError(f"{len(args.image)} --image flags but "
                               f"{len(args.label)} --label flags")
    cfg = _config_from_args(args)
    detector = _detector(cfg, args.checkpoint, None)
    bank = load_bank(args.bank)
    new_records = []
    if args.data is not None:
        manifest = Path(args.data)
        for rec in load_manifest(manifest):
            new_records.append((resolve_image_path(rec, manifest), rec.label))
    for image, label in zip(args.image, args.label):
        new_records.append((Path(image), _parse_label(label)))
    if not new_records:
        raise MedDeepfakeError("nothing to insert: pass --data or --image/--label")
    updated = insert_samples(bank, new_records, detector)
    out = _out_dir(args, cfg, "bank-insert")
    out.mkdir(parents=True, exist_ok=True)
    bank_path = out / BANK_FILENAME
    save_bank(updated, bank_path)
    _write_run_info(out, "bank-insert", cfg)
    print(f"bank: {bank.n_rows} -> {updated.n_rows} rows -> {bank_path}")
    return 0


def cmd_detect(args) -> int:
    cfg = _config_from_args(args)
    detector = _detector(cfg, args.checkpoint, args.bank)
    records = []
    for raw in args.images:
        path = Path(raw)
        try:
            res = detector.detect_one(path)
            record = {"path": str(path), "fake_probability": res.fake_probability,
                      "label": res.predicted_name, "used_bank": res.used_bank}
        except MedDeepfakeError as exc:
            record = {"path": str(path), "error": str(exc)}
        records.append(record)
        print(json.dumps(record))
    if args.out is not None:
        out = Path(args.out)
        _write_run_info(out, "detect", cfg)
        with open(out / "verdicts.jsonl", "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record) + "\n")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    detector = _detector(cfg, args.checkpoint, args.bank)
    outcome = evaluate(args.data, detector, group_by=args.group_by)
    table = outcome.render_table()
    print(table, end="")
    if outcome.skipped:
        print(f"skipped {outcome.skipped} unreadable image(s)")
    out = _out_dir(args, cfg, "evaluate")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(table, encoding="utf-8")
    (out / "report.json").write_text(outcome.to_json() + "\n", encoding="utf-8")
    _write_run_info(out, "evaluate", cfg)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    backbone = resolve_backbone(cfg)
    out = _out_dir(args, cfg, "ablate")
    _write_run_info(out, "ablate", cfg)
    report = run_ablation(args.data, backbone, cfg.train, out_dir=out,
                          n_per_class=cfg.shots_per_class, alpha=cfg.alpha,
                          beta=cfg.beta, bank_seed=cfg.seed,
                          reuse_checkpoints=args.reuse,
                          train_in_place=not args.no_train)
    print(report.render_tables(), end="")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file (flags override it)")
    p.add_argument("--backbone", help="'tiny' or a backbone checkpoint path")
    p.add_argument("--seed", type=int, help="root seed for all randomness")
    p.add_argument("--out", help="output directory for artifacts")
    p.add_argument("--single-thread", action="store_true",
                   help="pin BLAS pools to one thread (deterministic mode)")
    p.add_argument("--verbose", "-v", action="store_true",
                   help="debug-level logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meddeepfake",
        description="Detector for AI-generated medical images: adapter-tuned "
                    "vision-language backbone with a few-shot retrieval bank.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate the procedural toy corpus")
    _add_common(p)
    p.add_argument("--n-per-class", type=int, default=24)
    p.add_argument("--family", choices=ARTIFACT_FAMILIES, default="checker")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--amplitude", type=float, default=0.10)
    p.add_argument("--train-fraction", type=float, default=2 / 3)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train", help="fine-tune adapters on a manifest")
    _add_common(p)
    p.add_argument("--data", required=True, help="JSONL dataset manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--val-fraction", type=float, dest="val_fraction")
    p.add_argument("--prompt-real", dest="prompt_real")
    p.add_argument("--prompt-fake", dest="prompt_fake")
    p.add_argument("--streams", choices=STREAM_MODES)
    p.add_argument("--lambda-on", choices=LAMBDA_STREAMS, dest="lambda_on")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-bank", help="build the retrieval bank")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="trained checkpoint (omit for zero-shot)")
    p.add_argument("--shots", type=int, help="samples per class (default 16)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("bank-insert", help="insert labeled samples into a bank")
    _add_common(p)
    p.add_argument("--bank", required=True, help="existing bank file")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="manifest of samples to insert")
    p.add_argument("--image", action="append", default=[],
                   help="single image to insert (repeatable)")
    p.add_argument("--label", action="append", default=[],
                   help="label for each --image (real/fake/0/1)")
    p.set_defaults(func=cmd_bank_insert)

    p = sub.add_parser("detect", help="classify images")
    _add_common(p)
    p.add_argument("images", nargs="+", help="image files to score")
    p.add_argument("--checkpoint")
    p.add_argument("--bank", help="retrieval bank file")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score a manifest's test split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--bank")
    p.add_argument("--group-by", choices=GROUP_FIELDS, default="modality",
                   dest="group_by")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="component and stream ablation tables")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--shots", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--reuse", action="store_true",
                   help="reuse per-variant checkpoints if present")
    p.add_argument("--no-train", action="store_true",
                   help="never train; mark rows without checkpoints unavailable")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MedDeepfakeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:                                        # noqa: BLE001
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
