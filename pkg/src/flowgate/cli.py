"""Command-line entry point: ``flowgate {synth,train,score,eval,sample}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys

import numpy as np
import scipy

from . import __version__
from . import model as M
from .data import (
    DATA_ROOT_ENV,
    SynthCounts,
    SynthSpec,
    augment_rotations,
    is_abnormal,
    load_dataset,
    parse_shape,
    quantize,
    read_manifest,
    write_synth_dataset,
)
from .errors import DataError, DimensionError, FlowgateError
from .evaluation import evaluate
from .fileio import save_image
from .presets import PRESETS, get_preset
from .scoring import DualScorer, read_scores, write_scores
from .trainer import TrainConfig, train, write_history

log = logging.getLogger("flowgate")


class UsageError(FlowgateError):
    exit_code = 2


def _prepare_out(path: str, force: bool) -> None:
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
    os.makedirs(path, exist_ok=True)


def _write_run_json(args, out: str, extra: dict | None = None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    record = {
        "subcommand": args.command,
        "config": cfg,
        "seed": getattr(args, "seed", None),
        "versions": {
            "flowgate": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "data_root_env": os.environ.get(DATA_ROOT_ENV),
    }
    if extra:
        record.update(extra)
    with open(os.path.join(out, "run.json"), "w") as f:
        json.dump(record, f, indent=2, sort_keys=True, default=str)


# subcommands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    _prepare_out(args.out, args.force)
    preset = get_preset(args.preset)
    shape = parse_shape(args.shape) if args.shape else preset.shape
    spec = SynthSpec(
        shape=shape,
        n_bits=args.nbits or preset.n_bits,
        confound=args.confound,
        seed=args.seed,
        **({"confound_noise": args.confound_noise} if args.confound_noise is not None else {}),
        **({"lesion_contrast": tuple(args.lesion_contrast)} if args.lesion_contrast else {}),
    )
    counts = SynthCounts(
        normal_train=args.n_normal_train,
        mixture_normal=args.n_mixture_normal,
        mixture_abnormal=args.n_mixture_abnormal,
        test_normal=args.n_test_normal,
        test_abnormal=args.n_test_abnormal,
    )
    _write_run_json(args, args.out, {"synth_spec": spec.to_dict()})
    path = write_synth_dataset(args.out, spec, counts)
    log.info("wrote %s", path)
    return 0


def _resolve_arch(args, dataset_bits: int | None):
    preset = get_preset(args.preset)
    n_bits = args.nbits or dataset_bits or preset.n_bits
    if dataset_bits is not None and args.nbits and args.nbits != dataset_bits:
        raise DataError(f"--nbits {args.nbits} conflicts with manifest n_bits={dataset_bits}")
    return preset.override(
        levels=args.levels,
        depth=args.depth,
        width=args.width,
        n_bits=n_bits,
        batch_size=args.batch,
        lr=args.lr,
        warmup_steps=args.warmup,
    )


def cmd_train(args) -> int:
    _prepare_out(args.out, args.force)
    dataset = load_dataset(read_manifest(args.manifest))
    split = "normal_train" if args.which == "m0" else "mixture_train"
    data = dataset.splits[split]
    if args.which == "m0":
        bad = [i for i, lab in zip(data.ids, data.labels) if is_abnormal(lab)]
        if bad:
            raise DataError(f"m0 refuses abnormal-labeled entry {bad[0]!r}")
    if len(data.ids) == 0:
        raise DataError(f"split {split} is empty")
    arch = _resolve_arch(args, dataset.n_bits)
    epochs = args.epochs if args.epochs is not None else arch.epochs(args.which)
    cfg = TrainConfig(
        epochs=epochs, batch_size=arch.batch_size, lr=arch.lr, warmup_steps=arch.warmup_steps, seed=args.seed
    )
    _write_run_json(args, args.out, {"architecture": arch.to_dict(), "train_config": vars(cfg), "split": split})
    images = data.images
    if args.augment:
        images = np.stack([v for vol in images for v in augment_rotations(vol)])
    model = M.build_glow(
        dataset.shape, arch.levels, arch.depth, arch.width, arch.kernel_size, arch.n_bits, seed=args.seed
    )
    log.info("training %s on %d images (%d parameters)", args.which, len(images), model.num_parameters())
    result = train(model, images, cfg)
    write_history(os.path.join(args.out, "history.csv"), result.history)
    M.save(result.model, os.path.join(args.out, "model.fgck"))
    if result.aborted:
        log.error("training aborted: %s (best checkpoint kept)", result.reason)
        return 4
    log.info("best epoch %d, val bits/dim %.4f", result.best_epoch, result.best_val_bpd)
    return 0


SAME_POPULATION = (
    "mixture_train and test are assumed to be drawn from the same population; "
    "this is not verified"
)


def cmd_score(args) -> int:
    _prepare_out(args.out, args.force)
    _write_run_json(args, args.out, {"assumptions": [SAME_POPULATION]})
    m0 = M.load(args.m0)
    m1 = M.load(args.m1)
    try:
        scorer = DualScorer(m0, m1)
    except DimensionError as exc:
        raise DataError(f"incompatible checkpoints: {exc}") from exc
    dataset = load_dataset(read_manifest(args.manifest))
    test = dataset.splits["test"]
    if dataset.n_bits is not None and dataset.n_bits != scorer.n_bits:
        raise DataError(f"manifest n_bits={dataset.n_bits} but checkpoints use {scorer.n_bits}")
    threads = args.threads or os.cpu_count() or 1
    records = scorer.score(test.images, ids=test.ids, labels=test.labels, threads=threads)
    write_scores(os.path.join(args.out, "scores.csv"), records)
    log.info("scored %d test images", len(records))
    return 0


def cmd_eval(args) -> int:
    _prepare_out(args.out, args.force)
    _write_run_json(args, args.out)
    try:
        records = read_scores(args.scores)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read scores {args.scores}: {exc}") from exc
    summary = evaluate(records, args.out, bins=args.bins)
    log.info("AUC posterior %.4f likelihood %.4f", summary["posterior"]["overall"]["auc"],
             summary["likelihood"]["overall"]["auc"])
    return 0


def cmd_sample(args) -> int:
    _prepare_out(args.out, args.force)
    _write_run_json(args, args.out)
    model = M.load(args.checkpoint)
    x = model.sample(args.n, seed=args.seed, temperature=args.temperature)
    images = quantize(x, model.n_bits)
    ext = ".pgm" if len(model.input_shape) == 3 else ".fgt1"
    for i, img in enumerate(images):
        save_image(os.path.join(args.out, f"sample_{i:04d}{ext}"), img, model.n_bits)
    return 0


# parser -----------------------------------------------------------------------


def _add_arch_flags(p) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk2d")
    p.add_argument("--levels", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--nbits", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowgate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"flowgate {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate a synthetic dataset and manifest")
    common(p)
    _add_arch_flags(p)
    p.add_argument("--shape", help="image shape, e.g. 16x16x1 or 8x16x16x1")
    p.add_argument("--confound", action="store_true", help="background-confounded variant")
    p.add_argument("--confound-noise", type=int, help="texture-noise drop for confounded abnormal images")
    p.add_argument("--lesion-contrast", type=float, nargs=2, metavar=("LO", "HI"),
                   help="lesion contrast range as a fraction of full scale")
    p.add_argument("--n-normal-train", type=int, default=250)
    p.add_argument("--n-mixture-normal", type=int, default=500)
    p.add_argument("--n-mixture-abnormal", type=int, default=500)
    p.add_argument("--n-test-normal", type=int, default=100)
    p.add_argument("--n-test-abnormal", type=int, default=100)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train m0 (normal_train) or m1 (mixture_train)")
    p.add_argument("which", choices=("m0", "m1"))
    p.add_argument("--manifest", required=True)
    common(p)
    _add_arch_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--augment", action="store_true", help="add +/-2 degree rotations of 3-D volumes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score the test split with two checkpoints")
    p.add_argument("--m0", required=True)
    p.add_argument("--m1", required=True)
    p.add_argument("--manifest", required=True)
    common(p, seed=False)
    p.add_argument("--threads", type=int, default=0, help="worker threads (default: all cores)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="ROC/AUC/Youden, histograms and zero-pixel scatter")
    p.add_argument("--scores", required=True)
    common(p, seed=False)
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    common(p)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--temperature", type=float, default=0.7)
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except FlowgateError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (KeyError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
