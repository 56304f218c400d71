"""``edgexc`` command line: train, params, summary, compare, preprocess-preview.

Exit codes: 0 success, 2 usage, 3 data/IO, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import arch, data, train, zoo
from .errors import ArchError, DataError, NonFiniteLossError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODELS = ("xception", "optimized")
log = logging.getLogger("edgexc")


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"{text} must be > 0")
    return v


def _model_arg(text):
    if text in MODELS or text.endswith(".json"):
        return text
    raise argparse.ArgumentTypeError(f"unknown model {text!r}; choose from {', '.join(MODELS)} or a .json spec file")


def _load_model(name, width_scale=1.0, num_classes=10) -> arch.ArchSpec:
    if name in MODELS:
        return zoo.build(name, num_classes, width_scale)
    try:
        spec = arch.parse_json(Path(name).read_text())
    except OSError as exc:
        raise DataError(f"cannot read {name}: {exc}") from exc
    zoo.validate_arch(spec)
    return spec


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgexc", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings and results")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    t = sub.add_parser("train", help="run one experiment setting and write a metrics CSV")
    t.add_argument("--model", required=True, choices=MODELS, help="architecture to train")
    t.add_argument("--preprocess", default="none", choices=("none", "rowavg"), help="input preprocessing (rowavg only with optimized)")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--data-dir", type=Path, help="directory holding the CIFAR-10 binary batches")
    src.add_argument("--synthetic", action="store_true", help="use the built-in class-separable synthetic set")
    t.add_argument("--epochs", type=_positive_int, default=10, help="number of epochs (default 10)")
    t.add_argument("--batch-size", type=_positive_int, default=64, help="mini-batch size (default 64)")
    t.add_argument("--lr", type=_positive_float, default=2e-5, help="Adam learning rate (default 2e-5)")
    t.add_argument("--seed", type=int, default=0, help="seed for initialization and shuffling (default 0)")
    t.add_argument("--out", type=Path, required=True, help="metrics CSV to write")
    t.add_argument("--train-limit", type=_positive_int, help="use only the first N training images")
    t.add_argument("--test-limit", type=_positive_int, help="use only the first N test images")
    t.add_argument("--width-scale", type=_positive_float, default=1.0, help="multiply every channel width (default 1.0)")
    t.add_argument("--save-weights", type=Path, help="write the final parameters to this .npz file")
    t.set_defaults(func=cmd_train)

    pa = sub.add_parser("params", help="print parameter counts, structure and memory estimate")
    pa.add_argument("--model", required=True, type=_model_arg, help="xception, optimized or a .json spec file")
    pa.add_argument("--batch-size", type=_positive_int, default=64, help="batch size for the memory estimate (default 64)")
    pa.add_argument("--width-scale", type=_positive_float, default=1.0, help="multiply every channel width (default 1.0)")
    pa.set_defaults(func=cmd_params)

    s = sub.add_parser("summary", help="print the per-layer shape trace")
    s.add_argument("--model", required=True, type=_model_arg, help="xception, optimized or a .json spec file")
    s.add_argument("--width-scale", type=_positive_float, default=1.0, help="multiply every channel width (default 1.0)")
    s.set_defaults(func=cmd_summary)

    c = sub.add_parser("compare", help="side-by-side table of two or more metrics CSVs")
    c.add_argument("files", nargs="+", type=Path, metavar="FILE", help="metrics CSVs written by train (at least two)")
    c.set_defaults(func=cmd_compare)

    pp = sub.add_parser("preprocess-preview", help="dump sample images before and after row averaging")
    src = pp.add_mutually_exclusive_group(required=True)
    src.add_argument("--data-dir", type=Path, help="directory holding the CIFAR-10 binary batches")
    src.add_argument("--synthetic", action="store_true", help="sample from the synthetic set instead")
    pp.add_argument("--count", type=_positive_int, default=4, help="number of images (default 4)")
    pp.add_argument("--out-dir", type=Path, required=True, help="directory for the .ppm files")
    pp.set_defaults(func=cmd_preprocess_preview)
    return p


def cmd_train(args) -> int:
    try:
        setting = train.setting_for(args.model, args.preprocess)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = train.TrainConfig(
        setting,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        data_dir=str(args.data_dir) if args.data_dir else None,
        synthetic=args.synthetic,
        train_limit=args.train_limit,
        test_limit=args.test_limit,
        width_scale=args.width_scale,
    )
    final = {}
    rows = train.run_experiment(cfg, on_epoch=lambda row, params: final.update(params=params))
    try:
        train.write_metrics_csv(rows, args.out)
        if args.save_weights:
            final["params"].save(args.save_weights)
    except OSError as exc:
        raise DataError(f"cannot write output: {exc}") from exc
    r = rows[-1]
    print(
        f"{setting}: epoch {r.epoch} train_loss {r.train_loss:.4f} val_loss {r.val_loss:.4f} "
        f"val_acc {r.val_acc:.4f} train_time {r.train_time_s:.1f}s -> {args.out}"
    )
    return EXIT_OK


def cmd_params(args) -> int:
    spec = _load_model(args.model, args.width_scale)
    print(zoo.summarize(spec, args.batch_size).format())
    base = zoo.count_trainable_params(zoo.build("xception", spec.num_classes, args.width_scale))
    opt = zoo.count_trainable_params(zoo.build("optimized", spec.num_classes, args.width_scale))
    print(f"ratio optimized/xception: {opt / base:.4f} ({opt:,} / {base:,})")
    return EXIT_OK


def cmd_summary(args) -> int:
    spec = _load_model(args.model, args.width_scale)
    print(zoo.validate_arch(spec).format())
    return EXIT_OK


# columns shown by compare, with the direction that wins at the final epoch
COMPARE_COLUMNS = {
    "train_loss": min,
    "val_loss": min,
    "val_acc": max,
    "train_time_s": min,
    "val_time_s": min,
    "est_peak_mem_bytes": min,
}
DELTA_COLUMNS = ("val_acc", "val_loss", "train_time_s")


def compare_table(runs: dict[str, list[dict]]) -> str:
    names = list(runs)
    epochs = {len(r) for r in runs.values()}
    if len(epochs) != 1:
        raise DataError("epoch counts differ: " + ", ".join(f"{n}={len(r)}" for n, r in runs.items()))
    n_epochs = epochs.pop()
    if n_epochs == 0:
        raise DataError("metrics files contain no epochs")
    width = max(12, *(len(n) for n in names))
    out = []
    for col in COMPARE_COLUMNS:
        heads = list(names)
        if col in DELTA_COLUMNS:
            heads += [f"d:{n}" for n in names[1:]]
        out.append(f"[{col}]")
        out.append(f"{'epoch':>5s}  " + "  ".join(f"{h:>{width}s}" for h in heads))
        for i in range(n_epochs):
            vals = [runs[n][i][col] for n in names]
            cells = [f"{v:>{width}.6g}" for v in vals]
            if col in DELTA_COLUMNS:
                cells += [f"{v - vals[0]:>+{width}.6g}" for v in vals[1:]]
            out.append(f"{runs[names[0]][i]['epoch']:>5d}  " + "  ".join(cells))
        out.append("")
    out.append("final-epoch winners:")
    for col, pick in COMPARE_COLUMNS.items():
        finals = {n: runs[n][-1][col] for n in names}
        best = pick(finals.values())
        winners = [n for n, v in finals.items() if v == best]
        out.append(f"  {col}: {', '.join(winners)} ({best:.6g})")
    return "\n".join(out)


def cmd_compare(args) -> int:
    if len(args.files) < 2:
        raise UsageError("compare needs at least two metrics files")
    runs = {}
    for f in args.files:
        label = f.stem if f.stem not in runs else str(f)
        runs[label] = train.read_metrics_csv(f)
    print(compare_table(runs))
    return EXIT_OK


def cmd_preprocess_preview(args) -> int:
    if args.synthetic:
        images = data.make_synthetic(10, 1, 32, seed=0).images
    else:
        images, _ = data.read_batch_file(args.data_dir / data.TEST_FILE)
    images = images[: args.count]
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        after = data.row_average(images)
        for i in range(len(images)):
            data.write_ppm(args.out_dir / f"sample_{i:03d}_raw.ppm", images[i])
            data.write_ppm(args.out_dir / f"sample_{i:03d}_rowavg.ppm", after[i])
    except OSError as exc:
        raise DataError(f"cannot write previews: {exc}") from exc
    print(f"wrote {2 * len(images)} files to {args.out_dir}")
    return EXIT_OK


def _thread_limit():
    raw = os.environ.get("EDGEXC_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"EDGEXC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"EDGEXC_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        limit = _thread_limit()
        if limit is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=limit):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"edgexc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ArchError, OSError) as exc:
        print(f"edgexc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"edgexc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
