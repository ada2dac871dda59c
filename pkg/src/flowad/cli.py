"""Command-line interface: synth, train, infer, eval, inspect.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, load_config, save_config
from .errors import ConfigError, DataError, NumericError
from .infer import run_inference
from .metrics import compute_report
from .records import (
    expected_record_size,
    load_checkpoint,
    load_images,
    load_manifest,
    map_to_pgm,
    read_record_header,
    validate_manifest,
)
from .rng import Rng
from .synth import SyntheticGenConfig, generate_synthetic
from .train import load_model_checkpoint, train_loop

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="flowad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic embedding dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--categories-train", type=int, default=5)
    p.add_argument("--categories-test", type=int, default=3)
    p.add_argument("--images-per-category", type=int, default=40)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--raw-dim", type=int, default=32)
    p.add_argument("--joint-dim", type=int, default=16)
    p.add_argument("--shift", type=float, default=None, help="planted feature shift")
    p.add_argument("--noise", type=float, default=None)

    p = sub.add_parser("train", help="train on a dataset manifest")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")
    p.add_argument("--config", default=None, help="training config file (key = value lines)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("infer", help="run inference with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=("image", "text"), default="image")
    p.add_argument("--samples", type=int, default=None, help="Monte Carlo samples R (default: config R_infer)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pgm", action="store_true", help="also export anomaly maps as PGM")

    p = sub.add_parser("eval", help="compute metrics from stored inference outputs")
    p.add_argument("--pred", required=True, help="directory written by `infer`")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="where to write report files (default: pred dir)")
    p.add_argument("--fpr-limit", type=float, default=0.3)

    p = sub.add_parser("inspect", help="describe and validate records/checkpoints/manifests")
    p.add_argument("paths", nargs="+")

    return parser


def _manifest_path(data):
    path = Path(data)
    return path if path.suffix == ".json" else path / "manifest.json"


def cmd_synth(args):
    cfg = SyntheticGenConfig(
        seed=args.seed,
        train_categories=args.categories_train,
        test_categories=args.categories_test,
        images_per_category=args.images_per_category,
        grid=args.grid,
        raw_dim=args.raw_dim,
        joint_dim=args.joint_dim,
        **({"shift": args.shift} if args.shift is not None else {}),
        **({"noise": args.noise} if args.noise is not None else {}),
    )
    manifest = generate_synthetic(cfg, args.out)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_train(args):
    manifest = load_manifest(_manifest_path(args.data))
    validate_manifest(manifest)
    config = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_loop(
        manifest,
        config,
        checkpoint_path=out / "checkpoint.pflc",
        log_path=out / "train_log.txt",
        verbose=not args.quiet,
    )
    save_config(out / "train_config.cfg", config)
    print(
        f"trained {result['steps']} steps over {len(result['history'])} epochs; "
        f"best val metric {result['best_metric']:.4f} (epoch {result['best_epoch']}); "
        f"checkpoint at {out / 'checkpoint.pflc'}"
    )
    return EXIT_OK


def cmd_infer(args):
    model, config, _ = load_model_checkpoint(args.checkpoint)
    manifest = load_manifest(_manifest_path(args.data))
    images = load_images(manifest, args.split)
    if not images:
        raise DataError(f"no images in split {args.split!r}", code="missing_file")
    count = args.samples if args.samples is not None else config.R_infer
    results = run_inference(model, images, count, args.mode, Rng(args.seed, path=(4,)))
    out = Path(args.out)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    rows = []
    for img, res in zip(images, results):
        stem = Path(img.record).stem
        np.save(out / "maps" / f"{stem}.npy", res["map"])
        if args.pgm:
            map_to_pgm(out / "maps" / f"{stem}.pgm", res["map"])
        rows.append(
            {
                "record": img.record,
                "category": res["category"],
                "label": res["label"],
                "score": f"{res['score']:.12g}",
                "s_text": f"{res['s_text']:.12g}",
                "s_img": f"{res['s_img']:.12g}",
            }
        )
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    with open(out / "infer_meta.txt", "w") as fh:
        fh.write(f"split = {args.split}\nmode = {args.mode}\nsamples = {count}\nseed = {args.seed}\n")
    print(f"scored {len(rows)} images -> {out / 'scores.csv'}")
    return EXIT_OK


def cmd_eval(args):
    pred = Path(args.pred)
    manifest = load_manifest(_manifest_path(args.data))
    entries = {e.record: e for e in manifest.entries}
    samples = []
    with open(pred / "scores.csv") as fh:
        for row in csv.DictReader(fh):
            entry = entries.get(row["record"])
            if entry is None:
                raise DataError(f"scores.csv references unknown record {row['record']}", code="missing_file")
            amap = np.load(pred / "maps" / f"{Path(entry.record).stem}.npy")
            if entry.mask is not None:
                from .records import read_mask

                mask = read_mask(manifest.mask_path(entry))
            else:
                mask = np.zeros((entry.height, entry.width), dtype=np.uint8)
            samples.append(
                {
                    "category": entry.category,
                    "label": int(row["label"]),
                    "score": float(row["score"]),
                    "map": amap,
                    "mask": mask,
                }
            )
    report = compute_report(samples, fpr_limit=args.fpr_limit)
    out = Path(args.out) if args.out else pred
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.csv").write_text(report.to_csv())
    print(report.to_text())
    return EXIT_OK


def cmd_inspect(args):
    for raw in args.paths:
        path = Path(raw)
        if not path.exists():
            raise DataError(f"no such file: {path}", code="missing_file")
        if path.suffix == ".pfle":
            header = read_record_header(path)
            expected = expected_record_size(header)
            actual = path.stat().st_size
            if actual != expected:
                raise DataError(
                    f"{path}: payload size {actual} != expected {expected}", code="truncated"
                )
            print(
                f"{path}: PFLE v1 C={header['joint_dim']} L={header['n_layers']} "
                f"H={header['grid_h']} W={header['grid_w']} D_raw={header['raw_dim']} "
                f"flags=0x{header['flags']:04x} bytes={actual} OK"
            )
        elif path.suffix == ".pflc":
            params, meta = load_checkpoint(path)
            n_values = sum(int(np.prod(p.shape)) if p.shape else 1 for p in params.values())
            print(f"{path}: checkpoint with {len(params)} parameter blobs, {n_values} values")
            for key in sorted(meta):
                print(f"  {key} = {meta[key]}")
        elif path.name.endswith(".json"):
            manifest = load_manifest(path)
            validate_manifest(manifest)
            print(
                f"{path}: manifest OK with {len(manifest.entries)} entries, "
                f"categories {manifest.categories()}"
            )
        else:
            raise DataError(f"{path}: unknown artifact type", code="bad_magic")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (DataError,) as exc:
        print(f"data error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
