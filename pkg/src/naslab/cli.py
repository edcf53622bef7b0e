"""Command line interface.

Subcommands: ``train`` an experiment config, ``probe`` a checkpoint with one
image, ``render`` (re-emit plots from logged histories), ``gradcheck`` (run
the built-in oracle suite), and ``fetch-data`` (dataset acquisition).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import tarfile
import urllib.error
import urllib.request
from pathlib import Path

import numpy as np

from .config import load_config
from .data import save_cifar_binary, synthetic_dataset
from .errors import NaslabError
from .harness import (detect_overfit_epoch, load_checkpoint, probe_layer_nas,
                      render_artifacts, run_experiment)
from .viz import read_ppm, render_heatmap

CIFAR_URLS = {
    "cifar10": "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
    "cifar100": "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
}


def _cmd_train(args) -> int:
    config = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.scale is not None:
        overrides["scale"] = args.scale
    if overrides:
        config = dataclasses.replace(config, **overrides)
    histories = run_experiment(config, log=print)
    for i, history in enumerate(histories):
        if len(history.records) >= 3:
            report = detect_overfit_epoch(history)
            print(f"run {i}: {report.verdict} "
                  f"(smoothed test-loss minimum at epoch {report.epoch})")
    print(f"artifacts written to {config.out}")
    return 0


def _cmd_probe(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    image_path = Path(args.image)
    if image_path.suffix == ".npy":
        image = np.load(image_path).astype(np.float32)
    else:
        pixels = read_ppm(image_path)
        image = (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)
    if image.ndim != 3 or image.shape[0] != 3:
        print(f"error: expected a 3-channel image, got shape {image.shape}",
              file=sys.stderr)
        return 1
    from .data import Dataset
    probe = Dataset(images=image[None], labels=np.zeros(1, dtype=np.int64),
                    class_count=2, provenance=np.zeros(1, dtype=np.uint8))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshots = probe_layer_nas(net, probe, heatmap_index=0)
    for name, snap in snapshots.items():
        path = out / f"{name}.ppm"
        render_heatmap(snap, path, scale=args.heatmap_scale)
        print(f"{name}: median sparsity {snap.median:.4f} -> {path}")
    return 0


def _cmd_render(args) -> int:
    written = render_artifacts(args.logdir)
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .selfcheck import run_all
    return 0 if run_all(log=print) else 1


def _cmd_fetch_data(args) -> int:
    out = Path(args.dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        train = synthetic_dataset(args.seed, args.train_count, classes=10,
                                  origin="train")
        test = synthetic_dataset(args.seed + 1, args.test_count, classes=10,
                                 origin="test")
        # mirror the real cifar10 layout: five train batches plus a test batch
        per_batch = len(train) // 5
        for i in range(5):
            lo = i * per_batch
            hi = lo + per_batch if i < 4 else len(train)
            save_cifar_binary(train.take(np.arange(lo, hi)),
                              out / f"data_batch_{i + 1}.bin", "cifar10")
        save_cifar_binary(test, out / "test_batch.bin", "cifar10")
        print(f"synthetic cifar10-format data written to {out} "
              f"(train {args.train_count}, test {args.test_count})")
        return 0
    url = CIFAR_URLS[args.variant]
    archive = out / url.rsplit("/", 1)[1]
    print(f"downloading {url} ...")
    try:
        urllib.request.urlretrieve(url, archive)
    except (urllib.error.URLError, OSError) as exc:
        print(f"download failed: {exc}\n"
              f"Fetch {url} manually, place the .bin files in {out}, or use "
              f"--synthetic for a stand-in dataset.", file=sys.stderr)
        return 1
    with tarfile.open(archive) as tar:
        for member in tar.getmembers():
            if member.isfile() and member.name.endswith(".bin"):
                member.name = Path(member.name).name
                tar.extract(member, out)
                print(f"extracted {out / member.name}")
    archive.unlink()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="naslab",
        description="Train small convolutional networks while measuring, "
                    "visualising, and regularising activation sparsity.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run an experiment from a config file")
    p.add_argument("config", help="experiment config file")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--scale", type=int, help="override the width divisor")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("probe", help="one-shot sparsity heatmaps for an image")
    p.add_argument("checkpoint", help="weights.npz written by train")
    p.add_argument("image", help="32x32 image as binary PPM (P6) or .npy [3,32,32]")
    p.add_argument("--out", default="probe_out", help="output directory")
    p.add_argument("--heatmap-scale", type=int, default=8)
    p.set_defaults(fn=_cmd_probe)

    p = sub.add_parser("render", help="re-emit plots from logged histories")
    p.add_argument("logdir", help="experiment output directory")
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("gradcheck", help="run the built-in oracle suite")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("fetch-data", help="download CIFAR binaries or "
                                          "generate a synthetic stand-in")
    p.add_argument("dir", help="target directory")
    p.add_argument("--variant", choices=("cifar10", "cifar100"), default="cifar100")
    p.add_argument("--synthetic", action="store_true",
                   help="write a synthetic dataset in cifar10 binary format")
    p.add_argument("--train-count", type=int, default=6000)
    p.add_argument("--test-count", type=int, default=2000)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(fn=_cmd_fetch_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NaslabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
