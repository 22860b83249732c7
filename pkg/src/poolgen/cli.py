"""``poolgen`` command line: train, eval, gradcheck, invariance, bench.

Architecture and dataset choices live in a ``key = value`` config file;
``--seed`` and ``--out`` override the scalar entries.  Every command except
``bench`` is deterministic for a fixed (config, seed) when run with
``--threads 1``.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure,
3 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from .data import (Dataset, DatasetError, standard_sweep_grid, invariance_sweep, load_cifar10_bin,
                   load_mnist_idx, synthesize_shapes)
from .gradcheck import OPERATORS, default_matrix, run_matrix
from .nn import POOL_VARIANTS, SGD, LRSchedule, Network, default_architecture
from .train import fit

log = logging.getLogger("poolgen")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3
GRADCHECK_TOL = 1e-6

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = "test_batch.bin"


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


@dataclass
class RunConfig:
    """Everything a run depends on.  Field names double as config-file keys."""

    # dataset
    dataset: str = "synthetic"            # synthetic | mnist | cifar10
    data_dir: str = ""                    # falls back to $POOLGEN_DATA_DIR
    train_size: int = 2000
    val_size: int = 400
    test_size: int = 400
    noise: float = 0.1
    # architecture
    pool1: str = "max"
    pool2: str = "max"
    granularity1: str = "layer"
    granularity2: str = "layer"
    pool_size: int = 3
    pool_stride: int = 2
    pool_padding: int = 0
    channels: tuple[int, ...] = (16, 16, 32, 32)
    dropout: float = 0.5
    init_std: float = 0.5
    # optimizer
    lr_rates: tuple[float, ...] = (0.025, 0.0125, 0.0001)
    patience: int = 5
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 64
    max_epochs: int = 30
    target_train_acc: float | None = None
    # run
    seed: int = 0
    out: str = "runs/default"
    # gradcheck / bench
    gradcheck_trials: int = 100
    bench_iters: int = 1000
    bench_warmup: int = 50
    bench_batch: int = 1

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        names = {f.name for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in names:
                raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = _PARSERS[key](value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text, str(path))

    def validate(self) -> None:
        if self.dataset not in ("synthetic", "mnist", "cifar10"):
            raise ConfigError(f"dataset must be synthetic, mnist or cifar10, got {self.dataset!r}")
        for key in ("pool1", "pool2"):
            v = getattr(self, key)
            base = "tree" if v.startswith("tree") else v
            if base not in POOL_VARIANTS or (v != base and not v[4:].isdigit()):
                raise ConfigError(f"{key}: unknown pooling variant {v!r}")
        for key in ("granularity1", "granularity2"):
            if getattr(self, key) not in ("layer", "lcr"):
                raise ConfigError(f"{key} must be 'layer' or 'lcr'")
        if len(self.channels) != 4:
            raise ConfigError("channels needs four comma-separated widths")
        for key in ("train_size", "val_size", "test_size", "batch_size", "max_epochs",
                    "gradcheck_trials", "bench_iters", "bench_batch"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")

    def dump(self, skip=()) -> str:
        lines = []
        for f in fields(self):
            if f.name in skip:
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(t) if isinstance(t, float) else str(t) for t in v)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"

    def architecture(self, num_classes: int) -> list[dict]:
        return default_architecture(
            self.pool1, self.pool2, channels=self.channels, num_classes=num_classes,
            pool_size=self.pool_size, pool_stride=self.pool_stride,
            pool_padding=self.pool_padding, granularity1=self.granularity1,
            granularity2=self.granularity2, dropout=self.dropout, init_std=self.init_std)

    def optimizer(self) -> SGD:
        return SGD(LRSchedule(self.lr_rates, self.patience), self.momentum, self.weight_decay)


_PARSERS = {f.name: str for f in fields(RunConfig)}
_PARSERS.update({k: int for k in ("train_size", "val_size", "test_size", "pool_size",
                                  "pool_stride", "pool_padding", "patience", "batch_size",
                                  "max_epochs", "seed", "gradcheck_trials", "bench_iters",
                                  "bench_warmup", "bench_batch")})
_PARSERS.update({k: float for k in ("noise", "dropout", "init_std", "momentum", "weight_decay")})
_PARSERS.update(channels=_ints, lr_rates=_floats, target_train_acc=_opt_float)


# -- datasets ---------------------------------------------------------------

def data_root(cfg: RunConfig) -> Path:
    root = cfg.data_dir or os.environ.get("POOLGEN_DATA_DIR", "")
    if not root:
        raise ConfigError(f"dataset {cfg.dataset!r} needs data_dir or $POOLGEN_DATA_DIR")
    return Path(root)


def _concat(parts: list[Dataset]) -> Dataset:
    x = np.concatenate([p.images for p in parts])
    y = np.concatenate([p.labels for p in parts])
    return Dataset(x, y, x.mean(axis=(0, 2, 3)), parts[0].num_classes)


def _split(ds: Dataset, val_size: int) -> tuple[Dataset, Dataset]:
    if val_size >= len(ds):
        raise DatasetError(f"val_size {val_size} leaves no training data ({len(ds)} images)")
    cut = len(ds) - val_size
    tr, va = ds.images[:cut], ds.images[cut:]
    return (Dataset(tr, ds.labels[:cut], tr.mean(axis=(0, 2, 3)), ds.num_classes),
            Dataset(va, ds.labels[cut:], tr.mean(axis=(0, 2, 3)), ds.num_classes))


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """(train, validation, test); the last ``val_size`` training images validate."""
    if cfg.dataset == "synthetic":
        train = synthesize_shapes(cfg.train_size, cfg.seed, cfg.noise)
        val = synthesize_shapes(cfg.val_size, cfg.seed + 1_000_003, cfg.noise)
        test = synthesize_shapes(cfg.test_size, cfg.seed + 2_000_006, cfg.noise)
        return train, val, test
    root = data_root(cfg)
    try:
        if cfg.dataset == "mnist":
            full = load_mnist_idx(*(root / f for f in MNIST_FILES["train"]))
            test = load_mnist_idx(*(root / f for f in MNIST_FILES["test"]))
        else:
            full = _concat([load_cifar10_bin(root / f) for f in CIFAR_TRAIN])
            test = load_cifar10_bin(root / CIFAR_TEST)
    except OSError as exc:
        raise DatasetError(f"cannot read dataset: {exc}") from exc
    train, val = _split(full, cfg.val_size)
    return train, val, test.with_means(train.channel_means)


# -- commands ---------------------------------------------------------------

def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val, _ = load_datasets(cfg)
    net = Network(cfg.architecture(train.num_classes), train.images.shape[1:], cfg.seed)
    opt = cfg.optimizer()
    log.info("training %s/%s on %s: %d params", cfg.pool1, cfg.pool2, cfg.dataset,
             net.param_count())
    history = fit(net, opt, train, val, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
                  seed=cfg.seed, target_train_acc=cfg.target_train_acc)
    _write_csv(out / "metrics.csv", ["epoch", "lr", "train_loss", "train_acc", "val_err"],
               [[r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_acc), repr(r.val_err)]
                for r in history])
    _write_csv(out / "pool_params.csv", ["epoch", "param", "value"],
               [[r.epoch, k, repr(v)] for r in history for k, v in sorted(r.pool_params.items())])
    (out / "config.txt").write_text(cfg.dump(skip=("out",)))
    checkpoint.save(out / "model.ckpt", net, opt,
                    {"config": cfg.dump(skip=("out",)), "epochs": len(history)})
    last = history[-1]
    print(f"epochs={last.epoch} train_acc={last.train_acc:.4f} val_err={last.val_err:.4f} "
          f"pooling={last.pool_params}")
    return EXIT_OK


def _checkpoint_path(cfg: RunConfig, path: str | None) -> Path:
    return Path(path) if path else Path(cfg.out) / "model.ckpt"


def _load_for_eval(cfg: RunConfig, ckpt: Path) -> tuple[Network, Dataset]:
    net, _, _ = checkpoint.load(ckpt)
    train, _, test = load_datasets(cfg)
    if tuple(test.images.shape[1:]) != net.input_shape or test.num_classes != net.num_classes:
        raise DatasetError(f"checkpoint expects input {net.input_shape} with {net.num_classes} "
                           f"classes; dataset gives {test.images.shape[1:]} with "
                           f"{test.num_classes}")
    return net, test.with_means(train.channel_means)


def cmd_eval(cfg: RunConfig, ckpt_path: str | None = None) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    net, test = _load_for_eval(cfg, _checkpoint_path(cfg, ckpt_path))
    acc = net.accuracy(test.centered, test.labels)
    _write_csv(out / "eval.csv", ["split", "accuracy", "error"], [["test", repr(acc), repr(1 - acc)]])
    print(f"test accuracy {acc:.4f} (error {1 - acc:.4f})")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, operators=None, specs=None) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = default_matrix() if specs is None else specs
    t0 = time.perf_counter()
    reports = run_matrix(specs, cfg.gradcheck_trials, cfg.seed, operators or OPERATORS)
    lines = [r.line(GRADCHECK_TOL) for r in reports]
    failed = sum(not r.passed(GRADCHECK_TOL) for r in reports)
    lines.append(f"{len(reports) - failed}/{len(reports)} combinations passed "
                 f"(tol {GRADCHECK_TOL:g})")
    text = "\n".join(lines) + "\n"
    (out / "gradcheck.txt").write_text(text)
    print(text, end="")
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_invariance(cfg: RunConfig, ckpt_path: str | None = None) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    net, test = _load_for_eval(cfg, _checkpoint_path(cfg, ckpt_path))
    rows = invariance_sweep(net, test, standard_sweep_grid())
    _write_csv(out / "invariance.csv", ["transform", "amount", "accuracy"],
               [[s.kind, repr(s.amount), repr(acc)] for s, acc in rows])
    for s, acc in rows:
        print(f"{s.kind:<10} {s.amount:>5g} {acc:.4f}")
    return EXIT_OK


BENCH_VARIANTS = (("max", "max", "max"), ("mixed", "mixed", "mixed"),
                  ("gated", "gated", "gated"), ("tree", "tree", "max"),
                  ("tree+gated", "tree", "gated"))
PUBLISHED_OVERHEAD = (5.0, 15.0)


@dataclass
class BenchRow:
    variant: str
    ms_per_image: float
    overhead_pct: float = 0.0


def bench_variants(cfg: RunConfig) -> list[BenchRow]:
    """Mean forward+backward wall time per image for each pooling configuration."""
    rng = np.random.default_rng(cfg.seed)
    shape = (1, 16, 16) if cfg.dataset == "synthetic" else ((1, 28, 28) if cfg.dataset == "mnist"
                                                             else (3, 32, 32))
    x = rng.normal(size=(cfg.bench_batch,) + shape)
    y = rng.integers(0, 4, cfg.bench_batch)
    rows = []
    for name, p1, p2 in BENCH_VARIANTS:
        c = RunConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)},
                         "pool1": p1, "pool2": p2})
        net = Network(c.architecture(4), shape, cfg.seed)
        for i in range(cfg.bench_warmup):
            net.loss_and_grads(x, y, train=True, step=i)
        t0 = time.perf_counter()
        for i in range(cfg.bench_iters):
            net.loss_and_grads(x, y, train=True, step=i)
        dt = time.perf_counter() - t0
        rows.append(BenchRow(name, 1e3 * dt / (cfg.bench_iters * cfg.bench_batch)))
    base = rows[0].ms_per_image
    for r in rows:
        r.overhead_pct = 100.0 * (r.ms_per_image - base) / base
    return rows


def cmd_bench(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = bench_variants(cfg)
    _write_csv(out / "bench.csv", ["variant", "ms_per_image", "overhead_pct"],
               [[r.variant, f"{r.ms_per_image:.6f}", f"{r.overhead_pct:.2f}"] for r in rows])
    lo, hi = PUBLISHED_OVERHEAD
    print(f"{'variant':<12} {'ms/image':>10} {'overhead':>9}   (published range {lo:g}-{hi:g}%)")
    for r in rows:
        flag = "" if r.overhead_pct < 100.0 else "  exceeds 100% bound"
        print(f"{r.variant:<12} {r.ms_per_image:>10.4f} {r.overhead_pct:>8.1f}%{flag}")
    ov = {r.variant: r.overhead_pct for r in rows}
    if not ov["mixed"] <= ov["gated"] <= ov["tree+gated"]:
        print("warning: expected overhead ordering mixed <= gated <= tree+gated not observed",
              file=sys.stderr)
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--checkpoint", help="checkpoint path (eval, invariance)")
    common.add_argument("--threads", type=int, default=1, help="BLAS thread count (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(
        prog="poolgen", description="Learned pooling operators: train, eval, gradcheck, invariance, bench.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("train", "train a network, write metrics.csv and model.ckpt"),
                       ("eval", "test accuracy of a checkpoint"),
                       ("gradcheck", "finite-difference check of every pooling operator"),
                       ("invariance", "accuracy under rotation / translation / scale"),
                       ("bench", "forward+backward timing per pooling variant")):
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        print(f"poolgen: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "eval":
                return cmd_eval(cfg, args.checkpoint)
            if args.command == "gradcheck":
                return cmd_gradcheck(cfg)
            if args.command == "invariance":
                return cmd_invariance(cfg, args.checkpoint)
            return cmd_bench(cfg)
    except ConfigError as exc:
        print(f"poolgen: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, checkpoint.CheckpointError, FloatingPointError, ValueError,
            OSError) as exc:
        print(f"poolgen: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
