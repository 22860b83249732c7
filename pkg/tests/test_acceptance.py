"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run on its own with ``python3 -m pytest tests/test_acceptance.py -v`` (roughly ten
minutes on one core); the per-criterion lines appear in the terminal
summary under "acceptance criteria".
"""

import csv
import os
import time
import warnings
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from poolgen import checkpoint as ck
from poolgen import pooling as P
from poolgen.cli import RunConfig, load_datasets, main
from poolgen.data import (standard_sweep_grid, invariance_sweep, load_cifar10_bin, load_mnist_idx,
                          write_cifar10_bin, write_mnist_idx)
from poolgen.gradcheck import brute_force_pool, check_network, default_matrix, run_matrix
from poolgen.nn import SGD, Network, default_architecture
from poolgen.tensor import PoolGeometry
from poolgen.train import fit

GEOMS = [PoolGeometry(2, 2, 2, 0), PoolGeometry(3, 3, 2, 0), PoolGeometry(3, 3, 1, 0),
         PoolGeometry(3, 3, 2, 1), PoolGeometry(3, 3, 1, 1), PoolGeometry(2, 3, 1, 1)]


def _granularity(rng, c, oh, ow):
    return P.Granularity.per_region(c, oh, ow) if rng.random() < 0.5 else P.Granularity.per_layer()


# 1 -------------------------------------------------------------------------

def test_gradient_fidelity(acceptance):
    t0 = time.perf_counter()
    reports = run_matrix(default_matrix(), trials=100, seed=0)
    elapsed = time.perf_counter() - t0
    failed = [r for r in reports if not r.passed(1e-6)]
    worst = max(reports, key=lambda r: r.max_rel_err)
    ok = not failed and elapsed < 120
    acceptance(1, "pooling gradcheck, rel err < 1e-6, < 2 min", ok,
               f"{len(reports) - len(failed)}/{len(reports)} combos pass; worst rel "
               f"{worst.max_rel_err:.2e} ({worst.spec_label}); max abs err "
               f"{max(r.max_abs_err for r in reports):.1e}; {elapsed:.0f}s")
    assert elapsed < 120
    assert not failed, "\n".join(r.line() for r in failed)


# 2 -------------------------------------------------------------------------

def test_closed_form_equivalences(acceptance):
    mismatches = []
    for seed in range(60):
        rng = np.random.default_rng(seed)
        geom = GEOMS[seed % len(GEOMS)]
        x = rng.normal(size=(2, 3, rng.integers(3, 8), rng.integers(3, 8)))
        oh, ow = geom.output_hw(*x.shape[2:])
        d = rng.normal(size=(2, 3, oh, ow))
        gran = _granularity(rng, 3, oh, ow)

        def same(tag, a, b):
            if not np.array_equal(a, b):
                mismatches.append(f"{tag} seed={seed}")

        for a, fwd, bwd in ((1.0, P.max_pool_forward, P.max_pool_backward),
                            (0.0, P.avg_pool_forward, P.avg_pool_backward)):
            p = P.MixedParams.init(gran, a)
            y, c = P.mixed_pool_forward(x, geom, p)
            y_ref, c_ref = fwd(x, geom)
            same(f"mixed(a={a}) fwd", y, y_ref)
            same(f"mixed(a={a}) bwd", P.mixed_pool_backward(d, c, p)[0], bwd(d, c_ref))

        g = P.GatedParams(np.zeros(gran.group_shape + (geom.n,)), gran)
        m = P.MixedParams.init(gran, 0.5)
        (yg, cg), (ym, cm) = P.gated_pool_forward(x, geom, g), P.mixed_pool_forward(x, geom, m)
        yf, cf = P.fifty_fifty_pool_forward(x, geom)
        same("gated(0)=mixed(.5)", yg, ym)
        same("mixed(.5)=50/50", ym, yf)
        gx = P.gated_pool_backward(d, cg, g)[0]
        same("gated(0) bwd", gx, P.mixed_pool_backward(d, cm, m)[0])
        same("50/50 bwd", gx, P.fifty_fifty_pool_backward(d, cf))

        t = P.TreeParams.init(geom.n, 2, gran, 1.0, seed)
        _, ct = P.tree_pool_forward(x, geom, t)
        for name, a, b in zip(("x", "v", "omega"), P.tree_pool_backward(d, ct, t),
                              P.tree2_pool_backward_closed_form(d, ct, t)):
            same(f"tree2 grad_{name}", a, b)
    acceptance(2, "closed-form equivalences, bit-exact", not mismatches,
               f"60 random cases x 10 identities; {len(mismatches)} mismatches")
    assert not mismatches, mismatches[:5]


# 3 -------------------------------------------------------------------------

def test_oracle_equivalence(acceptance):
    ops = ["avg", "max", "mix50", "mixed", "gated", "tree", "stochastic"]
    exact_fail, tree_worst, counts = [], 0.0, {}
    for i in range(1000):
        rng = np.random.default_rng(10_000 + i)
        op, geom = ops[i % len(ops)], GEOMS[(i // len(ops)) % len(GEOMS)]
        x = rng.normal(size=(rng.integers(1, 3), rng.integers(1, 4),
                             rng.integers(geom.region_h, 8), rng.integers(geom.region_w, 8)))
        oh, ow = geom.output_hw(*x.shape[2:])
        gran = _granularity(rng, x.shape[1], oh, ow)
        params, mode = None, "train"
        if op == "mixed":
            params = P.MixedParams(rng.uniform(0, 1, gran.group_shape), gran)
            y = P.mixed_pool_forward(x, geom, params)[0]
        elif op == "gated":
            params = P.GatedParams.init(geom.n, gran, 1.0, i)
            y = P.gated_pool_forward(x, geom, params)[0]
        elif op == "tree":
            params = P.TreeParams.init(geom.n, int(rng.integers(2, 4)), gran, 1.0, i)
            y = P.tree_pool_forward(x, geom, params)[0]
        elif op == "stochastic":
            x, mode = np.abs(x), ("train", "test")[i % 2]
            y = P.stochastic_pool_forward(x, geom, mode, i)[0]
        else:
            y = {"avg": P.avg_pool_forward, "max": P.max_pool_forward,
                 "mix50": P.fifty_fifty_pool_forward}[op](x, geom)[0]
        ref = brute_force_pool(x, geom, op, params, mode=mode, seed=i)
        counts[op] = counts.get(op, 0) + 1
        if op == "tree":
            tree_worst = max(tree_worst, float(np.max(np.abs(ref - y))))
        elif not np.array_equal(ref, y):
            exact_fail.append(f"{op} #{i}")
    ok = not exact_fail and tree_worst <= 1e-12
    acceptance(3, "vectorized vs per-region oracle, 1000 instances", ok,
               f"{len(exact_fail)} inexact deterministic cases; tree max |diff| {tree_worst:.1e}; "
               f"ops {counts}")
    assert ok, exact_fail[:5]


# 4 -------------------------------------------------------------------------

def test_whole_network_fd(acceptance):
    worst_overall, details = 0.0, []
    for p1, p2, gran in (("tree", "gated", "layer"), ("mixed", "stochastic", "layer"),
                         ("tree3", "gated", "lcr")):
        arch = default_architecture(p1, p2, channels=(2, 2, 4, 4), granularity2=gran)
        net = Network(arch, (1, 16, 16), seed=3)
        assert net.param_count() <= 2000
        rng = np.random.default_rng(4)
        # zero biases put dead patches exactly on the ReLU kink; check at a generic point
        for _, layer, name in net.named_params():
            if name == "b":
                layer.params[name][...] = rng.normal(0.0, 0.1, layer.params[name].shape)
        x = np.abs(rng.normal(size=(6, 1, 16, 16)))
        reports = check_network(net, x, rng.integers(0, 4, 6))
        worst = max(reports.values(), key=lambda r: r.max_rel_err)
        worst_overall = max(worst_overall, worst.max_rel_err)
        details.append(f"{p1}/{p2}/{gran} ({net.param_count()} params): "
                       f"{worst.max_rel_err:.1e} at {worst.spec_label} (abs {worst.max_abs_err:.1e}), "
                       f"{sum(r.excluded for r in reports.values())} kink coords excluded")
    ok = worst_overall < 1e-5
    acceptance(4, "whole-network FD, rel err < 1e-5", ok, "; ".join(details))
    assert ok


# 5 -------------------------------------------------------------------------

DESK_VARIANTS = {
    "max": ("max", "max"), "avg": ("avg", "avg"), "stochastic": ("stochastic", "stochastic"),
    "mix50": ("mix50", "mix50"), "mixed": ("mixed", "mixed"), "gated": ("gated", "gated"),
    "tree": ("tree", "tree"), "tree3": ("tree3", "tree3"), "tree+gated": ("tree", "gated"),
}


# These feed the mixing-proportion and invariance checks, so they follow the full
# schedule; the others stop once they reach the accuracy target.
FULL_SCHEDULE = {"max", "mixed", "tree+gated"}


@lru_cache(maxsize=None)
def desk_run(name):
    p1, p2 = DESK_VARIANTS[name]
    target = None if name in FULL_SCHEDULE else 0.95
    cfg = RunConfig(pool1=p1, pool2=p2, target_train_acc=target)
    train, val, test = load_datasets(cfg)
    net = Network(cfg.architecture(train.num_classes), (1, 16, 16), cfg.seed)
    t0 = time.perf_counter()
    history = fit(net, cfg.optimizer(), train, val, batch_size=cfg.batch_size,
                  max_epochs=cfg.max_epochs, seed=cfg.seed,
                  target_train_acc=cfg.target_train_acc)
    return net, history, test.with_means(train.channel_means), time.perf_counter() - t0


def test_desk_scale_training(acceptance):
    t0 = time.perf_counter()
    rows, failures = [], []
    for name in DESK_VARIANTS:
        net, history, test, _ = desk_run(name)
        last = history[-1]
        rows.append(f"{name}: {last.train_acc:.3f} @ep{last.epoch}")
        if last.train_acc < 0.95:
            failures.append(name)
    net, _, _, _ = desk_run("mixed")
    moves = [float(np.min(np.abs(layer.params["a"] - 0.5))) for layer in net.pool_layers()]
    elapsed = time.perf_counter() - t0
    ok = not failures and min(moves) >= 0.05 and elapsed < 600
    acceptance(5, "synthetic 2000/400: >= 95% train acc in 30 epochs, a moves >= 0.05, < 10 min",
               ok, f"{', '.join(rows)}; a moved {[round(m, 3) for m in moves]}; {elapsed:.0f}s")
    assert not failures
    assert min(moves) >= 0.05
    assert elapsed < 600


# 6 -------------------------------------------------------------------------

def test_directional_invariance(acceptance):
    rotations = [s for s in standard_sweep_grid() if s.kind == "rotate"]
    curves = {}
    for name in ("max", "tree+gated"):
        net, _, test, _ = desk_run(name)
        curves[name] = [acc for _, acc in invariance_sweep(net, test, rotations)]
    base, ours = np.mean(curves["max"]), np.mean(curves["tree+gated"])
    ok = ours >= base
    detail = (f"mean rotation acc tree+gated {ours:.4f} vs max {base:.4f}; "
              f"tree+gated {np.round(curves['tree+gated'], 3).tolist()} "
              f"max {np.round(curves['max'], 3).tolist()}")
    acceptance(6, "rotation robustness tree+gated >= max (soft)", ok, detail, soft=True)
    if not ok:
        warnings.warn(f"invariance check not replicated at desk scale: {detail}")


# 7 -------------------------------------------------------------------------

def test_timing_overhead(acceptance, tmp_path, capsys):
    assert main(["bench", "--out", str(tmp_path), "--threads", "1"]) == 0
    with open(tmp_path / "bench.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    overhead = {r["variant"]: float(r["overhead_pct"]) for r in rows}
    ok = set(overhead) == {"max", "mixed", "gated", "tree", "tree+gated"} and all(
        v < 100.0 for v in overhead.values())
    acceptance(7, "bench overhead < 100% per variant (published 5-15%)", ok,
               ", ".join(f"{k} {v:+.1f}%" for k, v in overhead.items()))
    assert ok


# 8 -------------------------------------------------------------------------

def test_format_round_trips(acceptance, tmp_path):
    rng = np.random.default_rng(8)
    img = rng.integers(0, 256, (10000, 28, 28), dtype=np.uint8)
    lbl = rng.integers(0, 10, 10000, dtype=np.uint8)
    write_mnist_idx(img, lbl, tmp_path / "t10k-images-idx3-ubyte", tmp_path / "t10k-labels-idx1-ubyte")
    mnist = load_mnist_idx(tmp_path / "t10k-images-idx3-ubyte", tmp_path / "t10k-labels-idx1-ubyte")
    cimg = rng.integers(0, 256, (10000, 3, 32, 32), dtype=np.uint8)
    write_cifar10_bin(cimg, lbl, tmp_path / "test_batch.bin")
    cifar = load_cifar10_bin(tmp_path / "test_batch.bin")
    checks = {
        "mnist shape": mnist.images.shape == (10000, 1, 28, 28),
        "mnist values": np.array_equal(mnist.images[:, 0] * 255, img) and np.array_equal(mnist.labels, lbl),
        "cifar shape": cifar.images.shape == (10000, 3, 32, 32),
        "cifar values": np.array_equal(cifar.images * 255, cimg) and np.array_equal(cifar.labels, lbl),
    }
    real = os.environ.get("POOLGEN_DATA_DIR")
    if real and (Path(real) / "t10k-images-idx3-ubyte").exists():
        ds = load_mnist_idx(Path(real) / "t10k-images-idx3-ubyte", Path(real) / "t10k-labels-idx1-ubyte")
        checks["real mnist t10k"] = ds.images.shape == (10000, 1, 28, 28)
    if real and (Path(real) / "test_batch.bin").exists():
        checks["real cifar test"] = load_cifar10_bin(Path(real) / "test_batch.bin").images.shape == (10000, 3, 32, 32)

    net = Network(default_architecture("tree", "gated", granularity2="lcr"), (1, 16, 16), seed=1)
    opt = SGD()
    x, y = rng.normal(size=(16, 1, 16, 16)), rng.integers(0, 4, 16)
    for _ in range(2):
        net.loss_and_grads(x, y, step=opt.steps)
        opt.step(net)
    ck.save(tmp_path / "a.ckpt", net, opt)
    ck.save(tmp_path / "b.ckpt", *ck.load(tmp_path / "a.ckpt")[:2])
    checks["checkpoint save-load-save"] = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    ok = all(checks.values())
    source = ("generated and published files" if any(k.startswith("real") for k in checks)
              else "format-exact generated files (no published files found)")
    acceptance(8, "loader and checkpoint round-trips", ok,
               f"{source}; " + ", ".join(f"{k}={'ok' if v else 'BAD'}" for k, v in checks.items()))
    assert ok, checks


# 9 -------------------------------------------------------------------------

def test_determinism(acceptance, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("pool1 = tree\npool2 = gated\ntrain_size = 300\nval_size = 100\n"
                   "test_size = 100\nmax_epochs = 3\ngradcheck_trials = 2\n")
    outputs = {}
    for run in ("first", "second"):
        out = str(tmp_path / run)
        for cmd in ("train", "eval", "invariance", "gradcheck"):
            code = main([cmd, "--config", str(cfg), "--out", out, "--threads", "1", "--seed", "5"])
            assert code in (0, 3), cmd
        outputs[run] = {p.name: p.read_bytes() for p in sorted(Path(out).iterdir())}
    names = sorted(outputs["first"])
    same = [n for n in names if outputs["first"][n] == outputs["second"].get(n)]
    ok = same == names and {"metrics.csv", "eval.csv", "invariance.csv", "gradcheck.txt"} <= set(names)
    acceptance(9, "fixed (config, seed, threads=1) gives byte-identical outputs", ok,
               f"identical: {', '.join(same)}")
    assert ok
