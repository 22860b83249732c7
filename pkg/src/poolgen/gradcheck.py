"""Finite-difference and brute-force oracles for the pooling operators.

Nothing here calls into the vectorized pooling forward paths: the brute-force
pooler walks windows with plain Python loops, and gradients are checked
against central differences of whatever forward the operator table supplies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import pooling as P
from .tensor import PoolGeometry

DEFAULT_H = 1e-5


def rel_err(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def fd_gradient(f: Callable[[np.ndarray], float], x, h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


# -- brute-force per-region oracle ------------------------------------------

def _sig(z: float) -> float:
    if z >= 0:
        return float(1.0 / (1.0 + np.exp(-z)))
    e = float(np.exp(z))
    return e / (1.0 + e)


def _window(x, b, ch, r, q, geom):
    h, w = x.shape[2], x.shape[3]
    vals = []
    for i in range(geom.region_h):
        for j in range(geom.region_w):
            row = r * geom.stride + i - geom.padding
            col = q * geom.stride + j - geom.padding
            if 0 <= row < h and 0 <= col < w:
                vals.append(float(x[b, ch, row, col]))
            else:
                vals.append(0.0)
    return vals


def _group(arr, ch, r, q):
    gc, gh, gw = arr.shape[:3]
    return arr[ch if gc > 1 else 0, r if gh > 1 else 0, q if gw > 1 else 0]


def _total(vals):
    t = 0.0
    for v in vals:
        t += v
    return t


def _dot(w, vals):
    t = 0.0
    for k, v in enumerate(vals):
        t += float(w[k]) * v
    return t


def _argmax(vals):
    best = 0
    for k in range(1, len(vals)):
        if vals[k] > vals[best]:
            best = k
    return best


def brute_force_pool(x, geom: PoolGeometry, op: str, params=None,
                     mode: str = "train", seed: int = 0) -> np.ndarray:
    """Pool ``x`` one window at a time, evaluating each formula literally.

    ``op`` is one of avg, max, mix50, stochastic, mixed, gated, tree.
    """
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    oh = (h + 2 * geom.padding - geom.region_h) // geom.stride + 1
    ow = (w + 2 * geom.padding - geom.region_w) // geom.stride + 1
    if oh < 1 or ow < 1:
        raise ValueError("geometry yields empty output")
    N = geom.region_h * geom.region_w
    out = np.zeros((n, c, oh, ow))
    draws = None
    if op == "stochastic":
        if np.any(x < 0):
            raise ValueError("stochastic pooling requires non-negative activations")
        if mode == "train":
            draws = iter(np.random.default_rng(seed).random(n * c * oh * ow).tolist())
    for b in range(n):
        for ch in range(c):
            for r in range(oh):
                for q in range(ow):
                    vals = _window(x, b, ch, r, q, geom)
                    mx = vals[_argmax(vals)]
                    avg = _total(vals) / N
                    if op == "avg":
                        y = avg
                    elif op == "max":
                        y = mx
                    elif op == "mix50":
                        y = 0.5 * mx + (1 - 0.5) * avg
                    elif op == "mixed":
                        a = float(_group(params.a, ch, r, q))
                        y = a * mx + (1 - a) * avg
                    elif op == "gated":
                        s = _sig(_dot(_group(params.omega, ch, r, q), vals))
                        y = s * mx + (1 - s) * avg
                    elif op == "tree":
                        y = _tree_value(vals, _group(params.v, ch, r, q),
                                        _group(params.omega, ch, r, q))
                    elif op == "stochastic":
                        y = _stochastic_value(vals, mode, draws)
                    else:
                        raise ValueError(f"unknown operator {op!r}")
                    out[b, ch, r, q] = y
    return out


def _tree_value(vals, v, omega):
    values = [_dot(v[m], vals) for m in range(v.shape[0])]
    gate = 0
    while len(values) > 1:
        merged = []
        for k in range(0, len(values), 2):
            s = _sig(_dot(omega[gate], vals))
            gate += 1
            merged.append(s * values[k] + (1 - s) * values[k + 1])
        values = merged
    return values[0]


def _stochastic_value(vals, mode, draws):
    total = 0.0
    cum = []
    for v in vals:
        total += v
        cum.append(total)
    if mode == "test":
        if total == 0:
            return 0.0
        acc = 0.0
        for v in vals:
            acc += v * (v / total)
        return acc
    u = next(draws)
    if total == 0:
        return vals[min(int(u * len(vals)), len(vals) - 1)]
    t = u * total
    for k, cv in enumerate(cum):
        if cv > t:
            return vals[k]
    for k in range(len(vals) - 1, -1, -1):
        if vals[k] > 0:
            return vals[k]
    raise AssertionError("unreachable")


# -- operator table ---------------------------------------------------------

@dataclass
class Operator:
    """Uniform adapter: ``forward(x, geom, params) -> (out, cache)`` and
    ``backward(grad, cache, params) -> (grad_x, {name: grad})``."""

    name: str
    forward: Callable
    backward: Callable
    make_params: Callable  # (rng, n, granularity, levels) -> params | None
    param_names: tuple[str, ...] = ()


def _mk_mixed(rng, n, gran, levels):
    return P.MixedParams(rng.uniform(0.1, 0.9, gran.group_shape), gran)


def _mk_gated(rng, n, gran, levels):
    return P.GatedParams(rng.normal(0.0, 0.5, gran.group_shape + (n,)), gran)


def _mk_tree(rng, n, gran, levels):
    n_leaves, n_internal, _ = P.tree_layout(levels)
    g = gran.group_shape
    return P.TreeParams(levels, rng.normal(0.0, 0.5, g + (n_leaves, n)),
                        rng.normal(0.0, 0.5, g + (n_internal, n)), gran)


def _tree_bwd(g, cache, p):
    gx, gv, gw = P.tree_pool_backward(g, cache, p)
    return gx, {"v": gv, "omega": gw}


OPERATORS: dict[str, Operator] = {
    "avg": Operator("avg", lambda x, g, p: P.avg_pool_forward(x, g),
                    lambda d, c, p: (P.avg_pool_backward(d, c), {}), lambda *a: None),
    "max": Operator("max", lambda x, g, p: P.max_pool_forward(x, g),
                    lambda d, c, p: (P.max_pool_backward(d, c), {}), lambda *a: None),
    "mixed": Operator("mixed", P.mixed_pool_forward,
                      lambda d, c, p: (lambda r: (r[0], {"a": r[1]}))(P.mixed_pool_backward(d, c, p)),
                      _mk_mixed, ("a",)),
    "gated": Operator("gated", P.gated_pool_forward,
                      lambda d, c, p: (lambda r: (r[0], {"omega": r[1]}))(P.gated_pool_backward(d, c, p)),
                      _mk_gated, ("omega",)),
    "tree": Operator("tree", P.tree_pool_forward, _tree_bwd, _mk_tree, ("v", "omega")),
}


@dataclass(frozen=True)
class OperatorSpec:
    op: str
    granularity: str = "layer"  # "layer" or "lcr"
    geom: PoolGeometry = field(default_factory=lambda: PoolGeometry(2, 2, 2, 0))
    levels: int = 2

    @property
    def label(self) -> str:
        g = self.geom
        name = f"{self.op}{self.levels}" if self.op == "tree" else self.op
        pad = f"p{g.padding}" if g.padding else ""
        return f"{name}/{self.granularity}/{g.region_h}x{g.region_w}s{g.stride}{pad}"


@dataclass
class GradCheckReport:
    spec_label: str
    max_rel_err: float = 0.0
    worst_coordinate: tuple = ()
    max_abs_err: float = 0.0
    h: float = DEFAULT_H
    trials: int = 0
    resampled_trials: int = 0
    excluded: int = 0

    def passed(self, tol: float = 1e-6) -> bool:
        return self.max_rel_err < tol

    def line(self, tol: float = 1e-6) -> str:
        status = "PASS" if self.passed(tol) else "FAIL"
        return (f"{status} {self.spec_label:<28} max_rel_err={self.max_rel_err:.3e} "
                f"max_abs_err={self.max_abs_err:.1e} "
                f"trials={self.trials} resampled={self.resampled_trials} "
                f"worst={self.worst_coordinate}")


def default_matrix() -> list[OperatorSpec]:
    """operator x granularity x geometry grid checked by ``gradcheck``."""
    geoms = [PoolGeometry(2, 2, 2, 0), PoolGeometry(3, 3, 2, 0), PoolGeometry(3, 3, 1, 0)]
    ops = [("avg", 2), ("max", 2), ("mixed", 2), ("gated", 2), ("tree", 2), ("tree", 3)]
    return [OperatorSpec(op, gran, geom, levels)
            for op, levels in ops for gran in ("layer", "lcr") for geom in geoms]


def _input_hw(geom: PoolGeometry, out: int = 2) -> tuple[int, int]:
    return ((out - 1) * geom.stride + geom.region_h - 2 * geom.padding,
            (out - 1) * geom.stride + geom.region_w - 2 * geom.padding)


def check_operator(spec: OperatorSpec, trials: int = 100, seed: int = 0,
                   h: float = DEFAULT_H, operators: dict[str, Operator] | None = None,
                   batch: int = 2, channels: int = 2, max_resamples: int = 1000,
                   unit_upstream: bool = False) -> GradCheckReport:
    """Compare analytic backward against central differences on random problems.

    The scalar checked is ``sum(upstream * out)`` with a Gaussian upstream
    gradient, or all ones when ``unit_upstream`` is set.  Trials where a +-h
    perturbation moves any region's argmax are discarded and redrawn; their
    count is reported as ``resampled_trials``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    op = (operators or OPERATORS)[spec.op]
    rng = np.random.default_rng(seed)
    geom = spec.geom
    ih, iw = _input_hw(geom)
    oh, ow = geom.output_hw(ih, iw)
    gran = (P.Granularity.per_region(channels, oh, ow) if spec.granularity == "lcr"
            else P.Granularity.per_layer())
    report = GradCheckReport(spec.label, h=h)
    done = 0
    while done < trials:
        if report.resampled_trials > max_resamples:
            raise RuntimeError(f"{spec.label}: too many argmax-switch resamples")
        x = rng.normal(0.0, 1.0, (batch, channels, ih, iw))
        params = op.make_params(rng, geom.n, gran, spec.levels)
        upstream = rng.normal(0.0, 1.0, (batch, channels, oh, ow))
        if unit_upstream:
            upstream = np.ones_like(upstream)
        _, cache = op.forward(x, geom, params)
        base_argmax = cache.argmax
        switched = [False]

        def loss(out_cache) -> float:
            out, c = out_cache
            if base_argmax is not None and not np.array_equal(c.argmax, base_argmax):
                switched[0] = True
            return float(np.sum(out * upstream))

        gx, gparams = op.backward(upstream, cache, params)
        checks = [("x", gx, fd_gradient(lambda z: loss(op.forward(z, geom, params)), x, h))]
        for name in op.param_names:
            orig = getattr(params, name)

            def f(z, name=name):
                setattr(params, name, z)
                return loss(op.forward(x, geom, params))

            num = fd_gradient(f, orig, h)
            setattr(params, name, orig)
            checks.append((name, gparams[name], num))
        if switched[0]:
            report.resampled_trials += 1
            continue
        for name, analytic, numeric in checks:
            err = rel_err(analytic, numeric)
            report.max_abs_err = max(report.max_abs_err, float(np.max(np.abs(analytic - numeric))))
            k = int(np.argmax(err))
            if err.flat[k] > report.max_rel_err:
                report.max_rel_err = float(err.flat[k])
                report.worst_coordinate = (name,) + tuple(int(i) for i in np.unravel_index(k, err.shape))
        done += 1
    report.trials = done + report.resampled_trials
    return report


def run_matrix(specs=None, trials: int = 100, seed: int = 0,
               operators: dict[str, Operator] | None = None) -> list[GradCheckReport]:
    specs = default_matrix() if specs is None else specs
    return [check_operator(s, trials, seed + i, operators=operators) for i, s in enumerate(specs)]


def _kink_state(net) -> bytes:
    """ReLU masks and pooling argmaxes from the last forward pass."""
    parts = []
    for layer in net.layers:
        if layer.kind == "relu":
            parts.append(np.packbits(layer._mask).tobytes())
        elif layer.kind == "pool" and getattr(layer._cache, "argmax", None) is not None:
            parts.append(layer._cache.argmax.tobytes())
    return b"".join(parts)


def check_network(net, x: np.ndarray, labels: np.ndarray, h: float = DEFAULT_H,
                  step: int = 0) -> dict[str, GradCheckReport]:
    """Central-difference check of every parameter of ``net`` on one batch.

    Uses evaluation-mode forwards (dropout off, stochastic pooling in its
    expectation mode), so the loss is a deterministic function of the weights.
    Coordinates whose +-h perturbation flips a ReLU mask or a pooling argmax sit
    on a kink of the loss; they are left out of the error and counted in
    ``excluded``.
    """
    from .nn import softmax_xent

    _, g = softmax_xent(net.forward(x, train=False, step=step), labels)
    net.backward(g)
    base = _kink_state(net)
    reports = {}
    for key, layer, name in net.named_params():
        analytic = layer.grads[name].copy()
        param = layer.params[name]
        saved = param.copy()
        flipped = []

        def f(z, param=param, flipped=flipped):
            param[...] = z
            loss = softmax_xent(net.forward(x, train=False, step=step), labels)[0]
            flipped.append(_kink_state(net) != base)
            return loss

        numeric = fd_gradient(f, saved, h)
        param[...] = saved
        kinked = np.array(flipped).reshape(-1, 2).any(axis=1).reshape(param.shape)
        err = np.where(kinked, 0.0, rel_err(analytic, numeric))
        k = int(np.argmax(err))
        reports[key] = GradCheckReport(
            key, float(err.flat[k]), tuple(int(i) for i in np.unravel_index(k, err.shape)),
            float(np.max(np.where(kinked, 0.0, np.abs(analytic - numeric)))), h, 1, 0,
            int(kinked.sum()))
    return reports
