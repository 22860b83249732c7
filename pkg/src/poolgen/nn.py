"""Minimal CNN stack with manual backprop.

Layers are built from plain dict specs so a network can be rebuilt from a
checkpoint manifest.  Randomness (initialization, dropout masks, stochastic
pooling draws) is derived from ``(seed, layer index, step)`` keys rather than
a shared generator, which keeps runs reproducible and resumable.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import pooling as P
from .tensor import PoolGeometry, scatter_slots

POOL_VARIANTS = ("max", "avg", "stochastic", "mix50", "mixed", "gated", "tree")


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.decay: set[str] = set()
        self.seed = 0
        self.index = 0

    def build(self, in_shape: tuple[int, ...], seed: int, index: int) -> tuple[int, ...]:
        self.seed, self.index = seed, index
        return in_shape

    def forward(self, x: np.ndarray, train: bool, step: int) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def post_step(self) -> None:
        pass

    def spec(self) -> dict:
        return {"type": self.kind}

    def _rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.index, *key])


class Conv2D(Layer):
    """Cross-correlation over all taps, computed as one matmul per batch."""

    kind = "conv"

    def __init__(self, out_channels: int, kernel: int = 3, stride: int = 1, padding: int = 1):
        super().__init__()
        self.out_channels, self.kernel = out_channels, kernel
        self.geom = PoolGeometry(kernel, kernel, stride, padding)
        self.decay = {"W"}

    def build(self, in_shape, seed, index):
        super().build(in_shape, seed, index)
        c, h, w = in_shape
        fan_in = c * self.kernel ** 2
        rng = self._rng(0)
        self.params["W"] = rng.normal(0.0, math.sqrt(2.0 / fan_in),
                                      (self.out_channels, c, self.kernel, self.kernel))
        self.params["b"] = np.zeros(self.out_channels)
        oh, ow = self.geom.output_hw(h, w)
        return (self.out_channels, oh, ow)

    def _wmat(self) -> np.ndarray:
        # columns ordered (tap, in_channel) to match the slot-major im2col below
        w = self.params["W"]
        return w.transpose(0, 2, 3, 1).reshape(self.out_channels, -1)

    def forward(self, x, train, step):
        n, c, h, w = x.shape
        oh, ow = self.geom.output_hw(h, w)
        p, s, k = self.geom.padding, self.geom.stride, self.kernel
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        xp = xp.transpose(1, 0, 2, 3)
        cols = np.empty((k * k, c, n, oh, ow))
        for t in range(k * k):
            i, j = divmod(t, k)
            cols[t] = xp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s]
        cols = cols.reshape(k * k * c, n * oh * ow)
        out = self._wmat() @ cols + self.params["b"][:, None]
        self._cache = (x.shape, cols, oh, ow)
        return np.ascontiguousarray(out.reshape(self.out_channels, n, oh, ow).transpose(1, 0, 2, 3))

    def backward(self, grad):
        in_shape, cols, oh, ow = self._cache
        n, c = in_shape[:2]
        k = self.kernel
        g = grad.transpose(1, 0, 2, 3).reshape(self.out_channels, n * oh * ow)
        dw = (g @ cols.T).reshape(self.out_channels, k, k, c)
        self.grads["W"] = np.ascontiguousarray(dw.transpose(0, 3, 1, 2))
        self.grads["b"] = g.sum(axis=1)
        dcols = (self._wmat().T @ g).reshape(k * k, c, n, oh, ow).transpose(0, 2, 1, 3, 4)
        return scatter_slots(dcols, in_shape, self.geom)

    def spec(self):
        return {"type": "conv", "out": self.out_channels, "kernel": self.kernel,
                "stride": self.geom.stride, "padding": self.geom.padding}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, step):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        # gradient at exactly 0 is 0
        return np.where(self._mask, grad, 0.0)


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    kind = "dropout"

    def __init__(self, rate: float = 0.5):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train, step):
        if not train or self.rate == 0.0:
            self._scale = None
            return x
        keep = self._rng(1, step).random(x.shape) >= self.rate
        self._scale = keep / (1.0 - self.rate)
        return x * self._scale

    def backward(self, grad):
        return grad if self._scale is None else grad * self._scale

    def spec(self):
        return {"type": "dropout", "rate": self.rate}


class Dense(Layer):
    kind = "dense"

    def __init__(self, out_features: int):
        super().__init__()
        self.out_features = out_features
        self.decay = {"W"}

    def build(self, in_shape, seed, index):
        super().build(in_shape, seed, index)
        fan_in = int(np.prod(in_shape))
        self.params["W"] = self._rng(0).normal(0.0, math.sqrt(2.0 / fan_in),
                                               (fan_in, self.out_features))
        self.params["b"] = np.zeros(self.out_features)
        return (self.out_features,)

    def forward(self, x, train, step):
        self._in_shape = x.shape
        self._x = x.reshape(x.shape[0], -1)
        return self._x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        self.grads["W"] = self._x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return (grad @ self.params["W"].T).reshape(self._in_shape)

    def spec(self):
        return {"type": "dense", "out": self.out_features}


class Pool(Layer):
    """One of the pooling operators, with its learnable parameters if any."""

    kind = "pool"

    def __init__(self, variant: str = "max", size: int = 3, stride: int = 2, padding: int = 0,
                 granularity: str = "layer", levels: int = 2, init_std: float = 0.5,
                 mix_init: float = 0.5):
        super().__init__()
        if variant not in POOL_VARIANTS:
            raise ValueError(f"unknown pooling variant {variant!r}; choose from {POOL_VARIANTS}")
        if granularity not in ("layer", "lcr"):
            raise ValueError(f"granularity must be 'layer' or 'lcr', got {granularity!r}")
        self.variant, self.granularity_name, self.levels = variant, granularity, levels
        self.init_std, self.mix_init = init_std, mix_init
        self.geom = PoolGeometry(size, size, stride, padding)
        self.pool_params = None

    def build(self, in_shape, seed, index):
        super().build(in_shape, seed, index)
        c, h, w = in_shape
        oh, ow = self.geom.output_hw(h, w)
        gran = (P.Granularity.per_region(c, oh, ow) if self.granularity_name == "lcr"
                else P.Granularity.per_layer())
        pseed = int(self._rng(0).integers(2 ** 31))
        n = self.geom.n
        if self.variant == "mixed":
            self.pool_params = P.MixedParams.init(gran, self.mix_init)
            self.params["a"] = self.pool_params.a
        elif self.variant == "gated":
            self.pool_params = P.GatedParams.init(n, gran, self.init_std, pseed)
            self.params["omega"] = self.pool_params.omega
        elif self.variant == "tree":
            self.pool_params = P.TreeParams.init(n, self.levels, gran, self.init_std, pseed)
            self.params["v"] = self.pool_params.v
            self.params["omega"] = self.pool_params.omega
        return (c, oh, ow)

    def forward(self, x, train, step):
        v, p = self.variant, self.pool_params
        if v == "max":
            out, self._cache = P.max_pool_forward(x, self.geom)
        elif v == "avg":
            out, self._cache = P.avg_pool_forward(x, self.geom)
        elif v == "mix50":
            out, self._cache = P.fifty_fifty_pool_forward(x, self.geom)
        elif v == "stochastic":
            seed = int(self._rng(2, step).integers(2 ** 63))
            out, self._cache = P.stochastic_pool_forward(
                x, self.geom, "train" if train else "test", seed)
        elif v == "mixed":
            out, self._cache = P.mixed_pool_forward(x, self.geom, p)
        elif v == "gated":
            out, self._cache = P.gated_pool_forward(x, self.geom, p)
        else:
            out, self._cache = P.tree_pool_forward(x, self.geom, p)
        return out

    def backward(self, grad):
        v, p, c = self.variant, self.pool_params, self._cache
        if v == "max":
            return P.max_pool_backward(grad, c)
        if v == "avg":
            return P.avg_pool_backward(grad, c)
        if v == "mix50":
            return P.fifty_fifty_pool_backward(grad, c)
        if v == "stochastic":
            return P.stochastic_pool_backward(grad, c)
        if v == "mixed":
            gx, self.grads["a"] = P.mixed_pool_backward(grad, c, p)
        elif v == "gated":
            gx, self.grads["omega"] = P.gated_pool_backward(grad, c, p)
        else:
            gx, self.grads["v"], self.grads["omega"] = P.tree_pool_backward(grad, c, p)
        return gx

    def post_step(self):
        if self.variant == "mixed":
            np.clip(self.params["a"], 0.0, 1.0, out=self.params["a"])

    def spec(self):
        return {"type": "pool", "variant": self.variant, "size": self.geom.region_h,
                "stride": self.geom.stride, "padding": self.geom.padding,
                "granularity": self.granularity_name, "levels": self.levels,
                "init_std": self.init_std, "mix_init": self.mix_init}


LAYER_TYPES = {"conv": Conv2D, "relu": ReLU, "dropout": Dropout, "dense": Dense, "pool": Pool}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("type")
    if kind == "conv":
        return Conv2D(spec["out"], spec.get("kernel", 3), spec.get("stride", 1), spec.get("padding", 1))
    if kind == "dense":
        return Dense(spec["out"])
    if kind in LAYER_TYPES:
        return LAYER_TYPES[kind](**spec)
    raise ValueError(f"unknown layer type {kind!r}")


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / batch``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must be one per sample")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


class Network:
    """Ordered layers ending in logits; the softmax cross-entropy head is implicit."""

    def __init__(self, layer_specs: list[dict], input_shape: tuple[int, int, int], seed: int = 0):
        self.layer_specs = [dict(s) for s in layer_specs]
        self.input_shape = tuple(int(d) for d in input_shape)
        self.seed = int(seed)
        self.layers: list[Layer] = [layer_from_spec(s) for s in self.layer_specs]
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.build(shape, self.seed, i)
            except ValueError as exc:
                raise ValueError(f"layer {i} ({layer.kind}): {exc}") from exc
        if len(shape) != 1:
            raise ValueError(f"network must end in a dense layer, final shape is {shape}")
        self.num_classes = shape[0]

    def forward(self, x: np.ndarray, train: bool = False, step: int = 0) -> np.ndarray:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} != network input {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x, train, step)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def loss_and_grads(self, x, labels, train: bool = True, step: int = 0) -> tuple[float, np.ndarray]:
        logits = self.forward(x, train, step)
        loss, g = softmax_xent(logits, labels)
        if not math.isfinite(loss):
            raise FloatingPointError(self._nonfinite_report(x, train, step))
        self.backward(g)
        return loss, logits

    def _nonfinite_report(self, x, train: bool, step: int) -> str:
        bad = [f"layer {i} ({l.kind}) param {k}" for i, l in enumerate(self.layers)
               for k, v in l.params.items() if not np.all(np.isfinite(v))]
        if not bad:
            with np.errstate(all="ignore"):
                for i, layer in enumerate(self.layers):
                    x = layer.forward(x, train, step)
                    if not np.all(np.isfinite(x)):
                        bad.append(f"layer {i} ({layer.kind}) output")
                        break
            if not bad:
                bad.append(f"layer {len(self.layers) - 1} logits overflow the softmax")
        return f"non-finite loss; offending: {', '.join(bad)}"

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size]).argmax(axis=1)
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def accuracy(self, x, labels, batch_size: int = 256) -> float:
        return float(np.mean(self.predict(x, batch_size) == np.asarray(labels)))

    def named_params(self) -> Iterator[tuple[str, Layer, str]]:
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield f"{i}.{name}", layer, name

    def pool_layers(self) -> list[Pool]:
        return [l for l in self.layers if isinstance(l, Pool)]

    def param_count(self) -> int:
        return sum(layer.params[name].size for _, layer, name in self.named_params())


def default_architecture(pool1: str = "max", pool2: str = "max", *, channels=(16, 16, 32, 32),
                         num_classes: int = 4, pool_size: int = 3, pool_stride: int = 2,
                         pool_padding: int = 0, granularity1: str = "layer",
                         granularity2: str = "layer", dropout: float = 0.5,
                         init_std: float = 0.5) -> list[dict]:
    """conv-relu-conv-relu-pool-dropout, twice, then a dense classifier.

    Pool variants take an optional level suffix, e.g. ``tree3``.
    """
    def pool(variant, gran):
        levels = 2
        if variant.startswith("tree") and variant != "tree":
            levels = int(variant[4:])
            variant = "tree"
        return {"type": "pool", "variant": variant, "size": pool_size, "stride": pool_stride,
                "padding": pool_padding, "granularity": gran, "levels": levels,
                "init_std": init_std, "mix_init": 0.5}

    c1, c2, c3, c4 = channels
    specs = [
        {"type": "conv", "out": c1}, {"type": "relu"},
        {"type": "conv", "out": c2}, {"type": "relu"},
        pool(pool1, granularity1),
    ]
    if dropout:
        specs.append({"type": "dropout", "rate": dropout})
    specs += [
        {"type": "conv", "out": c3}, {"type": "relu"},
        {"type": "conv", "out": c4}, {"type": "relu"},
        pool(pool2, granularity2),
    ]
    if dropout:
        specs.append({"type": "dropout", "rate": dropout})
    specs.append({"type": "dense", "out": num_classes})
    return specs


class LRSchedule:
    """Step through a decreasing list of rates when validation error stalls.

    After ``patience`` consecutive evaluations without a new best error the
    next rate is used; stalling on the last rate sets ``done``.
    """

    def __init__(self, rates=(0.025, 0.0125, 0.0001), patience: int = 5):
        rates = [float(r) for r in rates]
        if not rates:
            raise ValueError("learning-rate schedule is empty")
        if any(b >= a for a, b in zip(rates, rates[1:])):
            raise ValueError("learning rates must be strictly decreasing")
        self.rates, self.patience = rates, patience
        self.index, self.best, self.stale, self.done = 0, math.inf, 0, False

    @property
    def lr(self) -> float:
        return self.rates[self.index]

    def observe(self, val_err: float) -> "LRSchedule":
        if val_err < self.best:
            self.best, self.stale = val_err, 0
            return self
        self.stale += 1
        if self.stale >= self.patience:
            self.stale = 0
            if self.index + 1 < len(self.rates):
                self.index += 1
            else:
                self.done = True
        return self

    def state(self) -> dict:
        return {"rates": self.rates, "patience": self.patience, "index": self.index,
                "best": self.best, "stale": self.stale, "done": self.done}

    @classmethod
    def from_state(cls, state: dict) -> "LRSchedule":
        s = cls(state["rates"], state["patience"])
        s.index, s.best, s.stale, s.done = state["index"], state["best"], state["stale"], state["done"]
        return s


def lr_schedule_step(schedule: LRSchedule, history) -> LRSchedule:
    """Feed the newest validation error of ``history`` to ``schedule``."""
    return schedule.observe(float(history[-1]))


class SGD:
    """Momentum SGD: ``v = m v - lr (g + wd p)``, ``p += v``.

    Weight decay touches only conv/dense weights; pooling parameters and biases
    are not decayed.  Mixing proportions are clipped to [0, 1] after each step.
    """

    def __init__(self, schedule: LRSchedule | None = None, momentum: float = 0.9,
                 weight_decay: float = 0.0005):
        self.schedule = schedule or LRSchedule()
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, net: Network) -> None:
        lr = self.schedule.lr
        for key, layer, name in net.named_params():
            p, g = layer.params[name], layer.grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{key}: gradient shape {g.shape} != parameter shape {p.shape}")
            v = self.velocity.get(key)
            if v is None:
                v = self.velocity[key] = np.zeros_like(p)
            wd = self.weight_decay if name in layer.decay else 0.0
            sgd_step(p, g, v, lr, self.momentum, wd)
        for layer in net.layers:
            layer.post_step()
        self.steps += 1


def sgd_step(params: np.ndarray, grads: np.ndarray, velocity: np.ndarray, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """In-place update of one parameter array; the arithmetic used by :class:`SGD`."""
    if params.shape != grads.shape or params.shape != velocity.shape:
        raise ValueError("params, grads and velocity must share a shape")
    g = grads + weight_decay * params if weight_decay else grads
    velocity *= momentum
    velocity -= lr * g
    params += velocity
