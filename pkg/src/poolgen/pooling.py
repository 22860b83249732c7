"""Pooling operators with hand-derived backward passes.

Every operator works on the ``(n, c, out_h, out_w, N)`` region array produced
by :func:`poolgen.tensor.extract_regions`.  Learnable parameters carry a
leading *group* shape: ``(1, 1, 1)`` for one group per layer, or
``(channels, out_h, out_w)`` for one group per layer/channel/region.  The group
shape broadcasts against the region grid, so both granularities share one code
path and parameter gradients are sums over the broadcast axes.

Conventions
-----------
* Padded slots hold 0.0 for every operator, and averages divide by the full N.
* Max ties resolve to the first slot in row-major region order.
* Reductions over the slot axis run left to right (``seq_sum``/``seq_dot``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .tensor import (
    PoolGeometry,
    as_tensor,
    extract_regions,
    scatter_regions,
    seq_dot,
    seq_sum,
    sigmoid,
)


class GranularityKind(str, Enum):
    PER_LAYER = "layer"
    PER_LAYER_CHANNEL_REGION = "layer_channel_region"


@dataclass(frozen=True)
class Granularity:
    kind: GranularityKind = GranularityKind.PER_LAYER
    pc: int = 1
    ph: int = 1
    pw: int = 1

    @classmethod
    def per_layer(cls) -> "Granularity":
        return cls(GranularityKind.PER_LAYER)

    @classmethod
    def per_region(cls, pc: int, ph: int, pw: int) -> "Granularity":
        return cls(GranularityKind.PER_LAYER_CHANNEL_REGION, pc, ph, pw)

    @property
    def group_shape(self) -> tuple[int, int, int]:
        if self.kind == GranularityKind.PER_LAYER:
            return (1, 1, 1)
        return (self.pc, self.ph, self.pw)

    @property
    def groups(self) -> int:
        pc, ph, pw = self.group_shape
        return pc * ph * pw

    def check(self, c: int, oh: int, ow: int) -> None:
        if self.kind == GranularityKind.PER_LAYER:
            return
        if (self.pc, self.ph, self.pw) != (c, oh, ow):
            raise ValueError(
                f"granularity mismatch: parameters cover (pc, ph, pw)="
                f"{(self.pc, self.ph, self.pw)} but the layer produces {(c, oh, ow)}"
            )


def _reduce_to_group(g: np.ndarray, group_shape) -> np.ndarray:
    """Sum a per-region array ``(n, c, oh, ow, *rest)`` down to ``group_shape + rest``."""
    out = g.sum(axis=0)
    for axis, size in enumerate(group_shape):
        if size == 1:
            out = out.sum(axis=axis, keepdims=True)
    return out


@dataclass
class MixedParams:
    """Mixing proportions ``a`` with shape ``granularity.group_shape``."""

    a: np.ndarray
    granularity: Granularity = field(default_factory=Granularity.per_layer)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64).reshape(self.granularity.group_shape)

    @classmethod
    def init(cls, granularity: Granularity | None = None, value: float = 0.5) -> "MixedParams":
        granularity = granularity or Granularity.per_layer()
        return cls(np.full(granularity.group_shape, float(value)), granularity)


@dataclass
class GatedParams:
    """Gating masks ``omega`` with shape ``group_shape + (N,)``."""

    omega: np.ndarray
    granularity: Granularity = field(default_factory=Granularity.per_layer)

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if self.omega.ndim == 1:
            self.omega = np.broadcast_to(
                self.omega, self.granularity.group_shape + self.omega.shape
            ).copy()
        if self.omega.shape[:3] != self.granularity.group_shape:
            raise ValueError(f"omega shape {self.omega.shape} does not match granularity")
        if not np.all(np.isfinite(self.omega)):
            raise ValueError("gating mask contains non-finite entries")

    @property
    def n(self) -> int:
        return self.omega.shape[-1]

    @classmethod
    def init(cls, n: int, granularity: Granularity | None = None,
             std: float = 0.5, seed: int = 0) -> "GatedParams":
        granularity = granularity or Granularity.per_layer()
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, granularity.group_shape + (n,)), granularity)


def tree_layout(levels: int) -> tuple[int, int, dict[int, tuple[int, int]]]:
    """Node bookkeeping for a complete binary tree with ``levels`` levels.

    Leaves are nodes ``0 .. L-1`` left to right; internal nodes follow, built
    bottom-up and left to right, so the root is the last node.  For two levels
    this is leaves 0, 1 and root 2.  Returns ``(L, I, children)``.
    """
    if levels < 2:
        raise ValueError(f"tree pooling needs at least 2 levels, got {levels}")
    n_leaves = 2 ** (levels - 1)
    children: dict[int, tuple[int, int]] = {}
    layer = list(range(n_leaves))
    nxt = n_leaves
    while len(layer) > 1:
        parents = []
        for k in range(0, len(layer), 2):
            children[nxt] = (layer[k], layer[k + 1])
            parents.append(nxt)
            nxt += 1
        layer = parents
    return n_leaves, n_leaves - 1, children


@dataclass
class TreeParams:
    """Leaf filters ``v`` (``group + (L, N)``) and internal masks ``omega`` (``group + (L-1, N)``)."""

    levels: int
    v: np.ndarray
    omega: np.ndarray
    granularity: Granularity = field(default_factory=Granularity.per_layer)

    def __post_init__(self):
        n_leaves, n_internal, _ = tree_layout(self.levels)
        g = self.granularity.group_shape
        self.v = np.asarray(self.v, dtype=np.float64)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if self.v.ndim == 2:
            self.v = np.broadcast_to(self.v, g + self.v.shape).copy()
        if self.omega.ndim == 2:
            self.omega = np.broadcast_to(self.omega, g + self.omega.shape).copy()
        if self.v.shape[:4] != g + (n_leaves,):
            raise ValueError(f"expected {n_leaves} leaf filters, got v shape {self.v.shape}")
        if self.omega.shape[:4] != g + (n_internal,):
            raise ValueError(f"expected {n_internal} gating masks, got omega shape {self.omega.shape}")
        if self.v.shape[-1] != self.omega.shape[-1]:
            raise ValueError("leaf filters and gating masks differ in length")

    @property
    def n(self) -> int:
        return self.v.shape[-1]

    @classmethod
    def init(cls, n: int, levels: int = 2, granularity: Granularity | None = None,
             std: float = 0.5, seed: int = 0) -> "TreeParams":
        granularity = granularity or Granularity.per_layer()
        n_leaves, n_internal, _ = tree_layout(levels)
        rng = np.random.default_rng(seed)
        g = granularity.group_shape
        v = rng.normal(0.0, std, g + (n_leaves, n))
        omega = rng.normal(0.0, std, g + (n_internal, n))
        return cls(levels, v, omega, granularity)


@dataclass
class PoolCache:
    kind: str
    geom: PoolGeometry
    in_shape: tuple[int, int, int, int]
    regions: Optional[np.ndarray] = None
    argmax: Optional[np.ndarray] = None
    max: Optional[np.ndarray] = None
    avg: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    nodes: Optional[np.ndarray] = None
    sampled: Optional[np.ndarray] = None
    total: Optional[np.ndarray] = None
    output: Optional[np.ndarray] = None
    mode: str = "train"

    @property
    def out_shape(self) -> tuple[int, ...]:
        n, c = self.in_shape[:2]
        return (n, c) + self.geom.output_hw(*self.in_shape[2:])


def _prepare(x, geom: PoolGeometry):
    x = as_tensor(x, "input")
    return x, extract_regions(x, geom)


def _check_grad(grad_out, cache: PoolCache, kind: str | tuple[str, ...]) -> np.ndarray:
    kinds = (kind,) if isinstance(kind, str) else kind
    if cache.kind not in kinds:
        raise ValueError(f"cache from '{cache.kind}' pooling passed to {kinds[0]} backward")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.out_shape:
        raise ValueError(f"grad_out shape {grad_out.shape} != pooled shape {cache.out_shape}")
    return grad_out


def _max_and_argmax(regions: np.ndarray):
    idx = np.argmax(regions, axis=-1)
    mx = np.take_along_axis(regions, idx[..., None], axis=-1)[..., 0]
    return mx, idx


def _onehot(idx: np.ndarray, n: int) -> np.ndarray:
    return (np.arange(n) == idx[..., None]).astype(np.float64)


def _scatter(g_regions, cache: PoolCache) -> np.ndarray:
    return scatter_regions(g_regions, cache.in_shape, cache.geom)


# -- average / max ----------------------------------------------------------

def avg_pool_forward(x, geom: PoolGeometry):
    x, r = _prepare(x, geom)
    avg = seq_sum(r) / geom.n
    return avg, PoolCache("avg", geom, x.shape, avg=avg)


def avg_pool_backward(grad_out, cache: PoolCache) -> np.ndarray:
    d = _check_grad(grad_out, cache, "avg")
    n = cache.geom.n
    g = np.broadcast_to(d[..., None] * (1.0 / n), d.shape + (n,))
    return _scatter(g, cache)


def max_pool_forward(x, geom: PoolGeometry):
    x, r = _prepare(x, geom)
    mx, idx = _max_and_argmax(r)
    return mx, PoolCache("max", geom, x.shape, argmax=idx, max=mx)


def max_pool_backward(grad_out, cache: PoolCache) -> np.ndarray:
    d = _check_grad(grad_out, cache, "max")
    g = d[..., None] * _onehot(cache.argmax, cache.geom.n)
    return _scatter(g, cache)


# -- stochastic -------------------------------------------------------------

def stochastic_pool_forward(x, geom: PoolGeometry, mode: str = "train", seed: int = 0):
    """Train: sample slot i with probability x_i / sum(x) (uniform when the sum is 0).
    Test: probability-weighted average sum(x_i * p_i).
    """
    x, r = _prepare(x, geom)
    if np.any(x < 0):
        raise ValueError("stochastic pooling requires non-negative activations")
    n = geom.n
    cum = np.cumsum(r, axis=-1)
    total = cum[..., -1]
    if mode == "train":
        u = np.random.default_rng(seed).random(total.shape)
        thresh = u * total
        above = cum > thresh[..., None]
        idx = np.argmax(above, axis=-1)
        # u * total can round up to total itself; fall back to the last positive slot
        none = ~above.any(axis=-1) & (total > 0)
        if np.any(none):
            last_pos = n - 1 - np.argmax((r > 0)[..., ::-1], axis=-1)
            idx = np.where(none, last_pos, idx)
        zero = total == 0
        if np.any(zero):
            idx = np.where(zero, np.minimum((u * n).astype(np.int64), n - 1), idx)
        out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
        return out, PoolCache("stochastic", geom, x.shape, sampled=idx, mode="train")
    if mode == "test":
        safe = np.where(total > 0, total, 1.0)
        p = r / safe[..., None]
        out = seq_sum(r * p)
        return out, PoolCache("stochastic", geom, x.shape, regions=r, output=out,
                              total=total, mode="test")
    raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")


def stochastic_pool_backward(grad_out, cache: PoolCache) -> np.ndarray:
    """Train mode routes the gradient to the sampled slot.

    Test mode differentiates sum(x_i^2) / sum(x): d/dx_j = (2 x_j - out) / sum(x),
    taken as 0 on all-zero regions.
    """
    d = _check_grad(grad_out, cache, "stochastic")
    if cache.mode == "train":
        g = d[..., None] * _onehot(cache.sampled, cache.geom.n)
    else:
        total = cache.total
        safe = np.where(total > 0, total, 1.0)
        local = (2.0 * cache.regions - cache.output[..., None]) / safe[..., None]
        local = np.where((total > 0)[..., None], local, 0.0)
        g = d[..., None] * local
    return _scatter(g, cache)


# -- mixed max-average ------------------------------------------------------

def project_params(params: MixedParams) -> MixedParams:
    """Clip every mixing proportion into [0, 1]."""
    return MixedParams(np.clip(params.a, 0.0, 1.0), params.granularity)


def mixed_pool_forward(x, geom: PoolGeometry, params: MixedParams):
    x, r = _prepare(x, geom)
    params.granularity.check(x.shape[1], r.shape[2], r.shape[3])
    a = params.a
    mx, idx = _max_and_argmax(r)
    avg = seq_sum(r) / geom.n
    out = a * mx + (1 - a) * avg
    return out, PoolCache("mixed", geom, x.shape, argmax=idx, max=mx, avg=avg)


def mixed_pool_backward(grad_out, cache: PoolCache, params: MixedParams):
    """Returns ``(grad_input, grad_a)``.

    grad_a sums delta * (max - avg) over the regions of each group; each input
    slot receives delta * (a * [slot is argmax] + (1 - a) / N).
    """
    d = _check_grad(grad_out, cache, "mixed")
    a = params.a
    n = cache.geom.n
    grad_a = _reduce_to_group(d * (cache.max - cache.avg), params.granularity.group_shape)
    local = a[..., None] * _onehot(cache.argmax, n) + ((1 - a) / n)[..., None]
    return _scatter(d[..., None] * local, cache), grad_a


def fifty_fifty_pool_forward(x, geom: PoolGeometry):
    """Fixed, non-learned 0.5 * max + 0.5 * avg."""
    out, cache = mixed_pool_forward(x, geom, MixedParams.init(value=0.5))
    return out, cache


def fifty_fifty_pool_backward(grad_out, cache: PoolCache) -> np.ndarray:
    return mixed_pool_backward(grad_out, cache, MixedParams.init(value=0.5))[0]


# -- gated max-average ------------------------------------------------------

def gated_pool_forward(x, geom: PoolGeometry, params: GatedParams):
    x, r = _prepare(x, geom)
    if params.n != geom.n:
        raise ValueError(f"gating mask length {params.n} != region size {geom.n}")
    params.granularity.check(x.shape[1], r.shape[2], r.shape[3])
    s = sigmoid(seq_dot(r, params.omega))
    mx, idx = _max_and_argmax(r)
    avg = seq_sum(r) / geom.n
    out = s * mx + (1 - s) * avg
    return out, PoolCache("gated", geom, x.shape, regions=r, argmax=idx, max=mx,
                          avg=avg, sigma=s)


def gated_pool_backward(grad_out, cache: PoolCache, params: GatedParams):
    """Returns ``(grad_input, grad_omega)``."""
    d = _check_grad(grad_out, cache, "gated")
    s = cache.sigma
    n = cache.geom.n
    spread = s * (1 - s) * (cache.max - cache.avg)
    grad_omega = _reduce_to_group((d * spread)[..., None] * cache.regions,
                                  params.granularity.group_shape)
    local = (spread[..., None] * params.omega
             + s[..., None] * _onehot(cache.argmax, n)
             + ((1 - s) / n)[..., None])
    return _scatter(d[..., None] * local, cache), grad_omega


# -- tree -------------------------------------------------------------------

def tree_pool_forward(x, geom: PoolGeometry, params: TreeParams):
    """Evaluate the gated binary tree bottom-up for every region.

    ``cache.nodes`` holds every node's output (leaves first, root last) and
    ``cache.sigma`` every internal gate, both indexed as in :func:`tree_layout`.
    """
    x, r = _prepare(x, geom)
    if params.n != geom.n:
        raise ValueError(f"tree vectors have length {params.n}, region size is {geom.n}")
    params.granularity.check(x.shape[1], r.shape[2], r.shape[3])
    n_leaves, n_internal, children = tree_layout(params.levels)
    rx = r[..., None, :]
    leaves = seq_dot(rx, params.v)
    sig = sigmoid(seq_dot(rx, params.omega))
    nodes = np.empty(leaves.shape[:4] + (n_leaves + n_internal,))
    nodes[..., :n_leaves] = leaves
    for m, (left, right) in children.items():
        s = sig[..., m - n_leaves]
        nodes[..., m] = s * nodes[..., left] + (1 - s) * nodes[..., right]
    out = nodes[..., -1].copy()
    return out, PoolCache("tree", geom, x.shape, regions=r, sigma=sig, nodes=nodes)


def tree_pool_backward(grad_out, cache: PoolCache, params: TreeParams):
    """Returns ``(grad_input, grad_v, grad_omega)`` by recursive chain rule.

    Walking down from the root, ``path`` is delta times the product of the gate
    factors (s on left branches, 1 - s on right).  A leaf's filter gradient is
    ``path * x``; an internal mask gradient is ``path * s(1-s) * (f_left - f_right) * x``.
    The input Jacobian is built bottom-up as
    ``J_m = s(1-s)(f_left - f_right) omega_m + s J_left + (1-s) J_right`` with
    ``J_leaf = v``, and the input gradient is ``delta * J_root``.
    """
    d = _check_grad(grad_out, cache, "tree")
    n_leaves, n_internal, children = tree_layout(params.levels)
    r, sig, nodes = cache.regions, cache.sigma, cache.nodes
    gv = np.empty(d.shape + (n_leaves, r.shape[-1]))
    gw = np.empty(d.shape + (n_internal, r.shape[-1]))

    def visit(m: int, path: np.ndarray) -> np.ndarray:
        if m < n_leaves:
            gv[..., m, :] = path[..., None] * r
            return params.v[..., m, :]
        j = m - n_leaves
        left, right = children[m]
        s = sig[..., j]
        j_left = visit(left, path * s)
        j_right = visit(right, path * (1 - s))
        gate = s * (1 - s) * (nodes[..., left] - nodes[..., right])
        gw[..., j, :] = (path * gate)[..., None] * r
        return gate[..., None] * params.omega[..., j, :] + s[..., None] * j_left + (1 - s)[..., None] * j_right

    jac = visit(n_leaves + n_internal - 1, d)
    gshape = params.granularity.group_shape
    grad_v = _reduce_to_group(gv, gshape)
    grad_omega = _reduce_to_group(gw, gshape)
    return _scatter(d[..., None] * jac, cache), grad_v, grad_omega


def tree2_pool_backward_closed_form(grad_out, cache: PoolCache, params: TreeParams):
    """Two-level tree gradients written out directly (leaves 0, 1; root gate 2).

    dE/dv1 = delta s x,  dE/dv2 = delta (1-s) x,
    dE/dw3 = delta s(1-s) (v1.x - v2.x) x,
    dE/dx  = delta [s(1-s) (v1.x - v2.x) w3 + s v1 + (1-s) v2].
    """
    if params.levels != 2:
        raise ValueError("closed form applies to 2-level trees only")
    d = _check_grad(grad_out, cache, "tree")
    r, nodes = cache.regions, cache.nodes
    s = cache.sigma[..., 0]
    v1, v2, w3 = params.v[..., 0, :], params.v[..., 1, :], params.omega[..., 0, :]
    diff = s * (1 - s) * (nodes[..., 0] - nodes[..., 1])
    gv = np.stack([(d * s)[..., None] * r, (d * (1 - s))[..., None] * r], axis=-2)
    gw = ((d * diff)[..., None] * r)[..., None, :]
    local = diff[..., None] * w3 + s[..., None] * v1 + (1 - s)[..., None] * v2
    gshape = params.granularity.group_shape
    return (_scatter(d[..., None] * local, cache),
            _reduce_to_group(gv, gshape),
            _reduce_to_group(gw, gshape))
