"""Two-part model (MLP feature extractor + affine classifier), local losses and SGD.

The extractor maps x -> relu(x W1 + b1) W2 + b2 = z; the classifier maps z -> z Wc + bc.
Gradients are written out by hand; ``check_gradients`` compares them with central
finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .prototypes import nearest_centroid

LOG_FLOOR = 1e-12

EXTRACTOR_KEYS = ("w1", "b1", "w2", "b2")
CLASSIFIER_KEYS = ("wc", "bc")


@dataclass
class ModelParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wc: np.ndarray
    bc: np.ndarray

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w2.shape[1]

    @property
    def num_classes(self) -> int:
        return self.wc.shape[1]

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def map(self, fn) -> "ModelParams":
        return ModelParams(**{k: fn(v) for k, v in self.items()})

    def copy(self) -> "ModelParams":
        return self.map(np.array)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def num_values(self) -> int:
        return sum(v.size for _, v in self.items())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for _, v in self.items())


def init_params(d_in: int, hidden: int, feature_dim: int, num_classes: int, seed) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams(
        w1=rng.standard_normal((d_in, hidden)) * np.sqrt(2.0 / d_in),
        b1=np.zeros(hidden),
        w2=rng.standard_normal((hidden, feature_dim)) * np.sqrt(2.0 / hidden),
        b2=np.zeros(feature_dim),
        wc=rng.standard_normal((feature_dim, num_classes)) * np.sqrt(1.0 / feature_dim),
        bc=np.zeros(num_classes),
    )


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 32
    kl_temperature: float = 1.0
    smooth_l1_delta: float = 1.0
    distance_reduction: str = "sum"


@dataclass
class ProtoContext:
    """Prototype knowledge a client trains against; all fields are read-only snapshots."""

    global_protos: Dict[int, np.ndarray] = field(default_factory=dict)
    semantic_centroids: Optional[np.ndarray] = None
    cluster_of_class: Dict[int, int] = field(default_factory=dict)
    minority: frozenset = frozenset()
    reference_protos: Dict[int, np.ndarray] = field(default_factory=dict)
    local_centroids: Optional[np.ndarray] = None
    use_prototype: bool = False
    use_intertask: bool = False
    use_semantic: bool = False
    proto_metric: str = "smooth_l1"
    intertask_init: str = "sample"


@dataclass
class LossBreakdown:
    l_c: float
    l_p: float
    l_i: float
    l_s: float
    total: float
    unmapped_minority: int = 0


def _softmax(a: np.ndarray) -> np.ndarray:
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(a: np.ndarray) -> np.ndarray:
    a = a - a.max(axis=-1, keepdims=True)
    return a - np.log(np.exp(a).sum(axis=-1, keepdims=True))


def _forward(params: ModelParams, x: np.ndarray):
    h_pre = x @ params.w1 + params.b1
    h = np.maximum(h_pre, 0.0)
    z = h @ params.w2 + params.b2
    logits = z @ params.wc + params.bc
    return h_pre, h, z, logits


def forward(params: ModelParams, x):
    """Return (z, logits, probs) for one input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d_in:
        raise ValueError(f"input dimension {x.shape[-1]} != model d_in {params.d_in}")
    _, _, z, logits = _forward(params, np.atleast_2d(x))
    probs = _softmax(logits)
    if x.ndim == 1:
        return z[0], logits[0], probs[0]
    return z, logits, probs


def features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return _forward(params, np.atleast_2d(x))[2]


def logits_of(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return _forward(params, np.atleast_2d(x))[3]


# -- loss terms -------------------------------------------------------------

def cross_entropy(probs, y) -> float:
    """Mean of -log p[y] over the batch, with p floored at 1e-12."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    p = np.maximum(probs[np.arange(y.size), y], LOG_FLOOR)
    return float(-np.log(p).mean())


def _huber(diff: np.ndarray, delta: float):
    a = np.abs(diff)
    inside = a < delta
    value = np.where(inside, 0.5 * diff * diff, delta * (a - 0.5 * delta))
    slope = np.where(inside, diff, delta * np.sign(diff))
    return value, slope


def smooth_l1(z, c, delta: float = 1.0) -> float:
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if z.shape != c.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {c.shape}")
    return float(_huber(z - c, delta)[0].sum())


def _targets(y: np.ndarray, table: Dict[int, np.ndarray], dim: int):
    mask = np.array([int(k) in table for k in y], dtype=bool)
    targets = np.zeros((y.size, dim))
    for i in np.flatnonzero(mask):
        targets[i] = table[int(y[i])]
    return targets, mask


def _masked_distance(z, targets, mask, metric: str, delta: float, reduction: str = "sum"):
    """Mean over masked rows of a per-row distance, with d(loss)/dz.

    ``reduction`` says how a row's Smooth-L1 is reduced over feature dimensions.
    """
    n = int(mask.sum())
    dz = np.zeros_like(z)
    if n == 0:
        return 0.0, dz
    diff = z[mask] - targets[mask]
    if metric == "smooth_l1":
        value, slope = _huber(diff, delta)
        scale = n if reduction == "sum" else n * z.shape[1]
        dz[mask] = slope / scale
        return float(value.sum() / scale), dz
    if metric == "mse":
        d = z.shape[1]
        dz[mask] = 2.0 * diff / (d * n)
        return float((diff * diff).sum() / (d * n)), dz
    raise ValueError(f"unknown distance {metric!r}")


def _prototype_term(z, y, global_protos, delta, metric="smooth_l1", reduction="sum"):
    targets, mask = _targets(y, global_protos, z.shape[1])
    return _masked_distance(z, targets, mask, metric, delta, reduction)


def loss_prototype(batch_z, batch_y, global_protos: Dict[int, np.ndarray], delta: float = 1.0) -> float:
    """Smooth-L1 pull toward each sample's global class prototype; classes without one are skipped."""
    z = np.atleast_2d(np.asarray(batch_z, dtype=np.float64))
    return _prototype_term(z, np.atleast_1d(batch_y), global_protos, delta)[0]


def _semantic_term(z, y, centroids, cluster_of_class, minority, delta, reduction="sum"):
    table = {}
    unmapped = 0
    if centroids is not None and len(centroids):
        for k in minority:
            if k in cluster_of_class:
                table[k] = centroids[cluster_of_class[k]]
    for k in y:
        if int(k) in minority and int(k) not in table:
            unmapped += 1
    loss, dz = _prototype_term(z, y, table, delta, reduction=reduction)
    return loss, dz, unmapped


def loss_semantic(batch_z, batch_y, global_semantic_protos, cluster_of_class, minority_set,
                  delta: float = 1.0, diagnostics: dict | None = None) -> float:
    """Smooth-L1 pull of minority-class samples toward their class's global semantic centroid."""
    z = np.atleast_2d(np.asarray(batch_z, dtype=np.float64))
    centroids = None if global_semantic_protos is None else np.atleast_2d(global_semantic_protos)
    loss, _, unmapped = _semantic_term(z, np.atleast_1d(batch_y), centroids, cluster_of_class,
                                       frozenset(minority_set), delta)
    if diagnostics is not None:
        diagnostics["unmapped_minority"] = diagnostics.get("unmapped_minority", 0) + unmapped
    return loss


def intertask_references(z, y, reference_protos, local_centroids, init: str = "sample"):
    """Per-sample reference vectors: stored prototype if the class has history, else nearest local centroid."""
    targets, mask = _targets(y, reference_protos, z.shape[1])
    if local_centroids is None or len(local_centroids) == 0:
        return targets, mask
    new = ~mask
    if not new.any():
        return targets, mask
    if init == "sample":
        idx = nearest_centroid(z[new], local_centroids)
        targets[new] = local_centroids[idx]
    elif init == "class_mean":
        for k in np.unique(y[new]):
            rows = new & (y == k)
            j = nearest_centroid(z[rows].mean(axis=0, keepdims=True), local_centroids)[0]
            targets[rows] = local_centroids[j]
    else:
        raise ValueError(f"unknown intertask init {init!r}")
    return targets, np.ones_like(mask)


def _kl_term(z, targets, mask, tau):
    n = int(mask.sum())
    dz = np.zeros_like(z)
    if n == 0:
        return 0.0, dz
    zm = z[mask] / tau
    log_p = _log_softmax(zm)
    log_q = _log_softmax(targets[mask] / tau)
    p = np.exp(log_p)
    g = log_p - log_q
    kl = (p * g).sum(axis=1)
    dz[mask] = p * (g - kl[:, None]) / (tau * n)
    return float(kl.sum() / n), dz


def loss_intertask(batch_z, batch_y, reference_protos, kl_temperature: float = 1.0,
                   local_centroids=None, init: str = "sample") -> float:
    """KL(softmax(z/tau) || softmax(ref/tau)) averaged over samples that have a reference."""
    z = np.atleast_2d(np.asarray(batch_z, dtype=np.float64))
    targets, mask = intertask_references(z, np.atleast_1d(batch_y), reference_protos, local_centroids, init)
    return _kl_term(z, targets, mask, kl_temperature)[0]


# -- combined objective -----------------------------------------------------

def loss_and_grad(params: ModelParams, x: np.ndarray, y: np.ndarray, ctx: ProtoContext,
                  hyper: Hyperparams, need_grad: bool = True):
    x = np.atleast_2d(x)
    y = np.atleast_1d(y)
    n = y.size
    h_pre, h, z, logits = _forward(params, x)
    log_probs = _log_softmax(logits)
    picked = log_probs[np.arange(n), y]
    floored = picked < np.log(LOG_FLOOR)
    l_c = float(-np.maximum(picked, np.log(LOG_FLOOR)).mean())

    delta = hyper.smooth_l1_delta
    dz_reg = np.zeros_like(z)
    l_p = l_i = l_s = 0.0
    unmapped = 0
    if ctx.use_prototype and ctx.global_protos:
        l_p, dz = _prototype_term(z, y, ctx.global_protos, delta, ctx.proto_metric, hyper.distance_reduction)
        dz_reg += dz
    if ctx.use_intertask and ctx.reference_protos:
        targets, mask = intertask_references(z, y, ctx.reference_protos, ctx.local_centroids, ctx.intertask_init)
        l_i, dz = _kl_term(z, targets, mask, hyper.kl_temperature)
        dz_reg += dz
    if ctx.use_semantic and ctx.minority:
        l_s, dz, unmapped = _semantic_term(z, y, ctx.semantic_centroids, ctx.cluster_of_class, ctx.minority,
                                           delta, hyper.distance_reduction)
        dz_reg += hyper.alpha * dz
    total = l_c + l_p + l_i + hyper.alpha * l_s
    breakdown = LossBreakdown(l_c, l_p, l_i, l_s, total, unmapped)
    if not need_grad:
        return breakdown, None

    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), y] -= 1.0
    dlogits[floored] = 0.0
    dlogits /= n
    dz = dlogits @ params.wc.T + dz_reg
    dh_pre = (dz @ params.w2.T) * (h_pre > 0)
    grads = ModelParams(
        w1=x.T @ dh_pre, b1=dh_pre.sum(axis=0),
        w2=h.T @ dz, b2=dz.sum(axis=0),
        wc=z.T @ dlogits, bc=dlogits.sum(axis=0),
    )
    return breakdown, grads


def total_loss(batch, params: ModelParams, proto_context: ProtoContext, hyper: Hyperparams) -> LossBreakdown:
    x, y = batch
    return loss_and_grad(params, x, y, proto_context, hyper, need_grad=False)[0]


def backward(batch, params: ModelParams, proto_context: ProtoContext, hyper: Hyperparams) -> ModelParams:
    x, y = batch
    return loss_and_grad(params, x, y, proto_context, hyper)[1]


def sgd_step(params: ModelParams, grads: ModelParams, velocity: ModelParams, hyper: Hyperparams):
    """Heavy-ball SGD with L2 weight decay folded into the gradient. Returns (params, velocity)."""
    new_p, new_v = {}, {}
    for name, theta in params.items():
        v = hyper.momentum * getattr(velocity, name) + getattr(grads, name) + hyper.weight_decay * theta
        new_v[name] = v
        new_p[name] = theta - hyper.lr * v
    return ModelParams(**new_p), ModelParams(**new_v)


# -- finite-difference oracle ----------------------------------------------

def numeric_gradient(params: ModelParams, x, y, ctx: ProtoContext, hyper: Hyperparams, h: float = 1e-4) -> ModelParams:
    def f(p):
        return loss_and_grad(p, x, y, ctx, hyper, need_grad=False)[0].total

    out = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + h
            up = f(params)
            value[idx] = orig - h
            down = f(params)
            value[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return ModelParams(**out)


def gradient_relative_error(analytic: ModelParams, numeric: ModelParams, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor) over all parameters."""
    worst = 0.0
    for name, a in analytic.items():
        n = getattr(numeric, name)
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def random_gradcheck_instance(seed: int, use_prototype=True, use_intertask=True, use_semantic=True):
    """Small random model, batch and prototype context for the gradient oracle."""
    rng = np.random.default_rng(seed)
    d_in, hidden, d, k = (int(rng.integers(2, 9)), int(rng.integers(2, 17)),
                          int(rng.integers(2, 9)), int(rng.integers(2, 6)))
    n = int(rng.integers(3, 10))
    params = init_params(d_in, hidden, d, k, rng)
    params.b1 = rng.normal(0, 0.1, hidden)
    x = rng.standard_normal((n, d_in))
    y = rng.integers(0, k, n)
    classes = list(range(k))
    has_proto = [c for c in classes if rng.random() < 0.8]
    global_protos = {c: rng.standard_normal(d) for c in has_proto}
    v = max(1, len(has_proto) // 2)
    centroids = rng.standard_normal((v, d))
    cluster_of_class = {c: int(rng.integers(0, v)) for c in has_proto}
    minority = frozenset(c for c in classes if rng.random() < 0.5) or frozenset([classes[0]])
    reference = {c: rng.standard_normal(d) for c in classes if rng.random() < 0.5}
    if not reference:
        reference = {classes[-1]: rng.standard_normal(d)}
    local_centroids = rng.standard_normal((int(rng.integers(1, 4)), d))
    ctx = ProtoContext(global_protos, centroids, cluster_of_class, minority, reference, local_centroids,
                       use_prototype, use_intertask, use_semantic)
    hyper = Hyperparams(alpha=float(rng.uniform(0.1, 2.0)), kl_temperature=float(rng.uniform(0.5, 2.0)))
    return params, x, y, ctx, hyper


def check_gradients(num_instances: int = 20, seed: int = 0, h: float = 1e-4):
    """Run the finite-difference oracle over all 8 loss-toggle combinations.

    Returns a list of (instance_seed, toggles, relative_error).
    """
    results = []
    combos = [(p, i, s) for p in (False, True) for i in (False, True) for s in (False, True)]
    for j in range(num_instances):
        for toggles in combos:
            inst_seed = seed * 100003 + j
            params, x, y, ctx, hyper = random_gradcheck_instance(inst_seed, *toggles)
            _, analytic = loss_and_grad(params, x, y, ctx, hyper)
            numeric = numeric_gradient(params, x, y, ctx, hyper, h)
            results.append((inst_seed, toggles, gradient_relative_error(analytic, numeric)))
    return results

