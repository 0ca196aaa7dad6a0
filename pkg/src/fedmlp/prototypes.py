"""Class prototypes, their server-side aggregation, and k-means semantic prototypes."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np


@dataclass
class LocalPrototypeSet:
    client_id: int
    stage: int
    protos: Dict[int, np.ndarray] = field(default_factory=dict)
    counts: Dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.protos)

    def classes(self) -> List[int]:
        return sorted(self.protos)

    def matrix(self) -> np.ndarray:
        return np.stack([self.protos[k] for k in self.classes()])


@dataclass
class GlobalPrototypeSet:
    protos: Dict[int, np.ndarray] = field(default_factory=dict)
    contributing_clients: Dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.protos)

    def classes(self) -> List[int]:
        return sorted(self.protos)

    def matrix(self) -> np.ndarray:
        return np.stack([self.protos[k] for k in self.classes()])


@dataclass
class SemanticPrototypeSet:
    centroids: np.ndarray
    assignment: Dict[int, int]
    scope: str = "points"
    clamped: bool = False
    objective_trace: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.centroids)

    @property
    def cluster_of_class(self) -> Dict[int, int]:
        return self.assignment


def compute_class_prototype(features_of_class) -> np.ndarray:
    z = np.atleast_2d(np.asarray(features_of_class, dtype=np.float64))
    if z.shape[0] == 0:
        raise ValueError("cannot build a prototype from zero samples")
    return z.mean(axis=0)


def local_prototypes(client_id: int, stage: int, feats: np.ndarray, labels: np.ndarray) -> LocalPrototypeSet:
    out = LocalPrototypeSet(client_id, stage)
    for k in np.unique(labels):
        rows = labels == k
        out.protos[int(k)] = compute_class_prototype(feats[rows])
        out.counts[int(k)] = int(rows.sum())
    return out


def _report_key(r: LocalPrototypeSet):
    # content bytes break ties so duplicate ids still sort canonically
    return (r.client_id, r.stage, tuple((k, r.protos[k].tobytes(), r.counts.get(k, 0)) for k in r.classes()))


def aggregate_global(reports: Sequence[LocalPrototypeSet], previous: Optional[GlobalPrototypeSet] = None,
                     weighted: bool = False) -> GlobalPrototypeSet:
    """Per-class unweighted mean over the reporting clients; unreported classes keep ``previous``.

    ``weighted=True`` switches to a sample-count-weighted mean (ablation only).
    """
    out = GlobalPrototypeSet()
    if previous is not None:
        out.protos = {k: np.array(v) for k, v in previous.protos.items()}
        out.contributing_clients = dict(previous.contributing_clients)
    ordered = sorted(reports, key=_report_key)
    per_class: Dict[int, list] = {}
    for r in ordered:
        for k in r.classes():
            per_class.setdefault(k, []).append((r.protos[k], r.counts.get(k, 1)))
    for k in sorted(per_class):
        vecs = np.stack([v for v, _ in per_class[k]])
        if weighted:
            w = np.array([c for _, c in per_class[k]], dtype=np.float64)
            agg = (w / w.sum()) @ vecs
        else:
            agg = vecs.sum(axis=0) / len(vecs)
        out.protos[k] = agg
        out.contributing_clients[k] = len(vecs)
    return out


# -- k-means ----------------------------------------------------------------

def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def nearest_centroid(points, centroids) -> np.ndarray:
    """Index of the closest centroid per row; ties go to the lowest index."""
    return np.argmin(_sq_dists(np.atleast_2d(points), np.atleast_2d(centroids)), axis=1)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def sse(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = points - centroids[labels]
    return float((diff * diff).sum())


def _lloyd(points, centroids, max_iters, tol):
    trace = []
    labels = nearest_centroid(points, centroids)
    trace.append(sse(points, centroids, labels))
    for _ in range(max_iters):
        new = np.empty_like(centroids)
        for j in range(len(centroids)):
            members = points[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the point worst served by its centroid
                far = int(np.argmax(((points - centroids[labels]) ** 2).sum(axis=1)))
                new[j] = points[far]
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        labels = nearest_centroid(points, centroids)
        trace.append(sse(points, centroids, labels))
        if shift < tol:
            break
    return centroids, labels, trace


def kmeans(points, k: int, seed, max_iters: int = 50, tol: float = 1e-6, n_init: int = 10,
           keys: Optional[Sequence[int]] = None, scope: str = "points") -> SemanticPrototypeSet:
    """k-means++ seeded Lloyd iterations; the lowest-SSE of ``n_init`` restarts is kept.

    ``assignment`` maps ``keys[i]`` (default: the row index) to a centroid index.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(points)
    if n == 0:
        raise ValueError("kmeans needs at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")
    clamped = k > n
    k = min(k, n)
    keys = list(range(n)) if keys is None else [int(c) for c in keys]
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = kmeans_pp_init(points, k, rng)
        centroids, labels, trace = _lloyd(points, init, max_iters, tol)
        if best is None or trace[-1] < best[2][-1]:
            best = (centroids, labels, trace)
    centroids, labels, trace = best
    assignment = {key: int(lab) for key, lab in zip(keys, labels)}
    return SemanticPrototypeSet(centroids, assignment, scope, clamped, trace)


def brute_force_min_sse(points, k: int) -> float:
    """Exhaustive minimum within-cluster SSE over every assignment to at most ``k`` clusters."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(points)
    best = math.inf
    # canonical labelings: first point in cluster 0, each new label is at most max-so-far + 1
    for rest in itertools.product(range(k), repeat=n - 1):
        labels = (0,) + rest
        ok, top = True, 0
        for lab in rest:
            if lab > top + 1:
                ok = False
                break
            top = max(top, lab)
        if not ok:
            continue
        lab = np.array(labels)
        total = 0.0
        for j in set(labels):
            members = points[lab == j]
            total += float(((members - members.mean(axis=0)) ** 2).sum())
        best = min(best, total)
    return best


def default_local_clusters(num_classes: int) -> int:
    return max(2, math.ceil(num_classes / 3))


def default_global_clusters(num_classes: int) -> int:
    return max(2, math.ceil(num_classes / 5))


def local_semantic(protos: LocalPrototypeSet, u: int, seed) -> SemanticPrototypeSet:
    if len(protos) == 0:
        raise ValueError("no local prototypes to cluster")
    classes = protos.classes()
    return kmeans(protos.matrix(), min(u, len(classes)), seed, keys=classes, scope="local")


def global_semantic(global_set: GlobalPrototypeSet, v: int, seed) -> SemanticPrototypeSet:
    if len(global_set) == 0:
        return SemanticPrototypeSet(np.zeros((0, 0)), {}, "global")
    classes = global_set.classes()
    return kmeans(global_set.matrix(), min(v, len(classes)), seed, keys=classes, scope="global")


def minority_classes(class_counts: Mapping[int, int]) -> frozenset:
    """Lower half of classes by sample count (floor(|K|/2) of them); ties favour smaller ids."""
    order = sorted(class_counts, key=lambda k: (class_counts[k], k))
    return frozenset(int(k) for k in order[: len(order) // 2])


def resolve_reference(class_k: int, previous_protos: Mapping[int, np.ndarray],
                      local_semantic_set: Optional[SemanticPrototypeSet], sample_z) -> Optional[np.ndarray]:
    """Stored prototype for a class with history, else the nearest local semantic centroid.

    Returns None when the class is new and there are no centroids to fall back on.
    """
    if class_k in previous_protos:
        return previous_protos[class_k]
    if local_semantic_set is None or len(local_semantic_set) == 0:
        return None
    j = int(nearest_centroid(np.asarray(sample_z, dtype=np.float64), local_semantic_set.centroids)[0])
    return local_semantic_set.centroids[j]


# -- JSON snapshots -----------------------------------------------------------

def snapshot_json(protos: Mapping[int, np.ndarray], **meta) -> str:
    """``{"meta": {...}, "prototypes": {"<class_id>": [floats]}}`` with sorted class ids."""
    body = {"meta": meta, "prototypes": {str(k): [float(x) for x in protos[k]] for k in sorted(protos)}}
    return json.dumps(body, sort_keys=True)


def load_snapshot_json(text: str) -> Dict[int, np.ndarray]:
    body = json.loads(text)
    return {int(k): np.array(v, dtype=np.float64) for k, v in body["prototypes"].items()}
