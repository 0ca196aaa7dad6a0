"""Round orchestration for FedMLP and the FedAvg / FedProx / FedProto baselines.

Every random draw comes from a generator keyed by (seed, purpose, ids), so results do not
depend on the order in which clients are executed.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import data as D
from .config import ExperimentConfig
from .metrics import MetricsLog, RoundRecord, evaluate_round, final_metrics, forgetting_delta
from .model import (CLASSIFIER_KEYS, EXTRACTOR_KEYS, Hyperparams, ModelParams, ProtoContext,
                    features, init_params, loss_and_grad, sgd_step)
from .prototypes import (GlobalPrototypeSet, LocalPrototypeSet, SemanticPrototypeSet, aggregate_global,
                         default_global_clusters, default_local_clusters, global_semantic,
                         local_prototypes, local_semantic, minority_classes)

log = logging.getLogger(__name__)

# generator purpose tags
_SELECT, _TRAIN, _LOCAL_KMEANS, _GLOBAL_KMEANS, _INIT = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class StrategyConfig:
    name: str = "fedmlp"
    fedprox_mu: float = 0.01
    use_prototype: bool = True
    use_intertask: bool = True
    use_semantic: bool = True
    aggregation_scope: str = "full"
    weighted_protos: bool = False
    intertask_init: str = "sample"

    @property
    def uses_prototypes(self) -> bool:
        if self.name == "fedproto":
            return True
        return self.name == "fedmlp" and (self.use_prototype or self.use_intertask or self.use_semantic)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "StrategyConfig":
        return cls(cfg.strategy, cfg.fedprox_mu, cfg.loss_prototype, cfg.loss_intertask, cfg.loss_semantic,
                   cfg.aggregation_scope, cfg.weighted_protos, cfg.intertask_init)


@dataclass
class RoundReport:
    client_id: int
    params: ModelParams
    prototypes: LocalPrototypeSet
    class_counts: Dict[int, int]
    samples_total: int
    stage: int = 1
    loss_means: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class ServerSnapshot:
    params: ModelParams
    global_protos: Dict[int, np.ndarray]
    semantic: Optional[SemanticPrototypeSet]
    minority: frozenset
    round: int


@dataclass
class ServerState:
    params: ModelParams
    global_protos: GlobalPrototypeSet = field(default_factory=GlobalPrototypeSet)
    semantic: Optional[SemanticPrototypeSet] = None
    minority: frozenset = frozenset()
    stage_counts: Dict[tuple, Dict[int, int]] = field(default_factory=dict)
    classifiers: Dict[int, tuple] = field(default_factory=dict)
    round: int = 0
    seed: int = 0

    @property
    def class_counts(self) -> Dict[int, int]:
        """Samples per class over the latest report of every (client, stage) seen so far."""
        total: Dict[int, int] = {}
        for key in sorted(self.stage_counts):
            for k, n in self.stage_counts[key].items():
                total[k] = total.get(k, 0) + n
        return total

    def snapshot(self) -> ServerSnapshot:
        params = self.params.copy()
        for _, v in params.items():
            v.flags.writeable = False
        protos = {}
        for k, v in self.global_protos.protos.items():
            v = np.array(v)
            v.flags.writeable = False
            protos[k] = v
        return ServerSnapshot(params, protos, self.semantic, self.minority, self.round)

    def global_model(self, scope: str = "full") -> ModelParams:
        """The model scored as A_glo; with extractor-only upload the classifier is the client average."""
        if scope == "full" or not self.classifiers:
            return self.params
        ids = sorted(self.classifiers)
        wc = sum(self.classifiers[m][0] for m in ids) / len(ids)
        bc = sum(self.classifiers[m][1] for m in ids) / len(ids)
        return ModelParams(self.params.w1, self.params.b1, self.params.w2, self.params.b2, wc, bc)


@dataclass
class ClientState:
    client_id: int
    params: ModelParams
    velocity: ModelParams
    stream: D.TaskStream
    stage: int = 1
    history: Dict[int, LocalPrototypeSet] = field(default_factory=dict)
    local_semantic: Optional[SemanticPrototypeSet] = None

    def memory(self, upto_stage: Optional[int] = None) -> LocalPrototypeSet:
        """Latest prototype per class over stored stages (all, or those below ``upto_stage``)."""
        merged = LocalPrototypeSet(self.client_id, self.stage)
        for t in sorted(self.history):
            if upto_stage is not None and t >= upto_stage:
                continue
            merged.protos.update(self.history[t].protos)
            merged.counts.update(self.history[t].counts)
        return merged

    def reference_protos(self) -> Dict[int, np.ndarray]:
        return self.memory(upto_stage=self.stage).protos


def select_clients(all_clients: Sequence[int], m_active: int, seed: int, round_index: int) -> List[int]:
    if m_active < 1:
        raise ValueError("m_active must be >= 1")
    if m_active > len(all_clients):
        raise ValueError(f"cannot select {m_active} of {len(all_clients)} clients")
    rng = np.random.default_rng([seed, _SELECT, round_index])
    picked = rng.choice(np.asarray(all_clients), size=m_active, replace=False)
    return sorted(int(c) for c in picked)


def client_rng(seed: int, client_id: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _TRAIN, client_id, round_index])


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def proto_context(strategy: StrategyConfig, snapshot: ServerSnapshot, client: ClientState) -> ProtoContext:
    if strategy.name == "fedproto":
        return ProtoContext(global_protos=snapshot.global_protos, use_prototype=True, proto_metric="mse")
    if strategy.name != "fedmlp":
        return ProtoContext()
    sem = snapshot.semantic
    return ProtoContext(
        global_protos=snapshot.global_protos,
        semantic_centroids=None if sem is None else sem.centroids,
        cluster_of_class={} if sem is None else sem.assignment,
        minority=snapshot.minority,
        reference_protos=client.reference_protos(),
        local_centroids=None if client.local_semantic is None else client.local_semantic.centroids,
        use_prototype=strategy.use_prototype,
        use_intertask=strategy.use_intertask,
        use_semantic=strategy.use_semantic,
        intertask_init=strategy.intertask_init,
    )


def _scope_keys(scope: str):
    return EXTRACTOR_KEYS if scope == "extractor_only" else EXTRACTOR_KEYS + CLASSIFIER_KEYS


def _sync_from_server(client: ClientState, snapshot: ServerSnapshot, scope: str) -> ModelParams:
    keys = _scope_keys(scope)
    values = {k: (np.array(getattr(snapshot.params, k)) if k in keys else np.array(v))
              for k, v in client.params.items()}
    return ModelParams(**values)


def local_update(client: ClientState, snapshot: ServerSnapshot, strategy: StrategyConfig, rounds_local: int,
                 hyper: Hyperparams, seed: int, u: int = 0) -> RoundReport:
    """Train ``client`` on its current task, refresh its prototype memory, and build the upload."""
    task = client.stream.tasks[client.stage - 1]
    n = len(task)
    if n == 0:
        empty = LocalPrototypeSet(client.client_id, client.stage)
        return RoundReport(client.client_id, client.params.copy(), empty, {}, 0, client.stage,
                           {"l_c": 0.0, "l_p": 0.0, "l_i": 0.0, "l_s": 0.0})

    params = _sync_from_server(client, snapshot, strategy.aggregation_scope)
    velocity = client.velocity
    ctx = proto_context(strategy, snapshot, client)
    prox_keys = _scope_keys(strategy.aggregation_scope) if strategy.name == "fedprox" else ()
    rng = client_rng(seed, client.client_id, snapshot.round)
    sums = np.zeros(4)
    steps = 0
    for _ in range(rounds_local):
        for idx in epoch_batches(n, hyper.batch_size, rng):
            loss, grads = loss_and_grad(params, task.features[idx], task.labels[idx], ctx, hyper)
            for name in prox_keys:
                getattr(grads, name)[...] += strategy.fedprox_mu * (getattr(params, name) - getattr(snapshot.params, name))
            params, velocity = sgd_step(params, grads, velocity, hyper)
            sums += (loss.l_c, loss.l_p, loss.l_i, loss.l_s)
            steps += 1

    client.params = params
    client.velocity = velocity
    protos = local_prototypes(client.client_id, client.stage, features(params, task.features), task.labels)
    client.history[client.stage] = protos
    memory = client.memory(upto_stage=client.stage + 1)
    n_local = len(memory)
    client.local_semantic = local_semantic(
        memory, u or default_local_clusters(n_local),
        [seed, _LOCAL_KMEANS, client.client_id, snapshot.round])
    counts = {int(k): int(c) for k, c in zip(*np.unique(task.labels, return_counts=True))}
    means = sums / max(steps, 1)
    return RoundReport(client.client_id, params.copy(), protos, counts, n, client.stage,
                       dict(zip(("l_c", "l_p", "l_i", "l_s"), means.tolist())))


def average_params(reports: Sequence[RoundReport], keys: Sequence[str]) -> Dict[str, np.ndarray]:
    ordered = sorted(reports, key=lambda r: r.client_id)
    total = float(sum(r.samples_total for r in ordered))
    out = {}
    for key in keys:
        acc = 0.0
        for r in ordered:
            acc = acc + (r.samples_total / total) * getattr(r.params, key)
        out[key] = np.asarray(acc)
    return out


def aggregate(server: ServerState, reports: Sequence[RoundReport], strategy: StrategyConfig,
              v: int = 0) -> ServerState:
    """Weighted parameter average in scope, prototype merge, minority set and global clustering."""
    reports = sorted(reports, key=lambda r: r.client_id)
    if not reports:
        return server
    scope_keys = _scope_keys(strategy.aggregation_scope)
    live = [r for r in reports if r.samples_total > 0]
    if live:
        new = {k: v_ for k, v_ in server.params.items()}
        new.update(average_params(live, scope_keys))
        server.params = ModelParams(**new)
    for r in live:
        server.classifiers[r.client_id] = (np.array(r.params.wc), np.array(r.params.bc))
        server.stage_counts[(r.client_id, r.stage)] = dict(r.class_counts)
    server.global_protos = aggregate_global([r.prototypes for r in live], server.global_protos,
                                            weighted=strategy.weighted_protos)
    server.minority = minority_classes(server.class_counts)
    # P is built only once the first stage is over
    if len(server.global_protos) and (server.semantic is not None or max(r.stage for r in reports) >= 2):
        n_global = len(server.global_protos)
        server.semantic = global_semantic(server.global_protos, v or default_global_clusters(n_global),
                                          [server.seed, _GLOBAL_KMEANS, server.round])
    return server


def stage_of_round(round_index: int, epochs: int, tasks: int, schedule: str = "sequential") -> int:
    """1-based stage for a 0-based round index."""
    if schedule == "interleaved":
        return round_index % tasks + 1
    return min(round_index // epochs, tasks - 1) + 1


def load_dataset(cfg: ExperimentConfig) -> D.LabeledDataset:
    if cfg.source == "idx":
        return D.load_idx(cfg.images_path, cfg.labels_path)
    if cfg.source == "csv":
        return D.load_csv(cfg.csv_path)
    return D.synth_blobs(cfg.num_classes, cfg.d_in, cfg.per_class, cfg.spread, cfg.seed)


def prepare_streams(cfg: ExperimentConfig):
    dataset = D.apply_longtail(load_dataset(cfg), cfg.gamma, cfg.seed)
    n_parts = cfg.num_clients * cfg.tasks
    if cfg.partition == "sharding":
        parts = D.partition_sharding(dataset, n_parts, cfg.s, cfg.seed)
    else:
        parts = D.partition_dirichlet(dataset, n_parts, cfg.beta, cfg.seed)
    streams = D.build_task_streams(parts, cfg.num_clients, cfg.tasks, cfg.test_fraction, cfg.seed)
    return dataset, streams, D.balanced_test_set(streams, cfg.seed)


@dataclass
class Simulation:
    """Mutable state of one run; ``run_experiment`` drives it round by round."""

    cfg: ExperimentConfig
    server: ServerState
    clients: List[ClientState]
    balanced: D.LabeledDataset
    strategy: StrategyConfig

    @classmethod
    def create(cls, cfg: ExperimentConfig) -> "Simulation":
        dataset, streams, balanced = prepare_streams(cfg)
        params = init_params(dataset.dim, cfg.hidden, cfg.feature_dim, dataset.class_count, [cfg.seed, _INIT])
        server = ServerState(params=params, seed=cfg.seed)
        clients = [ClientState(s.client_id, params.copy(), params.zeros_like(), s) for s in streams]
        for c in clients:
            server.classifiers[c.client_id] = (np.array(params.wc), np.array(params.bc))
        return cls(cfg, server, clients, balanced, StrategyConfig.from_config(cfg))

    def run_round(self, round_index: int) -> RoundRecord:
        cfg = self.cfg
        stage = stage_of_round(round_index, cfg.epochs, cfg.tasks, cfg.schedule)
        for c in self.clients:
            c.stage = stage
        selected = select_clients([c.client_id for c in self.clients], cfg.m_active, cfg.seed, round_index)
        self.server.round = round_index
        snapshot = self.server.snapshot()
        hyper = cfg.hyperparams()

        def work(cid):
            return local_update(self.clients[cid], snapshot, self.strategy, cfg.rounds_local, hyper, cfg.seed, cfg.u)

        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                reports = list(pool.map(work, selected))
        else:
            reports = [work(cid) for cid in selected]
        aggregate(self.server, reports, self.strategy, cfg.v)

        record = evaluate_round(
            self.server.global_model(self.strategy.aggregation_scope),
            [c.params for c in self.clients],
            [c.stream.cumulative_tests[stage - 1] for c in self.clients],
            self.balanced, self.server.minority, round_index, stage)
        live = [r for r in reports if r.samples_total > 0]
        for name in ("l_c", "l_p", "l_i", "l_s"):
            value = float(np.mean([r.loss_means[name] for r in live])) if live else 0.0
            setattr(record, "loss_" + name[-1], value)
        if self.strategy.uses_prototypes:
            d = self.server.params.feature_dim
            # per prototype: d float64 values + class id + sample count
            record.proto_upload_bytes = sum(len(r.prototypes) * (8 * d + 16) for r in reports)
        return record


def simulate(cfg: ExperimentConfig, progress=None):
    """Run every round of ``cfg``; returns the final Simulation state and its MetricsLog."""
    sim = Simulation.create(cfg)
    out = MetricsLog(meta={"final_window_unit": "rounds", "final_window": cfg.final_window,
                           "total_rounds": cfg.total_rounds, "strategy": cfg.strategy,
                           "balanced_test_size": len(sim.balanced)})
    for r in range(cfg.total_rounds):
        out.records.append(sim.run_round(r))
        if progress is not None:
            progress(out.records[-1])
    if cfg.schedule == "sequential":
        for t in range(2, cfg.tasks + 1):
            try:
                out.forgetting[t] = forgetting_delta(out, t)
            except ValueError:
                pass
    out.final = final_metrics(out.records, cfg.final_window)
    return sim, out


def run_experiment(cfg: ExperimentConfig, progress=None) -> MetricsLog:
    return simulate(cfg, progress)[1]
