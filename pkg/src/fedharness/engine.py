"""Round orchestration and scenario drivers.

A round is broadcast -> local training -> attack interception -> aggregation,
followed by evaluation on the configured schedule. Client training may fan
out to a thread pool; results are always collected in client-id order.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import aggregate as agg
from .aggregate import AggregatorSpec, AggregatorState
from .attack import MODEL_POISONING, AttackSpec, craft_malicious, evil_ids
from .client import (ClientState, ClientUpdate, LocalConfig, local_train_backdoor, local_train_fedprox,
                     local_train_scaffold, local_train_sgd, params_hash)
from .core import ContractViolation, RngStream, exact_weighted_sum
from .data import (Dataset, DomainSpec, PartitionSpec, SyntheticSpec, apply_domain, apply_flip,
                   dirichlet_partition, gen_synthetic)
from .metrics import (accuracy_consistency, backdoor_success, contribution_match, degradation,
                      leave_one_out, mean_cross_client, shapley_exact, top1_accuracy)
from .model import Batch, ModelSpec, forward_probs, init_params, loss_and_grad

log = logging.getLogger(__name__)

METRICS = ("cross_client", "ood", "degradation", "backdoor", "contribution", "consistency", "shapley")


@dataclass(frozen=True)
class DomainsConfig:
    """Synthetic feature domains. ``offsets`` are scalars added to every coordinate.
    ``held_out`` indexes the domain kept out of training (-1: none)."""

    rotations: tuple = ()
    scales: tuple = ()
    offsets: tuple = ()
    held_out: int = -1

    @property
    def count(self) -> int:
        return len(self.rotations)

    def spec(self, k: int, dim: int) -> DomainSpec:
        return DomainSpec(float(self.rotations[k]), float(self.scales[k]), np.full(dim, float(self.offsets[k])))


@dataclass(frozen=True)
class EvalConfig:
    test_per_class: int = 5000
    shard_size: int = 5000


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "custom"
    model: ModelSpec = field(default_factory=ModelSpec)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    domains: DomainsConfig = field(default_factory=DomainsConfig)
    local: LocalConfig = field(default_factory=LocalConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    rounds: int = 30
    eval_every: int = 5
    client_weighting: str = "samples"
    metrics: tuple = ("cross_client", "consistency")
    master_seed: int = 0

    @property
    def evil(self) -> tuple:
        if self.attack.kind == "none":
            return ()
        return evil_ids(self.master_seed, self.attack.evil_fraction, self.partition.num_clients)

    def evil_count(self) -> int:
        return len(self.evil)


# -- federation setup -------------------------------------------------------------

@dataclass
class Federation:
    """Everything fixed for the whole run: data, test sets, evil ids, weights."""

    cfg: ExperimentConfig
    root: RngStream
    clients: list
    weights: np.ndarray
    eval_sets: dict
    ood_set: Dataset | None
    backdoor_test: Dataset
    root_set: Dataset | None
    evil: tuple
    init_params: np.ndarray
    partition_hash: str


@dataclass
class RoundState:
    round_index: int
    global_params: np.ndarray
    aggregator_state: AggregatorState
    client_states: list
    history: list = field(default_factory=list)
    last_updates: list = field(default_factory=list)
    round_info: dict = field(default_factory=dict)


def _label_shard(test: Dataset, class_counts: np.ndarray, size: int, rng: RngStream) -> np.ndarray:
    """Indices of a test shard whose label mix follows ``class_counts``."""
    p = class_counts / class_counts.sum()
    raw = p * size
    counts = np.floor(raw).astype(int)
    rest = size - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:rest]] += 1
    gen = rng.generator()
    idx = []
    for c, k in enumerate(counts):
        pool = np.flatnonzero(test.labels == c)
        k = min(k, pool.size)
        if k:
            idx.append(np.sort(gen.choice(pool, size=k, replace=False)))
    return np.concatenate(idx)


def _root_dataset(cfg: ExperimentConfig, root: RngStream) -> Dataset:
    size = cfg.aggregator.fltrust_root_size
    per_class = math.ceil(size / cfg.data.num_classes)
    pool = gen_synthetic(replace(cfg.data, samples_per_class=per_class), root.derive("root_set"))
    return pool.subset(np.arange(size))


def _partition_hash(parts) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in parts:
        h.update(np.asarray(p, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


def build_federation(cfg: ExperimentConfig) -> Federation:
    root = RngStream(cfg.master_seed)
    spec, d = cfg.model, cfg.model.input_dim
    train = gen_synthetic(cfg.data, root.derive("train"))
    test = gen_synthetic(replace(cfg.data, samples_per_class=cfg.eval.test_per_class), root.derive("test"))
    parts = dirichlet_partition(train.labels, cfg.partition, root.derive("partition"))
    M = cfg.partition.num_clients
    evil = cfg.evil

    dom = cfg.domains
    sources = [k for k in range(dom.count) if k != dom.held_out]
    local_sets = []
    for i, idx in enumerate(parts):
        ds = train.subset(idx)
        if sources:
            ds = apply_domain(ds, dom.spec(sources[i % len(sources)], d))
        local_sets.append(ds)

    if cfg.attack.kind == "data_flip":
        for i in evil:
            ds = local_sets[i]
            labels, _ = apply_flip(ds.labels, cfg.attack.flip, root.derive("flip", i), ds.num_classes)
            local_sets[i] = Dataset(ds.features, labels, ds.num_classes)

    sizes = np.array([len(ds) for ds in local_sets], dtype=np.float64)
    if cfg.client_weighting == "uniform":
        weights = np.full(M, 1.0 / M)
    else:
        weights = sizes / sizes.sum()

    clients = []
    for i, ds in enumerate(local_sets):
        cv = np.zeros(spec.num_params) if cfg.local.optimizer == "scaffold" else None
        clients.append(ClientState(i, float(weights[i]), ds, cv))

    eval_sets = {}
    if sources:
        for k in sources:
            eval_sets[f"domain{k}"] = apply_domain(test, dom.spec(k, d))
    else:
        for i, idx in enumerate(parts):
            counts = np.bincount(train.labels[idx], minlength=cfg.data.num_classes).astype(np.float64)
            shard = _label_shard(test, counts, cfg.eval.shard_size, root.derive("shard", i))
            eval_sets[f"client{i}"] = test.subset(shard)
    ood_set = apply_domain(test, dom.spec(dom.held_out, d)) if dom.held_out >= 0 else None
    backdoor_test = apply_domain(test, dom.spec(sources[0], d)) if sources else test

    root_set = None
    w0 = init_params(spec, root.derive("init"))
    if cfg.aggregator.kind in ("fltrust", "sageflow"):
        root_set = _root_dataset(cfg, root)
        if cfg.aggregator.kind == "fltrust" and cfg.aggregator.fltrust_warmup_epochs > 0:
            warm = replace(cfg.local, epochs=cfg.aggregator.fltrust_warmup_epochs, optimizer="sgd")
            server = ClientState(-1, 1.0, root_set)
            w0 = local_train_sgd(spec, w0, server, warm, root.derive("fltrust_warmup")).new_params

    return Federation(cfg, root, clients, weights, eval_sets, ood_set, backdoor_test, root_set, evil, w0,
                      _partition_hash(parts))


def init_state(fed: Federation) -> RoundState:
    astate = AggregatorState()
    if fed.cfg.local.optimizer == "scaffold":
        astate.scaffold_c_global = np.zeros(fed.cfg.model.num_params)
    if fed.cfg.aggregator.kind == "afl":
        astate.afl_weights = fed.weights.copy()
    return RoundState(0, fed.init_params, astate, fed.clients)


# -- one round ----------------------------------------------------------------------

def _train_client(fed: Federation, state: RoundState, broadcast, client: ClientState) -> ClientUpdate:
    cfg = fed.cfg
    rng = fed.root.derive("round", state.round_index + 1).derive("client", client.client_id)
    if cfg.attack.kind == "backdoor" and client.client_id in fed.evil:
        return local_train_backdoor(cfg.model, broadcast, client, cfg.local, cfg.attack.trigger(cfg.model.input_dim),
                                    rng)
    if cfg.local.optimizer == "fedprox":
        return local_train_fedprox(cfg.model, broadcast, client, cfg.local, cfg.local.mu, rng)
    if cfg.local.optimizer == "scaffold":
        return local_train_scaffold(cfg.model, broadcast, client, cfg.local, state.aggregator_state.scaffold_c_global,
                                    rng)
    return local_train_sgd(cfg.model, broadcast, client, cfg.local, rng)


def _mean_loss(spec: ModelSpec, params, ds: Dataset) -> float:
    return loss_and_grad(spec, params, Batch(ds.features, ds.labels))[0]


def _public_eval(spec: ModelSpec, params, ds: Dataset) -> tuple[float, float]:
    """(mean prediction entropy, mean cross-entropy) on ``ds``."""
    P = forward_probs(spec, params, ds.features)
    ent = -np.sum(np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0), axis=1)
    return float(ent.mean()), _mean_loss(spec, params, ds)


def _aggregate(fed: Federation, state: RoundState, updates, broadcast, info: dict) -> np.ndarray:
    cfg, a = fed.cfg, fed.cfg.aggregator
    rng = fed.root.derive("aggregate", state.round_index + 1)
    weights = [fed.weights[u.client_id] for u in updates]
    f = a.f if a.f is not None else len(fed.evil)
    if a.kind == "mean":
        return agg.agg_mean(updates, weights)
    if a.kind == "trimmed":
        return agg.agg_trimmed(updates, a.trim_frac, a.trim_mode)
    if a.kind == "multi_krum":
        return agg.agg_multi_krum(updates, f, min(a.top_k, len(updates) - f))
    if a.kind == "bulyan":
        return agg.agg_bulyan(updates, f)
    if a.kind == "foolsgold":
        return agg.agg_foolsgold(updates, state.aggregator_state, a.foolsgold_eps, info)
    if a.kind == "dnc":
        num_evil = int(math.floor(cfg.attack.evil_fraction * len(updates) + 1e-9)) if cfg.attack.kind != "none" else 0
        return agg.agg_dnc(updates, a.dnc_b, a.dnc_c, a.dnc_iters, num_evil, rng, info)
    if a.kind == "rfa":
        return agg.agg_rfa(updates, weights, a.rfa_iters, a.rfa_smoothing)
    if a.kind == "fltrust":
        server = ClientState(-1, 1.0, fed.root_set)
        server_cfg = replace(cfg.local, epochs=1, optimizer="sgd")
        su = local_train_sgd(cfg.model, broadcast, server, server_cfg, rng.derive("server"))
        return agg.agg_fltrust(updates, su, info)
    if a.kind == "sageflow":
        public = [_public_eval(cfg.model, u.new_params, fed.root_set) for u in updates]
        return agg.agg_sageflow(updates, public, a.sageflow_e_th, a.sageflow_delta, info)
    if a.kind == "rlr":
        return agg.agg_rlr(updates, weights, a.rlr_threshold, a.rlr_lr)
    if a.kind == "afl":
        lam = state.aggregator_state.afl_weights
        return agg.agg_mean(updates, [lam[u.client_id] for u in updates])
    raise ContractViolation(f"unknown aggregator {a.kind!r}")


def run_round(state: RoundState, fed: Federation, workers: int = 1) -> RoundState:
    cfg = fed.cfg
    t = state.round_index + 1
    broadcast = state.global_params
    bhash = params_hash(broadcast)
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                updates = list(pool.map(lambda c: _train_client(fed, state, broadcast, c), state.client_states))
        else:
            updates = [_train_client(fed, state, broadcast, c) for c in state.client_states]
        updates.sort(key=lambda u: u.client_id)
        if any(u.broadcast_hash != bhash for u in updates):
            raise ContractViolation("a client trained from parameters other than the broadcast")

        info = {}
        if cfg.attack.kind in MODEL_POISONING and fed.evil:
            benign = [u.delta for u in updates if u.client_id not in fed.evil]
            crafted = craft_malicious(cfg.attack, benign, cfg.model.num_params, fed.evil,
                                      fed.root.derive("attack", t))
            updates = [u.with_delta(crafted[u.client_id], broadcast) if u.client_id in crafted else u
                       for u in updates]

        new_global = _aggregate(fed, state, updates, broadcast, info)

        astate = state.aggregator_state
        client_states = state.client_states
        if cfg.local.optimizer == "scaffold":
            new_global = broadcast + cfg.local.server_lr * (np.asarray(new_global) - broadcast)
            cds = np.asarray([u.control_delta for u in updates])
            astate.scaffold_c_global = astate.scaffold_c_global + exact_weighted_sum(cds) / len(updates)
            client_states = [replace(c, control_variate=c.control_variate + u.control_delta)
                             for c, u in zip(state.client_states, updates)]
        if cfg.aggregator.kind == "afl":
            losses = [_mean_loss(cfg.model, new_global, c.data) for c in client_states]
            agg.afl_reweight(astate, losses, cfg.aggregator.afl_gamma, cfg.aggregator.afl_step)
        if cfg.aggregator.crfl:
            new_global = agg.crfl_post(new_global, cfg.aggregator.crfl_rho, cfg.aggregator.crfl_sigma,
                                       fed.root.derive("crfl", t))
    except ContractViolation as exc:
        raise ContractViolation(f"round {t}: {exc}") from exc

    new_global = np.asarray(new_global, dtype=np.float64)
    if not np.all(np.isfinite(new_global)):
        raise ContractViolation(f"round {t}: global parameters became non-finite")
    new_global.flags.writeable = False
    return RoundState(t, new_global, astate, client_states, state.history, updates, info)


# -- evaluation ---------------------------------------------------------------------

def domain_accuracies(fed: Federation, params) -> dict:
    return {k: top1_accuracy(fed.cfg.model, params, ds) for k, ds in fed.eval_sets.items()}


def contribution_impacts(fed: Federation, global_params, updates) -> tuple[np.ndarray, float]:
    """Leave-one-out impacts on the mean per-domain accuracy, and the baseline mean."""
    base = mean_cross_client(domain_accuracies(fed, global_params))
    impacts = np.zeros(len(updates))
    for k, u in enumerate(updates):
        w_minus = leave_one_out(global_params, u.new_params, fed.weights[u.client_id])
        if w_minus is None:
            impacts[k] = np.nan
            continue
        impacts[k] = base - mean_cross_client(domain_accuracies(fed, w_minus))
    return impacts, base


def evaluate(fed: Federation, state: RoundState) -> dict:
    cfg = fed.cfg
    accs = domain_accuracies(fed, state.global_params)
    row = {"round": state.round_index, "A_u": mean_cross_client(accs), "per_domain": accs}
    if "ood" in cfg.metrics and fed.ood_set is not None:
        row["A_O"] = top1_accuracy(cfg.model, state.global_params, fed.ood_set)
    if "backdoor" in cfg.metrics and cfg.attack.kind == "backdoor":
        row["R"] = backdoor_success(cfg.model, state.global_params, fed.backdoor_test,
                                    cfg.attack.trigger(cfg.model.input_dim))
    if "consistency" in cfg.metrics:
        row["V"] = accuracy_consistency(accs)
    if "contribution" in cfg.metrics:
        if state.last_updates and len(state.last_updates) > 1:
            impacts, _ = contribution_impacts(fed, state.global_params, state.last_updates)
            row["C"] = contribution_match(impacts, fed.weights)
        else:
            row["C"] = None
    return row


# -- drivers --------------------------------------------------------------------------

@dataclass
class RunResult:
    per_round: list
    final: dict
    state: RoundState
    federation: Federation


def validate(cfg: ExperimentConfig) -> list[str]:
    """Cross-field checks; every violation is reported."""
    errs = []
    if cfg.rounds < 1:
        errs.append("rounds: must be >= 1")
    if cfg.eval_every < 1 or (cfg.rounds >= 1 and cfg.rounds % cfg.eval_every):
        errs.append("eval_every: must be >= 1 and divide rounds")
    if cfg.partition.min_samples_per_client < 1:
        errs.append("partition.min_samples_per_client: must be >= 1")
    if cfg.model.input_dim != cfg.data.input_dim:
        errs.append("model.input_dim: must equal data.input_dim")
    if cfg.model.num_classes != cfg.data.num_classes:
        errs.append("model.num_classes: must equal data.num_classes")
    if cfg.client_weighting not in ("samples", "uniform"):
        errs.append("client_weighting: must be 'samples' or 'uniform'")
    bad = [m for m in cfg.metrics if m not in METRICS]
    if bad:
        errs.append(f"metrics: unknown {bad}")
    if "backdoor" in cfg.metrics and cfg.attack.kind != "backdoor":
        errs.append("metrics: 'backdoor' requires attack.kind = backdoor")
    if "degradation" in cfg.metrics and cfg.attack.kind == "none":
        errs.append("metrics: 'degradation' requires an attack to compare against")
    if "ood" in cfg.metrics and cfg.domains.held_out < 0:
        errs.append("metrics: 'ood' requires domains.held_out")
    if "shapley" in cfg.metrics and cfg.partition.num_clients > 12:
        errs.append("metrics: 'shapley' supports at most 12 clients")
    dom = cfg.domains
    if not (len(dom.rotations) == len(dom.scales) == len(dom.offsets)):
        errs.append("domains: rotations, scales and offsets must have equal length")
    if dom.count and dom.count - (dom.held_out >= 0) < 1:
        errs.append("domains: need at least one source domain")
    if dom.held_out >= dom.count or dom.held_out < -1:
        errs.append("domains.held_out: out of range")
    if any(s <= 0 for s in dom.scales):
        errs.append("domains.scales: must be positive")
    if cfg.attack.kind == "backdoor":
        if any(not 0 <= k < cfg.model.input_dim for k in cfg.attack.trigger_dims):
            errs.append("attack.trigger_dims: index outside the feature dimension")
        if not 0 <= cfg.attack.target_class < cfg.model.num_classes:
            errs.append("attack.target_class: out of range")
    n = cfg.partition.num_clients
    f = cfg.aggregator.f if cfg.aggregator.f is not None else cfg.evil_count()
    if cfg.aggregator.kind == "multi_krum" and n - f - 2 < 1:
        errs.append(f"aggregator.f: Multi-Krum needs n - f - 2 >= 1 (n={n}, f={f})")
    if cfg.aggregator.kind == "bulyan" and n < 4 * f + 3:
        errs.append(f"aggregator.f: Bulyan needs n >= 4f + 3 (n={n}, f={f})")
    if cfg.aggregator.kind == "dnc" and n < 2:
        errs.append("aggregator.kind: DnC needs at least two clients")
    return errs


def simulate(cfg: ExperimentConfig, workers: int = 1, on_round=None) -> RunResult:
    """Run ``cfg.rounds`` rounds and evaluate on the schedule (round 0 included)."""
    errs = validate(cfg)
    if errs:
        raise ContractViolation("; ".join(errs))
    fed = build_federation(cfg)
    state = init_state(fed)
    per_round = [evaluate(fed, state)]
    for _ in range(cfg.rounds):
        state = run_round(state, fed, workers)
        if state.round_index % cfg.eval_every == 0:
            per_round.append(evaluate(fed, state))
            log.debug("round %d A_u=%.4f", state.round_index, per_round[-1]["A_u"])
        if on_round is not None:
            on_round(state)
    return RunResult(per_round, dict(per_round[-1]), state, fed)


def clean_twin(cfg: ExperimentConfig) -> ExperimentConfig:
    metrics = tuple(m for m in cfg.metrics if m not in ("degradation", "backdoor"))
    return replace(cfg, attack=replace(cfg.attack, kind="none"), metrics=metrics)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> RunResult:
    """Simulate ``cfg``; when degradation is requested, also run the attack-free twin and
    attach the per-round signed accuracy loss ``I``."""
    result = simulate(cfg, workers)
    if "shapley" in cfg.metrics:
        report = run_contribution_analysis(result, with_shapley=True)
        result.final["shapley"] = [float(v) for v in report.shapley]
        result.final["shapley_rho"] = report.rho
    if "degradation" in cfg.metrics:
        twin = simulate(clean_twin(cfg), workers)
        if twin.federation.partition_hash != result.federation.partition_hash:
            raise ContractViolation("clean twin drew a different data partition")
        for row, base in zip(result.per_round, twin.per_round):
            row["A_u_clean"] = base["A_u"]
            row["I"] = degradation(base["A_u"], row["A_u"])
        result.final.update({k: result.per_round[-1][k] for k in ("A_u_clean", "I")})
    return result


@dataclass
class ContributionReport:
    client_ids: list
    weights: list
    delta_impacts: list
    match_score: float | None
    shapley: list | None = None
    rho: float = 1.0
    value_full: float | None = None
    value_empty: float | None = None
    flagged: str | None = None


def run_contribution_analysis(result: RunResult, with_shapley: bool = True, rho: float = 1.0) -> ContributionReport:
    """Leave-one-out impacts, their match with nominal weights, and optionally exact Shapley
    values of the final-round aggregation game."""
    fed, state = result.federation, result.state
    updates = state.last_updates
    ids = [u.client_id for u in updates]
    alpha = [float(fed.weights[i]) for i in ids]
    if len(updates) < 2:
        return ContributionReport(ids, alpha, [], None, flagged="contribution undefined for a single client")
    impacts, _ = contribution_impacts(fed, state.global_params, updates)
    report = ContributionReport(ids, alpha, [float(v) for v in impacts], contribution_match(impacts, alpha), rho=rho)
    if with_shapley:
        P = np.asarray([u.new_params for u in updates])
        a = np.asarray(alpha)

        def value(S):
            if not S:
                return mean_cross_client(domain_accuracies(fed, fed.init_params))
            members = sorted(S)
            w = exact_weighted_sum(P[members], a[members] / a[members].sum())
            return mean_cross_client(domain_accuracies(fed, w))

        cache = {}

        def cached(S):
            if S not in cache:
                cache[S] = value(S)
            return cache[S]

        report.shapley = [float(v) for v in shapley_exact(cached, len(updates), rho)]
        report.value_full = cached(frozenset(range(len(updates))))
        report.value_empty = cached(frozenset())
    return report


def run_leave_one_domain_out(cfg: ExperimentConfig, targets=None, workers: int = 1) -> dict:
    """Hold out each domain in turn, train on the rest, report its A^O plus the AVG column."""
    if cfg.domains.count < 2:
        raise ContractViolation("leave-one-domain-out needs at least two domains")
    targets = range(cfg.domains.count) if targets is None else targets
    metrics = tuple(dict.fromkeys(cfg.metrics + ("ood",)))
    row = {}
    for o in targets:
        run_cfg = replace(cfg, domains=replace(cfg.domains, held_out=o), metrics=metrics)
        row[f"domain{o}"] = simulate(run_cfg, workers).final["A_O"]
    row["AVG"] = math.fsum(row.values()) / len(row)
    return row
