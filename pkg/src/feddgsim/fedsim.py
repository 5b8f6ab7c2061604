"""Federated training loop: client and server state, rounds, experiments.

A round broadcasts the global parameters, lets every participating client
train locally, and folds the results back in ascending client order.  The
fold order is fixed, so results do not depend on whether local updates ran
in parallel.
"""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import aggregation as A
from . import model as M
from . import objectives as O
from . import partition as P
from .config import ExperimentConfig
from .dataspace import DomainDataset, SplitResult, apply_split, generate_synthetic, load_csv
from .metrics import DifficultyReport, compute_r_dg, compute_r_fl, evaluate, select_model

__all__ = [
    "SimulationError",
    "ClientState",
    "ServerState",
    "CommLedger",
    "RoundPlan",
    "LocalResult",
    "RoundMetrics",
    "RunRecord",
    "Federation",
    "local_update",
    "run_round",
    "build_clients",
    "build_federation",
    "run_experiment",
    "train_federated",
    "train_erm_steps",
    "difficulty_report",
    "derive_seed",
    "CSV_COLUMNS",
]

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "method", "lambda", "C", "E", "split", "metric", "value", "seed", "config_hash")


class SimulationError(RuntimeError):
    """A failure inside the simulation, tagged with where it happened."""


def derive_seed(seed: int, tag: str) -> int:
    """Independent integer seed for a named random stream."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(tag.encode())])
    return int(ss.generate_state(1)[0])


@dataclass
class ClientState:
    """One client.  ``domains`` holds positions in the training-domain list."""

    cid: int
    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    optimizer: M.OptimizerState
    params: np.ndarray | None = None
    control: np.ndarray | None = None
    dro: O.DroWeights | None = None
    domain_losses: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.features) < 1:
            raise ValueError(f"client {self.cid} has no data")

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def single_domain(self) -> bool:
        return np.unique(self.domains).size == 1


@dataclass
class CommLedger:
    budget: int | None = None
    rounds_used: int = 0
    local_epochs: list[int] = field(default_factory=list)

    def record(self, epochs: int) -> None:
        if self.budget is not None and self.rounds_used >= self.budget:
            raise SimulationError(f"communication budget of {self.budget} rounds exhausted")
        self.rounds_used += 1
        self.local_epochs.append(int(epochs))

    @property
    def total_epochs(self) -> int:
        return sum(self.local_epochs)


@dataclass
class ServerState:
    params: np.ndarray
    round: int = 0
    beta: np.ndarray | None = None
    beta_lr: float = 0.01
    control: np.ndarray | None = None
    ledger: CommLedger = field(default_factory=CommLedger)


@dataclass(frozen=True)
class RoundPlan:
    """Local work per round.  ``batch_size=None`` means full batch."""

    local_epochs: int = 1
    batch_size: int | None = 32
    seed: int = 0
    participation: float = 1.0

    def __post_init__(self) -> None:
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be at least 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must lie in (0, 1]")


@dataclass
class LocalResult:
    cid: int
    n: int
    params: np.ndarray
    delta: np.ndarray
    control_delta: np.ndarray | None
    steps: int
    mean_loss: float


@dataclass
class RoundMetrics:
    round: int
    participants: list[int]
    mean_local_loss: float
    local_steps: int


def _fish_step(spec, theta, X, y, g, lr, meta_lr, loss):
    tilde = theta.copy()
    losses = []
    for d in np.unique(g):
        rows = g == d
        value, grad = M.loss_and_grad(spec, tilde, X[rows], y[rows], loss)
        losses.append(value)
        tilde = tilde - lr * grad
    return O.fish_meta_step(theta, tilde, meta_lr), float(np.mean(losses))


def local_update(
    client: ClientState,
    global_params: np.ndarray,
    plan: RoundPlan,
    spec: M.ModelSpec,
    cfg: O.PenaltyConfig,
    round_idx: int = 1,
    server_control: np.ndarray | None = None,
    beta: np.ndarray | None = None,
    loss: str | None = None,
) -> LocalResult:
    """Train a copy of the global model on the client's data.

    Mutates the client's optimizer state, parameters, Scaffold control
    variate and GroupDRO weights.
    """
    rng = np.random.default_rng([plan.seed, round_idx, client.cid])
    theta = np.array(global_params, dtype=float, copy=True)
    opt = client.optimizer
    ctx = O.ObjectiveContext(
        single_domain=client.single_domain,
        global_params=global_params,
        dro=client.dro,
        afl_beta=beta,
        rng=rng,
    )
    correction = None
    if cfg.method == "scaffold":
        if server_control is None or client.control is None:
            raise SimulationError("Scaffold needs initialized control variates")
        correction = server_control - client.control

    n = client.n
    batch = n if plan.batch_size is None else min(plan.batch_size, n)
    steps, losses = 0, []
    for _ in range(plan.local_epochs):
        order = np.arange(n) if batch >= n else rng.permutation(n)
        for start in range(0, n, batch):
            rows = order[start:start + batch]
            X, y, g = client.features[rows], client.labels[rows], client.domains[rows]
            # divergence surfaces as SimulationError below, not as numpy warnings
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    if cfg.method == "fish" and not client.single_domain:
                        theta, value = _fish_step(spec, theta, X, y, g, opt.lr, cfg.meta_lr, loss)
                    else:
                        value, grad = O.objective_and_grad(spec, theta, X, y, g, cfg, ctx, loss)
                        if correction is not None:
                            grad = grad + correction
                        theta, opt = M.optimizer_step(opt, theta, grad)
            except FloatingPointError as exc:
                raise SimulationError(f"round {round_idx}, client {client.cid}: {exc}") from None
            if not np.isfinite(value) or not np.all(np.isfinite(theta)):
                raise SimulationError(f"round {round_idx}, client {client.cid}: non-finite loss {value}")
            losses.append(value)
            steps += 1

    client.optimizer = opt
    client.params = theta
    client.dro = ctx.dro
    control_delta = None
    if correction is not None:
        new_control = client.control - server_control + (global_params - theta) / (steps * opt.lr)
        control_delta = new_control - client.control
        client.control = new_control
    return LocalResult(
        cid=client.cid,
        n=n,
        params=theta,
        delta=theta - global_params,
        control_delta=control_delta,
        steps=steps,
        mean_loss=float(np.mean(losses)),
    )


def _domain_losses(spec, params, client: ClientState, loss) -> dict[int, float]:
    kind = loss or spec.default_loss
    logits = M.forward(spec, params, client.features).logits
    per = M.per_sample_loss(logits, M.targets_for(spec, client.labels), kind)
    return {int(d): float(per[client.domains == d].mean()) for d in np.unique(client.domains)}


def _participants(clients: Sequence[ClientState], plan: RoundPlan, round_idx: int) -> list[ClientState]:
    if plan.participation >= 1.0:
        return list(clients)
    k = max(1, int(round(plan.participation * len(clients))))
    pick = np.random.default_rng([plan.seed, round_idx, 0xC11E]).choice(len(clients), k, replace=False)
    return [clients[i] for i in sorted(pick)]


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    plan: RoundPlan,
    spec: M.ModelSpec,
    cfg: O.PenaltyConfig,
    loss: str | None = None,
    executor: Executor | None = None,
) -> RoundMetrics:
    """One broadcast / local update / aggregate cycle; mutates ``server``."""
    t = server.round + 1
    active = sorted(_participants(clients, plan, t), key=lambda c: c.cid)
    snapshot = server.params.copy()
    control = None if server.control is None else server.control.copy()
    beta = None if server.beta is None else server.beta.copy()

    def work(client: ClientState) -> LocalResult:
        return local_update(client, snapshot, plan, spec, cfg, t, control, beta, loss)

    results = list(executor.map(work, active)) if executor is not None else [work(c) for c in active]
    weights = [r.n for r in results]

    if cfg.method == "fedgma":
        new_params = A.aggregate_fedgma(snapshot, [r.delta for r in results], weights, cfg.mask_threshold, cfg.server_lr)
    else:
        new_params = A.aggregate_fedavg([r.params for r in results], weights)
    if cfg.method == "scaffold":
        server.control = A.scaffold_server_control(server.control, [r.control_delta for r in results], len(clients))
    if cfg.method == "afl":
        step = np.zeros_like(server.beta)
        for client in active:
            client.domain_losses = _domain_losses(spec, new_params, client, loss)
            for d, l in client.domain_losses.items():
                step[d] += l
        server.beta = A.project_simplex(server.beta + server.beta_lr * step)

    server.params = new_params
    server.round = t
    server.ledger.record(plan.local_epochs)
    return RoundMetrics(
        round=t,
        participants=[c.cid for c in active],
        mean_local_loss=float(np.mean([r.mean_loss for r in results])),
        local_steps=int(sum(r.steps for r in results)),
    )


def build_clients(
    train: DomainDataset,
    assignment: P.ClientAssignment,
    train_domains: Sequence[int],
    optimizer: M.OptimizerState,
    cfg: O.PenaltyConfig,
    num_params: int,
) -> list[ClientState]:
    order = np.asarray(sorted(train_domains))
    clients = []
    for c in range(assignment.num_clients):
        rows = assignment.indices[c]
        clients.append(
            ClientState(
                cid=c,
                features=train.features[rows],
                labels=train.labels[rows],
                domains=np.searchsorted(order, train.domains[rows]),
                optimizer=optimizer.reset(),
                control=np.zeros(num_params) if cfg.method == "scaffold" else None,
                dro=O.DroWeights.uniform(order.size, cfg.group_lr) if cfg.method == "groupdro" else None,
            )
        )
    return clients


def _plan_for(sizes, pcfg, C: int, lam: float, seed: int) -> P.PartitionPlan:
    if pcfg is None or pcfg.method == "heterogeneous":
        return P.partition_heterogeneous(sizes, C, lam, seed)
    if pcfg.method == "shards":
        return P.partition_shards(sizes, C, pcfg.shards_per_client, seed)
    plan = P.partition_dirichlet(sizes, C, pcfg.alpha, seed)
    plan.lam = lam
    return plan


def _digest(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


@dataclass
class Federation:
    """Everything one run needs, built from a config."""

    config: ExperimentConfig
    run: int
    seed: int
    spec: M.ModelSpec
    splits: SplitResult
    train_domains: tuple[int, ...]
    plan: P.PartitionPlan
    clients: list[ClientState]
    server: ServerState
    round_plan: RoundPlan
    digests: dict[str, str]


def _load_data(config: ExperimentConfig, seed: int) -> DomainDataset:
    dc = config.data
    if dc.csv_path is not None:
        return load_csv(dc.csv_path, dc.csv_schema)
    return generate_synthetic(dc.recipe, dc.domains, dc.classes, dc.n_per_domain, dc.features, derive_seed(seed, "data"))


def build_federation(config: ExperimentConfig, run: int = 0) -> Federation:
    seed = config.seed + run
    data = _load_data(config, seed)
    splits = apply_split(data, config.split, derive_seed(seed, "split"))
    train = splits.train
    train_domains = tuple(sorted(config.split.train_domains))
    sizes = train.domain_sizes(train_domains)
    if np.any(sizes == 0):
        raise SimulationError(f"a training domain has no training rows: sizes {sizes.tolist()}")
    pcfg = config.partition
    part_seed = pcfg.seed if pcfg.seed is not None else derive_seed(seed, "partition")
    plan = _plan_for(sizes, pcfg, pcfg.clients, pcfg.lam, part_seed)
    assignment = P.materialize(plan, train, part_seed, domain_ids=train_domains)

    classes = int(max(data.labels.max() + 1, 2))
    spec = M.ModelSpec(config.model.arch, data.num_features, classes, config.model.hidden, config.model.bias)
    init = M.init_params(spec, derive_seed(seed, "init"))
    opt = M.make_optimizer(config.optimizer.kind, config.optimizer.lr)
    clients = build_clients(train, assignment, train_domains, opt, config.method, init.size)
    server = ServerState(
        params=init,
        beta=np.full(len(train_domains), 1.0 / len(train_domains)) if config.method.method == "afl" else None,
        beta_lr=config.method.beta_lr,
        control=np.zeros(init.size) if config.method.method == "scaffold" else None,
        ledger=CommLedger(budget=config.round_budget),
    )
    round_plan = RoundPlan(config.local_epochs, config.batch_size, derive_seed(seed, "rounds"), config.participation)
    digests = {
        "data": data.digest(),
        "splits": hashlib.sha256(splits.manifest_json().encode()).hexdigest()[:16],
        "partition": _digest(plan.counts),
        "assignment": _digest(np.concatenate(assignment.indices)),
        "init": _digest(init),
    }
    return Federation(config, run, seed, spec, splits, train_domains, plan, clients, server, round_plan, digests)


@dataclass
class RunRecord:
    """Per-round metrics of one run plus what is needed to reproduce it."""

    config_hash: str
    run: int
    seed: int
    method: str
    lam: float
    C: int
    E: int
    rounds: int
    rows: list[dict] = field(default_factory=list)
    params_history: list[np.ndarray] = field(default_factory=list)
    round_metrics: list[RoundMetrics] = field(default_factory=list)
    digests: dict[str, str] = field(default_factory=dict)
    plan: P.PartitionPlan | None = None
    ledger: CommLedger | None = None

    def csv_rows(self) -> list[dict]:
        base = {
            "method": self.method,
            "lambda": self.lam,
            "C": self.C,
            "E": self.E,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }
        return [{**base, **row} for row in self.rows]

    def values(self, split: str, metric: str = "accuracy") -> list[float]:
        return [r["value"] for r in self.rows if r["split"] == split and r["metric"] == metric]

    def value_at(self, round_idx: int, split: str, metric: str = "accuracy") -> float:
        for r in self.rows:
            if r["round"] == round_idx and r["split"] == split and r["metric"] == metric:
                return r["value"]
        raise KeyError((round_idx, split, metric))


def _evaluate_round(fed: Federation, params: np.ndarray, round_idx: int) -> list[dict]:
    rows = []
    kind = fed.config.model.loss or fed.spec.default_loss
    for name, ds in fed.splits.splits().items():
        if len(ds) == 0:
            continue
        rows.append({"round": round_idx, "split": name, "metric": "accuracy", "value": evaluate(fed.spec, params, ds)})
        if name == "train":
            loss = O.erm_loss(fed.spec, params, ds.features, ds.labels, kind)
            rows.append({"round": round_idx, "split": name, "metric": "loss", "value": loss})
    return rows


def run_experiment(
    config: ExperimentConfig,
    run: int = 0,
    jobs: int = 1,
    checkpoint_dir: str | Path | None = None,
) -> RunRecord:
    """Build the federation for ``run`` and train for ``config.rounds``.

    Round 0 is the evaluation of the initial parameters.
    """
    fed = build_federation(config, run)
    pcfg = config.partition
    record = RunRecord(
        config_hash=config.config_hash(),
        run=run,
        seed=fed.seed,
        method=config.method.method,
        lam=pcfg.lam,
        C=pcfg.clients,
        E=config.local_epochs,
        rounds=config.rounds,
        digests=dict(fed.digests),
        plan=fed.plan,
        ledger=fed.server.ledger,
    )
    record.rows.extend(_evaluate_round(fed, fed.server.params, 0))
    record.params_history.append(fed.server.params.copy())
    executor = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for _ in range(config.rounds):
            metrics = run_round(fed.server, fed.clients, fed.round_plan, fed.spec, config.method, config.model.loss, executor)
            record.round_metrics.append(metrics)
            record.rows.extend(_evaluate_round(fed, fed.server.params, metrics.round))
            record.params_history.append(fed.server.params.copy())
            if checkpoint_dir is not None:
                _write_checkpoint(Path(checkpoint_dir), fed, metrics.round)
            log.debug("run %d round %d loss %.4f", run, metrics.round, metrics.mean_local_loss)
    finally:
        if executor is not None:
            executor.shutdown()
    return record


def _write_checkpoint(directory: Path, fed: Federation, round_idx: int) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "round": round_idx,
        "server": json.loads(M.params_to_json(fed.spec, fed.server.params)),
        "clients": {str(c.cid): c.params.tolist() for c in fed.clients if c.params is not None},
    }
    if fed.server.beta is not None:
        payload["beta"] = fed.server.beta.tolist()
    if fed.server.control is not None:
        payload["control"] = fed.server.control.tolist()
    (directory / f"round_{round_idx:04d}.json").write_text(json.dumps(payload))


def train_federated(
    spec: M.ModelSpec,
    dataset: DomainDataset,
    C: int,
    lam: float,
    rounds: int,
    local_epochs: int = 1,
    batch_size: int | None = 32,
    optimizer: M.OptimizerState | None = None,
    cfg: O.PenaltyConfig | None = None,
    seed: int = 0,
    init: np.ndarray | None = None,
) -> np.ndarray:
    """Partition ``dataset`` heterogeneously over ``C`` clients and train.

    With ``C=1`` this is centralized training on the whole dataset.
    """
    cfg = cfg or O.PenaltyConfig("fedavg")
    optimizer = optimizer or M.make_optimizer()
    domains = tuple(int(d) for d in dataset.domain_ids)
    plan = P.partition_heterogeneous(dataset.domain_sizes(domains), C, lam, derive_seed(seed, "partition"))
    assignment = P.materialize(plan, dataset, domain_ids=domains)
    params = M.init_params(spec, derive_seed(seed, "init")) if init is None else np.array(init, dtype=float)
    clients = build_clients(dataset, assignment, domains, optimizer, cfg, params.size)
    server = ServerState(
        params=params,
        beta=np.full(len(domains), 1.0 / len(domains)) if cfg.method == "afl" else None,
        beta_lr=cfg.beta_lr,
        control=np.zeros(params.size) if cfg.method == "scaffold" else None,
    )
    plan_r = RoundPlan(local_epochs, batch_size, derive_seed(seed, "rounds"))
    for _ in range(rounds):
        run_round(server, clients, plan_r, spec, cfg)
    return server.params


def train_erm_steps(
    spec: M.ModelSpec,
    dataset: DomainDataset,
    steps: int,
    batch_size: int | None = 32,
    optimizer: M.OptimizerState | None = None,
    seed: int = 0,
    init: np.ndarray | None = None,
    loss: str | None = None,
) -> np.ndarray:
    """Centralized ERM for a fixed number of optimizer steps."""
    opt = optimizer or M.make_optimizer()
    params = M.init_params(spec, derive_seed(seed, "init")) if init is None else np.array(init, dtype=float)
    rng = np.random.default_rng(derive_seed(seed, "erm"))
    n = len(dataset)
    batch = n if batch_size is None else min(batch_size, n)
    order, pos = rng.permutation(n), 0
    for _ in range(steps):
        if pos >= n:
            order, pos = rng.permutation(n), 0
        rows = order[pos:pos + batch]
        pos += batch
        _, grad = M.loss_and_grad(spec, params, dataset.features[rows], dataset.labels[rows], loss)
        params, opt = M.optimizer_step(opt, params, grad)
    return params


def difficulty_report(
    config: ExperimentConfig,
    lambdas: Sequence[float] = (1.0, 0.1, 0.0),
    run: int = 0,
) -> DifficultyReport:
    """R_DG and R_FL(lambda) for the config's data, model and budget.

    ERM for R_DG runs a fixed step budget: as many steps as
    ``rounds * local_epochs`` epochs over the training split take.  The
    pooled (train plus 80% DG-test) model gets the same number of steps.
    """
    fed = build_federation(config, run)
    spec, splits = fed.spec, fed.splits
    bs = config.batch_size
    n_train = len(splits.train)
    per_epoch = 1 if bs is None else -(-n_train // bs)
    steps = max(1, config.rounds * config.local_epochs * per_epoch)
    opt = M.make_optimizer(config.optimizer.kind, config.optimizer.lr)
    report = DifficultyReport()
    report.notes["erm_steps"] = str(steps)
    report.notes["pooling"] = "train and DG-test pool concatenated without reweighting"

    def erm(ds: DomainDataset) -> np.ndarray:
        return train_erm_steps(spec, ds, steps, bs, opt, fed.seed, loss=config.model.loss)

    if len(splits.dg_test_eval) and len(splits.dg_test_pool):
        compute_r_dg(spec, splits.train, splits.dg_test_eval, splits.dg_test_pool, erm, report)

    erm_cfg = O.PenaltyConfig("fedavg")

    def fl(ds: DomainDataset, lam: float, C: int) -> np.ndarray:
        return train_federated(spec, ds, C, lam, config.rounds, config.local_epochs, bs, opt, erm_cfg, fed.seed)

    def central(ds: DomainDataset) -> np.ndarray:
        return fl(ds, 1.0, 1)

    if len(splits.in_domain_test):
        for lam in lambdas:
            compute_r_fl(spec, splits.train, splits.in_domain_test, lam, config.partition.clients, fl, central, report)
    return report


def best_selection(records: Sequence[RunRecord], config: ExperimentConfig) -> dict:
    """Early-stopped choice across runs, falling back to in-domain
    validation when the config has no held-out domain."""
    policy = config.selection
    if policy.split == "heldout-domain" and not config.split.heldout_validation_domains:
        from .metrics import SelectionPolicy

        policy = SelectionPolicy("in-domain", policy.runs, policy.metric)
    sel = select_model(records, policy)
    rec = records[sel.run]
    out = {
        "run": sel.run,
        "seed": rec.seed,
        "round": sel.round,
        "validation_split": policy.split_name,
        "validation_value": sel.value,
    }
    try:
        out["dg_test"] = rec.value_at(sel.round, "dg_test")
    except KeyError:
        out["dg_test"] = None
    return out
