"""Domain-aware client partitioning.

The central routine is :func:`partition_heterogeneous`, which spreads the
samples of ``D`` domains over ``C`` clients.  A balancing parameter ``lam``
moves the split from complete domain heterogeneity (``lam=0``: each client
sees one domain, or clients see disjoint domain sets) to a homogeneous split
(``lam=1``: every client receives ``n_d / C`` samples of every domain).

Two common baselines are also provided (:func:`partition_shards` and
:func:`partition_dirichlet`), together with :func:`check_constraints` for
auditing any plan and :func:`brute_force_optimal_variance` for exhaustively
solving tiny instances.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

__all__ = [
    "DomainAssignment",
    "PartitionPlan",
    "ClientAssignment",
    "ConstraintReport",
    "DirichletInfeasibleError",
    "assign_domains",
    "interpolate_counts",
    "partition_heterogeneous",
    "materialize",
    "check_constraints",
    "partition_shards",
    "partition_dirichlet",
    "brute_force_optimal_variance",
    "sample_variance",
]

BRUTE_FORCE_MAX_DOMAINS = 6
BRUTE_FORCE_MAX_CLIENTS = 6


class DirichletInfeasibleError(ValueError):
    """Raised when Dirichlet demands for a domain exceed its supply."""


def _validate_sizes(domain_sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(domain_sizes)
    if sizes.ndim != 1 or sizes.size == 0:
        raise ValueError("domain_sizes must be a non-empty 1-D sequence")
    if not np.issubdtype(sizes.dtype, np.integer):
        if not np.all(np.equal(np.mod(sizes, 1), 0)):
            raise ValueError("domain_sizes must be integers")
    sizes = sizes.astype(np.int64)
    if np.any(sizes < 1):
        raise ValueError(f"every domain needs at least one sample, got {sizes.tolist()}")
    return sizes


def _validate_clients(C: int) -> int:
    if int(C) != C or C < 1:
        raise ValueError(f"number of clients must be a positive integer, got {C!r}")
    return int(C)


def sample_variance(totals: Sequence[float]) -> float:
    """Unbiased variance of client totals, ``0.0`` for a single client."""
    totals = np.asarray(totals, dtype=float)
    if totals.size < 2:
        return 0.0
    return float(np.var(totals, ddof=1))


def _equal_shares(n: int, holders: int) -> list[int]:
    # remainder goes one sample at a time to the lowest-index holders
    q, r = divmod(int(n), int(holders))
    return [q + 1] * r + [q] * (holders - r)


@dataclass(frozen=True)
class DomainAssignment:
    """Client domain sets plus the integer shares they imply at ``lam=0``.

    ``shares`` is a ``D x C`` integer matrix.
    """

    client_domains: tuple[frozenset[int], ...]
    shares: np.ndarray

    @property
    def num_clients(self) -> int:
        return len(self.client_domains)

    def holders(self, d: int) -> list[int]:
        return [c for c, ds in enumerate(self.client_domains) if d in ds]


@dataclass
class PartitionPlan:
    """Per-domain, per-client sample counts.

    ``counts[d, c]`` is the number of samples of domain ``d`` given to client
    ``c`` (rows are domains, columns are clients).
    """

    counts: np.ndarray
    lam: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise ValueError("counts must be a D x C matrix")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        self.counts = counts.astype(np.int64)

    @property
    def num_domains(self) -> int:
        return self.counts.shape[0]

    @property
    def num_clients(self) -> int:
        return self.counts.shape[1]

    @property
    def domain_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def client_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def client_domains(self) -> list[frozenset[int]]:
        return [frozenset(np.flatnonzero(col).tolist()) for col in self.counts.T]

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "seed": int(self.seed), "counts": self.counts.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, payload: dict) -> "PartitionPlan":
        try:
            counts = payload["counts"]
        except KeyError:
            raise ValueError("plan document has no 'counts' field") from None
        lam = payload.get("lambda")
        return cls(
            counts=np.asarray(counts, dtype=np.int64),
            lam=None if lam is None else float(lam),
            seed=int(payload.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        return cls.from_dict(json.loads(text))


@dataclass
class ClientAssignment:
    """Sample indices handed to each client.

    ``indices[c]`` holds dataset row indices for client ``c`` and
    ``domains[c]`` the matching domain ids.
    """

    indices: list[np.ndarray]
    domains: list[np.ndarray]

    @property
    def num_clients(self) -> int:
        return len(self.indices)

    def pairs(self, c: int) -> list[tuple[int, int]]:
        return list(zip(self.indices[c].tolist(), self.domains[c].tolist()))


@dataclass(frozen=True)
class ConstraintReport:
    c1_holds: bool
    c2_holds: bool
    variance: float
    details: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "c1_holds": self.c1_holds,
            "c2_holds": self.c2_holds,
            "variance": self.variance,
            **self.details,
        }


def assign_domains(domain_sizes: Sequence[int], C: int) -> DomainAssignment:
    """Decide which domains each client holds under complete heterogeneity.

    With ``C <= D`` domains are visited largest first and each goes to the
    client with the smallest running total (LPT greedy); clients are then
    relabelled by the smallest domain index they hold.  With ``C > D``
    client ``d`` first takes domain ``d``; every further client joins the
    domain whose per-holder share ``n_d / holders`` is currently largest,
    and that domain is re-split evenly among its holders.

    Ties always resolve to the lowest index.
    """
    sizes = _validate_sizes(domain_sizes)
    C = _validate_clients(C)
    D = sizes.size
    shares = np.zeros((D, C), dtype=np.int64)

    if C <= D:
        order = sorted(range(D), key=lambda d: (-sizes[d], d))
        groups: list[set[int]] = [set() for _ in range(C)]
        loads = [0] * C
        for d in order:
            c_star = min(range(C), key=lambda c: (loads[c], c))
            groups[c_star].add(d)
            loads[c_star] += int(sizes[d])
        groups.sort(key=min)
        for c, ds in enumerate(groups):
            for d in ds:
                shares[d, c] = sizes[d]
        return DomainAssignment(tuple(frozenset(g) for g in groups), shares)

    holders: list[list[int]] = [[d] for d in range(D)]
    client_domain = list(range(D))
    for c in range(D, C):
        # largest n_d / h_d without floating point: compare n_a * h_b vs n_b * h_a
        d_star = 0
        for d in range(1, D):
            if sizes[d] * len(holders[d_star]) > sizes[d_star] * len(holders[d]):
                d_star = d
        holders[d_star].append(c)
        client_domain.append(d_star)
    for d in range(D):
        for c, share in zip(holders[d], _equal_shares(sizes[d], len(holders[d]))):
            shares[d, c] = share
    return DomainAssignment(tuple(frozenset([d]) for d in client_domain), shares)


def _largest_remainder(reals: list[Fraction], total: int) -> list[int]:
    floors = [int(x.numerator // x.denominator) for x in reals]
    remainder = total - sum(floors)
    if remainder < 0 or remainder > len(reals):
        raise ArithmeticError("real-valued shares do not sum to the target total")
    fracs = [x - f for x, f in zip(reals, floors)]
    # stable sort: equal fractional parts go to the lowest client index
    order = sorted(range(len(reals)), key=lambda c: -fracs[c])
    for c in order[:remainder]:
        floors[c] += 1
    return floors


def interpolate_counts(
    assignment: DomainAssignment,
    domain_sizes: Sequence[int],
    lam: float,
    C: int | None = None,
) -> PartitionPlan:
    """Blend the heterogeneous assignment with a homogeneous split.

    Client ``c`` receives ``lam * n_d / C + (1 - lam) * n_d / holders(d)``
    samples of domain ``d`` when it holds ``d`` (only the first term
    otherwise).  Counts are rounded per domain with the largest-remainder
    method so every domain is used exactly.  If rounding leaves a client
    empty, it takes one sample from the currently largest client.
    """
    sizes = _validate_sizes(domain_sizes)
    lam = float(lam)
    if not 0.0 <= lam <= 1.0 or np.isnan(lam):
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    n_clients = assignment.num_clients
    if C is not None and _validate_clients(C) != n_clients:
        raise ValueError(f"assignment covers {n_clients} clients, not {C}")
    if assignment.shares.shape[0] != sizes.size:
        raise ValueError("assignment and domain_sizes disagree on the number of domains")
    C = n_clients
    if int(sizes.sum()) < C:
        raise ValueError(f"{int(sizes.sum())} samples cannot fill {C} non-empty clients")

    lam_q = Fraction(lam)
    counts = np.zeros((sizes.size, C), dtype=np.int64)
    targets: list[list[Fraction]] = []
    for d, n_d in enumerate(sizes.tolist()):
        holders = assignment.holders(d)
        hetero = Fraction(n_d, len(holders))
        reals = [
            lam_q * Fraction(n_d, C) + (1 - lam_q) * (hetero if c in holders else 0)
            for c in range(C)
        ]
        targets.append(reals)
        counts[d] = _largest_remainder(reals, n_d)

    _fill_empty_clients(counts, targets)
    return PartitionPlan(counts=counts, lam=lam)


def _fill_empty_clients(counts: np.ndarray, targets: list[list[Fraction]]) -> None:
    D, C = counts.shape
    while True:
        totals = counts.sum(axis=0)
        empty = np.flatnonzero(totals == 0)
        if empty.size == 0:
            return
        c = int(empty[0])
        donor = int(np.argmax(totals))
        eligible = [d for d in range(D) if targets[d][c] > 0 and counts[d, donor] > 0]
        if not eligible:
            eligible = [d for d in range(D) if counts[d, donor] > 0]
        d = max(eligible, key=lambda k: (counts[k, donor], -k))
        counts[d, donor] -= 1
        counts[d, c] += 1


def partition_heterogeneous(
    domain_sizes: Sequence[int], C: int, lam: float, seed: int = 0
) -> PartitionPlan:
    """Heterogeneous partition plan for ``C`` clients at balance ``lam``.

    Counts depend only on ``domain_sizes``, ``C`` and ``lam``; ``seed`` is
    carried along for :func:`materialize`.

    >>> partition_heterogeneous([10, 20, 30, 40, 100], C=2, lam=0).counts.T.tolist()
    [[10, 20, 30, 40, 0], [0, 0, 0, 0, 100]]
    """
    assignment = assign_domains(domain_sizes, C)
    plan = interpolate_counts(assignment, domain_sizes, lam)
    plan.seed = int(seed)
    return plan


def materialize(plan: PartitionPlan, dataset, seed: int | None = None, domain_ids=None) -> ClientAssignment:
    """Draw concrete sample indices for every client without replacement.

    ``dataset`` may be anything with a ``domains`` array, or the array
    itself.  Plan row ``d`` maps to ``domain_ids[d]`` (default: the sorted
    distinct domain ids of the dataset).  Each domain's indices are shuffled
    once and cut into consecutive blocks, one per client.
    """
    labels = np.asarray(getattr(dataset, "domains", dataset))
    if domain_ids is None:
        domain_ids = np.unique(labels)
    domain_ids = np.asarray(domain_ids)
    if domain_ids.size != plan.num_domains:
        raise ValueError(
            f"plan has {plan.num_domains} domains but dataset provides {domain_ids.size}"
        )
    rng = np.random.default_rng(plan.seed if seed is None else seed)
    per_client_idx: list[list[np.ndarray]] = [[] for _ in range(plan.num_clients)]
    per_client_dom: list[list[np.ndarray]] = [[] for _ in range(plan.num_clients)]
    for d, dom in enumerate(domain_ids.tolist()):
        idx = np.flatnonzero(labels == dom)
        if idx.size != plan.domain_sizes[d]:
            raise ValueError(
                f"domain {dom}: plan expects {int(plan.domain_sizes[d])} samples, "
                f"dataset has {idx.size}"
            )
        idx = rng.permutation(idx)
        bounds = np.concatenate([[0], np.cumsum(plan.counts[d])])
        for c in range(plan.num_clients):
            chunk = idx[bounds[c]:bounds[c + 1]]
            per_client_idx[c].append(chunk)
            per_client_dom[c].append(np.full(chunk.size, dom, dtype=labels.dtype))
    indices = [np.concatenate(parts) if parts else np.empty(0, np.int64) for parts in per_client_idx]
    domains = [np.concatenate(parts) if parts else np.empty(0, labels.dtype) for parts in per_client_dom]
    return ClientAssignment(indices=indices, domains=domains)


def check_constraints(plan: PartitionPlan, domain_sizes: Sequence[int] | None = None) -> ConstraintReport:
    """Evaluate complete heterogeneity (C1), true partition (C2) and balance.

    C1: with more clients than domains every client holds exactly one
    domain; otherwise client domain sets are pairwise disjoint.
    C2: every client is non-empty and the column sums reproduce
    ``domain_sizes`` (when given).
    """
    counts = plan.counts
    D, C = counts.shape
    client_sets = plan.client_domains
    if C > D:
        c1 = all(len(s) == 1 for s in client_sets)
    else:
        c1 = all(
            not (client_sets[a] & client_sets[b])
            for a, b in itertools.combinations(range(C), 2)
        )
    totals = plan.client_totals
    nonempty = bool(np.all(totals >= 1))
    exhaustive = True
    if domain_sizes is not None:
        sizes = np.asarray(domain_sizes, dtype=np.int64)
        exhaustive = sizes.shape == (D,) and bool(np.array_equal(plan.domain_sizes, sizes))
    c2 = nonempty and exhaustive and bool(np.all(counts >= 0))
    return ConstraintReport(
        c1_holds=bool(c1),
        c2_holds=bool(c2),
        variance=sample_variance(totals),
        details={
            "client_totals": totals.tolist(),
            "nonempty_clients": nonempty,
            "exhaustive": exhaustive,
        },
    )


def partition_shards(
    domain_sizes: Sequence[int], C: int, shards_per_client: int = 2, seed: int = 0
) -> PartitionPlan:
    """Sort-and-shard baseline.

    Samples are ordered by domain label and cut into
    ``shards_per_client * C`` contiguous shards of near-equal size; a seeded
    permutation deals ``shards_per_client`` shards to each client.
    """
    sizes = _validate_sizes(domain_sizes)
    C = _validate_clients(C)
    if shards_per_client < 1:
        raise ValueError("shards_per_client must be positive")
    n_total = int(sizes.sum())
    n_shards = shards_per_client * C
    if n_shards > n_total:
        raise ValueError(f"{n_shards} shards requested from only {n_total} samples")
    labels = np.repeat(np.arange(sizes.size), sizes)
    shards = np.array_split(labels, n_shards)
    order = np.random.default_rng(seed).permutation(n_shards)
    counts = np.zeros((sizes.size, C), dtype=np.int64)
    for c in range(C):
        for s in order[c * shards_per_client:(c + 1) * shards_per_client]:
            counts[:, c] += np.bincount(shards[s], minlength=sizes.size)
    return PartitionPlan(counts=counts, lam=None, seed=seed)


def partition_dirichlet(
    domain_sizes: Sequence[int],
    C: int,
    alpha: float,
    seed: int = 0,
    alpha_cap: float = 1e4,
) -> PartitionPlan:
    """Dirichlet baseline sampled without replacement.

    Each client draws domain proportions ``q_c ~ Dir(alpha * p)`` where ``p``
    is the global domain prior, and asks for ``q_c * n / C`` samples of each
    domain.  If the pooled request for any domain exceeds what that domain
    holds, :class:`DirichletInfeasibleError` is raised; nothing is repaired.
    Feasible requests are rounded per domain like the heterogeneous plan.

    For ``alpha >= alpha_cap`` the draw is replaced by ``p`` itself.  With
    a single client the draw is irrelevant: it must receive everything.
    """
    sizes = _validate_sizes(domain_sizes)
    C = _validate_clients(C)
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    n_total = int(sizes.sum())
    prior = sizes / n_total
    if C == 1 or alpha >= alpha_cap:
        q = np.tile(prior, (C, 1))
    else:
        q = np.random.default_rng(seed).dirichlet(alpha * prior, size=C)
    demand = q.T * (n_total / C)
    pooled = demand.sum(axis=1)
    over = np.flatnonzero(pooled > sizes * (1 + 1e-9))
    if over.size:
        d = int(over[0])
        raise DirichletInfeasibleError(
            f"domain {d}: clients request {pooled[d]:.2f} samples but only "
            f"{int(sizes[d])} exist"
        )
    counts = np.zeros((sizes.size, C), dtype=np.int64)
    for d, n_d in enumerate(sizes.tolist()):
        if C == 1 or alpha >= alpha_cap:
            reals = [Fraction(n_d, C)] * C
        else:
            exact = [Fraction(float(x)) for x in demand[d]]
            scale = Fraction(n_d) / sum(exact)
            reals = [x * scale for x in exact]
        counts[d] = _largest_remainder(reals, n_d)
    return PartitionPlan(counts=counts, lam=None, seed=seed)


def brute_force_optimal_variance(domain_sizes: Sequence[int], C: int) -> float:
    """Smallest client-total variance attainable under C1 and C2 at ``lam=0``.

    Exhaustive search, for checking :func:`assign_domains` on small
    instances (at most 6 domains and 6 clients).  With more clients than
    domains every split of clients over domains is tried, holders of one
    domain sharing it evenly; otherwise every surjective grouping of
    domains into ``C`` clients is tried.
    """
    sizes = _validate_sizes(domain_sizes)
    C = _validate_clients(C)
    D = sizes.size
    if D > BRUTE_FORCE_MAX_DOMAINS or C > BRUTE_FORCE_MAX_CLIENTS:
        raise ValueError(
            f"exhaustive search limited to D <= {BRUTE_FORCE_MAX_DOMAINS}, "
            f"C <= {BRUTE_FORCE_MAX_CLIENTS}; got D={D}, C={C}"
        )
    best = np.inf
    if C > D:
        for holders in itertools.product(range(1, C - D + 2), repeat=D):
            if sum(holders) != C:
                continue
            totals = [s for n, h in zip(sizes, holders) for s in _equal_shares(n, h)]
            best = min(best, sample_variance(totals))
    else:
        for labels in itertools.product(range(C), repeat=D):
            if len(set(labels)) != C:
                continue
            totals = np.bincount(labels, weights=sizes, minlength=C)
            best = min(best, sample_variance(totals))
    return float(best)
