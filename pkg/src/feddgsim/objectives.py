"""Local training objectives for domain generalization on federated clients.

Penalties act either on logits (IRM) or on featurizer representations
(CORAL, MMD, FedSR).  Functions taking ``return_grad=True`` also return
the gradient with respect to their array inputs so that
:func:`objective_and_grad` can chain it back through the model.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import model as M

__all__ = [
    "METHODS",
    "DG_METHODS",
    "DomainBatch",
    "DroWeights",
    "PenaltyConfig",
    "erm_loss",
    "irm_penalty",
    "coral_penalty",
    "mmd_penalty",
    "median_bandwidth",
    "groupdro_update",
    "mixup_batch",
    "fish_meta_step",
    "prox_term",
    "fedsr_regularizers",
    "objective_and_grad",
]

METHODS = (
    "erm",
    "fedavg",
    "irm",
    "fish",
    "mixup",
    "mmd",
    "coral",
    "groupdro",
    "fedprox",
    "scaffold",
    "afl",
    "fedsr",
    "fedgma",
)
# centralized DG objectives run inside each client; they collapse to ERM on
# clients that hold a single domain
DG_METHODS = ("irm", "fish", "mixup", "mmd", "coral", "groupdro")


@dataclass
class DomainBatch:
    """Rows of one client batch grouped by domain, in ascending domain order."""

    domains: tuple[int, ...]
    features: list[np.ndarray]
    labels: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(set(self.domains)) != len(self.domains):
            raise ValueError("domain ids in a batch must be distinct")
        if not (len(self.domains) == len(self.features) == len(self.labels)):
            raise ValueError("one feature and label block per domain is required")
        if any(len(x) == 0 for x in self.features):
            raise ValueError("every domain sub-batch must be non-empty")

    @classmethod
    def from_arrays(cls, X, y, g) -> "DomainBatch":
        g = np.asarray(g)
        doms = np.unique(g)
        return cls(
            tuple(int(d) for d in doms),
            [np.asarray(X)[g == d] for d in doms],
            [np.asarray(y)[g == d] for d in doms],
        )

    def __len__(self) -> int:
        return len(self.domains)


@dataclass
class DroWeights:
    """Group weights ``q`` on the simplex and their step size."""

    q: np.ndarray
    eta: float = 0.01

    @classmethod
    def uniform(cls, D: int, eta: float = 0.01) -> "DroWeights":
        return cls(np.full(D, 1.0 / D), eta)

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, dtype=float)
        if self.q.ndim != 1 or np.any(self.q < 0) or abs(self.q.sum() - 1.0) > 1e-9:
            raise ValueError("DRO weights must lie on the probability simplex")


# config-file hyperparameter names, lowercased and hyphenated
_HYPER_NAMES = {
    "penalty-weight": "penalty_weight",
    "alpha": "mixup_alpha",
    "meta-lr": "meta_lr",
    "mu": "mu",
    "group-lr": "group_lr",
    "l2-regularizer": "l2_regularizer",
    "cmi-regularizer": "cmi_regularizer",
    "mask-threshold": "mask_threshold",
    "bandwidth": "bandwidth",
    "beta-lr": "beta_lr",
    "server-lr": "server_lr",
}


@dataclass(frozen=True)
class PenaltyConfig:
    method: str = "erm"
    penalty_weight: float = 1.0
    mixup_alpha: float = 0.2
    meta_lr: float = 0.1
    mu: float = 0.01
    group_lr: float = 0.01
    l2_regularizer: float = 0.01
    cmi_regularizer: float = 0.001
    mask_threshold: float = 0.4
    bandwidth: float | None = None
    beta_lr: float = 0.01
    server_lr: float = 1.0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for name in ("penalty_weight", "mu", "group_lr", "l2_regularizer", "cmi_regularizer", "beta_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name.replace('_', '-')} must be non-negative")
        if not self.mixup_alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ValueError("mask-threshold must lie in [0, 1]")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not self.server_lr > 0 or not self.meta_lr >= 0:
            raise ValueError("server-lr must be positive and meta-lr non-negative")

    @classmethod
    def from_dict(cls, payload: Mapping) -> "PenaltyConfig":
        payload = dict(payload)
        kwargs = {"method": payload.pop("method", payload.pop("id", "erm"))}
        known = {f.name for f in fields(cls)}
        for key, val in payload.items():
            attr = _HYPER_NAMES.get(key, key.replace("-", "_"))
            if attr not in known or attr == "method":
                raise ValueError(f"unknown hyperparameter {key!r}")
            kwargs[attr] = val
        return cls(**kwargs)

    def to_dict(self) -> dict:
        inverse = {v: k for k, v in _HYPER_NAMES.items()}
        out = {"method": self.method}
        for f in fields(self):
            if f.name != "method":
                out[inverse[f.name]] = getattr(self, f.name)
        return out


def erm_loss(spec: M.ModelSpec, params, X, y, loss: str | None = None) -> float:
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise ValueError("empty batch")
    fwd = M.forward(spec, params, X)
    return float(M.per_sample_loss(fwd.logits, M.targets_for(spec, y), loss or spec.default_loss).mean())


def _irm_terms(logits: np.ndarray, targets: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    # scale derivative of the risk of (w * logits) at w = 1, and its gradient in the logits
    n = logits.shape[0]
    if kind == "squared":
        g = float((2.0 * logits * (logits - targets)).sum() / n)
        dg = (4.0 * logits - 2.0 * targets) / n
    elif kind == "cross-entropy":
        probs = M._softmax(logits)
        mass = targets.sum(axis=1, keepdims=True)
        resid = probs * mass - targets
        g = float((resid * logits).sum() / n)
        zbar = (probs * logits).sum(axis=1, keepdims=True)
        dg = (resid + mass * probs * (logits - zbar)) / n
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return g, dg


def irm_penalty(
    spec: M.ModelSpec,
    params,
    domain_batches: DomainBatch | Sequence[tuple[np.ndarray, np.ndarray]],
    loss: str | None = None,
) -> float:
    """Mean over domains of the squared gradient of the domain risk with
    respect to a scalar multiplier on the logits, taken at 1."""
    if isinstance(domain_batches, DomainBatch):
        domain_batches = list(zip(domain_batches.features, domain_batches.labels))
    if not domain_batches:
        raise ValueError("IRM penalty needs at least one domain")
    kind = loss or spec.default_loss
    terms = []
    for X, y in domain_batches:
        logits = M.forward(spec, params, X).logits
        g, _ = _irm_terms(logits, M.targets_for(spec, y), kind)
        terms.append(g * g)
    return float(np.mean(terms))


def _coral_pair(a: np.ndarray, b: np.ndarray):
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca, cb = a - mu_a, b - mu_b
    cov_a = ca.T @ ca / (len(a) - 1)
    cov_b = cb.T @ cb / (len(b) - 1)
    dmu, dcov = mu_a - mu_b, cov_a - cov_b
    value = float(dmu @ dmu + (dcov**2).sum())
    ga = 2.0 * dmu / len(a) + 4.0 * ca @ dcov / (len(a) - 1)
    gb = -2.0 * dmu / len(b) - 4.0 * cb @ dcov / (len(b) - 1)
    return value, ga, gb


def coral_penalty(reps: Sequence[np.ndarray], return_grad: bool = False):
    """Mean over domain pairs of squared mean distance plus squared Frobenius
    distance of (unbiased) covariances."""
    reps = [np.atleast_2d(np.asarray(r, dtype=float)) for r in reps]
    if len(reps) < 2:
        raise ValueError("CORAL needs at least two domains")
    if any(len(r) < 2 for r in reps):
        raise ValueError("CORAL needs at least two samples per domain")
    pairs = list(itertools.combinations(range(len(reps)), 2))
    total = 0.0
    grads = [np.zeros_like(r) for r in reps]
    for i, j in pairs:
        v, gi, gj = _coral_pair(reps[i], reps[j])
        total += v
        grads[i] += gi
        grads[j] += gj
    value = total / len(pairs)
    if return_grad:
        return value, [g / len(pairs) for g in grads]
    return value


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.maximum((a**2).sum(1)[:, None] + (b**2).sum(1)[None, :] - 2.0 * a @ b.T, 0.0)


def median_bandwidth(reps: Sequence[np.ndarray]) -> float:
    """Median pairwise Euclidean distance over the pooled representations."""
    pooled = np.concatenate([np.atleast_2d(r) for r in reps])
    if len(pooled) < 2:
        return 1.0
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(np.sqrt(_sq_dists(pooled, pooled)[iu])))
    return med if med > 0 else 1.0


def _mean_kernel(a, b, sigma):
    k = np.exp(-_sq_dists(a, b) / (2.0 * sigma**2))
    # gradient of mean(k) with respect to rows of a
    grad_a = -(k.sum(1)[:, None] * a - k @ b) / (sigma**2 * len(a) * len(b))
    return float(k.mean()), grad_a, k


def mmd_penalty(reps: Sequence[np.ndarray], bandwidth: float | None = None, return_grad: bool = False):
    """Mean over domain pairs of the biased (V-statistic) squared MMD with a
    Gaussian kernel.  ``bandwidth=None`` uses the median heuristic, treated
    as a constant for differentiation."""
    reps = [np.atleast_2d(np.asarray(r, dtype=float)) for r in reps]
    if len(reps) < 2:
        raise ValueError("MMD needs at least two domains")
    sigma = median_bandwidth(reps) if bandwidth is None else float(bandwidth)
    if not sigma > 0:
        raise ValueError("bandwidth must be positive")
    pairs = list(itertools.combinations(range(len(reps)), 2))
    total = 0.0
    grads = [np.zeros_like(r) for r in reps]
    for i, j in pairs:
        a, b = reps[i], reps[j]
        kaa, gaa, _ = _mean_kernel(a, a, sigma)
        kbb, gbb, _ = _mean_kernel(b, b, sigma)
        kab, gab, k = _mean_kernel(a, b, sigma)
        total += kaa + kbb - 2.0 * kab
        # symmetric within-domain kernels count each row twice
        grads[i] += 2.0 * gaa - 2.0 * gab
        gba = -(k.sum(0)[:, None] * b - k.T @ a) / (sigma**2 * len(a) * len(b))
        grads[j] += 2.0 * gbb - 2.0 * gba
    value = max(total / len(pairs), 0.0)
    if return_grad:
        return value, [g / len(pairs) for g in grads]
    return value


def groupdro_update(weights: DroWeights, losses: Mapping[int, float]) -> tuple[float, DroWeights]:
    """Exponentiated-gradient step on the group weights.

    Only domains present in ``losses`` move; the rest keep their weight up
    to renormalization.  Returns the loss reweighted with the new weights.
    """
    q = weights.q.copy()
    for d, l in losses.items():
        if not np.isfinite(l):
            raise ValueError(f"non-finite loss for domain {d}")
        q[d] *= np.exp(weights.eta * l)
    total = q.sum()
    assert total > 0, "DRO weights collapsed to zero"
    q /= total
    value = float(sum(q[d] * l for d, l in losses.items()))
    return value, replace(weights, q=q)


def mixup_batch(
    batch1: tuple[np.ndarray, np.ndarray],
    batch2: tuple[np.ndarray, np.ndarray],
    alpha: float = 0.2,
    seed=None,
    mix: float | None = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Convex mix of two batches with ``m ~ Beta(alpha, alpha)``.

    Labels must already be target rows (one-hot or soft).  Batches of
    unequal length are truncated to the shorter one.  Pass ``mix`` to fix
    ``m`` instead of drawing it.
    """
    (x1, t1), (x2, t2) = batch1, batch2
    x1, x2 = np.atleast_2d(x1), np.atleast_2d(x2)
    t1, t2 = np.atleast_2d(t1), np.atleast_2d(t2)
    if x1.shape[1] != x2.shape[1] or t1.shape[1] != t2.shape[1]:
        raise ValueError("mixup batches must share feature and label dimensions")
    if mix is None:
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        mix = float(np.random.default_rng(seed).beta(alpha, alpha))
    n = min(len(x1), len(x2))
    x = mix * x1[:n] + (1.0 - mix) * x2[:n]
    t = mix * t1[:n] + (1.0 - mix) * t2[:n]
    return x, t, mix


def fish_meta_step(params, params_tilde, meta_lr: float) -> np.ndarray:
    params, params_tilde = np.asarray(params), np.asarray(params_tilde)
    if params.shape != params_tilde.shape:
        raise ValueError("parameter layouts differ")
    return params + meta_lr * (params_tilde - params)


def prox_term(params, global_params, mu: float, return_grad: bool = False):
    """``mu/2 * ||params - global_params||^2``."""
    diff = np.asarray(params, dtype=float) - np.asarray(global_params, dtype=float)
    if diff.ndim != 1 or np.shape(params) != np.shape(global_params):
        raise ValueError("parameter layouts differ")
    value = 0.5 * mu * float(diff @ diff)
    if return_grad:
        return value, mu * diff
    return value


def fedsr_regularizers(
    reps, labels, l2_coeff: float = 0.01, cmi_coeff: float = 0.001, return_grad: bool = False
):
    """L2 penalty on representations plus a within-class variance term.

    The second term, the class-frequency weighted trace of each class's
    population covariance, stands in for the conditional mutual
    information bound of FedSR.
    """
    z = np.atleast_2d(np.asarray(reps, dtype=float))
    y = np.asarray(labels)
    n = len(z)
    if n == 0:
        raise ValueError("empty input")
    l2 = float((z**2).sum() / n)
    centered = np.empty_like(z)
    for k in np.unique(y):
        rows = y == k
        centered[rows] = z[rows] - z[rows].mean(axis=0)
    cmi = float((centered**2).sum() / n)
    value = l2_coeff * l2 + cmi_coeff * cmi
    if return_grad:
        return value, (2.0 * l2_coeff * z + 2.0 * cmi_coeff * centered) / n
    return value


@dataclass
class ObjectiveContext:
    """Per-client inputs some objectives need besides the batch."""

    single_domain: bool = False
    global_params: np.ndarray | None = None
    dro: DroWeights | None = None
    afl_beta: np.ndarray | None = None
    rng: np.random.Generator | None = None
    info: dict = field(default_factory=dict)


def _domain_weights(g: np.ndarray, doms: np.ndarray, per_domain: np.ndarray) -> np.ndarray:
    # per-sample weights giving domain d total mass per_domain[d], spread evenly
    w = np.empty(len(g))
    for d, mass in zip(doms, per_domain):
        rows = g == d
        w[rows] = mass / rows.sum()
    return w


def objective_and_grad(
    spec: M.ModelSpec,
    params: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    g: np.ndarray,
    cfg: PenaltyConfig,
    ctx: ObjectiveContext | None = None,
    loss: str | None = None,
) -> tuple[float, np.ndarray]:
    """Loss and gradient of the configured local objective on one batch.

    DG objectives weight each domain present in the batch equally; on a
    client that holds one domain they are plain ERM.  Fish is not handled
    here (it needs an inner loop) and falls back to ERM.
    """
    ctx = ctx or ObjectiveContext()
    kind = loss or spec.default_loss
    method = cfg.method
    if method in DG_METHODS and ctx.single_domain:
        method = "erm"
    X = np.asarray(X, dtype=float)
    g = np.asarray(g)
    n = len(X)
    if n == 0:
        raise ValueError("empty batch")
    doms = np.unique(g)

    if method == "mixup" and len(doms) > 1:
        T = M.targets_for(spec, y)
        xs, ts = [], []
        for a, b in zip(doms, np.roll(doms, -1)):
            xm, tm, _ = mixup_batch((X[g == a], T[g == a]), (X[g == b], T[g == b]), cfg.mixup_alpha, ctx.rng)
            xs.append(xm)
            ts.append(tm)
        Xm, Tm = np.concatenate(xs), np.concatenate(ts)
        w = np.concatenate([np.full(len(x), 1.0 / (len(xs) * len(x))) for x in xs])
        return M.loss_and_grad(spec, params, Xm, Tm, kind, sample_weight=w)

    fwd = M.forward(spec, params, X)
    T = M.targets_for(spec, y)
    per = M.per_sample_loss(fwd.logits, T, kind)
    dper = M.loss_gradient_wrt_logits(fwd.logits, T, kind)
    dom_loss = np.array([per[g == d].mean() for d in doms])

    if method == "groupdro":
        dro = ctx.dro or DroWeights.uniform(int(doms.max()) + 1, cfg.group_lr)
        _, dro = groupdro_update(dro, {int(d): float(l) for d, l in zip(doms, dom_loss)})
        ctx.dro = dro
        q = dro.q[doms]
        w = _domain_weights(g, doms, q / q.sum())
    elif method == "afl":
        beta = ctx.afl_beta
        if beta is None:
            raise ValueError("AFL objective needs the broadcast domain weights")
        w = _domain_weights(g, doms, beta[doms])
    elif method in DG_METHODS:
        w = _domain_weights(g, doms, np.full(len(doms), 1.0 / len(doms)))
    else:
        w = np.full(n, 1.0 / n)
    value = float(w @ per)
    dlogits = w[:, None] * dper
    drep = None

    if method == "irm":
        pw = cfg.penalty_weight
        for d in doms:
            rows = g == d
            gval, dg = _irm_terms(fwd.logits[rows], T[rows], kind)
            value += pw * gval * gval / len(doms)
            dlogits[rows] += pw * 2.0 * gval * dg / len(doms)
    elif method in ("coral", "mmd"):
        usable = [d for d in doms if (g == d).sum() >= (2 if method == "coral" else 1)]
        if len(usable) >= 2:
            reps = [fwd.representation[g == d] for d in usable]
            if method == "coral":
                pen, grads = coral_penalty(reps, return_grad=True)
            else:
                pen, grads = mmd_penalty(reps, cfg.bandwidth, return_grad=True)
            value += cfg.penalty_weight * pen
            drep = np.zeros_like(fwd.representation)
            for d, gr in zip(usable, grads):
                drep[g == d] = cfg.penalty_weight * gr
    elif method == "fedsr":
        pen, gr = fedsr_regularizers(
            fwd.representation, y, cfg.l2_regularizer, cfg.cmi_regularizer, return_grad=True
        )
        value += pen
        drep = gr

    grad = M.backward(spec, params, X, fwd, dlogits=dlogits, drep=drep)
    if method == "fedprox":
        if ctx.global_params is None:
            raise ValueError("FedProx objective needs the global parameters")
        pv, pg = prox_term(params, ctx.global_params, cfg.mu, return_grad=True)
        value += pv
        grad = grad + pg
    return value, grad
