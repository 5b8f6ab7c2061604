"""Server-side aggregation rules."""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "project_simplex",
    "normalized_weights",
    "aggregate_fedavg",
    "averaged_update",
    "sign_agreement_mask",
    "aggregate_fedgma",
    "scaffold_server_control",
]


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold).

    >>> project_simplex([1.5, 0.5]).tolist()
    [1.0, 0.0]
    """
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("cannot project an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector must be finite")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def normalized_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("need at least one client weight")
    if np.any(w < 0):
        raise ValueError("client weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("total client weight is zero")
    return w / total


def aggregate_fedavg(client_params: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Sample-size weighted average of client parameters.

    >>> aggregate_fedavg([np.array([1., 3.]), np.array([3., 5.])], [1, 3]).tolist()
    [2.5, 4.5]
    """
    w = normalized_weights(weights)
    if len(client_params) != w.size:
        raise ValueError("one weight per client is required")
    out = np.zeros_like(np.asarray(client_params[0], dtype=float))
    # fixed summation order: ascending client position
    for wc, theta in zip(w, client_params):
        out = out + wc * np.asarray(theta, dtype=float)
    return out


def averaged_update(deltas: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    return aggregate_fedavg(deltas, weights)


def sign_agreement_mask(deltas: Sequence[np.ndarray], threshold: float) -> np.ndarray:
    """Soft gradient mask.

    Per coordinate, the agreement is the fraction of clients whose update
    has the majority sign.  Coordinates at or above ``threshold`` keep
    weight 1; the rest are scaled by their agreement.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("mask threshold must lie in [0, 1]")
    signs = np.sign(np.stack([np.asarray(d, dtype=float) for d in deltas]))
    n = signs.shape[0]
    pos = (signs > 0).sum(axis=0)
    neg = (signs < 0).sum(axis=0)
    agreement = np.maximum(pos, neg) / n
    agreement[(pos == 0) & (neg == 0)] = 1.0
    return np.where(agreement >= threshold, 1.0, agreement)


def aggregate_fedgma(
    global_params: np.ndarray,
    deltas: Sequence[np.ndarray],
    weights: Sequence[float],
    threshold: float,
    server_lr: float = 1.0,
) -> np.ndarray:
    """Apply the masked, weighted average of client updates."""
    if len(deltas) == 0:
        raise ValueError("no client updates to aggregate")
    mask = sign_agreement_mask(deltas, threshold)
    return np.asarray(global_params, dtype=float) + server_lr * (mask * averaged_update(deltas, weights))


def scaffold_server_control(
    control: np.ndarray, control_deltas: Sequence[np.ndarray], num_clients: int
) -> np.ndarray:
    """``c + |S|/C * mean(c_i_new - c_i)`` over the participating set ``S``."""
    if not control_deltas:
        return control
    acc = np.zeros_like(control)
    for d in control_deltas:
        acc = acc + d
    return control + (len(control_deltas) / num_clients) * (acc / len(control_deltas))
