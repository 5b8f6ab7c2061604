"""Small differentiable models over flat parameter vectors.

Parameters are plain 1-D float arrays; a :class:`ParamLayout` maps named
blocks (``featurizer.*``, ``classifier.*``) onto index ranges.  Every model
splits into a featurizer, whose output is the representation used by the
alignment penalties, and a linear classifier head.  For ``linear`` and
``logistic`` models the featurizer is the identity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

__all__ = [
    "ModelSpec",
    "ParamLayout",
    "ForwardResult",
    "OptimizerState",
    "ARCHITECTURES",
    "LOSSES",
    "layout_for",
    "init_params",
    "forward",
    "backward",
    "targets_for",
    "per_sample_loss",
    "loss_gradient_wrt_logits",
    "loss_and_grad",
    "make_optimizer",
    "optimizer_step",
    "params_to_json",
    "params_from_json",
]

ARCHITECTURES = ("linear", "logistic", "mlp")
LOSSES = ("cross-entropy", "squared")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and dimensions.

    ``K`` is the number of outputs: classes for ``logistic``/``mlp``, and for
    ``linear`` either 1 (scalar regression) or a one-hot target width.
    """

    arch: str
    p: int
    K: int = 2
    hidden: int = 16
    bias: bool = True

    def __post_init__(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.p < 1 or self.K < 1 or self.hidden < 1:
            raise ValueError("model dimensions must be positive")
        if self.arch != "linear" and self.K < 2:
            raise ValueError(f"{self.arch} model needs K >= 2 classes")

    @property
    def rep_dim(self) -> int:
        return self.hidden if self.arch == "mlp" else self.p

    @property
    def default_loss(self) -> str:
        return "squared" if self.arch == "linear" else "cross-entropy"

    def to_dict(self) -> dict:
        return {"arch": self.arch, "p": self.p, "K": self.K, "hidden": self.hidden, "bias": self.bias}


@dataclass(frozen=True)
class ParamLayout:
    """Ordered named blocks covering a flat parameter vector exactly."""

    blocks: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return sum(math.prod(shape) for _, shape in self.blocks)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.blocks]

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.blocks:
            stop = start + math.prod(shape)
            out[name] = slice(start, stop)
            start = stop
        return out

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        params = np.asarray(params)
        if params.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got shape {params.shape}")
        sl = self.slices()
        return {name: params[sl[name]].reshape(shape) for name, shape in self.blocks}

    def pack(self, blocks: Mapping[str, np.ndarray]) -> np.ndarray:
        if set(blocks) != set(self.names):
            raise ValueError(f"blocks {sorted(blocks)} do not match layout {self.names}")
        parts = []
        for name, shape in self.blocks:
            arr = np.asarray(blocks[name], dtype=float)
            if arr.shape != shape:
                raise ValueError(f"block {name!r} has shape {arr.shape}, expected {shape}")
            parts.append(arr.ravel())
        return np.concatenate(parts) if parts else np.empty(0)

    def to_list(self) -> list[dict]:
        return [{"name": n, "shape": list(s)} for n, s in self.blocks]


def layout_for(spec: ModelSpec) -> ParamLayout:
    blocks: list[tuple[str, tuple[int, ...]]] = []
    if spec.arch == "mlp":
        blocks.append(("featurizer.weight", (spec.p, spec.hidden)))
        if spec.bias:
            blocks.append(("featurizer.bias", (spec.hidden,)))
    blocks.append(("classifier.weight", (spec.rep_dim, spec.K)))
    if spec.bias:
        blocks.append(("classifier.bias", (spec.K,)))
    return ParamLayout(tuple(blocks))


def init_params(spec: ModelSpec, seed: int = 0) -> np.ndarray:
    """Uniform(-a, a) with ``a = 1/sqrt(fan_in)`` for every block."""
    rng = np.random.default_rng(seed)
    layout = layout_for(spec)
    blocks = {}
    for name, shape in layout.blocks:
        fan_in = spec.p if name.startswith("featurizer") else spec.rep_dim
        a = 1.0 / math.sqrt(fan_in)
        blocks[name] = rng.uniform(-a, a, size=shape)
    return layout.pack(blocks)


@dataclass
class ForwardResult:
    logits: np.ndarray
    representation: np.ndarray


def _check_features(spec: ModelSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.p:
        raise ValueError(f"expected features of shape (n, {spec.p}), got {X.shape}")
    return X


def forward(spec: ModelSpec, params: np.ndarray, X) -> ForwardResult:
    X = _check_features(spec, X)
    b = layout_for(spec).unpack(params)
    if spec.arch == "mlp":
        pre = X @ b["featurizer.weight"]
        if spec.bias:
            pre = pre + b["featurizer.bias"]
        rep = np.tanh(pre)
    else:
        rep = X
    logits = rep @ b["classifier.weight"]
    if spec.bias:
        logits = logits + b["classifier.bias"]
    return ForwardResult(logits=logits, representation=rep)


def backward(
    spec: ModelSpec,
    params: np.ndarray,
    X,
    fwd: ForwardResult,
    dlogits: np.ndarray | None = None,
    drep: np.ndarray | None = None,
) -> np.ndarray:
    """Chain upstream gradients on logits and/or representation to params."""
    X = _check_features(spec, X)
    layout = layout_for(spec)
    b = layout.unpack(params)
    grads = {name: np.zeros(shape) for name, shape in layout.blocks}
    rep = fwd.representation
    drep_total = None if drep is None else np.array(drep, dtype=float)
    if dlogits is not None:
        grads["classifier.weight"] = rep.T @ dlogits
        if spec.bias:
            grads["classifier.bias"] = dlogits.sum(axis=0)
        if spec.arch == "mlp":
            back = dlogits @ b["classifier.weight"].T
            drep_total = back if drep_total is None else drep_total + back
    if spec.arch == "mlp" and drep_total is not None:
        dpre = drep_total * (1.0 - rep**2)
        grads["featurizer.weight"] = X.T @ dpre
        if spec.bias:
            grads["featurizer.bias"] = dpre.sum(axis=0)
    return layout.pack(grads)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def targets_for(spec: ModelSpec, y) -> np.ndarray:
    """Turn labels into an ``n x K`` target matrix.

    Integer class ids become one-hot rows; a 2-D array is taken as soft
    labels; real values with ``K == 1`` are regression targets.
    """
    y = np.asarray(y)
    if y.ndim == 2:
        if y.shape[1] != spec.K:
            raise ValueError(f"soft labels need {spec.K} columns, got {y.shape[1]}")
        return y.astype(float)
    if spec.K == 1:
        return y.astype(float)[:, None]
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("class labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= spec.K):
        raise ValueError(f"labels must lie in [0, {spec.K})")
    out = np.zeros((y.size, spec.K))
    out[np.arange(y.size), y] = 1.0
    return out


def per_sample_loss(logits: np.ndarray, targets: np.ndarray, kind: str) -> np.ndarray:
    if kind == "cross-entropy":
        return -(targets * _log_softmax(logits)).sum(axis=1)
    if kind == "squared":
        return ((logits - targets) ** 2).sum(axis=1)
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


def loss_gradient_wrt_logits(logits: np.ndarray, targets: np.ndarray, kind: str) -> np.ndarray:
    """Per-sample derivative of the loss with respect to each logit."""
    if kind == "cross-entropy":
        return _softmax(logits) * targets.sum(axis=1, keepdims=True) - targets
    if kind == "squared":
        return 2.0 * (logits - targets)
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


def loss_and_grad(
    spec: ModelSpec,
    params: np.ndarray,
    X,
    y,
    loss: str | None = None,
    sample_weight: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Weighted loss (mean by default) and its gradient."""
    X = _check_features(spec, X)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    kind = loss or spec.default_loss
    T = targets_for(spec, y)
    w = np.full(n, 1.0 / n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    fwd = forward(spec, params, X)
    value = float(w @ per_sample_loss(fwd.logits, T, kind))
    dlogits = w[:, None] * loss_gradient_wrt_logits(fwd.logits, T, kind)
    return value, backward(spec, params, X, fwd, dlogits=dlogits)


@dataclass
class OptimizerState:
    """SGD or Adam state; Adam moments are created on the first step."""

    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def reset(self) -> "OptimizerState":
        return replace(self, m=None, v=None, t=0)


def make_optimizer(kind: str = "adam", lr: float = 1e-3, **kwargs) -> OptimizerState:
    return OptimizerState(kind=kind, lr=lr, **kwargs)


def optimizer_step(
    state: OptimizerState, params: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, OptimizerState]:
    """One update; returns new params and new state, inputs untouched."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != np.shape(params):
        raise ValueError(f"gradient shape {grad.shape} does not match params {np.shape(params)}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient entries")
    if state.kind == "sgd":
        return params - state.lr * grad, replace(state, t=state.t + 1)
    m = np.zeros_like(grad) if state.m is None else state.m
    v = np.zeros_like(grad) if state.v is None else state.v
    if m.shape != grad.shape:
        raise ValueError("Adam moments do not match the parameter vector")
    t = state.t + 1
    m = state.beta1 * m + (1 - state.beta1) * grad
    v = state.beta2 * v + (1 - state.beta2) * grad**2
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, t=t)


def params_to_json(spec: ModelSpec, params: np.ndarray) -> str:
    return json.dumps(
        {"model": spec.to_dict(), "layout": layout_for(spec).to_list(), "values": np.asarray(params).tolist()}
    )


def params_from_json(text: str) -> tuple[ModelSpec, np.ndarray]:
    payload = json.loads(text)
    spec = ModelSpec(**payload["model"])
    layout = layout_for(spec)
    if layout.to_list() != payload["layout"]:
        raise ValueError("stored layout does not match the model spec")
    values = np.asarray(payload["values"], dtype=float)
    if values.shape != (layout.size,):
        raise ValueError(f"expected {layout.size} values, got {values.size}")
    return spec, values
