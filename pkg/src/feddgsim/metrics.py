"""Accuracy, dataset difficulty ratios and validation-based model selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import model as M

__all__ = [
    "SelectionPolicy",
    "Selection",
    "DifficultyReport",
    "evaluate",
    "performance_ratio",
    "compute_r_dg",
    "compute_r_fl",
    "select_model",
]

VALIDATION_SPLITS = {"heldout-domain": "heldout_val", "in-domain": "in_domain_val"}


def evaluate(spec: M.ModelSpec, params, dataset) -> float:
    """Fraction of rows whose highest logit is the true class.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = M.forward(spec, params, dataset.features).logits
    if logits.shape[1] == 1:
        raise ValueError("accuracy needs a classifier with at least two outputs")
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(dataset.labels)))


def performance_ratio(numerator: float, denominator: float) -> float:
    if denominator == 0:
        raise ZeroDivisionError("reference performance is zero; ratio undefined")
    ratio = numerator / denominator
    if not np.isfinite(ratio):
        raise ValueError("ratio is not finite")
    return float(ratio)


@dataclass
class DifficultyReport:
    """Difficulty ratios with the performances behind them."""

    r_dg: float | None = None
    r_fl: dict[float, float] = field(default_factory=dict)
    performances: dict[str, float] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "r_dg": self.r_dg,
            "r_fl": {repr(float(k)): v for k, v in sorted(self.r_fl.items())},
            "performances": dict(self.performances),
            "notes": dict(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


TrainFn = Callable[..., np.ndarray]


def compute_r_dg(
    spec: M.ModelSpec,
    train,
    dg_test_eval,
    dg_test_pool,
    train_fn: TrainFn,
    report: DifficultyReport | None = None,
) -> float:
    """ERM accuracy on the 20% DG-test cut when trained without, over when
    trained with, the 80% DG-test pool.

    ``train_fn(dataset) -> params`` is the ERM procedure; it receives the
    plain training set and then the pooled set (no reweighting).
    """
    from .dataspace import DomainDataset

    if len(dg_test_eval) == 0 or len(dg_test_pool) == 0:
        raise ValueError("both DG-test cuts must be non-empty")
    without = evaluate(spec, train_fn(train), dg_test_eval)
    with_cheat = evaluate(spec, train_fn(DomainDataset.concat([train, dg_test_pool])), dg_test_eval)
    ratio = performance_ratio(without, with_cheat)
    if report is not None:
        report.r_dg = ratio
        report.performances["erm_dg_train"] = without
        report.performances["erm_dg_train_plus_pool"] = with_cheat
    return ratio


def compute_r_fl(
    spec: M.ModelSpec,
    train,
    in_domain_test,
    lam: float,
    C: int,
    fl_fn: TrainFn,
    central_fn: TrainFn,
    report: DifficultyReport | None = None,
) -> float:
    """In-domain test accuracy of FedAvg at ``(lam, C)`` over centralized ERM.

    ``fl_fn(train, lam, C) -> params`` and ``central_fn(train) -> params``.
    """
    if len(in_domain_test) == 0 or len(train) == 0:
        raise ValueError("training and in-domain test sets must be non-empty")
    fed = evaluate(spec, fl_fn(train, lam, C), in_domain_test)
    central = evaluate(spec, central_fn(train), in_domain_test)
    ratio = performance_ratio(fed, central)
    if report is not None:
        report.r_fl[float(lam)] = ratio
        report.performances[f"fedavg_lambda_{lam:g}"] = fed
        report.performances["erm_in_domain"] = central
    return ratio


@dataclass(frozen=True)
class SelectionPolicy:
    split: str = "heldout-domain"
    runs: int = 1
    metric: str = "accuracy"

    def __post_init__(self) -> None:
        if self.split not in VALIDATION_SPLITS:
            raise ValueError(f"unknown validation split {self.split!r}; expected one of {list(VALIDATION_SPLITS)}")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")

    @property
    def split_name(self) -> str:
        return VALIDATION_SPLITS[self.split]

    def to_dict(self) -> dict:
        return {"split": self.split, "runs": self.runs, "metric": self.metric}


@dataclass(frozen=True)
class Selection:
    run: int
    round: int
    value: float


def _rows(record) -> Sequence[Mapping]:
    return getattr(record, "rows", record)


def select_model(records: Sequence, policy: SelectionPolicy) -> Selection:
    """Best validation value over every round of every run.

    Ties go to the earliest round, then to the lowest run position.
    """
    split = policy.split_name
    best: tuple[float, int, int] | None = None
    for run, record in enumerate(records):
        for row in _rows(record):
            if row["split"] != split or row["metric"] != policy.metric:
                continue
            key = (-float(row["value"]), int(row["round"]), run)
            if best is None or key < best:
                best = key
    if best is None:
        raise ValueError(f"no run evaluated the {split!r} split")
    return Selection(run=best[2], round=best[1], value=-best[0])
