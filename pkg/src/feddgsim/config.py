"""Experiment configuration: JSON in, validated dataclasses out."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .dataspace import CsvSchema, ShiftRecipe, SplitSpec
from .metrics import SelectionPolicy
from .model import ARCHITECTURES, LOSSES
from .objectives import PenaltyConfig

__all__ = [
    "ConfigError",
    "DataConfig",
    "PartitionConfig",
    "ModelConfig",
    "OptimizerConfig",
    "ExperimentConfig",
    "SweepSpec",
    "load_config",
    "OUT_DIR_ENV",
]

OUT_DIR_ENV = "FEDDGSIM_OUT_DIR"
PARTITION_METHODS = ("heterogeneous", "shards", "dirichlet")
SWEEP_AXES = ("lambda", "clients", "communication")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _wrap(field_name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(field_name, str(exc)) from None


def _check_keys(field_name: str, payload: dict, allowed: set[str]) -> None:
    if not isinstance(payload, dict):
        raise ConfigError(field_name, "expected a JSON object")
    extra = sorted(set(payload) - allowed)
    if extra:
        raise ConfigError(f"{field_name}.{extra[0]}", "unknown key")


@dataclass(frozen=True)
class DataConfig:
    """Synthetic recipe or CSV file."""

    recipe: ShiftRecipe | None = None
    domains: int = 4
    classes: int = 2
    n_per_domain: int | tuple[int, ...] = 200
    features: int = 5
    csv_path: str | None = None
    csv_schema: CsvSchema | None = None

    @classmethod
    def from_dict(cls, payload: dict) -> "DataConfig":
        _check_keys("data", payload, {"synthetic", "csv"})
        if ("synthetic" in payload) == ("csv" in payload):
            raise ConfigError("data", "give exactly one of 'synthetic' or 'csv'")
        if "csv" in payload:
            c = payload["csv"]
            _check_keys("data.csv", c, {"path", "schema"})
            if "path" not in c:
                raise ConfigError("data.csv.path", "missing")
            schema = _wrap("data.csv.schema", CsvSchema.from_dict, c["schema"]) if "schema" in c else None
            return cls(csv_path=str(c["path"]), csv_schema=schema)
        s = dict(payload["synthetic"])
        _check_keys(
            "data.synthetic",
            s,
            {"kind", "magnitudes", "class_separation", "noise", "domains", "classes", "n_per_domain", "features"},
        )
        mags = s.get("magnitudes", 0.0)
        recipe = _wrap(
            "data.synthetic",
            ShiftRecipe,
            kind=s.get("kind", "mean-shift"),
            magnitudes=tuple(mags) if isinstance(mags, list) else float(mags),
            class_separation=float(s.get("class_separation", 3.0)),
            noise=float(s.get("noise", 1.0)),
        )
        n = s.get("n_per_domain", 200)
        out = cls(
            recipe=recipe,
            domains=int(s.get("domains", 4)),
            classes=int(s.get("classes", 2)),
            n_per_domain=tuple(int(v) for v in n) if isinstance(n, list) else int(n),
            features=int(s.get("features", 5)),
        )
        for name in ("domains", "classes", "features"):
            if getattr(out, name) < 1:
                raise ConfigError(f"data.synthetic.{name}", "must be positive")
        return out

    def to_dict(self) -> dict:
        if self.csv_path is not None:
            c: dict[str, Any] = {"path": self.csv_path}
            if self.csv_schema is not None:
                c["schema"] = self.csv_schema.to_dict()
            return {"csv": c}
        r = self.recipe
        return {
            "synthetic": {
                "kind": r.kind,
                "magnitudes": list(r.magnitudes) if isinstance(r.magnitudes, tuple) else r.magnitudes,
                "class_separation": r.class_separation,
                "noise": r.noise,
                "domains": self.domains,
                "classes": self.classes,
                "n_per_domain": list(self.n_per_domain) if isinstance(self.n_per_domain, tuple) else self.n_per_domain,
                "features": self.features,
            }
        }


@dataclass(frozen=True)
class PartitionConfig:
    method: str = "heterogeneous"
    lam: float = 1.0
    clients: int = 10
    seed: int | None = None
    alpha: float = 1.0
    shards_per_client: int = 2

    def __post_init__(self) -> None:
        if self.method not in PARTITION_METHODS:
            raise ConfigError("partition.method", f"expected one of {PARTITION_METHODS}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda", f"must lie in [0, 1], got {self.lam}")
        if self.clients < 1:
            raise ConfigError("partition.clients", "must be at least 1")
        if not self.alpha > 0:
            raise ConfigError("partition.alpha", "must be positive")
        if self.shards_per_client < 1:
            raise ConfigError("partition.shards_per_client", "must be at least 1")

    @classmethod
    def from_dict(cls, payload: dict) -> "PartitionConfig":
        _check_keys("partition", payload, {"method", "lambda", "clients", "seed", "alpha", "shards_per_client"})
        try:
            lam = float(payload.get("lambda", 1.0))
        except (TypeError, ValueError):
            raise ConfigError("lambda", "must be a number") from None
        return cls(
            method=payload.get("method", "heterogeneous"),
            lam=lam,
            clients=int(payload.get("clients", 10)),
            seed=None if payload.get("seed") is None else int(payload["seed"]),
            alpha=float(payload.get("alpha", 1.0)),
            shards_per_client=int(payload.get("shards_per_client", 2)),
        )

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "lambda": self.lam,
            "clients": self.clients,
            "seed": self.seed,
            "alpha": self.alpha,
            "shards_per_client": self.shards_per_client,
        }


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "mlp"
    hidden: int = 16
    bias: bool = True
    loss: str | None = None

    def __post_init__(self) -> None:
        if self.arch not in ARCHITECTURES or self.arch == "linear":
            raise ConfigError("model.arch", "experiments need a classifier: 'logistic' or 'mlp'")
        if self.hidden < 1:
            raise ConfigError("model.hidden", "must be positive")
        if self.loss is not None and self.loss not in LOSSES:
            raise ConfigError("model.loss", f"expected one of {LOSSES}")

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        _check_keys("model", payload, {"arch", "hidden", "bias", "loss"})
        return cls(
            arch=payload.get("arch", "mlp"),
            hidden=int(payload.get("hidden", 16)),
            bias=bool(payload.get("bias", True)),
            loss=payload.get("loss"),
        )

    def to_dict(self) -> dict:
        return {"arch": self.arch, "hidden": self.hidden, "bias": self.bias, "loss": self.loss}


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 0.01

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ConfigError("optimizer.kind", "expected 'sgd' or 'adam'")
        if not self.lr > 0:
            raise ConfigError("optimizer.lr", "must be positive")

    @classmethod
    def from_dict(cls, payload: dict) -> "OptimizerConfig":
        _check_keys("optimizer", payload, {"kind", "lr"})
        return cls(kind=payload.get("kind", "adam"), lr=float(payload.get("lr", 0.01)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitSpec = field(default_factory=lambda: SplitSpec(train_domains=(0,)))
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    method: PenaltyConfig = field(default_factory=PenaltyConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    selection: SelectionPolicy = field(default_factory=SelectionPolicy)
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int | None = 32
    participation: float = 1.0
    seed: int = 0
    runs: int = 1
    output_dir: str = "runs"
    difficulty: bool = False
    checkpoints: bool = False
    round_budget: int | None = None

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ConfigError("rounds", "must be non-negative")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs", "must be at least 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size", "must be positive or null for full batch")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError("participation", "must lie in (0, 1]")
        if self.runs < 1:
            raise ConfigError("runs", "must be at least 1")
        if self.round_budget is not None and self.rounds > self.round_budget:
            raise ConfigError("rounds", f"exceeds the communication budget of {self.round_budget}")
        if self.data.recipe is not None:
            d = self.data.domains
            used = (*self.split.train_domains, *self.split.heldout_validation_domains, *self.split.test_domains)
            bad = [x for x in used if not 0 <= x < d]
            if bad:
                raise ConfigError("split", f"domains {bad} outside the {d} synthetic domains")

    _SECTIONS = ("data", "split", "partition", "model", "method", "optimizer", "selection")
    _SCALARS = (
        "rounds",
        "local_epochs",
        "batch_size",
        "participation",
        "seed",
        "runs",
        "output_dir",
        "difficulty",
        "checkpoints",
        "round_budget",
    )

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        _check_keys("config", payload, set(cls._SECTIONS) | set(cls._SCALARS))
        kwargs: dict[str, Any] = {}
        if "data" in payload:
            kwargs["data"] = DataConfig.from_dict(payload["data"])
        if "split" in payload:
            kwargs["split"] = _wrap("split", SplitSpec.from_dict, payload["split"])
        if "partition" in payload:
            kwargs["partition"] = PartitionConfig.from_dict(payload["partition"])
        if "model" in payload:
            kwargs["model"] = ModelConfig.from_dict(payload["model"])
        if "method" in payload:
            m = payload["method"]
            kwargs["method"] = _wrap("method", PenaltyConfig.from_dict, {"method": m} if isinstance(m, str) else m)
        if "optimizer" in payload:
            kwargs["optimizer"] = OptimizerConfig.from_dict(payload["optimizer"])
        if "selection" in payload:
            sel = payload["selection"]
            _check_keys("selection", sel, {"split", "runs", "metric"})
            kwargs["selection"] = _wrap("selection", SelectionPolicy, **sel)
        casts = {
            "rounds": int,
            "local_epochs": int,
            "participation": float,
            "seed": int,
            "runs": int,
            "output_dir": str,
            "difficulty": bool,
            "checkpoints": bool,
        }
        for name in cls._SCALARS:
            if name not in payload:
                continue
            val = payload[name]
            if name in ("batch_size", "round_budget"):
                kwargs[name] = None if val is None else _wrap(name, int, val)
            else:
                kwargs[name] = _wrap(name, casts[name], val)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name).to_dict() for name in self._SECTIONS}
        out.update({name: getattr(self, name) for name in self._SCALARS})
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop("output_dir")
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def with_updates(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def load_config(path: str | Path, seed: int | None = None, out_dir: str | None = None) -> ExperimentConfig:
    """Read and validate a JSON config.

    The output directory may come from the environment
    (``FEDDGSIM_OUT_DIR``); an explicit ``out_dir`` wins over both.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    cfg = ExperimentConfig.from_dict(payload)
    changes: dict[str, Any] = {}
    if os.environ.get(OUT_DIR_ENV):
        changes["output_dir"] = os.environ[OUT_DIR_ENV]
    if out_dir is not None:
        changes["output_dir"] = out_dir
    if seed is not None:
        changes["seed"] = int(seed)
    return replace(cfg, **changes) if changes else cfg


@dataclass(frozen=True)
class SweepSpec:
    """One swept axis.

    On the ``communication`` axis the values are round counts; with
    ``fixed_total`` set, local epochs are rescaled so rounds x epochs stays
    at the base config's product.
    """

    axis: str
    values: tuple
    fixed_total: bool = True

    def __post_init__(self) -> None:
        if self.axis not in SWEEP_AXES:
            raise ConfigError("sweep.axis", f"expected one of {SWEEP_AXES}")
        if not self.values:
            raise ConfigError("sweep.values", "must be non-empty")
        object.__setattr__(self, "values", tuple(self.values))
        for v in self.values:
            if self.axis == "lambda" and not 0.0 <= float(v) <= 1.0:
                raise ConfigError("sweep.values", f"lambda {v} outside [0, 1]")
            if self.axis in ("clients", "communication") and (int(v) != v or v < 1):
                raise ConfigError("sweep.values", f"{self.axis} values must be positive integers")

    @classmethod
    def from_dict(cls, payload: dict) -> "SweepSpec":
        _check_keys("sweep", payload, {"axis", "values", "fixed_total"})
        if "axis" not in payload or "values" not in payload:
            raise ConfigError("sweep", "needs 'axis' and 'values'")
        return cls(payload["axis"], tuple(payload["values"]), bool(payload.get("fixed_total", True)))

    def to_dict(self) -> dict:
        return {"axis": self.axis, "values": list(self.values), "fixed_total": self.fixed_total}

    def apply(self, base: ExperimentConfig, value) -> ExperimentConfig:
        if self.axis == "lambda":
            return replace(base, partition=replace(base.partition, lam=float(value)))
        if self.axis == "clients":
            return replace(base, partition=replace(base.partition, clients=int(value)))
        rounds = int(value)
        if not self.fixed_total:
            return replace(base, rounds=rounds)
        total = base.rounds * base.local_epochs
        if total % rounds:
            raise ConfigError("sweep.values", f"{rounds} rounds do not divide the total computation {total}")
        return replace(base, rounds=rounds, local_epochs=total // rounds, round_budget=None)
