"""Multi-domain datasets: synthetic generators, CSV I/O and domain splits."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DomainDataset",
    "ShiftRecipe",
    "SplitSpec",
    "CsvSchema",
    "SplitResult",
    "generate_synthetic",
    "load_csv",
    "write_csv",
    "apply_split",
    "split_dg_test",
    "SHIFT_KINDS",
]

SHIFT_KINDS = ("mean-shift", "rotation", "label-flip-subpopulation")

SPLIT_NAMES = ("train", "in_domain_val", "in_domain_test", "heldout_val", "dg_test")


@dataclass(frozen=True)
class DomainDataset:
    """Feature matrix with class labels and a domain id per row.

    ``index`` records each row's position in the dataset it was cut from,
    so splits stay auditable.
    """

    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    index: np.ndarray | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.labels)
        g = np.asarray(self.domains, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],) or g.shape != (x.shape[0],):
            raise ValueError(
                f"inconsistent shapes: features {x.shape}, labels {y.shape}, domains {g.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        idx = np.arange(x.shape[0]) if self.index is None else np.asarray(self.index, dtype=np.int64)
        if idx.shape != (x.shape[0],):
            raise ValueError("index must have one entry per row")
        for name, arr in (("features", x), ("labels", y), ("domains", g), ("index", idx)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def domain_ids(self) -> np.ndarray:
        return np.unique(self.domains)

    def domain_sizes(self, domain_ids: Iterable[int] | None = None) -> np.ndarray:
        ids = self.domain_ids if domain_ids is None else np.asarray(list(domain_ids))
        return np.array([int(np.sum(self.domains == d)) for d in ids], dtype=np.int64)

    def subset(self, rows) -> "DomainDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return DomainDataset(self.features[rows], self.labels[rows], self.domains[rows], self.index[rows])

    def select_domains(self, domain_ids: Iterable[int]) -> "DomainDataset":
        return self.subset(np.flatnonzero(np.isin(self.domains, list(domain_ids))))

    @classmethod
    def concat(cls, parts: Sequence["DomainDataset"]) -> "DomainDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.domains for p in parts]),
            np.concatenate([p.index for p in parts]),
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features, self.labels, self.domains, self.index):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class ShiftRecipe:
    """How domains differ in a synthetic dataset.

    ``magnitudes`` is either one value used by every domain or one value per
    domain.  For ``mean-shift`` it is the length of the offset added to the
    domain's class means, for ``rotation`` an angle in radians applied in the
    first two coordinates, and for ``label-flip-subpopulation`` a tilt of the
    class prior (its sign decides which classes dominate).
    """

    kind: str = "mean-shift"
    magnitudes: float | tuple[float, ...] = 0.0
    class_separation: float = 3.0
    noise: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")
        mags = np.atleast_1d(np.asarray(self.magnitudes, dtype=float))
        if not np.all(np.isfinite(mags)):
            raise ValueError("shift magnitudes must be finite")
        if not self.noise > 0:
            raise ValueError("noise scale must be positive")
        if isinstance(self.magnitudes, (list, np.ndarray)):
            object.__setattr__(self, "magnitudes", tuple(float(m) for m in self.magnitudes))

    def magnitude(self, d: int, D: int) -> float:
        if isinstance(self.magnitudes, tuple):
            if len(self.magnitudes) != D:
                raise ValueError(f"recipe lists {len(self.magnitudes)} magnitudes for {D} domains")
            return self.magnitudes[d]
        return float(self.magnitudes)


def generate_synthetic(
    recipe: ShiftRecipe,
    D: int,
    K: int,
    n_per_domain: int | Sequence[int],
    p: int,
    seed: int = 0,
) -> DomainDataset:
    """Gaussian class clusters, one block of rows per domain.

    Class means are shared across domains and have norm
    ``recipe.class_separation``; the recipe then perturbs each domain.
    Domain ``d`` draws from its own stream seeded by ``(seed, d)``.
    """
    for name, val in (("D", D), ("K", K), ("p", p)):
        if int(val) != val or val < 1:
            raise ValueError(f"{name} must be a positive integer, got {val!r}")
    sizes = np.broadcast_to(np.asarray(n_per_domain, dtype=np.int64), (D,))
    if np.any(sizes < 1):
        raise ValueError("every domain needs at least one sample")
    if recipe.kind == "rotation" and p < 2:
        raise ValueError("rotation shift needs at least two features")

    base = np.random.default_rng([seed, 0x5EED])
    means = base.standard_normal((K, p))
    means *= recipe.class_separation / np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1e-12)
    ramp = np.linspace(-1.0, 1.0, K) if K > 1 else np.zeros(1)

    xs, ys, gs = [], [], []
    for d in range(D):
        rng = np.random.default_rng([seed, d])
        mag = recipe.magnitude(d, D)
        prior = np.full(K, 1.0 / K)
        if recipe.kind == "label-flip-subpopulation":
            prior = np.exp(mag * ramp)
            prior /= prior.sum()
        n = int(sizes[d])
        y = rng.choice(K, size=n, p=prior)
        x = means[y] + recipe.noise * rng.standard_normal((n, p))
        direction = rng.standard_normal(p)
        if recipe.kind == "mean-shift":
            x += mag * direction / max(np.linalg.norm(direction), 1e-12)
        elif recipe.kind == "rotation":
            c, s = math.cos(mag), math.sin(mag)
            x[:, :2] = x[:, :2] @ np.array([[c, s], [-s, c]])
        xs.append(x)
        ys.append(y)
        gs.append(np.full(n, d, dtype=np.int64))
    return DomainDataset(np.concatenate(xs), np.concatenate(ys).astype(np.int64), np.concatenate(gs))


@dataclass(frozen=True)
class CsvSchema:
    """Column roles, declared by header name."""

    features: tuple[str, ...]
    label: str = "label"
    domain: str = "domain"

    @classmethod
    def from_dict(cls, payload: dict) -> "CsvSchema":
        return cls(
            features=tuple(payload["features"]),
            label=payload.get("label", "label"),
            domain=payload.get("domain", "domain"),
        )

    def to_dict(self) -> dict:
        return {"features": list(self.features), "label": self.label, "domain": self.domain}


def load_csv(path: str | Path, schema: CsvSchema | None = None) -> DomainDataset:
    """Read a domain-labelled table.

    Without a schema, every column other than ``label`` and ``domain`` is a
    feature.  Errors name the offending line (1-based, header is line 1) and
    column.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file, header row required") from None
        if schema is None:
            schema = CsvSchema(features=tuple(h for h in header if h not in ("label", "domain")))
        missing = [c for c in (*schema.features, schema.label, schema.domain) if c not in header]
        if missing:
            raise ValueError(f"{path}: schema columns missing from header: {missing}")
        if not schema.features:
            raise ValueError(f"{path}: schema declares no feature columns")
        f_cols = [header.index(c) for c in schema.features]
        y_col, g_col = header.index(schema.label), header.index(schema.domain)

        xs, ys, gs = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            vals = []
            for col in f_cols:
                cell = row[col].strip()
                if cell == "":
                    raise ValueError(f"{path}: line {lineno}, column {header[col]!r}: missing value")
                try:
                    v = float(cell)
                except ValueError:
                    raise ValueError(
                        f"{path}: line {lineno}, column {header[col]!r}: not a number: {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise ValueError(f"{path}: line {lineno}, column {header[col]!r}: non-finite value")
                vals.append(v)
            ids = []
            for col in (y_col, g_col):
                cell = row[col].strip()
                if cell == "":
                    raise ValueError(f"{path}: line {lineno}, column {header[col]!r}: missing value")
                try:
                    ids.append(int(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: line {lineno}, column {header[col]!r}: not an integer id: {cell!r}"
                    ) from None
            xs.append(vals)
            ys.append(ids[0])
            gs.append(ids[1])
    if not xs:
        raise ValueError(f"{path}: no data rows")
    return DomainDataset(np.array(xs, dtype=float), np.array(ys, dtype=np.int64), np.array(gs, dtype=np.int64))


def write_csv(dataset: DomainDataset, path: str | Path, schema: CsvSchema | None = None) -> None:
    if schema is None:
        schema = CsvSchema(features=tuple(f"x{j}" for j in range(dataset.num_features)))
    if len(schema.features) != dataset.num_features:
        raise ValueError("schema feature count does not match the dataset")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*schema.features, schema.label, schema.domain])
        for x, y, g in zip(dataset.features, dataset.labels, dataset.domains):
            writer.writerow([*(repr(float(v)) for v in x), int(y), int(g)])


@dataclass(frozen=True)
class SplitSpec:
    """Which domains train, validate and test, plus in-domain fractions."""

    train_domains: tuple[int, ...]
    heldout_validation_domains: tuple[int, ...] = ()
    test_domains: tuple[int, ...] = ()
    in_domain_val_fraction: float = 0.1
    in_domain_test_fraction: float = 0.1

    def __post_init__(self) -> None:
        for name in ("train_domains", "heldout_validation_domains", "test_domains"):
            object.__setattr__(self, name, tuple(int(d) for d in getattr(self, name)))
        tr, hv, te = set(self.train_domains), set(self.heldout_validation_domains), set(self.test_domains)
        if not tr:
            raise ValueError("at least one training domain is required")
        if tr & hv or tr & te or hv & te:
            raise ValueError("train, held-out validation and test domains must be disjoint")
        fv, ft = self.in_domain_val_fraction, self.in_domain_test_fraction
        if not (0 < fv < 1 and 0 < ft < 1 and fv + ft < 1):
            raise ValueError("in-domain fractions must lie in (0, 1) and sum to less than 1")

    def to_dict(self) -> dict:
        return {
            "train_domains": list(self.train_domains),
            "heldout_validation_domains": list(self.heldout_validation_domains),
            "test_domains": list(self.test_domains),
            "in_domain_val_fraction": self.in_domain_val_fraction,
            "in_domain_test_fraction": self.in_domain_test_fraction,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SplitSpec":
        return cls(
            train_domains=tuple(payload["train_domains"]),
            heldout_validation_domains=tuple(payload.get("heldout_validation_domains", ())),
            test_domains=tuple(payload.get("test_domains", ())),
            in_domain_val_fraction=float(payload.get("in_domain_val_fraction", 0.1)),
            in_domain_test_fraction=float(payload.get("in_domain_test_fraction", 0.1)),
        )


@dataclass
class SplitResult:
    """The five benchmark splits and the 20/80 cut of the DG test split."""

    train: DomainDataset
    in_domain_val: DomainDataset
    in_domain_test: DomainDataset
    heldout_val: DomainDataset
    dg_test: DomainDataset
    dg_test_eval: DomainDataset = field(default=None)
    dg_test_pool: DomainDataset = field(default=None)

    def splits(self) -> dict[str, DomainDataset]:
        return {name: getattr(self, name) for name in SPLIT_NAMES}

    def manifest(self) -> dict:
        out = {name: ds.index.tolist() for name, ds in self.splits().items()}
        out["dg_test_eval"] = self.dg_test_eval.index.tolist()
        out["dg_test_pool"] = self.dg_test_pool.index.tolist()
        return out

    def manifest_json(self) -> str:
        return json.dumps(self.manifest())


def _empty_like(dataset: DomainDataset) -> DomainDataset:
    return dataset.subset(np.empty(0, dtype=np.int64))


def split_dg_test(dg_test: DomainDataset, seed: int = 0, eval_fraction: float = 0.2):
    """Cut the DG test split into a 20% evaluation part and an 80% pool."""
    if len(dg_test) == 0:
        return _empty_like(dg_test), _empty_like(dg_test)
    rows = np.random.default_rng([seed, 0xD6]).permutation(len(dg_test))
    n_eval = int(round(eval_fraction * len(dg_test)))
    return dg_test.subset(np.sort(rows[:n_eval])), dg_test.subset(np.sort(rows[n_eval:]))


def apply_split(dataset: DomainDataset, spec: SplitSpec, seed: int = 0) -> SplitResult:
    """Split rows by domain role; training domains are further cut per domain.

    Each training domain is shuffled and divided into validation, test and
    train parts using the configured fractions (sizes rounded to nearest).
    """
    present = set(dataset.domain_ids.tolist())
    wanted = set(spec.train_domains) | set(spec.heldout_validation_domains) | set(spec.test_domains)
    absent = sorted(wanted - present)
    if absent:
        raise ValueError(f"split references domains absent from the data: {absent}")

    rng = np.random.default_rng([seed, 0x5917])
    tr, va, te = [], [], []
    for d in sorted(spec.train_domains):
        rows = rng.permutation(np.flatnonzero(dataset.domains == d))
        n = rows.size
        n_val = int(round(spec.in_domain_val_fraction * n))
        n_test = int(round(spec.in_domain_test_fraction * n))
        va.append(rows[:n_val])
        te.append(rows[n_val:n_val + n_test])
        tr.append(rows[n_val + n_test:])

    def take(parts: list[np.ndarray]) -> DomainDataset:
        return dataset.subset(np.sort(np.concatenate(parts))) if parts else _empty_like(dataset)

    heldout = dataset.subset(np.flatnonzero(np.isin(dataset.domains, list(spec.heldout_validation_domains))))
    dg_test = dataset.subset(np.flatnonzero(np.isin(dataset.domains, list(spec.test_domains))))
    result = SplitResult(take(tr), take(va), take(te), heldout, dg_test)
    result.dg_test_eval, result.dg_test_pool = split_dg_test(dg_test, seed)
    return result
