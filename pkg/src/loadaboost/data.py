"""Datasets, CSV ingestion, synthetic EHR-like data and client partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

LABEL_COLUMN = "MORTALITY"
ID_COLUMN = "SUBJECT_ID"
COVARIATE_COLUMNS = ("AGE_GROUP", "GENDER")

# Guards floor(alpha * n) against products like 0.3 * 270 = 80.99999999999999.
_FLOOR_SLACK = 1e-9


class DataError(ValueError):
    """Malformed or unusable input data."""


def _seeded(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


@dataclass(eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    age_group: Optional[np.ndarray] = None
    gender: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None
    feature_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint8).ravel()
        if self.features.ndim != 2:
            raise DataError("features must be a 2-d matrix")
        n = self.labels.size
        if n < 1:
            raise DataError("empty dataset")
        if self.features.shape[0] != n:
            raise DataError(f"{self.features.shape[0]} feature rows but {n} labels")
        if self.features.max(initial=0) > 1 or self.labels.max(initial=0) > 1:
            raise DataError("features and labels must be binary")
        if (self.age_group is None) != (self.gender is None):
            raise DataError("AGE_GROUP and GENDER must be given together")
        for name in ("age_group", "gender"):
            col = getattr(self, name)
            if col is not None:
                col = np.asarray(col, dtype=np.uint8).ravel()
                if col.size != n or col.max(initial=0) > 1:
                    raise DataError(f"{name} must be a binary vector of length {n}")
                setattr(self, name, col)
        if self.ids is not None:
            self.ids = np.asarray(self.ids, dtype=np.int64).ravel()
            if self.ids.size != n:
                raise DataError(f"ids must have length {n}")
        if self.feature_names is None:
            self.feature_names = tuple(f"DRUG_{j:04d}" for j in range(self.features.shape[1]))
        else:
            self.feature_names = tuple(self.feature_names)
            if len(self.feature_names) != self.features.shape[1]:
                raise DataError("feature_names does not match the feature count")

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def has_covariates(self) -> bool:
        return self.age_group is not None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Dataset(self.features[idx], self.labels[idx], pick(self.age_group),
                       pick(self.gender), pick(self.ids), self.feature_names)

    def equals(self, other: "Dataset") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and bool(np.array_equal(a, b))

        return (same(self.features, other.features) and same(self.labels, other.labels)
                and same(self.age_group, other.age_group) and same(self.gender, other.gender)
                and same(self.ids, other.ids) and self.feature_names == other.feature_names)


def concat(parts: Sequence[Dataset]) -> Dataset:
    """Stack datasets row-wise; optional columns survive only if every part has them."""
    if not parts:
        raise DataError("nothing to concatenate")

    def join(name):
        cols = [getattr(p, name) for p in parts]
        return None if any(c is None for c in cols) else np.concatenate(cols)

    age, gender = join("age_group"), join("gender")
    if age is None or gender is None:
        age = gender = None
    return Dataset(np.concatenate([p.features for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   age, gender, join("ids"), parts[0].feature_names)


# --------------------------------------------------------------------------- CSV


def load_csv(path) -> Dataset:
    """Read a flattened one-row-per-patient CSV.

    Recognised columns are SUBJECT_ID, AGE_GROUP, GENDER and MORTALITY; all
    others are binary drug indicators. Errors name the offending line and
    column.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file (no header row)") from None
        if LABEL_COLUMN not in header:
            raise DataError(f"{path}: missing {LABEL_COLUMN} column")
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names in header")
        col = {name: j for j, name in enumerate(header)}
        has_cov = [c in col for c in COVARIATE_COLUMNS]
        if any(has_cov) and not all(has_cov):
            raise DataError(f"{path}: AGE_GROUP and GENDER must appear together")
        special = {LABEL_COLUMN, ID_COLUMN, *COVARIATE_COLUMNS}
        feat_cols = [j for j, name in enumerate(header) if name not in special]
        binary_cols = [j for j, name in enumerate(header) if name != ID_COLUMN]

        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno} has {len(row)} cells, header has {len(header)}")
            cells = np.array(row)
            bad = (cells[binary_cols] != "0") & (cells[binary_cols] != "1")
            if bad.any():
                j = binary_cols[int(np.argmax(bad))]
                raise DataError(
                    f"{path}: line {lineno}, column {header[j]!r}: expected 0 or 1, got {row[j]!r}"
                )
            rows.append(cells)

    if not rows:
        raise DataError(f"{path}: empty dataset")
    table = np.stack(rows)
    ids = None
    if ID_COLUMN in col:
        try:
            ids = table[:, col[ID_COLUMN]].astype(np.int64)
        except ValueError:
            raise DataError(f"{path}: {ID_COLUMN} must hold integers") from None
    binary = lambda j: (table[:, j] == "1").astype(np.uint8)  # noqa: E731
    age = gender = None
    if all(has_cov):
        age, gender = binary(col["AGE_GROUP"]), binary(col["GENDER"])
    features = (table[:, feat_cols] == "1").astype(np.uint8).reshape(len(rows), len(feat_cols))
    return Dataset(features, binary(col[LABEL_COLUMN]), age, gender, ids,
                   tuple(header[j] for j in feat_cols))


def write_csv(ds: Dataset, path) -> None:
    header = []
    columns = []
    if ds.ids is not None:
        header.append(ID_COLUMN)
        columns.append(ds.ids.astype(str))
    if ds.has_covariates:
        header += list(COVARIATE_COLUMNS)
        columns += [ds.age_group.astype(str), ds.gender.astype(str)]
    header.append(LABEL_COLUMN)
    columns.append(ds.labels.astype(str))
    header += list(ds.feature_names)
    table = np.column_stack(columns + [ds.features.astype(str)])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in table:
            fh.write(",".join(row) + "\n")


# --------------------------------------------------------------------- synthetic

# Mortality targets per covariate cell (age_group, gender): (0,0), (0,1), (1,0), (1,1).
_CELL_TARGET_RATE = np.array([0.18, 0.22, 0.34, 0.40])
_SCORE_VARIANCE = 2.5


def _synth_profile(d: int):
    """Fixed prevalence and coefficient tables for ``d`` features.

    Independent of the sampling seed so that every draw shares the same
    generative model. Coefficients are rescaled so the linear score has the
    same variance in every cell whatever ``d`` is.
    """
    rng = _seeded(0x10AD, d)
    base = rng.uniform(0.01, 0.15, size=d)
    prevalence = np.clip(base * np.exp(rng.normal(0.0, 0.8, size=(4, d))), 0.002, 0.6)
    coef = rng.normal(0.0, 0.6, size=d) + rng.normal(0.0, 0.5, size=(4, d))
    spread = np.einsum("cd,cd->c", coef**2, prevalence * (1 - prevalence))
    coef *= np.sqrt(_SCORE_VARIANCE / spread)[:, None]
    # logistic-normal mean: E[sigmoid(mu + s Z)] ~ sigmoid(mu / sqrt(1 + pi s^2 / 8))
    logit = np.log(_CELL_TARGET_RATE / (1 - _CELL_TARGET_RATE))
    mean_score = logit * np.sqrt(1 + np.pi * _SCORE_VARIANCE / 8)
    intercept = mean_score - np.einsum("cd,cd->c", prevalence, coef)
    return prevalence, coef, intercept


def synth_generate(n: int, d: int, seed: int) -> Dataset:
    """Binary drug-like features whose distribution and label model depend on
    (age_group, gender), so sorting by those covariates yields skewed clients.

    Not calibrated to any real clinical database.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    prevalence, coef, intercept = _synth_profile(d)
    rng = _seeded(0x5EED, seed)
    age = rng.integers(0, 2, size=n).astype(np.uint8)
    gender = rng.integers(0, 2, size=n).astype(np.uint8)
    cell = 2 * age + gender
    features = (rng.random((n, d)) < prevalence[cell]).astype(np.uint8)
    score = intercept[cell] + np.einsum("nd,nd->n", features, coef[cell])
    labels = (rng.random(n) < 1.0 / (1.0 + np.exp(-score))).astype(np.uint8)
    return Dataset(features, labels, age, gender, np.arange(1, n + 1))


# ------------------------------------------------------------------ partitioning


@dataclass(eq=False)
class ClientPartition:
    clients: list[Dataset]
    scheme: str
    sort_keys: tuple[str, ...] = ()
    # row indices of each client's local data within the partitioned dataset
    indices: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.clients)

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.clients]


@dataclass(eq=False)
class SharedHoldout:
    data: Dataset
    beta: float


def _split(ds: Dataset, order: np.ndarray, k: int, scheme: str, keys=()) -> ClientPartition:
    chunks = np.array_split(order, k)
    return ClientPartition([ds.subset(c) for c in chunks], scheme, tuple(keys), chunks)


def partition_iid(ds: Dataset, k: int, seed: int) -> ClientPartition:
    if not 1 <= k <= len(ds):
        raise DataError(f"cannot split {len(ds)} examples into {k} clients")
    return _split(ds, _seeded(seed).permutation(len(ds)), k, "iid")


def partition_noniid(ds: Dataset, k: int) -> ClientPartition:
    """Sort by (AGE_GROUP, GENDER, original row) and cut into ``k`` contiguous clients."""
    if not ds.has_covariates:
        raise DataError("non-IID partitioning needs AGE_GROUP and GENDER")
    if not 1 <= k <= len(ds):
        raise DataError(f"cannot split {len(ds)} examples into {k} clients")
    order = np.lexsort((np.arange(len(ds)), ds.gender, ds.age_group))
    return _split(ds, order, k, "noniid", COVARIATE_COLUMNS)


def make_folds(partition, n_folds: int, seed: int) -> list[np.ndarray]:
    """Randomly group client indices into ``n_folds`` folds of near-equal size.

    ``partition`` may be a ClientPartition or a plain client count.
    """
    k = partition if isinstance(partition, (int, np.integer)) else len(partition)
    if not 1 <= n_folds <= k:
        raise DataError(f"cannot form {n_folds} folds from {k} clients")
    return [np.sort(f) for f in np.array_split(_seeded(seed).permutation(k), n_folds)]


def shared_count(alpha: float, holdout_size: int) -> int:
    return int(math.floor(alpha * holdout_size + _FLOOR_SLACK))


def split_holdout(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffle and reserve the last ``floor(fraction * N)`` rows as a holdout pool."""
    n_hold = int(math.floor(fraction * len(ds) + _FLOOR_SLACK))
    if not 0 < n_hold < len(ds):
        raise DataError(f"holdout fraction {fraction} gives {n_hold} of {len(ds)} examples")
    perm = _seeded(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[:-n_hold])), ds.subset(np.sort(perm[-n_hold:]))


def make_shared_holdout(pool: Dataset, client_total: int, beta: float, seed: int) -> SharedHoldout:
    """Draw G with |G| = floor(beta * client_total) from the holdout pool."""
    size = shared_count(beta, client_total)
    if size < 1:
        raise DataError(f"beta={beta} with {client_total} client examples leaves G empty")
    if size > len(pool):
        raise DataError(f"G needs {size} examples but the holdout pool has {len(pool)}")
    idx = np.sort(_seeded(seed).choice(len(pool), size=size, replace=False))
    return SharedHoldout(pool.subset(idx), beta)


def share_data(partition: ClientPartition, shared: SharedHoldout, alpha: float,
               seed: int) -> ClientPartition:
    """Append floor(alpha * |G|) examples of G to every client.

    Each client draws its sample independently, so two clients may receive
    overlapping examples; no client receives the same example twice.
    """
    if not 0 < alpha <= 1:
        raise DataError(f"alpha must lie in (0, 1], got {alpha}")
    g = shared.data
    count = shared_count(alpha, len(g))
    if count < 1:
        raise DataError(f"alpha={alpha} of |G|={len(g)} shares no examples")
    clients = []
    for k, client in enumerate(partition.clients):
        pick = _seeded(seed, k).choice(len(g), size=count, replace=False)
        clients.append(concat([client, g.subset(pick)]))
    return replace(partition, clients=clients, scheme=partition.scheme + "+sharing")
