"""Dataset ingestion, synthetic generators, splits and normalization.

CSV files need a header row naming the label column (default ``y``);
non-numeric columns are expanded by dummy coding with L-1 binary indicators,
the first category (in sorted order) mapping to the all-zero code. LIBSVM rows
are ``label idx:val ...`` with 1-based indices.

Splits: regression uses 67/8/25 train/validation/test proportions; binary and
count tasks take 10% for validation, then up to 1000 points for testing, the
rest (optionally capped) for training. Features are z-scored with statistics
from the training split only, and regression labels likewise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .estimators import point_stream

TASKS = ("regression", "binary", "count")
TEST_CAP = 1000
_SPLIT_STREAM = 0xFFFFFFFD


@dataclass
class Dataset:
    name: str
    task: str
    X: np.ndarray
    y: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y)
        if self.task not in TASKS:
            raise InputError(f"unknown task {self.task!r}")
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise InputError("feature/label shape mismatch")
        if np.any(~np.isfinite(self.X)) or np.any(~np.isfinite(
                np.asarray(self.y, dtype=float))):
            raise InputError("dataset contains non-finite values")
        _validate_labels(self.task, self.y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def subset(self, idx, name_suffix="") -> "Dataset":
        return Dataset(name=self.name + name_suffix, task=self.task,
                       X=self.X[idx], y=self.y[idx], provenance=self.provenance)


def _validate_labels(task, y):
    arr = np.asarray(y, dtype=float)
    if task == "binary" and not np.all((arr == 0) | (arr == 1)):
        raise InputError("binary task needs labels in {0, 1}")
    if task == "count" and not np.all((arr >= 0) & (arr == np.floor(arr))):
        raise InputError("count task needs nonnegative integer labels")


# ---------------------------------------------------------------------------
# file loaders
# ---------------------------------------------------------------------------

def load_dataset(path, fmt: str, task: str, label_col: str = "y",
                 name: str | None = None) -> Dataset:
    try:
        if fmt == "csv":
            X, y = _load_csv(path, label_col)
        elif fmt == "libsvm":
            X, y = _load_libsvm(path)
        else:
            raise InputError(f"unknown format {fmt!r}; expected csv or libsvm")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    ds_name = name or str(path)
    return Dataset(name=ds_name, task=task, X=X,
                   y=_coerce_labels(task, y),
                   provenance=f"{fmt} file {path}")


def _coerce_labels(task, y):
    y = np.asarray(y, dtype=float)
    if task in ("binary", "count"):
        _validate_labels(task, y)
        return y.astype(int)
    return y


def _load_csv(path, label_col):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if label_col not in header:
        raise InputError(f"{path}: no column named {label_col!r} in header")
    y_idx = header.index(label_col)
    body = rows[1:]
    ncol = len(header)
    columns = [[] for _ in range(ncol)]
    for lineno, row in enumerate(body, start=2):
        if len(row) != ncol:
            raise InputError(f"{path}:{lineno}: expected {ncol} fields, "
                             f"got {len(row)}")
        for j, cell in enumerate(row):
            columns[j].append(cell.strip())

    labels = []
    for lineno, cell in enumerate(columns[y_idx], start=2):
        try:
            labels.append(float(cell))
        except ValueError:
            raise InputError(f"{path}:{lineno}: non-numeric label "
                             f"{cell!r}") from None

    feature_cols = []
    for j in range(ncol):
        if j == y_idx:
            continue
        col = columns[j]
        try:
            feature_cols.append(np.array([float(c) for c in col])[:, None])
        except ValueError:
            feature_cols.append(_dummy_code(col))
    X = np.hstack(feature_cols) if feature_cols else np.zeros((len(labels), 0))
    return X, np.array(labels)


def _dummy_code(col) -> np.ndarray:
    """L-1 binary indicator columns; the sorted-first category is all zero."""
    cats = sorted(set(col))
    out = np.zeros((len(col), len(cats) - 1))
    index = {c: k for k, c in enumerate(cats)}
    for i, c in enumerate(col):
        k = index[c]
        if k > 0:
            out[i, k - 1] = 1.0
    return out


def _load_libsvm(path):
    labels = []
    entries = []
    width = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                labels.append(float(parts[0]))
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad label "
                                 f"{parts[0]!r}") from None
            row = {}
            for tok in parts[1:]:
                try:
                    idx_s, val_s = tok.split(":")
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise InputError(f"{path}:{lineno}: bad entry "
                                     f"{tok!r}") from None
                if idx < 1:
                    raise InputError(f"{path}:{lineno}: indices are 1-based")
                row[idx - 1] = val
                width = max(width, idx)
            entries.append(row)
    X = np.zeros((len(labels), width))
    for i, row in enumerate(entries):
        for j, val in row.items():
            X[i, j] = val
    return X, np.array(labels)


# ---------------------------------------------------------------------------
# synthetic generators (no downloads needed for the acceptance runs)
# ---------------------------------------------------------------------------

def make_sine_regression(n: int, seed: int = 0, noise_std: float = 0.3,
                         frequency: float = 2.0) -> Dataset:
    rng = point_stream(seed, 0, _SPLIT_STREAM)
    x = rng.uniform(-3.0, 3.0, size=n)
    latent = np.sin(frequency * x)
    y = latent + noise_std * rng.standard_normal(n)
    return Dataset(name="sine", task="regression", X=x[:, None], y=y,
                   provenance=f"synthetic sine, seed={seed}")


def make_sine_binary(n: int, seed: int = 0, frequency: float = 2.0) -> Dataset:
    """Binary labels from the sign of the sine latent."""
    rng = point_stream(seed, 0, _SPLIT_STREAM)
    x = rng.uniform(-3.0, 3.0, size=n)
    y = (np.sin(frequency * x) > 0).astype(int)
    return Dataset(name="sine-binary", task="binary", X=x[:, None], y=y,
                   provenance=f"synthetic sine sign labels, seed={seed}")


def make_two_moons(n: int, seed: int = 0, noise_std: float = 0.15) -> Dataset:
    rng = point_stream(seed, 0, _SPLIT_STREAM)
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, size=n0)
    t1 = rng.uniform(0.0, np.pi, size=n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.vstack([upper, lower]) + noise_std * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    return Dataset(name="two-moons", task="binary", X=X, y=y,
                   provenance=f"synthetic two moons, seed={seed}")


def make_poisson_lograte(n: int, seed: int = 0, frequency: float = 1.5,
                         amplitude: float = 1.2) -> Dataset:
    """Counts with log rate following a sine latent."""
    rng = point_stream(seed, 0, _SPLIT_STREAM)
    x = rng.uniform(-3.0, 3.0, size=n)
    rate = np.exp(amplitude * np.sin(frequency * x))
    y = rng.poisson(rate)
    return Dataset(name="poisson-lograte", task="count", X=x[:, None],
                   y=y.astype(int),
                   provenance=f"synthetic log-rate counts, seed={seed}")


SYNTHETIC = {
    "sine": make_sine_regression,
    "sine-binary": make_sine_binary,
    "two-moons": make_two_moons,
    "poisson-lograte": make_poisson_lograte,
}


def resolve_dataset(ref: str, task: str | None = None, n: int = 1000,
                    seed: int = 0, fmt: str | None = None,
                    label_col: str = "y") -> Dataset:
    """A dataset reference is a synthetic generator name or a file path."""
    if ref in SYNTHETIC:
        return SYNTHETIC[ref](n=n, seed=seed)
    if fmt is None:
        fmt = "libsvm" if str(ref).endswith((".libsvm", ".svm")) else "csv"
    if task is None:
        raise InputError("file datasets need an explicit task")
    return load_dataset(ref, fmt, task, label_col=label_col)


# ---------------------------------------------------------------------------
# splits and normalization
# ---------------------------------------------------------------------------

@dataclass
class SplitInfo:
    seed: int
    sizes: dict
    class_balance: dict = field(default_factory=dict)


def split_dataset(ds: Dataset, seed: int = 0, train_size: int | None = None):
    """(train, val, test, info) with seeded, unstratified shuffling."""
    rng = point_stream(seed, 1, _SPLIT_STREAM)
    perm = rng.permutation(ds.n)
    if ds.task == "regression":
        n_train = int(round(ds.n * 0.67))
        n_val = int(round(ds.n * 0.08))
        tr = perm[:n_train]
        va = perm[n_train:n_train + n_val]
        te = perm[n_train + n_val:]
        if train_size is not None:
            tr = tr[:train_size]
    else:
        n_val = max(int(round(ds.n * 0.10)), 1)
        va = perm[:n_val]
        rest = perm[n_val:]
        # test drawn from the remainder, capped at 1000; without an explicit
        # train size, leave half the remainder for training
        if train_size is None:
            n_test = min(TEST_CAP, rest.shape[0] // 2)
        else:
            n_test = min(TEST_CAP, max(rest.shape[0] - train_size, 1))
        n_test = max(n_test, 1)
        te = rest[:n_test]
        tr = rest[n_test:]
        if train_size is not None:
            tr = tr[:train_size]
    info = SplitInfo(seed=seed, sizes={"train": len(tr), "val": len(va),
                                       "test": len(te)})
    if ds.task == "binary":
        for nm, idx in (("train", tr), ("val", va), ("test", te)):
            if len(idx):
                info.class_balance[nm] = float(np.mean(ds.y[idx]))
    return (ds.subset(tr, ":train"), ds.subset(va, ":val"),
            ds.subset(te, ":test"), info)


@dataclass
class Normalizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    normalize_labels: bool

    @staticmethod
    def fit(train: Dataset) -> "Normalizer":
        x_std = train.X.std(axis=0)
        x_std = np.where(x_std > 0, x_std, 1.0)
        norm_y = train.task == "regression"
        y = np.asarray(train.y, dtype=float)
        return Normalizer(x_mean=train.X.mean(axis=0), x_std=x_std,
                          y_mean=float(y.mean()) if norm_y else 0.0,
                          y_std=float(y.std()) if norm_y and y.std() > 0 else 1.0,
                          normalize_labels=norm_y)

    def apply(self, ds: Dataset) -> Dataset:
        X = (ds.X - self.x_mean) / self.x_std
        y = ds.y
        if self.normalize_labels:
            y = (np.asarray(ds.y, dtype=float) - self.y_mean) / self.y_std
        return Dataset(name=ds.name, task=ds.task, X=X, y=y,
                       provenance=ds.provenance + " (normalized)")

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std,
                "normalize_labels": self.normalize_labels}
