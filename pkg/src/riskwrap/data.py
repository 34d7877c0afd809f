"""Datasets: synthetic cubic regression, CSV and IDX ingestion, label corruption, FGSM."""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataError, NonFiniteError


@dataclass
class Dataset:
    """Raw arrays plus a train/test split and train-only normalization stats."""

    x: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    task: str = "regression"
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise DataError("train and test splits overlap")
        d = self.x.shape[1]
        if self.x_mean is None:
            self.x_mean, self.x_std = np.zeros(d), np.ones(d)
        if self.task == "regression" and self.y_mean is None:
            k = self.y.shape[1]
            self.y_mean, self.y_std = np.zeros(k), np.ones(k)

    @property
    def n_train(self) -> int:
        return len(self.train_idx)

    @property
    def n_test(self) -> int:
        return len(self.test_idx)

    def normalize_x(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std

    def normalize_y(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def denormalize_y(self, y) -> np.ndarray:
        return np.asarray(y) * self.y_std + self.y_mean

    def _y(self, idx):
        return self.normalize_y(self.y[idx]) if self.task == "regression" else self.y[idx]

    @property
    def x_train(self) -> np.ndarray:
        return self.normalize_x(self.x[self.train_idx])

    @property
    def x_test(self) -> np.ndarray:
        return self.normalize_x(self.x[self.test_idx])

    @property
    def y_train(self) -> np.ndarray:
        return self._y(self.train_idx)

    @property
    def y_test(self) -> np.ndarray:
        return self._y(self.test_idx)

    def manifest(self) -> dict:
        stats = {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist()}
        if self.task == "regression":
            stats.update(y_mean=self.y_mean.tolist(), y_std=self.y_std.tolist())
        return {
            "task": self.task,
            "n": int(len(self.x)),
            "n_train": self.n_train,
            "n_test": self.n_test,
            "normalization": stats,
            **self.meta,
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")


def _zscore_stats(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("riskwrap") / "data" / name))


# ----------------------------------------------------------------------- cubic
@dataclass(frozen=True)
class CubicParams:
    form: str = "cubic"  # or "linear": y = x + noise
    noise_center: float = 1.5
    noise_width: float = 0.9
    noise_peak: float = 0.9 * 1.5**3
    noise_base: float = 0.1
    train_range: tuple = (-4.0, 4.0)
    test_range: tuple = (-6.0, 6.0)


def cubic_noise_std(x, params: CubicParams = CubicParams()) -> np.ndarray:
    """Gaussian bump of noise scale centred on ``noise_center`` over a small baseline."""
    x = np.asarray(x, dtype=np.float64)
    bump = np.exp(-0.5 * ((x - params.noise_center) / params.noise_width) ** 2)
    return params.noise_base + params.noise_peak * bump


def make_cubic(n_train: int = 1000, n_test: int = 601, seed: int = 0, params: CubicParams = CubicParams(),
               normalize: bool = True) -> Dataset:
    """Training inputs uniform on ``train_range``, test grid spanning ``test_range`` inclusively."""
    if n_train < 1 or n_test < 1:
        raise DataError("n_train and n_test must be >= 1")
    rng = np.random.default_rng(seed)
    x_train = rng.uniform(*params.train_range, size=n_train)
    x_test = np.linspace(*params.test_range, n_test)
    x = np.concatenate([x_train, x_test])
    clean = x**3 if params.form == "cubic" else x.copy()
    y = clean + cubic_noise_std(x, params) * rng.standard_normal(x.shape)
    x, y = x.reshape(-1, 1), y.reshape(-1, 1)
    train_idx, test_idx = np.arange(n_train), np.arange(n_train, n_train + n_test)
    ds = Dataset(x, y, train_idx, test_idx, meta={"source": "cubic", "seed": seed, "generator": params.__dict__})
    if normalize:
        ds.x_mean, ds.x_std = _zscore_stats(x[train_idx])
        ds.y_mean, ds.y_std = _zscore_stats(y[train_idx])
    return ds


# ------------------------------------------------------------------------- CSV
def read_csv_table(path) -> tuple[list[str], np.ndarray]:
    """Parse a header + numeric rows CSV, reporting the first bad cell."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as err:
        raise DataError(f"cannot open {path}: {err}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {line_no} has {len(row)} fields, expected {len(header)}")
            values = []
            for col, cell in enumerate(row):
                cell = cell.strip()
                if cell == "" or cell.lower() in ("na", "nan", "?"):
                    raise DataError(f"{path}: missing value at line {line_no}, column {col} ({header[col]})")
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: cannot parse {cell!r} at line {line_no}, column {col}") from None
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return header, np.array(rows)


def load_csv_regression(path, target_column: str | int = -1, split_fraction: float = 0.9, seed: int = 0) -> Dataset:
    """Shuffled train/test split with z-scored features and targets (train stats only)."""
    if not 0.0 < split_fraction < 1.0:
        raise DataError("split_fraction must lie in (0, 1)")
    header, table = read_csv_table(path)
    if isinstance(target_column, str):
        if target_column not in header:
            raise DataError(f"{path}: target column {target_column!r} not found")
        t = header.index(target_column)
    else:
        t = target_column % len(header)
    x = np.delete(table, t, axis=1)
    y = table[:, t : t + 1]
    n = len(table)
    n_train = int(round(split_fraction * n))
    if n_train < 1 or n_train >= n:
        raise DataError(f"{path}: split {split_fraction} leaves an empty partition for n={n}")
    order = np.random.default_rng(seed).permutation(n)
    train_idx, test_idx = np.sort(order[:n_train]), np.sort(order[n_train:])
    x_mean, x_std = _zscore_stats(x[train_idx])
    y_mean, y_std = _zscore_stats(y[train_idx])
    return Dataset(
        x, y, train_idx, test_idx, "regression", x_mean, x_std, y_mean, y_std,
        meta={"source": str(Path(path).name), "seed": seed, "split_fraction": split_fraction,
              "target": header[t], "features": [h for i, h in enumerate(header) if i != t]},
    )


# ------------------------------------------------------------------------- IDX
_IDX_IMAGES, _IDX_LABELS = 2051, 2049


def _open_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _companion_labels(path: Path) -> Path:
    name = path.name.replace("images-idx3", "labels-idx1").replace("images", "labels")
    return path.with_name(name)


def read_idx(path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    try:
        raw = _open_bytes(path)
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from None
    if len(raw) < 8:
        raise DataError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: bad IDX magic number {magic}, expected {expected_magic}")
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim :]
    if len(body) < count:
        raise DataError(f"{path}: truncated IDX body ({len(body)} of {count} bytes)")
    return np.frombuffer(body[:count], dtype=np.uint8).reshape(dims)


def load_idx_images(path, labels_path=None, split_fraction: float = 0.9, seed: int = 0) -> Dataset:
    """IDX images flattened to ``[n, rows*cols]`` and scaled to ``[0, 1]``, with labels."""
    path = Path(path)
    images = read_idx(path, _IDX_IMAGES)
    labels = read_idx(Path(labels_path) if labels_path else _companion_labels(path), _IDX_LABELS)
    if len(labels) != len(images):
        raise DataError(f"label count {len(labels)} does not match image count {len(images)}")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    n = len(x)
    if n >= 2:
        order = np.random.default_rng(seed).permutation(n)
        n_train = min(n - 1, max(1, int(round(split_fraction * n))))
        train_idx, test_idx = np.sort(order[:n_train]), np.sort(order[n_train:])
    else:
        train_idx, test_idx = np.arange(n), np.arange(0)
    return Dataset(x, y, train_idx, test_idx, task="classification",
                   meta={"source": path.name, "seed": seed, "classes": int(y.max()) + 1 if n else 0})


def write_idx(path, array: np.ndarray, magic: int) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# ------------------------------------------------------------------ corruption
@dataclass(frozen=True)
class CorruptionSpec:
    source_class: int
    target_class: int
    p: float
    seed: int = 0

    def __post_init__(self):
        if self.source_class == self.target_class:
            raise DataError("source and target classes must differ")
        if not 0.0 <= self.p <= 1.0:
            raise DataError("corruption probability must lie in [0, 1]")


def corrupt_labels(ds: Dataset, spec: CorruptionSpec, subset: str = "train") -> tuple[Dataset, np.ndarray]:
    """Relabel each source-class sample as the target class with probability ``p``.

    Only samples in ``subset`` (train, test or all) are eligible.  Returns the
    new dataset and a boolean mask over all samples marking corrupted indices.
    """
    if ds.task != "classification":
        raise DataError("label corruption needs a classification dataset")
    y = ds.y.copy()
    eligible = np.zeros(len(y), dtype=bool)
    eligible[{"train": ds.train_idx, "test": ds.test_idx, "all": np.arange(len(y))}[subset]] = True
    candidates = np.flatnonzero(eligible & (y == spec.source_class))
    rng = np.random.default_rng(spec.seed)
    flips = rng.random(len(candidates)) < spec.p
    mask = np.zeros(len(y), dtype=bool)
    mask[candidates[flips]] = True
    y[mask] = spec.target_class
    meta = dict(ds.meta, corruption={"source": spec.source_class, "target": spec.target_class,
                                     "p": spec.p, "seed": spec.seed, "count": int(mask.sum())})
    out = Dataset(ds.x, y, ds.train_idx, ds.test_idx, ds.task, ds.x_mean, ds.x_std, meta=meta)
    return out, mask


# ------------------------------------------------------------------------ FGSM
def fgsm_perturb(g, x, y, epsilon: float, clip: tuple[float, float] | None = None) -> np.ndarray:
    """``x + epsilon * sign(d loss / d x)``, optionally clamped to ``clip``."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    xt = Tensor(x, requires_grad=True)
    if hasattr(g, "prediction_tensor"):
        out = g.prediction_tensor(xt, logits=True)
        loss = g.task_loss(out, y)
    else:
        from .autodiff import cross_entropy_logits, mse

        out = g.forward(xt, logits=True)
        if g.is_classifier:
            one_hot = np.eye(g.output_dim)[np.asarray(y, dtype=int).reshape(-1)]
            loss = cross_entropy_logits(out, one_hot)
        else:
            loss = mse(out, np.asarray(y, dtype=np.float64).reshape(out.shape))
    loss.backward()
    grad = xt.grad
    if grad is None or not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite input gradient in FGSM")
    adv = x + epsilon * np.sign(grad)
    if clip is not None:
        adv = np.clip(adv, clip[0], clip[1])
    return adv
