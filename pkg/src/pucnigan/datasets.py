"""Dataset ingestion and PU split construction.

Class labels are 0-based throughout the package: positive classes are
``0 .. K-1`` and the negative class is ``K``.
"""
from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

SYNTHETIC_SCHEMA_VERSION = 1
DATA_ROOT_ENV = "PUCNIGAN_DATA_ROOT"


class DataError(Exception):
    """Raised for missing, corrupt or insufficient data."""


class CapacityError(DataError):
    """Raised when a split asks for more examples of a class than exist."""


@dataclass(frozen=True)
class LabeledData:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"feature/label length mismatch: {len(self.x)} vs {len(self.y)}")
        self.x.setflags(write=False)
        self.y.setflags(write=False)

    def __len__(self):
        return len(self.y)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])


@dataclass(frozen=True)
class BaseDataset:
    """A fully labeled dataset with its canonical train/test split."""

    name: str
    train: LabeledData
    test: LabeledData
    n_classes: int


@dataclass(frozen=True)
class PUDataset:
    """Labeled positives, an unlabeled pool and a labeled K+1-class test split.

    The true labels of the unlabeled pool are kept on a private field. Only
    :mod:`pucnigan.metrics` reads them, through :func:`hidden_unlabeled_labels`.
    """

    positives: LabeledData
    unlabeled: np.ndarray
    test: LabeledData
    priors: np.ndarray
    positive_rate: float
    n_positive_classes: int
    name: str = "dataset"
    _hidden_labels: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        priors = np.asarray(self.priors, dtype=np.float64)
        if priors.shape != (self.n_positive_classes + 1,):
            raise ValueError("priors must have length K+1")
        if np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
            raise ValueError(f"priors must be a probability vector, got {priors}")
        if np.any(self.positives.y >= self.n_positive_classes):
            raise ValueError("positives must not contain the negative class")
        self.unlabeled.setflags(write=False)

    @property
    def K(self) -> int:
        return self.n_positive_classes

    @property
    def pi_p(self) -> float:
        """Total prior mass of the K positive classes."""
        return float(self.priors[: self.K].sum())

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.unlabeled.shape[1:])

    def all_features(self) -> np.ndarray:
        """Positives and unlabeled pool stacked: the 'all data' of the GAN."""
        return np.concatenate([self.positives.x, self.unlabeled], axis=0)


def hidden_unlabeled_labels(data: PUDataset) -> np.ndarray:
    """Evaluation-only accessor for the true labels of the unlabeled pool."""
    return data._hidden_labels


class OracleClassifier:
    """Deterministic map from features to class index.

    ``predict_fn`` returns hard labels; ``proba_fn`` (optional) returns class
    probabilities and is needed for the inception score.
    """

    def __init__(self, predict_fn, n_classes, provenance="analytic", accuracy=None,
                 proba_fn=None, name="oracle"):
        if provenance not in ("analytic", "pretrained"):
            raise ValueError(f"unknown provenance {provenance!r}")
        self._predict = predict_fn
        self._proba = proba_fn
        self.n_classes = n_classes
        self.provenance = provenance
        self.accuracy = accuracy
        self.name = name

    def __call__(self, x) -> np.ndarray:
        return self.predict(x)

    def predict(self, x) -> np.ndarray:
        return np.asarray(self._predict(x), dtype=np.int64)

    def predict_proba(self, x) -> np.ndarray:
        if self._proba is None:
            raise TypeError(f"oracle {self.name!r} has no probabilistic output")
        return np.asarray(self._proba(x), dtype=np.float64)

    def __repr__(self):
        return (f"OracleClassifier(name={self.name!r}, provenance={self.provenance!r}, "
                f"n_classes={self.n_classes}, accuracy={self.accuracy})")


class NearestMeanOracle(OracleClassifier):
    """Bayes rule for equal-covariance isotropic Gaussians with equal priors."""

    def __init__(self, means: np.ndarray, sigma: float = 1.0):
        self.means = np.asarray(means, dtype=np.float64)
        self.sigma = sigma
        super().__init__(self._nearest, len(self.means), provenance="analytic",
                         proba_fn=self._posterior, name="nearest_mean")

    def _sq_dist(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        return ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(-1)

    def _nearest(self, x):
        # argmin picks the smallest index on ties
        return self._sq_dist(x).argmin(axis=1)

    def _posterior(self, x):
        logits = -0.5 * self._sq_dist(x) / self.sigma ** 2
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# synthetic Gaussian world


def simplex_means(n_points: int, dim: int, separation: float) -> np.ndarray:
    """``n_points`` vertices of a regular simplex with pairwise distance ``separation``."""
    if dim < n_points - 1:
        raise ValueError(f"{n_points} equidistant means need dim >= {n_points - 1}, got {dim}")
    eye = np.eye(n_points)
    centered = eye - eye.mean(axis=0)
    # orthonormal basis of the centered vertices' span
    u, s, _ = np.linalg.svd(centered.T, full_matrices=False)
    coords = centered @ u[:, : n_points - 1]
    coords *= separation / np.sqrt(2.0)
    means = np.zeros((n_points, dim))
    means[:, : n_points - 1] = coords
    return means


def make_synthetic_gaussian(K: int, dim: int, separation: float, n_per_class: int,
                            seed: int, n_test_per_class: int | None = None):
    """K+1 isotropic unit-variance Gaussians with equal pairwise mean spacing.

    Returns the labeled base dataset and its nearest-mean oracle. Labels index
    the Gaussians directly, so ``positive_classes=range(K)`` in
    :func:`make_pu_split` makes the last Gaussian the negative class.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if separation <= 0:
        raise ValueError("separation must be positive")
    if n_per_class <= 0:
        raise ValueError("n_per_class must be positive (empty dataset)")
    n_test = n_per_class if n_test_per_class is None else n_test_per_class
    means = simplex_means(K + 1, dim, separation)
    rng = np.random.default_rng(seed)

    def draw(n):
        y = np.repeat(np.arange(K + 1), n)
        x = means[y] + rng.standard_normal((len(y), dim))
        return LabeledData(x.astype(np.float32), y.astype(np.int64))

    base = BaseDataset(f"gaussian_K{K}_d{dim}", draw(n_per_class), draw(n_test), K + 1)
    return base, NearestMeanOracle(means)


def sample_gaussian_class(means: np.ndarray, labels: np.ndarray, rng) -> np.ndarray:
    labels = np.asarray(labels)
    return (means[labels] + rng.standard_normal((len(labels), means.shape[1]))).astype(np.float32)


def save_synthetic(path, base: BaseDataset, K: int, dim: int, separation: float, seed: int):
    """Write a synthetic dataset as a versioned CSV: one header row of metadata."""
    path = Path(path)
    header = (f"# schema_version={SYNTHETIC_SCHEMA_VERSION},K={K},dim={dim},"
              f"separation={separation!r},seed={seed}")
    cols = "split,label," + ",".join(f"x{i}" for i in range(dim))
    lines = [header, cols]
    for split, part in (("train", base.train), ("test", base.test)):
        for xi, yi in zip(part.x, part.y):
            lines.append(f"{split},{int(yi)}," + ",".join(repr(float(v)) for v in xi))
    path.write_text("\n".join(lines) + "\n")


def load_synthetic(path) -> tuple[BaseDataset, dict]:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
    if not header.startswith("# "):
        raise DataError(f"{path}: missing metadata header")
    meta = dict(kv.split("=", 1) for kv in header[2:].split(","))
    if int(meta["schema_version"]) != SYNTHETIC_SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema version {meta['schema_version']}")
    meta = {"K": int(meta["K"]), "dim": int(meta["dim"]),
            "separation": float(meta["separation"]), "seed": int(meta["seed"])}
    raw = np.genfromtxt(path, delimiter=",", skip_header=2, dtype=str)
    raw = np.atleast_2d(raw)
    parts = {}
    for split in ("train", "test"):
        rows = raw[raw[:, 0] == split]
        parts[split] = LabeledData(rows[:, 2:].astype(np.float32), rows[:, 1].astype(np.int64))
    base = BaseDataset(f"gaussian_K{meta['K']}_d{meta['dim']}", parts["train"], parts["test"],
                       meta["K"] + 1)
    return base, meta


# ---------------------------------------------------------------------------
# image datasets

_IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _open_maybe_gz(path: Path) -> bytes:
    for candidate in (path, path.with_name(path.name + ".gz")):
        if candidate.exists():
            try:
                if candidate.suffix == ".gz":
                    with gzip.open(candidate, "rb") as fh:
                        return fh.read()
                return candidate.read_bytes()
            except (OSError, EOFError) as exc:
                raise DataError(f"{candidate}: unreadable ({exc})") from exc
    raise DataError(f"{path}: file not found (also tried .gz)")


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (the MNIST/Fashion-MNIST container), optionally gzipped."""
    path = Path(path)
    buf = _open_maybe_gz(path)
    if len(buf) < 4:
        raise DataError(f"{path}: truncated header")
    zero, dtype_code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES:
        raise DataError(f"{path}: bad IDX magic")
    if len(buf) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", buf[4: 4 + 4 * ndim])
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    expected = int(np.prod(shape)) * dtype.itemsize
    body = buf[4 + 4 * ndim:]
    if len(body) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(shape)


def _load_idx_dataset(name: str, root: Path) -> BaseDataset:
    parts = {}
    for split, (img_name, lbl_name) in _IDX_FILES.items():
        images = read_idx(root / img_name)
        labels = read_idx(root / lbl_name)
        if len(images) != len(labels):
            raise DataError(f"{root / img_name}: {len(images)} images but {len(labels)} labels")
        x = (images.astype(np.float32) / 255.0)[:, None, :, :]
        parts[split] = LabeledData(x, labels.astype(np.int64))
    return BaseDataset(name, parts["train"], parts["test"], 10)


_CIFAR_RECORD = 1 + 3 * 32 * 32


def _read_cifar_batch(path: Path) -> LabeledData:
    if not path.exists():
        raise DataError(f"{path}: file not found")
    buf = path.read_bytes()
    if len(buf) == 0 or len(buf) % _CIFAR_RECORD:
        raise DataError(f"{path}: length {len(buf)} is not a multiple of {_CIFAR_RECORD}")
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    x = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return LabeledData(x, arr[:, 0].astype(np.int64))


def _load_cifar10(root: Path) -> BaseDataset:
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    train = [_read_cifar_batch(root / f"data_batch_{i}.bin") for i in range(1, 6)]
    test = _read_cifar_batch(root / "test_batch.bin")
    train = LabeledData(np.concatenate([b.x for b in train]), np.concatenate([b.y for b in train]))
    return BaseDataset("cifar10", train, test, 10)


def default_data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def load_image_dataset(name: str, root=None) -> BaseDataset:
    """Load MNIST / Fashion-MNIST (IDX) or CIFAR-10 (binary batches) from ``root``.

    ``root`` may hold the files directly or in a subdirectory named after the
    dataset. Pixel values are scaled to [0, 1].
    """
    root = Path(root) if root is not None else default_data_root()
    sub = root / name
    if sub.is_dir():
        root = sub
    if name in ("mnist", "fashion_mnist"):
        return _load_idx_dataset(name, root)
    if name == "cifar10":
        return _load_cifar10(root)
    raise ValueError(f"unknown dataset {name!r}")


# CIFAR-10 airplane, automobile, ship, truck
CIFAR_TRANSPORT = (0, 1, 8, 9)
# Fashion-MNIST trouser, bag, ankle boot, sneaker, sandal
FASHION_NON_CLOTHES = (1, 8, 9, 7, 5)


# ---------------------------------------------------------------------------
# PU splits


def unlabeled_distribution(kind, K: int) -> np.ndarray:
    """Target class composition of the unlabeled pool over the K+1 mapped classes."""
    if isinstance(kind, str):
        if kind == "type1":
            return np.full(K + 1, 1.0 / (K + 1))
        if kind == "type2":
            return np.concatenate([np.full(K, 1.0 / (2 * K)), [0.5]])
        if kind == "natural":
            return None
        raise ValueError(f"unknown unlabeled distribution {kind!r}")
    dist = np.asarray(kind, dtype=np.float64)
    if dist.shape != (K + 1,) or np.any(dist < 0) or abs(dist.sum() - 1) > 1e-9:
        raise ValueError(f"explicit unlabeled distribution must be a length-{K + 1} probability vector")
    return dist


def allocate(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total`` in proportion to ``weights`` (largest remainder)."""
    weights = np.asarray(weights, dtype=np.float64)
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    # ties go to the lower class index
    order = np.lexsort((np.arange(len(raw)), -(raw - counts)))
    counts[order[:short]] += 1
    return counts


def map_labels(y: np.ndarray, positive_classes: Sequence) -> np.ndarray:
    """Map source labels to 0..K-1 for positive groups and K for everything else."""
    K = len(positive_classes)
    out = np.full(len(y), K, dtype=np.int64)
    for k, group in enumerate(positive_classes):
        group = (group,) if np.isscalar(group) else tuple(group)
        out[np.isin(y, group)] = k
    return out


def make_pu_split(base: BaseDataset, positive_classes: Sequence, positive_rate: float,
                  unlabeled_dist="type1", seed: int = 0, n_unlabeled: int | None = None) -> PUDataset:
    """Build a multi-positive PU dataset from a fully labeled one.

    ``positive_classes`` lists K entries, each a source label or a tuple of
    source labels merged into one positive class. ``round(positive_rate *
    len(base.train))`` positives are drawn evenly over the K classes. The whole
    train split is the unlabeled pool, resampled (without replacement where
    possible) to ``n_unlabeled`` examples with composition ``unlabeled_dist``.
    """
    if not 0 < positive_rate <= 1:
        raise ValueError(f"positive_rate must be in (0, 1], got {positive_rate}")
    K = len(positive_classes)
    if K < 1:
        raise ValueError("need at least one positive class")
    rng = np.random.default_rng(seed)
    train_y = map_labels(base.train.y, positive_classes)
    for c in range(K + 1):
        if not np.any(train_y == c):
            raise CapacityError(f"class {c} has no training examples")

    n_pos = int(round(positive_rate * len(base.train)))
    n_pos = max(n_pos, 1)
    per_class = allocate(n_pos, np.ones(K))
    pos_idx = []
    for c in range(K):
        idx = np.flatnonzero(train_y == c)
        if per_class[c] > len(idx):
            raise CapacityError(f"class {c} ({positive_classes[c]}) has {len(idx)} examples, "
                                f"{per_class[c]} positives requested")
        pos_idx.append(rng.choice(idx, size=per_class[c], replace=False))
    pos_idx = np.concatenate(pos_idx)
    positives = LabeledData(base.train.x[pos_idx], train_y[pos_idx])

    n_u = len(base.train) if n_unlabeled is None else int(n_unlabeled)
    dist = unlabeled_distribution(unlabeled_dist, K)
    if dist is None:
        u_idx = rng.permutation(len(train_y))[:n_u]
    else:
        counts = allocate(n_u, dist)
        u_idx = []
        for c in range(K + 1):
            idx = np.flatnonzero(train_y == c)
            if counts[c] <= len(idx):
                u_idx.append(rng.choice(idx, size=counts[c], replace=False))
            else:
                logger.warning("class %d exhausted: %d requested, %d available; duplicating",
                               c, counts[c], len(idx))
                extra = rng.choice(idx, size=counts[c] - len(idx), replace=True)
                u_idx.append(np.concatenate([rng.permutation(idx), extra]))
        u_idx = rng.permutation(np.concatenate(u_idx))
    hidden = train_y[u_idx]
    priors = np.bincount(hidden, minlength=K + 1) / len(hidden)

    test = LabeledData(base.test.x, map_labels(base.test.y, positive_classes))
    return PUDataset(positives=positives, unlabeled=np.ascontiguousarray(base.train.x[u_idx]),
                     test=test, priors=priors, positive_rate=positive_rate,
                     n_positive_classes=K, name=base.name, _hidden_labels=hidden)
