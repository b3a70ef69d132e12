"""Confusion matrix of the PU classifier on generated samples, label
corruption, and the oracle transition matrix of the generator."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

MATRIX_FORMAT_VERSION = 1


def _check_row_stochastic(m: np.ndarray, atol=1e-6, name="matrix"):
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if np.any(m < -atol) or np.any(m > 1 + atol):
        raise ValueError(f"{name} entries must lie in [0, 1]")
    if not np.allclose(m.sum(axis=1), 1.0, atol=atol):
        raise ValueError(f"{name} rows must sum to 1")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Row-stochastic estimate of P(classifier says j | generation label i)."""

    entries: np.ndarray
    ema_lambda: float = 0.99
    update_count: int = 0

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=np.float64)
        _check_row_stochastic(m, name="confusion matrix")
        object.__setattr__(self, "entries", m)

    @classmethod
    def identity(cls, n_classes: int, ema_lambda: float = 0.99):
        return cls(np.eye(n_classes), ema_lambda, 0)

    @property
    def n_classes(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class TransitionMatrix:
    """Monte-Carlo estimate of P(oracle class j | generation label i)."""

    entries: np.ndarray
    sample_count: np.ndarray
    std_error: np.ndarray = field(default=None)

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=np.float64)
        n = np.asarray(self.sample_count, dtype=np.int64)
        object.__setattr__(self, "entries", m)
        object.__setattr__(self, "sample_count", n)
        if self.std_error is None:
            se = np.sqrt(m * (1 - m) / np.maximum(n, 1)[:, None])
            object.__setattr__(self, "std_error", se)

    @property
    def n_classes(self) -> int:
        return self.entries.shape[0]

    @property
    def trace_mean(self) -> float:
        return float(np.trace(self.entries) / self.entries.shape[0])


def estimate_delta(predicted: np.ndarray, labels: np.ndarray, current: ConfusionMatrix) -> np.ndarray:
    """Per-label empirical frequency of classifier predictions on generated samples.

    Rows whose label does not occur in the batch are copied from ``current``.
    """
    predicted = np.asarray(predicted, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty batch")
    n = current.n_classes
    counts = np.zeros((n, n))
    np.add.at(counts, (labels, predicted), 1.0)
    totals = counts.sum(axis=1)
    delta = current.entries.copy()
    seen = totals > 0
    delta[seen] = counts[seen] / totals[seen, None]
    return delta


def ema_update(current: ConfusionMatrix, delta: np.ndarray, lam: float | None = None) -> ConfusionMatrix:
    """``lam * current + (1 - lam) * delta``."""
    lam = current.ema_lambda if lam is None else lam
    if not 0 <= lam <= 1:
        raise ValueError(f"EMA coefficient must be in [0, 1], got {lam}")
    delta = np.asarray(delta, dtype=np.float64)
    _check_row_stochastic(delta, name="delta")
    entries = lam * current.entries + (1 - lam) * delta
    return replace(current, entries=entries, update_count=current.update_count + 1)


def corrupt_labels(labels: torch.Tensor, matrix, gen: torch.Generator | None = None) -> torch.Tensor:
    """Draw a noisy label from row ``y`` of ``matrix`` for each ``y`` in ``labels``.

    One uniform variate per label, mapped through the row's CDF.
    """
    m = torch.as_tensor(np.asarray(matrix.entries if isinstance(matrix, ConfusionMatrix) else matrix),
                        dtype=torch.float64)
    labels = torch.as_tensor(labels).long()
    cdf = torch.cumsum(m, dim=1)
    cdf[:, -1] = 1.0
    u = torch.rand(len(labels), generator=gen, dtype=torch.float64)
    out = torch.searchsorted(cdf[labels], u.unsqueeze(1), right=True).squeeze(1)
    return out.clamp_(max=m.shape[1] - 1)


def corrupt_label(y: int, matrix, gen: torch.Generator | None = None) -> int:
    return int(corrupt_labels(torch.tensor([y]), matrix, gen)[0])


def estimate_pg(sampler, oracle, n_classes: int, n_per_class: int = 1000,
                gen: torch.Generator | None = None) -> TransitionMatrix:
    """Estimate the generator's label-to-oracle-class transition matrix.

    ``sampler(labels, gen)`` returns generated features for the given labels.
    A generator over fewer labels than the oracle's classes (a K-class
    generator judged by a K+1-class oracle) yields a rectangular matrix.
    """
    labels = torch.arange(n_classes).repeat_interleave(n_per_class)
    x = sampler(labels, gen)
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    pred = oracle(x)
    n_out = max(n_classes, getattr(oracle, "n_classes", n_classes))
    counts = np.zeros((n_classes, n_out))
    np.add.at(counts, (labels.numpy(), np.asarray(pred)), 1.0)
    return TransitionMatrix(counts / n_per_class, np.full(n_classes, n_per_class))


def nearest_permutation(p: np.ndarray, chunk: int = 20_000):
    """Permutation matrix minimizing the max-entry distance to ``p``, by exhaustive search."""
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[0]
    if n > 10:
        raise ValueError("exhaustive permutation search is limited to 10 classes")
    # distance for permutation s: max(max_i 1 - p[i, s_i], max off-permutation entry)
    rows = np.arange(n)
    best_d, best_perm = np.inf, None
    perms_iter = itertools.permutations(range(n))
    while True:
        block = np.array(list(itertools.islice(perms_iter, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        on = p[rows, block]                              # (B, n)
        masked = np.broadcast_to(p, (len(block), n, n)).copy()
        masked[np.arange(len(block))[:, None], rows, block] = -np.inf
        d = np.maximum((1 - on).max(axis=1), masked.reshape(len(block), -1).max(axis=1))
        i = int(np.argmin(d))
        if d[i] < best_d:
            best_d, best_perm = float(d[i]), block[i]
    return best_perm, best_d


def permutation_diagnostics(p) -> tuple[float, float]:
    """(trace / n, max-entry distance to the nearest permutation matrix)."""
    m = p.entries if isinstance(p, TransitionMatrix) else np.asarray(p, dtype=np.float64)
    _, dist = nearest_permutation(m)
    return float(np.trace(m) / m.shape[0]), dist


def permutation_matrix(perm) -> np.ndarray:
    perm = np.asarray(perm)
    q = np.zeros((len(perm), len(perm)))
    q[np.arange(len(perm)), perm] = 1.0
    return q


def save_matrix(path, matrix):
    """Versioned plain-text dump: one header line, then full-precision rows."""
    if isinstance(matrix, ConfusionMatrix):
        header = (f"# kind=confusion,version={MATRIX_FORMAT_VERSION},K={matrix.n_classes - 1},"
                  f"update_count={matrix.update_count},lambda={matrix.ema_lambda!r}")
        m = matrix.entries
    else:
        counts = " ".join(str(int(c)) for c in matrix.sample_count)
        header = (f"# kind=transition,version={MATRIX_FORMAT_VERSION},K={matrix.n_classes - 1},"
                  f"sample_count={counts}")
        m = matrix.entries
    body = "\n".join(" ".join(repr(float(v)) for v in row) for row in m)
    Path(path).write_text(header + "\n" + body + "\n")


def load_matrix(path):
    lines = Path(path).read_text().splitlines()
    meta = dict(kv.split("=", 1) for kv in lines[0][2:].split(","))
    if int(meta["version"]) != MATRIX_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported matrix version {meta['version']}")
    m = np.array([[float(v) for v in line.split()] for line in lines[1:] if line.strip()])
    if meta["kind"] == "confusion":
        return ConfusionMatrix(m, float(meta["lambda"]), int(meta["update_count"]))
    counts = np.array([int(c) for c in meta["sample_count"].split()])
    return TransitionMatrix(m, counts)
