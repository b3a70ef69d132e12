"""Multi-positive non-negative PU risk and PU classifier pretraining."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch.nn import functional as F

from . import nets
from .datasets import LabeledData, PUDataset

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "total_risk", "pos_term", "corrected_neg_term", "ce_term",
               "signflip_rate", "test_acc")


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; carries the last finite checkpoint."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class PURiskConfig:
    pi_p: float
    loss: str = "sigmoid"
    lr: float = 1e-3
    optimizer: str = "sgd"
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0 < self.pi_p < 1:
            raise ValueError(f"pi_p must be in (0, 1), got {self.pi_p}")
        if self.loss != "sigmoid":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def make_optimizer(params, kind, lr, momentum=0.0, weight_decay=0.0, betas=(0.9, 0.999)):
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, betas=betas, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def sigmoid_loss(t, y):
    """``1 / (1 + exp(t*y))``: bounded, symmetric surrogate of the 0-1 loss."""
    if not torch.is_tensor(t):
        t = torch.as_tensor(t, dtype=torch.float64)
    return torch.sigmoid(-t * y)


def positive_logit(scores: torch.Tensor) -> torch.Tensor:
    """Log-odds of the total probability mass on the first K of K+1 classes.

    Evaluated as ``logsumexp(scores[:K]) - scores[K]`` which equals
    ``log(p / (1 - p))`` without forming ``p``.
    """
    scores = torch.as_tensor(scores)
    return torch.logsumexp(scores[..., :-1], dim=-1) - scores[..., -1]


def cross_entropy_positive(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean K+1-way cross entropy of labeled positives."""
    labels = torch.as_tensor(labels)
    n_classes = scores.shape[-1]
    if torch.any(labels >= n_classes - 1) or torch.any(labels < 0):
        raise ValueError("cross_entropy_positive only accepts positive-class labels 0..K-1")
    return F.cross_entropy(scores, labels.long())


def predict_hard(scores) -> torch.Tensor:
    """Argmax over class scores; ``torch.argmax`` returns the first maximal index."""
    return torch.argmax(torch.as_tensor(scores), dim=-1)


class PURisk(NamedTuple):
    total: torch.Tensor
    positive_term: torch.Tensor
    corrected_negative: torch.Tensor
    ce_term: torch.Tensor
    sign_flip: bool
    objective: torch.Tensor


def pu_risk_from_scores(scores_p, labels_p, scores_u, pi_p, include_ce=True) -> PURisk:
    """Minibatch risk from precomputed K+1 scores.

    ``total`` is ``pi_p R_p^+ + max(0, r) + R_p^CE`` with
    ``r = R_u^- - pi_p R_p^-`` evaluated on the positive logit. ``objective``
    is what the optimizer descends: ``total`` normally and ``-r`` when
    ``r < 0``.
    """
    if len(scores_p) == 0 or len(scores_u) == 0:
        raise ValueError("both minibatches must be non-empty")
    h_p = positive_logit(scores_p)
    h_u = positive_logit(scores_u)
    r_p_plus = sigmoid_loss(h_p, 1.0).mean()
    r_p_minus = sigmoid_loss(h_p, -1.0).mean()
    r_u_minus = sigmoid_loss(h_u, -1.0).mean()
    positive_term = pi_p * r_p_plus
    r = r_u_minus - pi_p * r_p_minus
    if include_ce:
        ce = cross_entropy_positive(scores_p, labels_p)
    else:
        ce = torch.zeros((), dtype=scores_p.dtype)
    total = positive_term + torch.clamp(r, min=0.0) + ce
    sign_flip = bool(r.detach() < 0)
    objective = -r if sign_flip else total
    return PURisk(total, positive_term, r, ce, sign_flip, objective)


def pu_risk_minibatch(f, x_p, y_p, x_u, pi_p, include_ce=True) -> PURisk:
    if len(x_p) == 0 or len(x_u) == 0:
        raise ValueError("both minibatches must be non-empty")
    scores = f(torch.cat([x_p, x_u], dim=0))
    return pu_risk_from_scores(scores[: len(x_p)], y_p, scores[len(x_p):], pi_p, include_ce)


def build_score_function(feature_shape, n_classes, seed=0, width=None, dtype=torch.float32):
    return nets.build(nets.classifier_descriptor(feature_shape, n_classes, width), seed=seed,
                      dtype=dtype)


@torch.no_grad()
def predict(f, x, batch_size=2048) -> np.ndarray:
    """Hard labels for a numpy feature array."""
    was_training = f.training
    f.eval()
    out = []
    dtype = next(f.parameters()).dtype
    for start in range(0, len(x), batch_size):
        xb = torch.tensor(np.asarray(x[start:start + batch_size]), dtype=dtype)
        out.append(predict_hard(f(xb)).numpy())
    f.train(was_training)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(f, data: LabeledData) -> float:
    return float(np.mean(predict(f, data.x) == data.y))


def _batches(n, batch_size, gen):
    perm = torch.randperm(n, generator=gen)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


class _Cycler:
    """Endless reshuffled minibatches over a small index set."""

    def __init__(self, n, batch_size, gen):
        self.n, self.batch_size, self.gen = n, min(batch_size, n), gen
        self.perm, self.pos = torch.randperm(n, generator=gen), 0

    def next(self):
        if self.pos + self.batch_size > self.n:
            self.perm, self.pos = torch.randperm(self.n, generator=self.gen), 0
        idx = self.perm[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


def pretrain_pu(data: PUDataset, config: PURiskConfig | None = None, epochs: int = 10,
                batch_size: int = 256, seed: int = 0, f=None, width=None, log_path=None,
                eval_test: bool = True):
    """Minimize the minibatch non-negative PU risk with per-batch sign flips.

    Returns the trained score function and the per-epoch log (list of dicts
    with :data:`LOG_COLUMNS`). Raises :class:`TrainingAborted` with the last
    finite parameters if the risk becomes non-finite.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    config = config or PURiskConfig(pi_p=data.pi_p)
    if f is None:
        f = build_score_function(data.feature_shape, data.K + 1, seed=seed, width=width)
    dtype = next(f.parameters()).dtype
    opt = make_optimizer(f.parameters(), config.optimizer, config.lr, config.momentum,
                         config.weight_decay)
    gen = torch.Generator().manual_seed(seed)
    x_p = torch.tensor(data.positives.x, dtype=dtype)
    y_p = torch.tensor(data.positives.y)
    x_u = torch.tensor(data.unlabeled, dtype=dtype)
    pos_batches = _Cycler(len(x_p), batch_size, gen)
    last_good = copy.deepcopy(f.state_dict())
    log = []
    f.train()
    for epoch in range(1, epochs + 1):
        sums = np.zeros(4)
        flips = n_batches = 0
        for u_idx in _batches(len(x_u), batch_size, gen):
            p_idx = pos_batches.next()
            risk = pu_risk_minibatch(f, x_p[p_idx], y_p[p_idx], x_u[u_idx], config.pi_p)
            if not torch.isfinite(risk.objective):
                f.load_state_dict(last_good)
                raise TrainingAborted(f"non-finite PU risk at epoch {epoch}", checkpoint=last_good)
            opt.zero_grad()
            risk.objective.backward()
            opt.step()
            sums += [risk.total.item(), risk.positive_term.item(),
                     risk.corrected_negative.item(), risk.ce_term.item()]
            flips += risk.sign_flip
            n_batches += 1
        last_good = copy.deepcopy(f.state_dict())
        row = dict(zip(LOG_COLUMNS[1:5], sums / n_batches))
        row["epoch"] = epoch
        row["signflip_rate"] = flips / n_batches
        row["test_acc"] = accuracy(f, data.test) if eval_test else float("nan")
        log.append({k: row[k] for k in LOG_COLUMNS})
        logger.info("pu epoch %d risk %.4f flips %.2f test_acc %.4f", epoch,
                    row["total_risk"], row["signflip_rate"], row["test_acc"])
    if log_path is not None:
        write_log(log_path, log)
    return f, log


def write_log(path, rows, columns=LOG_COLUMNS):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        writer.writerows(rows)


def save_score_function(path, f, seed=None, log_path=None):
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "descriptor": f.descriptor,
        "params": torch.nn.utils.parameters_to_vector(f.parameters()).detach().clone(),
        "dtype": str(next(f.parameters()).dtype),
        "seed": seed,
        "log_path": None if log_path is None else str(log_path),
    }, path)


def load_score_function(path):
    blob = torch.load(path, weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    dtype = getattr(torch, blob["dtype"].split(".")[-1])
    f = nets.build(blob["descriptor"], dtype=dtype)
    torch.nn.utils.vector_to_parameters(blob["params"].to(dtype), f.parameters())
    return f, blob


def parallel_bound_gap(corrected_negatives) -> float:
    """``mean(max(0, r_i)) - max(0, mean(r_i))`` over per-batch terms; always >= 0."""
    r = np.asarray(corrected_negatives, dtype=np.float64)
    return float(np.maximum(r, 0).mean() - max(r.mean(), 0.0))


def finite_or_raise(value: torch.Tensor, what: str):
    if not math.isfinite(float(value)):
        raise TrainingAborted(f"non-finite {what}")
