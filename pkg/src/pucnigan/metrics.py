"""Evaluation metrics: generator label accuracy, PU accuracy, inception score.

This is the only module allowed to read the hidden labels of an unlabeled
pool, and the oracles it trains see fully labeled data.
"""
from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.special import rel_entr
from torch.nn import functional as F

from . import pu_core
from .datasets import LabeledData, OracleClassifier, PUDataset, hidden_unlabeled_labels
from .noise_model import TransitionMatrix, estimate_pg

logger = logging.getLogger(__name__)


@dataclass
class MetricRecord:
    name: str
    value: float
    dispersion: float = 0.0
    sample_count: int = 1
    round: int = 0
    variant: str = ""
    dataset: str = ""
    positive_rate: float = float("nan")

    def __post_init__(self):
        if self.dispersion < 0:
            raise ValueError("dispersion must be >= 0")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")

    def as_dict(self):
        return asdict(self)


def generator_label_accuracy(sampler, oracle: OracleClassifier, n_classes: int,
                             n_per_class: int = 1000, seed: int = 0, **context) -> tuple[MetricRecord, TransitionMatrix]:
    """Fraction of generated samples whose oracle class is the intended label.

    Labels are balanced over the ``n_classes`` the generator produces. Returns
    the record together with the transition matrix it was read from, so the
    value is exactly that matrix's mean diagonal.
    """
    gen = torch.Generator().manual_seed(seed)
    pg = estimate_pg(sampler, oracle, n_classes, n_per_class, gen)
    diag = np.diag(pg.entries)[:n_classes]
    n_total = n_classes * n_per_class
    value = float(diag.mean())
    se = float(np.sqrt(value * (1 - value) / n_total))
    return MetricRecord("gen_label_acc", value, se, n_total, **context), pg


def pu_accuracy(f, test: LabeledData, **context) -> MetricRecord:
    """Hard-argmax accuracy of a score function (or any ``x -> labels`` callable)."""
    if isinstance(f, torch.nn.Module):
        pred = pu_core.predict(f, test.x)
    else:
        pred = np.asarray(f(test.x))
    hits = pred == test.y
    value = float(hits.mean())
    se = float(np.sqrt(value * (1 - value) / len(hits)))
    return MetricRecord("pu_test_acc", value, se, len(hits), **context)


def unlabeled_accuracy(f, data: PUDataset) -> float:
    """Accuracy of ``f`` on the unlabeled pool against its hidden labels."""
    return float(np.mean(pu_core.predict(f, data.unlabeled) == hidden_unlabeled_labels(data)))


def inception_score_from_probs(probs: np.ndarray, splits: int = 10) -> tuple[float, float]:
    """Mean and std over splits of ``exp(E_x KL(p(y|x) || p(y)))``."""
    probs = np.asarray(probs, dtype=np.float64)
    if len(probs) % splits:
        raise ValueError(f"{len(probs)} samples are not divisible into {splits} splits")
    scores = []
    for part in np.split(probs, splits):
        marginal = part.mean(axis=0, keepdims=True)
        kl = rel_entr(part, marginal).sum(axis=1).mean()
        scores.append(np.exp(kl))
    scores = np.array(scores)
    return float(scores.mean()), float(scores.std())


def inception_score(sampler, eval_classifier: OracleClassifier, n_classes: int,
                    n_samples: int = 10_000, splits: int = 10, seed: int = 0, **context) -> MetricRecord:
    """Inception score of generated samples under a domain classifier.

    Generation labels are balanced and then shuffled so every split sees all
    classes.
    """
    if n_samples % splits:
        raise ValueError("n_samples must be divisible by splits")
    gen = torch.Generator().manual_seed(seed)
    labels = torch.arange(n_classes).repeat(n_samples // n_classes + 1)[:n_samples]
    labels = labels[torch.randperm(n_samples, generator=gen)]
    x = sampler(labels, gen)
    mean, std = inception_score_from_probs(eval_classifier.predict_proba(x), splits)
    return MetricRecord("inception_score", mean, std, n_samples, **context)


def oracle_from_network(f, name="oracle", accuracy=None) -> OracleClassifier:
    dtype = next(f.parameters()).dtype
    f.eval()

    @torch.no_grad()
    def proba(x):
        out = []
        for start in range(0, len(x), 2048):
            xb = torch.tensor(np.asarray(x[start:start + 2048]), dtype=dtype)
            out.append(torch.softmax(f(xb), dim=1).double().numpy())
        return np.concatenate(out)

    oracle = OracleClassifier(lambda x: pu_core.predict(f, x), f.descriptor["n_classes"],
                              provenance="pretrained", accuracy=accuracy, proba_fn=proba, name=name)
    oracle.network = f
    return oracle


def train_oracle_classifier(train: LabeledData, target_accuracy: float = 0.99, n_classes=None,
                            max_epochs: int = 20, batch_size: int = 128, lr: float = 1e-3,
                            holdout: float = 0.1, seed: int = 0, width=None,
                            name: str = "oracle") -> OracleClassifier:
    """Supervised classifier on fully labeled data, trained until held-out accuracy
    reaches ``target_accuracy`` or ``max_epochs`` run out.

    The achieved held-out accuracy is stored on the returned oracle; a
    shortfall issues a warning rather than failing.
    """
    n_classes = n_classes or int(train.y.max()) + 1
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(train))
    n_hold = max(1, int(holdout * len(train)))
    hold = LabeledData(train.x[perm[:n_hold]], train.y[perm[:n_hold]])
    fit_idx = perm[n_hold:]
    f = pu_core.build_score_function(train.feature_shape, n_classes, seed=seed, width=width)
    opt = torch.optim.Adam(f.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    x = torch.tensor(train.x[fit_idx])
    y = torch.tensor(train.y[fit_idx])
    best_acc, best_state = -1.0, None
    for epoch in range(max_epochs):
        f.train()
        for idx in torch.randperm(len(x), generator=gen).split(batch_size):
            loss = F.cross_entropy(f(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        acc = pu_core.accuracy(f, hold)
        logger.info("oracle %s epoch %d held-out acc %.4f", name, epoch + 1, acc)
        if acc > best_acc:
            best_acc, best_state = acc, copy.deepcopy(f.state_dict())
        if acc >= target_accuracy:
            break
    f.load_state_dict(best_state)
    if best_acc < target_accuracy:
        warnings.warn(f"oracle {name!r} reached {best_acc:.4f} < target {target_accuracy:.4f}")
    return oracle_from_network(f, name=name, accuracy=best_acc)
