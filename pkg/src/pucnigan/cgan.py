"""Conditional GAN objectives, auxiliary loss and the four model variants.

Conventions: ``D`` scores labeled pairs ``(x, label)`` where the label is
either an integer tensor or a (N, C) probability tensor. The D-step returns
the objective D *ascends*; the G-step returns the loss G *descends*.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import nets
from .noise_model import ConfusionMatrix, corrupt_labels


class ConfigError(ValueError):
    """Inconsistent or unknown configuration."""


# ---------------------------------------------------------------------------
# variants


@dataclass(frozen=True)
class GanVariant:
    name: str
    label_source: str          # true_positive_labels | pu_predicted_labels
    corruption: str            # none | learnable_matrix | ema_matrix
    classes_generated: str     # K | K+1
    aux_loss_enabled: bool

    def __post_init__(self):
        if self.label_source not in ("true_positive_labels", "pu_predicted_labels"):
            raise ConfigError(f"unknown label source {self.label_source!r}")
        if self.corruption not in ("none", "learnable_matrix", "ema_matrix"):
            raise ConfigError(f"unknown corruption {self.corruption!r}")
        if self.classes_generated not in ("K", "K+1"):
            raise ConfigError(f"classes_generated must be 'K' or 'K+1'")
        if self.label_source == "true_positive_labels" and self.classes_generated != "K":
            raise ConfigError("a generator trained on labeled positives only covers K classes")
        if self.classes_generated == "K" and (self.corruption != "none" or self.aux_loss_enabled):
            raise ConfigError("K-class generation supports neither corruption nor the auxiliary loss")
        preset = PRESETS.get(self.name)
        if preset is not None and asdict(preset) != asdict(self):
            raise ConfigError(f"variant {self.name} must be {asdict(preset)}, got {asdict(self)}")

    @property
    def generates_negative(self) -> bool:
        return self.classes_generated == "K+1"

    def n_generated(self, K: int) -> int:
        return K + 1 if self.generates_negative else K

    @classmethod
    def preset(cls, name: str) -> "GanVariant":
        try:
            return PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(PRESETS)}") from None


PRESETS: dict[str, GanVariant] = {}
PRESETS.update({
    "CGAN-P": GanVariant("CGAN-P", "true_positive_labels", "none", "K", False),
    "CGAN-A": GanVariant("CGAN-A", "pu_predicted_labels", "none", "K+1", False),
    "RCGAN-U": GanVariant("RCGAN-U", "pu_predicted_labels", "learnable_matrix", "K+1", False),
    "CNI-CGAN": GanVariant("CNI-CGAN", "pu_predicted_labels", "ema_matrix", "K+1", True),
})


# ---------------------------------------------------------------------------
# measuring function


@dataclass(frozen=True)
class MeasuringFunction:
    """``phi`` of the adversarial objective plus its regularization policy.

    probabilistic: D is squashed by a sigmoid and ``phi = log``.
    wasserstein_gp: D is an unbounded critic, ``phi`` is the identity and a
    gradient penalty keeps it near 1-Lipschitz.
    """

    kind: str = "wasserstein_gp"
    gp_weight: float = 10.0
    d_steps: int = 1

    def __post_init__(self):
        if self.kind not in ("probabilistic", "wasserstein_gp"):
            raise ConfigError(f"unknown measuring function {self.kind!r}")

    def real(self, d_raw: torch.Tensor) -> torch.Tensor:
        """``phi(D(x, y))`` on raw discriminator outputs."""
        if self.kind == "probabilistic":
            return F.logsigmoid(d_raw)
        return d_raw

    def fake(self, d_raw: torch.Tensor) -> torch.Tensor:
        """``phi(1 - D(x, y))`` on raw discriminator outputs."""
        if self.kind == "probabilistic":
            # log(1 - sigmoid(t)) == logsigmoid(-t)
            return F.logsigmoid(-d_raw)
        return 1.0 - d_raw

    @property
    def uses_penalty(self) -> bool:
        return self.kind == "wasserstein_gp" and self.gp_weight > 0


def measuring_function(kind: str = "wasserstein_gp", gp_weight: float = 10.0) -> MeasuringFunction:
    return MeasuringFunction(kind, gp_weight)


def gradient_penalty(D, x_real, v_real, x_fake, v_fake, gen=None) -> torch.Tensor:
    """Mean ``(||grad_x D(x_hat, v_hat)|| - 1)^2`` on random interpolates of labeled pairs."""
    n = len(x_real)
    alpha = torch.rand(n, generator=gen, dtype=torch.float64).to(x_real.dtype)
    ax = alpha.view(-1, *([1] * (x_real.dim() - 1)))
    x_hat = (ax * x_real + (1 - ax) * x_fake).detach().requires_grad_(True)
    v_hat = alpha.view(-1, 1) * v_real + (1 - alpha.view(-1, 1)) * v_fake
    out = D(x_hat, v_hat)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    return ((grad.flatten(1).norm(dim=1) - 1.0) ** 2).mean()


# ---------------------------------------------------------------------------
# label corruption policies


class IdentityCorruption:
    """No corruption. Still draws one uniform per label so that random streams
    stay aligned with the corrupting variants."""

    def __init__(self, n_classes):
        self.n_classes = n_classes
        self._eye = np.eye(n_classes)

    def __call__(self, y, gen=None):
        return corrupt_labels(y, self._eye, gen)

    def matrix(self) -> np.ndarray:
        return self._eye


class EMACorruption:
    """Hard noisy labels sampled from the current EMA confusion matrix."""

    def __init__(self, confusion: ConfusionMatrix):
        self.confusion = confusion

    @property
    def n_classes(self):
        return self.confusion.n_classes

    def __call__(self, y, gen=None):
        return corrupt_labels(y, self.confusion, gen)

    def matrix(self) -> np.ndarray:
        return self.confusion.entries


class LearnableCorruption(nn.Module):
    """Row-softmax parameterized confusion matrix (RCGAN-U).

    Returns soft labels (row ``y`` of the matrix) so that the discriminator's
    score is differentiable in the matrix parameters.
    """

    def __init__(self, n_classes, off_diagonal_mass=1e-4, dtype=torch.float32):
        super().__init__()
        self.n_classes = n_classes
        # diagonal logit s gives off-diagonal row mass (n-1)/(e^s + n-1)
        s = math.log((n_classes - 1) * (1 - off_diagonal_mass) / off_diagonal_mass) if n_classes > 1 else 0.0
        self.logits = nn.Parameter(torch.eye(n_classes, dtype=dtype) * s)

    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)

    def forward(self, y, gen=None):
        # keep the random stream aligned with the hard-sampling policies
        torch.rand(len(y), generator=gen, dtype=torch.float64)
        return self.probs()[torch.as_tensor(y).long()]

    def matrix(self) -> np.ndarray:
        return self.probs().detach().double().numpy()


# ---------------------------------------------------------------------------
# building blocks


def sample_latent(n, latent_dim, gen=None, dtype=torch.float32):
    return torch.randn(n, latent_dim, generator=gen, dtype=torch.float64).to(dtype)


def sample_labels(n, n_classes, gen=None):
    """Uniform generation labels."""
    return torch.randint(0, n_classes, (n,), generator=gen)


def make_sampler(G, batch_size=1024):
    """``sampler(labels, gen)`` drawing fresh latents for each label (no grad)."""
    dtype = next(G.parameters()).dtype

    @torch.no_grad()
    def sampler(labels, gen=None):
        out = []
        for start in range(0, len(labels), batch_size):
            y = labels[start:start + batch_size]
            out.append(G(sample_latent(len(y), G.latent_dim, gen, dtype), y))
        return torch.cat(out).numpy()

    return sampler


class AuxLoss(NamedTuple):
    value: torch.Tensor        # hinge on the differentiable surrogate
    hard_value: float          # hinge on hard argmax agreement
    rates: torch.Tensor        # per-class surrogate agreement
    hard_rates: np.ndarray
    present: np.ndarray        # classes present in the batch


def aux_hinge(rates, kappa: float):
    """``max(kappa - mean(rates), 0)``."""
    if torch.is_tensor(rates):
        return torch.clamp(kappa - rates.mean(), min=0.0)
    return max(kappa - float(np.mean(rates)), 0.0)


def auxiliary_loss(classifier, x_g, y, kappa, n_classes, running_rates=None) -> AuxLoss:
    """Hinge on the shortfall of mean per-class agreement between the intended
    label and the frozen classifier's prediction on generated samples.

    The classifier's softmax probability of the intended class stands in for
    the agreement indicator so gradients reach the generator. Classes absent
    from the batch use ``running_rates`` (or 0 when none are given).
    """
    if not 0 < kappa < 1:
        raise ConfigError("kappa must be in (0, 1)")
    scores = classifier(x_g)
    y = y.long()
    p_true = torch.softmax(scores, dim=1).gather(1, y[:, None]).squeeze(1)
    hit = (scores.argmax(dim=1) == y).to(scores.dtype)
    counts = torch.bincount(y, minlength=n_classes).to(scores.dtype)
    present = (counts > 0).numpy()
    sums = torch.zeros(n_classes, dtype=scores.dtype).index_add(0, y, p_true)
    hard_sums = torch.zeros(n_classes, dtype=scores.dtype).index_add(0, y, hit)
    fallback = torch.zeros(n_classes, dtype=scores.dtype)
    if running_rates is not None:
        fallback = torch.as_tensor(np.asarray(running_rates), dtype=scores.dtype)
    safe = counts.clamp(min=1)
    mask = torch.as_tensor(present)
    rates = torch.where(mask, sums / safe, fallback)
    hard_rates = torch.where(mask, hard_sums / safe, fallback).detach().numpy()
    return AuxLoss(aux_hinge(rates, kappa), aux_hinge(hard_rates, kappa), rates, hard_rates, present)


class DStep(NamedTuple):
    objective: torch.Tensor    # value D ascends
    penalty: torch.Tensor      # gradient penalty, weighted
    loss: torch.Tensor         # what the optimizer minimizes


class GStep(NamedTuple):
    loss: torch.Tensor
    adversarial: torch.Tensor
    aux: AuxLoss | None


def real_labels(x_real, classifier, n_classes):
    """PU-predicted labels of real data under the frozen classifier."""
    with torch.no_grad():
        return classifier(x_real).argmax(dim=1)


def d_step_loss(D, G, x_real, y_real, corruption, phi: MeasuringFunction, gen=None,
                latent_dim=None) -> DStep:
    """Discriminator objective on a real labeled batch and a fresh generated batch.

    ``y_real`` holds the labels paired with real samples (PU predictions for
    the all-data variants). Generation labels are uniform and corrupted by
    ``corruption`` before pairing with generated samples, which are constants
    for this step.
    """
    n_classes = D.n_classes
    m = len(x_real)
    dtype = x_real.dtype
    z = sample_latent(m, latent_dim or G.latent_dim, gen, dtype)
    y = sample_labels(m, n_classes, gen)
    y_tilde = corruption(y, gen)
    with torch.no_grad():
        x_fake = G(z, y)
    objective = (phi.real(D(x_real, y_real)) + phi.fake(D(x_fake, y_tilde))).mean()
    if phi.uses_penalty:
        v_real = nets.label_vector(y_real, n_classes, dtype)
        v_fake = nets.label_vector(y_tilde, n_classes, dtype).detach()
        penalty = phi.gp_weight * gradient_penalty(D, x_real, v_real, x_fake, v_fake, gen)
    else:
        penalty = torch.zeros((), dtype=dtype)
    if not torch.isfinite(objective) or not torch.isfinite(penalty):
        raise FloatingPointError("non-finite discriminator loss")
    return DStep(objective, penalty, penalty - objective)


def g_step_loss(G, D, classifier, corruption, phi: MeasuringFunction, beta, kappa, z, y,
                gen=None, running_rates=None) -> GStep:
    """Generator loss ``mean(phi(1 - D(G(z, y), y_tilde))) + beta * aux``."""
    if beta < 0:
        raise ConfigError("beta must be >= 0")
    x_g = G(z, y)
    y_tilde = corruption(y, gen)
    adversarial = phi.fake(D(x_g, y_tilde)).mean()
    aux = None
    loss = adversarial
    if beta > 0:
        aux = auxiliary_loss(classifier, x_g, y, kappa, D.n_classes, running_rates)
        loss = adversarial + beta * aux.value
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite generator loss")
    return GStep(loss, adversarial, aux)


class VariantModels(NamedTuple):
    G: nn.Module
    D: nn.Module
    corruption: object
    variant: GanVariant
    n_classes: int


def build_variant(variant: GanVariant, feature_shape, K: int, latent_dim: int = 128,
                  seed: int = 0, width=None, ema_lambda=0.99, dtype=torch.float32) -> VariantModels:
    """Generator, discriminator and corruption policy for one variant.

    All variants share the same network family; only the label alphabet and
    the corruption policy differ.
    """
    if isinstance(variant, str):
        variant = GanVariant.preset(variant)
    n = variant.n_generated(K)
    G = nets.build(nets.generator_descriptor(feature_shape, n, latent_dim, width), seed=seed,
                   dtype=dtype)
    D = nets.build(nets.discriminator_descriptor(feature_shape, n, width), seed=seed + 1,
                   dtype=dtype)
    if variant.corruption == "ema_matrix":
        corruption = EMACorruption(ConfusionMatrix.identity(n, ema_lambda))
    elif variant.corruption == "learnable_matrix":
        corruption = LearnableCorruption(n, dtype=dtype)
    else:
        corruption = IdentityCorruption(n)
    return VariantModels(G, D, corruption, variant, n)
