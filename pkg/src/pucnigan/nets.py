"""Network families shared by the classifier, generator and discriminator.

Every network carries a ``descriptor`` dict from which :func:`build` rebuilds
an identically shaped module, so checkpoints only need descriptors and
parameters.
"""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


def _is_image(shape) -> bool:
    return len(shape) == 3


def label_vector(labels: torch.Tensor, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    """One-hot encode integer labels; float (N, n_classes) inputs pass through."""
    if labels.dtype.is_floating_point:
        return labels.to(dtype)
    return F.one_hot(labels.long(), n_classes).to(dtype)


class MLPClassifier(nn.Module):
    def __init__(self, in_dim, n_classes, hidden=(64, 64)):
        super().__init__()
        layers, d = [], in_dim
        for h in hidden:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        layers.append(nn.Linear(d, n_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x.flatten(1))


class ConvClassifier(nn.Module):
    """Six 3x3 conv layers; widths double every second layer, stride 2 on layers 2 and 4."""

    def __init__(self, in_shape, n_classes, width=32):
        super().__init__()
        c, h, w = in_shape
        widths = [width, width, 2 * width, 2 * width, 4 * width, 4 * width]
        layers = []
        for i, out in enumerate(widths):
            stride = 2 if i in (1, 3) else 1
            layers += [nn.Conv2d(c, out, 3, stride=stride, padding=1), nn.LeakyReLU(0.2)]
            c = out
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c, n_classes)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


class MLPGenerator(nn.Module):
    def __init__(self, latent_dim, n_classes, out_shape, hidden=(64, 64), out_activation="none"):
        super().__init__()
        self.latent_dim, self.n_classes, self.out_shape = latent_dim, n_classes, tuple(out_shape)
        layers, d = [], latent_dim + n_classes
        for h in hidden:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        layers.append(nn.Linear(d, math.prod(out_shape)))
        self.net = nn.Sequential(*layers)
        self.out_activation = out_activation

    def forward(self, z, y):
        out = self.net(torch.cat([z, label_vector(y, self.n_classes, z.dtype)], dim=1))
        if self.out_activation == "sigmoid":
            out = torch.sigmoid(out)
        return out.view(-1, *self.out_shape)


class ConvGenerator(nn.Module):
    """Conditional DCGAN-style generator: latent+one-hot -> dense -> transposed convs."""

    def __init__(self, latent_dim, n_classes, out_shape, width=64, out_activation="sigmoid"):
        super().__init__()
        c, h, w = out_shape
        n_up = 2 if h % 8 else 3
        if h % (2 ** n_up) or h != w:
            raise ValueError(f"unsupported image shape {out_shape}")
        self.latent_dim, self.n_classes, self.out_shape = latent_dim, n_classes, tuple(out_shape)
        self.base = h // 2 ** n_up
        ch = width * 2 ** (n_up - 1)
        self.fc = nn.Linear(latent_dim + n_classes, ch * self.base * self.base)
        self.base_ch = ch
        blocks = []
        for _ in range(n_up - 1):
            blocks += [nn.ConvTranspose2d(ch, ch // 2, 4, stride=2, padding=1),
                       nn.InstanceNorm2d(ch // 2, affine=True), nn.ReLU()]
            ch //= 2
        blocks.append(nn.ConvTranspose2d(ch, c, 4, stride=2, padding=1))
        self.deconv = nn.Sequential(*blocks)
        self.out_activation = out_activation

    def forward(self, z, y):
        h = self.fc(torch.cat([z, label_vector(y, self.n_classes, z.dtype)], dim=1))
        h = F.relu(h.view(-1, self.base_ch, self.base, self.base))
        out = self.deconv(h)
        if self.out_activation == "sigmoid":
            out = torch.sigmoid(out)
        return out


class MLPDiscriminator(nn.Module):
    def __init__(self, in_shape, n_classes, hidden=(64, 64)):
        super().__init__()
        self.n_classes = n_classes
        layers, d = [], math.prod(in_shape) + n_classes
        for h in hidden:
            layers += [nn.Linear(d, h), nn.LeakyReLU(0.2)]
            d = h
        layers.append(nn.Linear(d, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x, y):
        v = label_vector(y, self.n_classes, x.dtype)
        return self.net(torch.cat([x.flatten(1), v], dim=1)).squeeze(1)


class ConvDiscriminator(nn.Module):
    """Strided conv critic with instance norm and a projection label head.

    Labels enter through a linear embedding of their one-hot (or soft) vector,
    so soft label distributions are accepted as well.
    """

    def __init__(self, in_shape, n_classes, width=64):
        super().__init__()
        c = in_shape[0]
        self.n_classes = n_classes
        self.features = nn.Sequential(
            nn.Conv2d(c, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * width, affine=True), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 3, stride=1, padding=1),
            nn.InstanceNorm2d(4 * width, affine=True), nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(4 * width, 1)
        self.embed = nn.Linear(n_classes, 4 * width, bias=False)

    def forward(self, x, y):
        feat = self.features(x).mean(dim=(2, 3))
        v = label_vector(y, self.n_classes, x.dtype)
        return self.head(feat).squeeze(1) + (self.embed(v) * feat).sum(1)


_KINDS = {
    "mlp_classifier": MLPClassifier,
    "conv_classifier": ConvClassifier,
    "mlp_generator": MLPGenerator,
    "conv_generator": ConvGenerator,
    "mlp_discriminator": MLPDiscriminator,
    "conv_discriminator": ConvDiscriminator,
}


def build(descriptor: dict, seed: int | None = None, dtype=torch.float32) -> nn.Module:
    """Instantiate a network from its descriptor; ``seed`` fixes the initialization."""
    kind = descriptor["kind"]
    kwargs = {k: (tuple(v) if isinstance(v, list) else v)
              for k, v in descriptor.items() if k != "kind"}
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = _KINDS[kind](**kwargs)
    else:
        net = _KINDS[kind](**kwargs)
    net = net.to(dtype)
    net.descriptor = dict(descriptor)
    return net


def classifier_descriptor(feature_shape, n_classes, width=None) -> dict:
    if _is_image(feature_shape):
        return {"kind": "conv_classifier", "in_shape": list(feature_shape),
                "n_classes": n_classes, "width": width or 32}
    return {"kind": "mlp_classifier", "in_dim": math.prod(feature_shape),
            "n_classes": n_classes, "hidden": list(width or (64, 64))}


def generator_descriptor(feature_shape, n_classes, latent_dim, width=None) -> dict:
    if _is_image(feature_shape):
        return {"kind": "conv_generator", "latent_dim": latent_dim, "n_classes": n_classes,
                "out_shape": list(feature_shape), "width": width or 64,
                "out_activation": "sigmoid"}
    return {"kind": "mlp_generator", "latent_dim": latent_dim, "n_classes": n_classes,
            "out_shape": list(feature_shape), "hidden": list(width or (64, 64)),
            "out_activation": "none"}


def discriminator_descriptor(feature_shape, n_classes, width=None) -> dict:
    if _is_image(feature_shape):
        return {"kind": "conv_discriminator", "in_shape": list(feature_shape),
                "n_classes": n_classes, "width": width or 64}
    return {"kind": "mlp_discriminator", "in_shape": list(feature_shape),
            "n_classes": n_classes, "hidden": list(width or (64, 64))}
