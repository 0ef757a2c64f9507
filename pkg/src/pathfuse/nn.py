"""Layer stacks, the homogeneous source-model architecture, and SGD training.

A model is a sequence of Conv-BN-ReLU units, a global average pool, and one
or more linear classifier heads. After assembly the units become
multi-pathway merge units; after reparameterization they become single
fused convolutions (see :mod:`pathfuse.multipath`).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import precision
from .tensor import (Tensor, batchnorm2d, batchnorm2d_train, conv2d, linear,
                     log_softmax)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ArchSpec:
    """Architecture descriptor shared by all homogeneous source models."""

    in_channels: int = 3
    channels: tuple = (16, 32, 64)
    kernel_size: int = 3
    stride: int = 2
    padding: int = 1
    num_classes: int = 10
    input_hw: tuple = (16, 16)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "num_classes": self.num_classes,
            "input_hw": list(self.input_hw),
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        return ArchSpec(
            in_channels=d["in_channels"],
            channels=tuple(d["channels"]),
            kernel_size=d["kernel_size"],
            stride=d["stride"],
            padding=d["padding"],
            num_classes=d["num_classes"],
            input_hw=tuple(d["input_hw"]),
        )


@dataclass
class ConvBNPathway:
    """One pathway's convolution kernels plus BN statistics and affine params.

    ``run_sigma`` is stored as sqrt(var + eps) so eval-mode normalization and
    kernel fusion share exactly the same quantity.
    """

    kernels: Tensor
    gamma: Tensor
    beta: Tensor
    run_mu: np.ndarray
    run_sigma: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        c2 = self.kernels.shape[0]
        for name, arr in (("gamma", self.gamma.data), ("beta", self.beta.data),
                          ("run_mu", self.run_mu), ("run_sigma", self.run_sigma)):
            if arr.shape != (c2,):
                raise ValueError(f"ConvBNPathway: {name} shape {arr.shape} != ({c2},)")
        if np.any(self.run_sigma <= 0):
            raise ValueError("ConvBNPathway: run_sigma must be positive")

    def parameters(self):
        return [self.kernels, self.gamma, self.beta]

    def forward(self, x: Tensor, train: bool) -> Tensor:
        y = conv2d(x, self.kernels, self.stride, self.padding)
        if train:
            out, mu, sigma = batchnorm2d_train(y, self.gamma, self.beta, BN_EPS)
            self._update_running(mu, sigma)
            return out
        return batchnorm2d(y, self.run_mu, self.run_sigma, self.gamma, self.beta)

    def _update_running(self, batch_mu, batch_sigma):
        m = BN_MOMENTUM
        var = np.maximum(self.run_sigma ** 2 - BN_EPS, 0.0)
        var = (1 - m) * var + m * np.maximum(batch_sigma ** 2 - BN_EPS, 0.0)
        self.run_mu = (1 - m) * self.run_mu + m * batch_mu
        self.run_sigma = np.sqrt(var + BN_EPS)

    def clone(self) -> "ConvBNPathway":
        return ConvBNPathway(
            kernels=Tensor(self.kernels.data.copy(), requires_grad=True),
            gamma=Tensor(self.gamma.data.copy(), requires_grad=True),
            beta=Tensor(self.beta.data.copy(), requires_grad=True),
            run_mu=self.run_mu.copy(),
            run_sigma=self.run_sigma.copy(),
            stride=self.stride,
            padding=self.padding,
        )


@dataclass
class ModelBundle:
    """Feature extractor units + classifier heads + architecture metadata.

    ``form`` is 'single' (one pathway per unit), 'multipath' (assembled), or
    'fused' (reparameterized). Heads are (weight, bias) pairs mapping the
    pooled feature to class logits.
    """

    units: list
    heads: list
    arch: ArchSpec
    form: str = "single"
    num_pathways: int = 1

    def head_parameters(self):
        return [p for w, b in self.heads for p in (w, b)]

    def extractor_parameters(self):
        params = []
        for unit in self.units:
            params.extend(unit.parameters())
        return params

    def parameters(self):
        return self.extractor_parameters() + self.head_parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def features(self, batch: Tensor, train: bool = False) -> Tensor:
        """Run the extractor: units with post-merge ReLU, then global avg pool."""
        n, c, h, w = batch.shape
        if c != self.arch.in_channels or (h, w) != tuple(self.arch.input_hw):
            raise ValueError(
                f"input shape {(c, h, w)} does not match architecture "
                f"{(self.arch.in_channels, *self.arch.input_hw)}")
        x = batch
        for unit in self.units:
            x = unit.forward(x, train).relu()
        return x.mean(axis=(2, 3))

    def forward(self, batch: Tensor, train: bool = False):
        """Return per-head logits, one Tensor[N, C] per classifier head."""
        feat = self.features(batch, train)
        return [linear(feat, w, b) for w, b in self.heads]

    def clone(self) -> "ModelBundle":
        return ModelBundle(
            units=[u.clone() for u in self.units],
            heads=[(Tensor(w.data.copy(), requires_grad=True),
                    Tensor(b.data.copy(), requires_grad=True)) for w, b in self.heads],
            arch=replace(self.arch),
            form=self.form,
            num_pathways=self.num_pathways,
        )


def kaiming_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(arch: ArchSpec, seed: int) -> ModelBundle:
    """Fresh single-pathway model: Kaiming-uniform kernels, identity BN."""
    rng = np.random.default_rng(seed)
    units = []
    c_in = arch.in_channels
    k = arch.kernel_size
    for c_out in arch.channels:
        units.append(ConvBNPathway(
            kernels=Tensor(kaiming_uniform(rng, (c_out, c_in, k, k)), requires_grad=True),
            gamma=Tensor(np.ones(c_out), requires_grad=True),
            beta=Tensor(np.zeros(c_out), requires_grad=True),
            run_mu=np.zeros(c_out, dtype=precision.active_dtype()),
            run_sigma=np.full(c_out, np.sqrt(1.0 + BN_EPS), dtype=precision.active_dtype()),
            stride=arch.stride,
            padding=arch.padding,
        ))
        c_in = c_out
    d = arch.channels[-1]
    w = Tensor(kaiming_uniform(rng, (arch.num_classes, d)), requires_grad=True)
    b = Tensor(np.zeros(arch.num_classes), requires_grad=True)
    return ModelBundle(units=units, heads=[(w, b)], arch=arch)


def cross_entropy(logits: Tensor, labels: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy in nats, optionally with label smoothing."""
    n, c = logits.shape
    q = np.full((n, c), label_smoothing / c, dtype=logits.data.dtype)
    q[np.arange(n), labels] += 1.0 - label_smoothing
    logp = log_softmax(logits)
    return -(logp * Tensor(q)).sum() * (1.0 / n)


def sgd_step(model: ModelBundle, lr: float, lr_multiplier_heads: float = 1.0) -> None:
    """In-place SGD update; BN running statistics are untouched."""
    if lr < 0 or lr_multiplier_heads <= 0:
        raise ValueError("lr must be >= 0 and head multiplier > 0")
    for p in model.extractor_parameters():
        if p.grad is not None:
            p.data -= lr * p.grad
    for p in model.head_parameters():
        if p.grad is not None:
            p.data -= lr * lr_multiplier_heads * p.grad


def _iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * step / (total_steps - 1)))


def train_source(dataset, arch: ArchSpec, epochs: int = 20, lr: float = 0.05,
                 seed: int = 0, batch_size: int = 64,
                 label_smoothing: float = 0.1, init_seed: int | None = None) -> ModelBundle:
    """Train a single-pathway model with smoothed cross-entropy.

    ``dataset`` is any object with ``images`` (array [N,3,H,W]) and
    ``labels`` (int array [N]). Deterministic given the seeds. Models meant
    to be assembled later should share ``init_seed`` (and differ in ``seed``)
    so their feature spaces stay aligned enough for the weighted-sum merge;
    this plays the role of a common pretrained starting point.
    """
    images = np.asarray(dataset.images)
    labels = np.asarray(dataset.labels)
    if images.shape[0] == 0:
        raise ValueError("train_source: empty dataset")
    if labels.min() < 0 or labels.max() >= arch.num_classes:
        raise ValueError("train_source: labels out of range")
    model = init_model(arch, seed if init_seed is None else init_seed)
    rng = np.random.default_rng(seed + 1)
    total_steps = max(1, epochs * ((images.shape[0] + batch_size - 1) // batch_size))
    step = 0
    for _ in range(epochs):
        for idx in _iter_batches(images.shape[0], batch_size, rng):
            x = Tensor(images[idx])
            logits = model.forward(x, train=True)[0]
            loss = cross_entropy(logits, labels[idx], label_smoothing)
            model.zero_grad()
            loss.backward()
            sgd_step(model, cosine_lr(lr, step, total_steps), lr_multiplier_heads=10.0)
            step += 1
    return model


def accuracy(model_probs: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy in percent; ties break to the lowest class index."""
    pred = model_probs.argmax(axis=1)
    return 100.0 * float((pred == np.asarray(labels)).mean())
