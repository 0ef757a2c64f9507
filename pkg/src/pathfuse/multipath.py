"""Multi-pathway assembly, exact single-conv reparameterization, and
uncertainty-based reweighting.

Assembly turns K homogeneous single-pathway models into one network whose
units run K Conv-BN pathways in parallel and merge their outputs by weighted
sum. In eval mode each merged unit is algebraically equal to a single
convolution with bias, which ``fuse_unit``/``fuse_model`` construct exactly.
Predictions from the K retained heads are combined with weights derived from
per-head uncertainty on the data at hand.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .tensor import Tensor, conv2d, log_softmax

CRITERIA = ("entropy", "confidence", "margin")


@dataclass
class MultiPathUnit:
    """K shape-identical Conv-BN pathways merged by weighted sum."""

    pathways: list
    merge_weights: np.ndarray

    def __post_init__(self):
        if len(self.pathways) < 1:
            raise ValueError("MultiPathUnit needs at least one pathway")
        self.merge_weights = np.asarray(self.merge_weights, dtype=np.float64)
        if self.merge_weights.shape != (len(self.pathways),):
            raise ValueError("one merge weight per pathway required")
        if not np.all(np.isfinite(self.merge_weights)):
            raise ValueError("merge weights must be finite")
        ref = self.pathways[0]
        for p in self.pathways[1:]:
            if (p.kernels.shape != ref.kernels.shape or p.stride != ref.stride
                    or p.padding != ref.padding):
                raise ValueError("pathways must be shape-identical")

    def parameters(self):
        return [p for path in self.pathways for p in path.parameters()]

    def forward(self, x: Tensor, train: bool) -> Tensor:
        """Weighted sum of per-pathway BN(Conv(x)); each pathway keeps its
        own batch statistics in train mode."""
        out = None
        for w, path in zip(self.merge_weights, self.pathways):
            term = path.forward(x, train) * float(w)
            out = term if out is None else out + term
        return out

    def clone(self) -> "MultiPathUnit":
        return MultiPathUnit([p.clone() for p in self.pathways],
                             self.merge_weights.copy())


@dataclass
class FusedConv:
    """Single kernel + bias equivalent to an eval-mode MultiPathUnit."""

    kernels: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.bias.shape != (self.kernels.shape[0],):
            raise ValueError("FusedConv: bias length must equal output channels")

    def parameters(self):
        return [self.kernels, self.bias]

    def forward(self, x: Tensor, train: bool) -> Tensor:
        if train:
            raise ValueError("fused units are inference-only")
        y = conv2d(x, self.kernels, self.stride, self.padding)
        return y + self.bias.reshape(1, -1, 1, 1)

    def clone(self) -> "FusedConv":
        return FusedConv(Tensor(self.kernels.data.copy(), requires_grad=True),
                         Tensor(self.bias.data.copy(), requires_grad=True),
                         self.stride, self.padding)


@dataclass
class UncertaintyReport:
    """Per-head uncertainty scores and the resulting combination weights."""

    per_model_score: np.ndarray
    weights: np.ndarray
    criterion: str = "entropy"


def assemble(sources: list) -> nn.ModelBundle:
    """Assemble K single-pathway models into one multi-pathway network.

    Unit i of the result runs source k's unit i as pathway k (parameters
    copied); all K heads are kept; merge weights default to 1/K.
    """
    if len(sources) == 0:
        raise ValueError("assemble: need at least one source model")
    ref = sources[0].arch
    for s in sources:
        if s.form != "single":
            raise ValueError("assemble: sources must be single-pathway models")
        if s.arch != ref:
            raise ValueError("assemble: source architectures are heterogeneous")
    k = len(sources)
    weights = np.full(k, 1.0 / k)
    units = []
    for i in range(len(sources[0].units)):
        units.append(MultiPathUnit([s.units[i].clone() for s in sources], weights.copy()))
    heads = []
    for s in sources:
        w, b = s.heads[0]
        heads.append((Tensor(w.data.copy(), requires_grad=True),
                      Tensor(b.data.copy(), requires_grad=True)))
    return nn.ModelBundle(units=units, heads=heads, arch=replace(ref),
                          form="multipath", num_pathways=k)


def merge_forward(unit: MultiPathUnit, f_input: Tensor, train: bool = False) -> Tensor:
    return unit.forward(f_input, train)


def fuse_unit(unit: MultiPathUnit) -> FusedConv:
    """Collapse K weighted Conv-BN pathways into one convolution with bias.

    Kernel: sum_k (w_k * gamma_k / sigma_k) * F_k per output channel.
    Bias:   sum_k w_k * (beta_k - mu_k * gamma_k / sigma_k).
    """
    ref = unit.pathways[0]
    c2 = ref.kernels.shape[0]
    fused_k = np.zeros_like(ref.kernels.data)
    fused_b = np.zeros(c2, dtype=ref.kernels.data.dtype)
    for w, path in zip(unit.merge_weights, unit.pathways):
        if np.any(path.run_sigma <= 0):
            raise ValueError("fuse_unit: sigma must be positive")
        scale = w * path.gamma.data / path.run_sigma
        fused_k += scale[:, None, None, None] * path.kernels.data
        fused_b += w * (path.beta.data - path.run_mu * path.gamma.data / path.run_sigma)
    return FusedConv(Tensor(fused_k, requires_grad=True),
                     Tensor(fused_b, requires_grad=True),
                     ref.stride, ref.padding)


def fuse_model(model: nn.ModelBundle) -> nn.ModelBundle:
    """Replace every merge unit by its fused convolution; heads unchanged."""
    if model.form == "fused":
        raise ValueError("fuse_model: model is already fused")
    units = []
    for u in model.units:
        if isinstance(u, nn.ConvBNPathway):
            u = MultiPathUnit([u], np.array([1.0]))
        units.append(fuse_unit(u))
    heads = [(Tensor(w.data.copy(), requires_grad=True),
              Tensor(b.data.copy(), requires_grad=True)) for w, b in model.heads]
    return nn.ModelBundle(units=units, heads=heads, arch=replace(model.arch),
                          form="fused", num_pathways=model.num_pathways)


def _softmax_probs(logits: Tensor) -> np.ndarray:
    return np.exp(log_softmax(logits).data)


def uncertainty_score(probs: np.ndarray, criterion: str = "entropy",
                      per_sample: bool = False):
    """Uncertainty of a batch of probability rows; lower means more certain.

    entropy:    mean_x -sum_c p_c log p_c
    confidence: mean_x -max_c p_c
    margin:     mean_x -(p_(1) - p_(2)), the negated top-2 gap
    """
    if probs.shape[0] == 0:
        raise ValueError("uncertainty_score: empty data")
    if criterion == "entropy":
        per = -(probs * np.log(np.clip(probs, 1e-30, None))).sum(axis=1)
    elif criterion == "confidence":
        per = -probs.max(axis=1)
    elif criterion == "margin":
        top2 = np.sort(probs, axis=1)[:, -2:]
        per = -(top2[:, 1] - top2[:, 0])
    else:
        raise ValueError(f"unknown uncertainty criterion {criterion!r}")
    return per if per_sample else float(per.mean())


def model_uncertainty(model: nn.ModelBundle, head: int, images: np.ndarray,
                      criterion: str = "entropy", batch_size: int = 256) -> float:
    """Expected uncertainty of one head's predictions over a dataset."""
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise ValueError("model_uncertainty: empty data")
    scores, total = 0.0, 0
    for start in range(0, images.shape[0], batch_size):
        x = Tensor(images[start:start + batch_size])
        probs = _softmax_probs(model.forward(x, train=False)[head])
        scores += uncertainty_score(probs, criterion) * probs.shape[0]
        total += probs.shape[0]
    return scores / total


def softmax_weights(scores) -> np.ndarray:
    """exp(-M_k) / sum_i exp(-M_i), with max-subtraction for stability."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 0 or scores.shape[-1] < 1:
        raise ValueError("softmax_weights: need at least one score")
    if not np.all(np.isfinite(scores)):
        raise ValueError("softmax_weights: non-finite score")
    neg = -scores
    neg = neg - neg.max(axis=-1, keepdims=True)
    e = np.exp(neg)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: nn.ModelBundle, batch: Tensor, weight_mode: str = "per_batch",
            criterion: str = "entropy", fixed_weights=None):
    """Combined class probabilities plus the uncertainty report.

    Per head, softmax probabilities are computed; combination weights come
    from head uncertainty on this batch ('per_batch'), on each sample alone
    ('per_sample'), or are given ('fixed'). Rows of the output sum to 1.
    """
    if batch.shape[0] == 0:
        raise ValueError("predict: empty batch")
    head_probs = np.stack([_softmax_probs(l) for l in model.forward(batch, train=False)])
    k, n, _ = head_probs.shape
    if weight_mode == "fixed":
        if fixed_weights is None:
            raise ValueError("predict: fixed weight mode needs weights")
        alpha = np.asarray(fixed_weights, dtype=np.float64)
        scores = np.full(k, np.nan)
        combined = np.einsum("k,knc->nc", alpha, head_probs)
        mean_weights = alpha
    elif weight_mode == "per_batch":
        scores = np.array([uncertainty_score(head_probs[i], criterion) for i in range(k)])
        alpha = softmax_weights(scores)
        combined = np.einsum("k,knc->nc", alpha, head_probs)
        mean_weights = alpha
    elif weight_mode == "per_sample":
        per = np.stack([uncertainty_score(head_probs[i], criterion, per_sample=True)
                        for i in range(k)], axis=1)  # [N, K]
        alpha = softmax_weights(per)                  # [N, K]
        combined = np.einsum("nk,knc->nc", alpha, head_probs)
        scores = per.mean(axis=0)
        mean_weights = alpha.mean(axis=0)
    else:
        raise ValueError(f"unknown weight mode {weight_mode!r}")
    report = UncertaintyReport(per_model_score=scores, weights=mean_weights,
                               criterion=criterion)
    return combined, report
