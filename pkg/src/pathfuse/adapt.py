"""Source-free adaptation of the assembled network on unlabeled target data,
plus the comparison baselines (uniform ensemble, knowledge distillation).

The per-head objective is information maximization (confident individual
predictions, diverse batch-mean prediction) plus cross-entropy against
centroid-based pseudo labels. Head losses are combined with weights from a
softmax over negated per-head uncertainty, measured once on the unadapted
model before training starts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import multipath, nn
from .tensor import Tensor, log_softmax


@dataclass
class AdaptConfig:
    epochs: int = 15
    lr: float = 0.01
    batch_size: int = 64
    pseudo_label_weight: float = 0.3
    im_diversity_weight: float = 1.0
    refresh_interval: int = 1          # pseudo-label refresh, in epochs
    weight_refresh_interval: int = 0   # 0 = head weights computed once, up front
    criterion: str = "entropy"
    head_lr_multiplier: float = 10.0
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("lr", "pseudo_label_weight", "im_diversity_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.criterion not in multipath.CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")


def im_loss(logits: Tensor, diversity_weight: float = 1.0) -> Tensor:
    """Mean per-sample prediction entropy minus entropy of the mean prediction."""
    n = logits.shape[0]
    if n < 1:
        raise ValueError("im_loss: empty batch")
    logp = log_softmax(logits)
    p = logp.exp()
    ent = -(p * logp).sum() * (1.0 / n)
    mean_p = p.mean(axis=0)
    div = -(mean_p * (mean_p + 1e-12).log()).sum()
    return ent - div * diversity_weight


def pseudo_labels(features: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Two-round nearest-centroid labels from pooled features and predictions.

    Round 1: centroids are prediction-weighted feature means, samples are
    assigned by cosine distance. Round 2: centroids are recomputed from the
    hard labels and samples reassigned. Zero feature rows fall back to the
    argmax of their logits.
    """
    features = np.asarray(features, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    argmax = logits.argmax(axis=1)
    norms = np.linalg.norm(features, axis=1)
    zero_rows = norms < 1e-12
    if np.all(zero_rows):
        return argmax
    unit = features / np.maximum(norms, 1e-12)[:, None]

    def assign(centroids):
        cn = np.linalg.norm(centroids, axis=1)
        dead = cn < 1e-12
        cunit = centroids / np.maximum(cn, 1e-12)[:, None]
        sim = unit @ cunit.T
        sim[:, dead] = -np.inf
        return sim.argmax(axis=1)

    centroids = (probs.T @ features) / np.maximum(probs.sum(axis=0), 1e-12)[:, None]
    labels = assign(centroids)
    for cls in range(c):
        mask = labels == cls
        if mask.any():
            centroids[cls] = features[mask].mean(axis=0)
        else:
            centroids[cls] = 0.0
    labels = assign(centroids)
    labels[zero_rows] = argmax[zero_rows]
    return labels


def _eval_features_and_logits(model: nn.ModelBundle, images: np.ndarray,
                              batch_size: int = 256):
    """Eval-mode pooled features and per-head logits over a whole dataset."""
    feats, logits = [], None
    for start in range(0, images.shape[0], batch_size):
        x = Tensor(images[start:start + batch_size])
        f = model.features(x, train=False)
        per_head = [nn.linear(f, w, b).data.copy() for w, b in model.heads]
        feats.append(f.data.copy())
        if logits is None:
            logits = [[h] for h in per_head]
        else:
            for acc, h in zip(logits, per_head):
                acc.append(h)
    return np.concatenate(feats), [np.concatenate(chunks) for chunks in logits]


def head_weights(model: nn.ModelBundle, images: np.ndarray,
                 criterion: str = "entropy") -> np.ndarray:
    """Loss weights: softmax over negated per-head uncertainty on the data."""
    scores = [multipath.model_uncertainty(model, h, images, criterion)
              for h in range(len(model.heads))]
    return multipath.softmax_weights(scores)


def adapt(model: nn.ModelBundle, target_images: np.ndarray,
          cfg: AdaptConfig | None = None) -> nn.ModelBundle:
    """Adapt an assembled (unfused) model on unlabeled target images.

    Reads nothing but the model and the target set. Deterministic per seed.
    """
    cfg = cfg or AdaptConfig()
    cfg.validate()
    if model.form == "fused":
        raise ValueError("adapt: model already fused; adapt before fusing")
    target_images = np.asarray(target_images)
    if target_images.shape[0] == 0:
        raise ValueError("adapt: empty target set")
    model = model.clone()
    k = len(model.heads)
    weights = head_weights(model, target_images, cfg.criterion)
    rng = np.random.default_rng(cfg.seed)
    n = target_images.shape[0]
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    step = 0
    labels = None
    for epoch in range(cfg.epochs):
        if cfg.weight_refresh_interval and epoch % cfg.weight_refresh_interval == 0 and epoch:
            weights = head_weights(model, target_images, cfg.criterion)
        if cfg.pseudo_label_weight > 0 and (labels is None
                                            or epoch % max(1, cfg.refresh_interval) == 0):
            feats, head_logits = _eval_features_and_logits(model, target_images)
            mean_logits = np.mean(head_logits, axis=0)
            labels = pseudo_labels(feats, mean_logits)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = Tensor(target_images[idx])
            head_out = model.forward(x, train=True)
            total = None
            for w, logits in zip(weights, head_out):
                l_k = im_loss(logits, cfg.im_diversity_weight)
                if cfg.pseudo_label_weight > 0:
                    l_k = l_k + nn.cross_entropy(logits, labels[idx]) * cfg.pseudo_label_weight
                term = l_k * float(w)
                total = term if total is None else total + term
            if not np.isfinite(total.item()):
                raise FloatingPointError(f"adapt: non-finite loss at step {step}")
            model.zero_grad()
            total.backward()
            nn.sgd_step(model, nn.cosine_lr(cfg.lr, step, total_steps),
                        cfg.head_lr_multiplier)
            step += 1
    return model


def ensemble_baseline(models: list, batch: Tensor) -> np.ndarray:
    """Uniform average of per-model softmax outputs (one forward per model)."""
    if len(models) == 0:
        raise ValueError("ensemble_baseline: need at least one model")
    c = models[0].arch.num_classes
    probs = None
    for m in models:
        if m.arch.num_classes != c:
            raise ValueError("ensemble_baseline: class counts differ")
        logits = m.forward(batch, train=False)
        head_mean = np.mean([np.exp(log_softmax(l).data) for l in logits], axis=0)
        probs = head_mean if probs is None else probs + head_mean
    return probs / len(models)


def kd_distill(teacher_predict, student: nn.ModelBundle, target_images: np.ndarray,
               temperature: float = 2.0, epochs: int = 10, lr: float = 0.01,
               batch_size: int = 64, seed: int = 0) -> nn.ModelBundle:
    """Distill a teacher's softened predictions into a single-pathway student.

    ``teacher_predict`` maps an image array to class probabilities [N, C].
    The student minimizes T^2-scaled cross-entropy between T-softened
    teacher and student distributions.
    """
    if temperature <= 0:
        raise ValueError("kd_distill: temperature must be positive")
    target_images = np.asarray(target_images)
    if target_images.shape[0] == 0:
        raise ValueError("kd_distill: empty dataset")
    student = student.clone()
    if epochs == 0:
        return student
    teacher_probs = teacher_predict(target_images)
    soft = np.power(np.clip(teacher_probs, 1e-30, None), 1.0 / temperature)
    soft /= soft.sum(axis=1, keepdims=True)
    rng = np.random.default_rng(seed)
    n = target_images.shape[0]
    total_steps = max(1, epochs * ((n + batch_size - 1) // batch_size))
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = Tensor(target_images[idx])
            logits = student.forward(x, train=True)[0]
            logp = log_softmax(logits * (1.0 / temperature))
            loss = -(Tensor(soft[idx]) * logp).sum() * (temperature ** 2 / len(idx))
            student.zero_grad()
            loss.backward()
            nn.sgd_step(student, nn.cosine_lr(lr, step, total_steps),
                        lr_multiplier_heads=10.0)
            step += 1
    return student
