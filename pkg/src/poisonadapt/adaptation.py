"""Source training and unsupervised model adaptation.

Two adaptation objectives, both accepting optional per-sample weights:

- ``shot``: per-sample entropy plus gamma * cross-entropy against centroid
  pseudo-labels, minus beta times the entropy of the batch-mean prediction
  (the diversity term, computed with weight-proportional contributions).
- ``nrc``: per-sample cross-entropy against an affinity-weighted combination
  of the k nearest neighbors' predictions in feature space, refreshed from a
  frozen per-epoch bank.

Adaptation reads no labels; passing a labeled dataset is a usage error so
the threat model cannot be violated by accident.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset
from .errors import UsageError
from .nn import (
    LossSpec,
    MLPClassifier,
    OptimState,
    entropy,
    loss_and_grads,
    sgd_step,
    softmax,
)

VICTIM_HIDDEN_DIM = 64
VICTIM_FEATURE_DIM = 32


@dataclass
class AdaptConfig:
    """Hyperparameters of one adaptation run."""

    algorithm: str = "shot"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.03
    beta: float = 1.0
    gamma: float = 0.3
    k_neighbors: int = 5
    refresh_interval: int = 1
    momentum: float = 0.9
    freeze_head: bool = True
    seed: int = 0

    def validate(self, n_samples: int | None = None) -> None:
        if self.algorithm not in ("shot", "nrc"):
            raise UsageError(f"unknown algorithm {self.algorithm!r}")
        if self.epochs < 0:
            raise UsageError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise UsageError(f"learning rate must be positive, got {self.lr}")
        if min(self.beta, self.gamma) < 0:
            raise UsageError("loss coefficients must be >= 0")
        if self.k_neighbors < 1:
            raise UsageError(f"k must be >= 1, got {self.k_neighbors}")
        if n_samples is not None and self.k_neighbors >= n_samples:
            raise UsageError(f"k = {self.k_neighbors} must be < dataset size {n_samples}")
        if self.refresh_interval < 1:
            raise UsageError(f"refresh interval must be >= 1, got {self.refresh_interval}")


@dataclass
class AdaptedModel:
    """A trained target model plus everything needed to replay the run."""

    model: MLPClassifier
    provenance: dict


def train_source(source: Dataset, epochs: int, lr: float, seed: int,
                 batch_size: int = 64, momentum: float = 0.9,
                 input_noise: float = 0.1,
                 hidden_dim: int = VICTIM_HIDDEN_DIM,
                 feature_dim: int = VICTIM_FEATURE_DIM) -> MLPClassifier:
    """Cross-entropy training of the victim classifier on labeled source data.

    ``input_noise`` adds Gaussian pixel jitter to each training batch. A raw-
    pixel MLP is otherwise an unrealistically brittle victim: large pretrained
    backbones shrug off modest additive patches, and the jitter is the
    desk-scale stand-in for that robustness.
    """
    labels = source.require_labels()
    n, h, w = source.images.shape
    x = source.images.reshape(n, h * w)
    model = MLPClassifier(h * w, hidden_dim, feature_dim, source.num_classes, seed=seed)
    if epochs == 0:
        return model
    opt = OptimState(lr=lr, momentum=momentum, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x737263]))
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb = x[idx]
            if input_noise > 0:
                xb = np.clip(xb + rng.normal(0.0, input_noise, xb.shape), 0.0, 1.0)
            _, grads = loss_and_grads(model, xb,
                                      LossSpec("cross_entropy", labels=labels[idx]))
            sgd_step(model, grads, opt)
    return model


def info_max_loss(probs_batch: np.ndarray) -> float:
    """Mean per-row entropy minus the entropy of the mean row (natural log).

    Zero for uniform rows; -ln(C) when rows are one-hot and balanced; zero
    again when every row collapses onto the same class.
    """
    p = np.asarray(probs_batch, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise UsageError(f"expected a nonempty (n, C) probability matrix, got {p.shape}")
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-8):
        raise UsageError("rows must be probability vectors summing to 1")
    mean_ent = float(entropy(p).mean())
    ent_mean = float(entropy(p.mean(axis=0)))
    return mean_ent - ent_mean


def centroid_pseudo_labels(model: MLPClassifier, unlabeled: Dataset) -> np.ndarray:
    """Prediction-weighted centroids, cosine assignment, one refinement pass.

    Only classes that receive at least one argmax vote are eligible targets;
    a refined class with no members keeps its previous centroid.
    """
    if len(unlabeled) == 0:
        raise UsageError("empty dataset")
    n = len(unlabeled)
    x = unlabeled.images.reshape(n, -1)
    probs = softmax(model.forward(x))
    feats = model.features(x)

    votes = np.bincount(probs.argmax(axis=1), minlength=unlabeled.num_classes)
    eligible = np.flatnonzero(votes > 0)

    def normalize(m):
        return m / (np.linalg.norm(m, axis=1, keepdims=True) + 1e-12)

    soft_mass = probs[:, eligible].sum(axis=0)
    centroids = (probs[:, eligible].T @ feats) / (soft_mass[:, None] + 1e-12)

    fn = normalize(feats)
    assign = eligible[np.argmax(fn @ normalize(centroids).T, axis=1)]

    refined = centroids.copy()
    for pos, k in enumerate(eligible):
        members = assign == k
        if members.any():
            refined[pos] = feats[members].mean(axis=0)
    assign = eligible[np.argmax(fn @ normalize(refined).T, axis=1)]
    return assign


def neighbor_soft_targets(model: MLPClassifier, x: np.ndarray, k: int) -> np.ndarray:
    """Affinity-weighted neighbor predictions: t_i = sum_j a_ij p_j over the
    k nearest feature-space neighbors, with a_ij = max(cosine, 0) and the
    bank (features and predictions) frozen at call time."""
    n = x.shape[0]
    if k >= n:
        raise UsageError(f"k = {k} must be < bank size {n}")
    feats = model.features(x)
    probs = softmax(model.forward(x))
    fn = feats / (np.linalg.norm(feats, axis=1, keepdims=True) + 1e-12)
    sims = fn @ fn.T
    np.fill_diagonal(sims, -np.inf)
    nbr = np.argpartition(-sims, k - 1, axis=1)[:, :k]
    aff = np.maximum(np.take_along_axis(sims, nbr, axis=1), 0.0)
    return np.einsum("ik,ikc->ic", aff, probs[nbr])


def adapt(source_model: MLPClassifier, unlabeled: Dataset, cfg: AdaptConfig,
          weights: np.ndarray | None = None, role: str = "clean") -> AdaptedModel:
    """Run one unsupervised adaptation pass from a source checkpoint.

    ``weights`` (length N) scales each sample's loss term; omitted weights
    mean the uniform ones vector, and the two spellings produce bit-identical
    runs. Labeled datasets are refused.
    """
    if unlabeled.has_labels():
        raise UsageError("adaptation must not see labels; pass an unlabeled view")
    cfg.validate(n_samples=len(unlabeled))
    n, h, w = unlabeled.images.shape
    x = unlabeled.images.reshape(n, h * w)

    if weights is None:
        w_all = np.ones(n)
        weights_id = "uniform"
    else:
        w_all = np.asarray(weights, dtype=np.float64)
        if w_all.shape != (n,):
            raise UsageError(f"weights length {w_all.shape} != dataset size {n}")
        weights_id = hashlib.sha256(w_all.astype("<f8").tobytes()).hexdigest()[:16]

    model = source_model.clone()
    opt = OptimState(lr=cfg.lr, momentum=cfg.momentum, seed=cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x616470]))

    pseudo = None
    targets = None
    for epoch in range(cfg.epochs):
        if epoch % cfg.refresh_interval == 0:
            if cfg.algorithm == "shot":
                pseudo = centroid_pseudo_labels(model, unlabeled)
            else:
                targets = neighbor_soft_targets(model, x, cfg.k_neighbors)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            wb = w_all[idx]
            if cfg.algorithm == "shot":
                _, g_im = loss_and_grads(model, x[idx],
                                         LossSpec("info_max", beta=cfg.beta, weights=wb))
                _, g_pl = loss_and_grads(model, x[idx],
                                         LossSpec("pseudo_label_ce", labels=pseudo[idx],
                                                  weights=wb))
                grads = {name: g_im[name] + cfg.gamma * g_pl[name] for name in g_im}
            else:
                # consistency alone collapses onto one class; keep the
                # batch-diversity regularizer the original method carries.
                # Diversity-only gradients = info_max(beta) - info_max(0).
                _, g_nc = loss_and_grads(model, x[idx],
                                         LossSpec("neighbor_consistency",
                                                  soft_targets=targets[idx], weights=wb))
                _, g_full = loss_and_grads(model, x[idx],
                                           LossSpec("info_max", beta=cfg.beta, weights=wb))
                _, g_ent = loss_and_grads(model, x[idx],
                                          LossSpec("info_max", beta=0.0, weights=wb))
                grads = {name: g_nc[name] + g_full[name] - g_ent[name] for name in g_nc}
            if cfg.freeze_head:
                # source-hypothesis transfer: only the feature stack adapts,
                # the classifier head keeps the source decision geometry
                grads["w3"] = np.zeros_like(grads["w3"])
                grads["b3"] = np.zeros_like(grads["b3"])
            sgd_step(model, grads, opt)

    provenance = {
        "source_checkpoint": source_model.param_hash(),
        "config": asdict(cfg),
        "weights": weights_id,
        "role": role,
    }
    return AdaptedModel(model, provenance)


def provenance_hash(provenance: dict) -> str:
    return hashlib.sha256(json.dumps(provenance, sort_keys=True).encode()).hexdigest()[:16]
