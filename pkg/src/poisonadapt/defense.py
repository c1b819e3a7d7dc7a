"""Noise-sensitivity sample reweighting defense.

Pipeline: adapt once without weights (the risky pass), measure every
training sample's prediction shift under small input noise, average those
distances within pseudo-label groups to form per-sample weights, then adapt
again from the source checkpoint with the weights (the secure pass).
Samples whose predictions barely move under noise - the signature of inputs
tied to a class by both semantics and an embedded trigger - end up with low
weight, starving the trigger association during the retrain.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .adaptation import AdaptConfig, AdaptedModel, adapt
from .data import Dataset
from .errors import UsageError
from .nn import MLPClassifier, softmax


@dataclass
class NoiseSpec:
    """Input-noise law for the sensitivity probe.

    ``scale`` is the half-range of the uniform law or the std of the
    gaussian one. Zero scale is allowed and makes the defense degenerate
    (all weights become 1), which is occasionally useful as a control.
    """

    distribution: str = "uniform"
    scale: float = 0.25
    replicates: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in ("uniform", "gaussian"):
            raise UsageError(f"unknown noise distribution {self.distribution!r}")
        if self.scale < 0:
            raise UsageError(f"noise scale must be >= 0, got {self.scale}")
        if self.replicates < 1:
            raise UsageError(f"replicate count must be >= 1, got {self.replicates}")

    def draw(self, n: int, height: int, width: int) -> np.ndarray:
        """(n, replicates, height, width) noise block, one seeded stream."""
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), 0x6E6F69]))
        shape = (n, self.replicates, height, width)
        if self.distribution == "uniform":
            return rng.uniform(-self.scale, self.scale, shape)
        return rng.normal(0.0, self.scale, shape)


@dataclass
class SensitivityRecord:
    """Per-example noise-sensitivity distance and risky-model pseudo label."""

    delta: np.ndarray
    pseudo_labels: np.ndarray


@dataclass
class SampleWeights:
    """Per-example weights; members of one pseudo-class share one value."""

    values: np.ndarray
    normalization: str = "raw"  # or "mean-one"
    raw: np.ndarray | None = None


def sensitivity_from_draws(model: MLPClassifier, images: np.ndarray,
                           draws: np.ndarray) -> SensitivityRecord:
    """Distances for explicit noise draws of shape (n, R, H, W).

    delta_i = mean over replicates of the L2 distance between the softmax
    outputs at x_i and at clamp(x_i + noise); pseudo labels are the clean
    argmax predictions.
    """
    n, h, w = images.shape
    if draws.shape[0] != n or draws.shape[2:] != (h, w):
        raise UsageError(f"draws shape {draws.shape} incompatible with images {images.shape}")
    x = images.reshape(n, h * w)
    base = softmax(model.forward(x))
    total = np.zeros(n)
    for r in range(draws.shape[1]):
        perturbed = np.clip(images + draws[:, r], 0.0, 1.0).reshape(n, h * w)
        probs = softmax(model.forward(perturbed))
        total += np.linalg.norm(probs - base, axis=1)
    return SensitivityRecord(total / draws.shape[1], base.argmax(axis=1))


def sensitivity(model: MLPClassifier, unlabeled: Dataset,
                noise: NoiseSpec) -> SensitivityRecord:
    """Noise-sensitivity distances for every example of the training split."""
    if len(unlabeled) == 0:
        raise UsageError("empty dataset")
    h, w = unlabeled.image_shape
    return sensitivity_from_draws(model, unlabeled.images,
                                  noise.draw(len(unlabeled), h, w))


def group_average_weights(rec: SensitivityRecord,
                          normalize: bool = True) -> SampleWeights:
    """Replace each sample's distance by its pseudo-class mean.

    Every member of a pseudo-class is assigned the identical float, so
    group-constancy holds exactly. With ``normalize`` the weights are
    rescaled to dataset mean 1; an all-zero raw vector normalizes to all
    ones (the degenerate no-information case).
    """
    delta = np.asarray(rec.delta, dtype=np.float64)
    pseudo = np.asarray(rec.pseudo_labels)
    if delta.size == 0:
        raise UsageError("empty sensitivity record")
    raw = np.empty_like(delta)
    for k in np.unique(pseudo):
        members = pseudo == k
        raw[members] = float(delta[members].mean())
    if not normalize:
        return SampleWeights(raw.copy(), "raw", raw=raw)
    total = raw.sum()
    if total == 0.0:
        values = np.ones_like(raw)
    else:
        values = raw * (len(raw) / total)
    return SampleWeights(values, "mean-one", raw=raw)


def defend(source_model: MLPClassifier, unlabeled: Dataset, cfg: AdaptConfig,
           noise: NoiseSpec) -> tuple[AdaptedModel, SampleWeights, AdaptedModel]:
    """Full defended adaptation; returns (secure, weights, risky).

    Both adaptation passes start from the source checkpoint and reuse the
    same configuration; the defense runs unconditionally, poisoned data or
    not.
    """
    risky = adapt(source_model, unlabeled, cfg, weights=None, role="risky")
    rec = sensitivity(risky.model, unlabeled, noise)
    weights = group_average_weights(rec, normalize=True)
    secure = adapt(source_model, unlabeled, cfg, weights=weights.values, role="secure")
    secure.provenance["noise"] = {
        "distribution": noise.distribution,
        "scale": noise.scale,
        "replicates": noise.replicates,
        "seed": noise.seed,
        "distance": "l2-on-softmax-probabilities",
    }
    return secure, weights, risky


def save_weights(rec: SensitivityRecord, weights: SampleWeights, path: str) -> None:
    """Audit table: one line per example with distance, pseudo label, raw and
    normalized weight."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    raw = weights.raw if weights.raw is not None else weights.values
    with open(path, "w") as fh:
        fh.write("index\tdelta\tpseudo_label\tweight_raw\tweight_normalized\n")
        for i in range(len(rec.delta)):
            fh.write(f"{i}\t{rec.delta[i]!r}\t{int(rec.pseudo_labels[i])}\t"
                     f"{raw[i]!r}\t{weights.values[i]!r}\n")


def load_weights(path: str) -> np.ndarray:
    """Normalized weight column of a saved audit table."""
    values = []
    with open(path) as fh:
        header = fh.readline()
        for line in fh:
            if line.strip():
                values.append(float(line.split("\t")[4]))
    return np.array(values)
