"""Poison-set selection and construction for the unlabeled training split.

Two attacker-knowledge regimes:

- ground truth: poison exactly the samples whose true label is the target
  class; everything else stays untouched.
- pseudo label: an auxiliary labeler (a corrupted oracle standing in for an
  external foundation model, or a probe classifier) assigns probabilities;
  the base set is its argmax hits for the target class, optionally extended
  by a supplementary set of high-confidence candidates outside the base.

``build_poisoned_dataset`` applies the trigger to a seeded subset of the
plan and strips labels, producing the dataset an adaptation user receives.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ParseError, UsageError
from .nn import MLPClassifier, softmax
from .triggers import Trigger


@dataclass
class AuxLabeler:
    """Pseudo-labeler surrogate for an external foundation model.

    ``oracle_noisy`` corrupts true labels uniformly at rate ``corruption_rate``
    and emits a confidence vector peaked on the (possibly corrupted) label:
    p = m * onehot + (1 - m) * Dirichlet(1), with m drawn in [0.55, 0.9] so
    the argmax always equals the emitted label. ``probe_model`` emits the
    softmax probabilities of a trained classifier.
    """

    mode: str = "oracle_noisy"
    corruption_rate: float = 0.1
    seed: int = 0
    model: MLPClassifier | None = None

    def __post_init__(self):
        if self.mode not in ("oracle_noisy", "probe_model"):
            raise UsageError(f"unknown labeler mode {self.mode!r}")
        if not (0.0 <= self.corruption_rate < 1.0):
            raise UsageError(f"corruption rate must lie in [0, 1), got {self.corruption_rate}")
        if self.mode == "probe_model" and self.model is None:
            raise UsageError("probe_model mode needs a model")

    def probabilities(self, ds: Dataset) -> np.ndarray:
        """Per-example class probabilities (rows sum to 1)."""
        n, c = len(ds), ds.num_classes
        if self.mode == "probe_model":
            x = ds.images.reshape(n, -1)
            return softmax(self.model.forward(x))

        true = ds.require_labels()
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), 0x6C6162]))
        emitted = true.copy()
        flip = rng.random(n) < self.corruption_rate
        offsets = rng.integers(1, c, n)  # uniform over the other classes
        emitted[flip] = (true[flip] + offsets[flip]) % c

        base = rng.dirichlet(np.ones(c), size=n)
        peak = rng.uniform(0.55, 0.9, n)
        probs = (1.0 - peak)[:, None] * base
        probs[np.arange(n), emitted] += peak
        return probs


@dataclass
class PoisonPlan:
    """Which indices of the training split receive the trigger."""

    target_class: int
    base_indices: np.ndarray
    supp_indices: np.ndarray
    trigger: Trigger | None
    poison_rate: float = 1.0
    trigger_ref: str = ""

    def __post_init__(self):
        self.base_indices = np.asarray(self.base_indices, dtype=np.int64)
        self.supp_indices = np.asarray(self.supp_indices, dtype=np.int64)
        if not (0.0 <= self.poison_rate <= 1.0):
            raise UsageError(f"poison rate must lie in [0, 1], got {self.poison_rate}")
        if np.intersect1d(self.base_indices, self.supp_indices).size:
            raise UsageError("base and supplementary index sets overlap")

    @property
    def planned_indices(self) -> np.ndarray:
        return np.concatenate([self.base_indices, self.supp_indices])

    def validate_for(self, ds: Dataset) -> None:
        planned = self.planned_indices
        if planned.size and (planned.min() < 0 or planned.max() >= len(ds)):
            raise UsageError("plan index out of range for this dataset")
        if len(np.unique(planned)) != planned.size:
            raise UsageError("plan contains duplicate indices")


def select_ground_truth(train: Dataset, target_class: int) -> PoisonPlan:
    """All samples of the target class, per the attacker's labeled view."""
    labels = train.require_labels()
    base = np.flatnonzero(labels == target_class)
    if base.size == 0:
        raise UsageError(f"target class {target_class} has no members")
    return PoisonPlan(target_class, base, np.empty(0, dtype=np.int64), None)


def select_pseudo_label(train: Dataset, labeler: AuxLabeler, target_class: int,
                        supp_threshold: float, supp_cap: int) -> PoisonPlan:
    """Argmax hits for the target class plus a capped high-confidence
    supplementary set, ordered by descending probability (index ascending on
    ties)."""
    if not (0.0 < supp_threshold < 1.0):
        raise UsageError(f"supplementary threshold must lie in (0, 1), got {supp_threshold}")
    if supp_cap < 0:
        raise UsageError(f"supplementary cap must be >= 0, got {supp_cap}")
    if not (0 <= target_class < train.num_classes):
        raise UsageError(f"target class {target_class} out of range")

    probs = labeler.probabilities(train)
    pred = probs.argmax(axis=1)
    base = np.flatnonzero(pred == target_class)

    outside = np.flatnonzero(pred != target_class)
    p_target = probs[outside, target_class]
    qualified = outside[p_target >= supp_threshold]
    if qualified.size and supp_cap > 0:
        q_probs = probs[qualified, target_class]
        order = np.lexsort((qualified, -q_probs))  # prob desc, index asc
        supp = qualified[order][:supp_cap]
    else:
        supp = np.empty(0, dtype=np.int64)
    return PoisonPlan(int(target_class), base, supp, None)


def build_poisoned_dataset(train: Dataset, plan: PoisonPlan, seed: int) -> Dataset:
    """Trigger a seeded ceil(rate * plan size) subset and strip all labels.

    Ordering is preserved and off-plan examples are bit-identical to the
    input. The returned dataset records both the plan-relative rate and the
    whole-set fraction in its metadata.
    """
    plan.validate_for(train)
    if plan.trigger is None:
        raise UsageError("plan carries no trigger")
    planned = plan.planned_indices
    n_poison = math.ceil(plan.poison_rate * planned.size)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x706F69]))
    chosen = np.sort(rng.permutation(planned)[:n_poison])

    images = train.images.copy()
    if chosen.size:
        images[chosen] = plan.trigger.apply_to_images(train.images[chosen])

    meta = dict(train.meta)
    meta.update({
        "poison_target_class": str(plan.target_class),
        "poison_rate_of_plan": repr(float(plan.poison_rate)),
        "poison_rate_of_dataset": repr(chosen.size / len(train) if len(train) else 0.0),
        "poison_count": str(int(chosen.size)),
    })
    return Dataset(images, None, train.num_classes, train.domain, train.split,
                   train.seed, meta=meta)


def save_plan(plan: PoisonPlan, path: str, seed: int = 0) -> None:
    """Single text manifest; the trigger itself lives in its own container."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    lines = [
        "format poison-plan v1",
        f"target_class {plan.target_class}",
        f"poison_rate {plan.poison_rate!r}",
        f"seed {seed}",
        f"trigger_ref {plan.trigger_ref}",
        f"base_indices {' '.join(str(i) for i in plan.base_indices)}",
        f"supp_indices {' '.join(str(i) for i in plan.supp_indices)}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_plan(path: str, trigger: Trigger | None = None) -> PoisonPlan:
    if not os.path.exists(path):
        raise ParseError(f"plan manifest missing: {path}")
    man = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                key, _, value = line.partition(" ")
                man[key] = value
    for key in ("target_class", "poison_rate", "base_indices", "supp_indices"):
        if key not in man:
            raise ParseError(f"plan manifest missing field {key}")
    def indices(text):
        return np.array([int(t) for t in text.split()] if text.strip() else [], dtype=np.int64)
    return PoisonPlan(int(man["target_class"]), indices(man["base_indices"]),
                      indices(man["supp_indices"]), trigger,
                      float(man["poison_rate"]), man.get("trigger_ref", ""))
