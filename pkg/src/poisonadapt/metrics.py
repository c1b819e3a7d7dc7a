"""Clean accuracy and attack success rate on the held-out target test split."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset
from .errors import UsageError
from .nn import MLPClassifier
from .triggers import Trigger


@dataclass
class Metrics:
    """One evaluation: accuracy plus (when a trigger is present) the attack
    success rate, with the underlying counts for auditability."""

    acc: float
    asr: float | None
    clean_correct: int
    clean_total: int
    trigger_hit: int
    trigger_total: int
    config_hash: str = ""
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Metrics":
        return Metrics(**json.loads(text))


def clean_accuracy(model: MLPClassifier, test: Dataset) -> float:
    """Fraction of test examples whose argmax prediction matches the label."""
    labels = test.require_labels()
    if len(test) == 0:
        raise UsageError("empty test set")
    x = test.images.reshape(len(test), -1)
    return float((model.predict(x) == labels).mean())


def attack_success_rate(model: MLPClassifier, test: Dataset, trigger: Trigger,
                        target_class: int) -> float:
    """Fraction of triggered non-target-class test examples predicted as the
    target class. Target-class examples never enter the denominator."""
    labels = test.require_labels()
    victims = np.flatnonzero(labels != target_class)
    if victims.size == 0:
        raise UsageError("every test example belongs to the target class; ASR undefined")
    triggered = trigger.apply_to_images(test.images[victims])
    preds = model.predict(triggered.reshape(victims.size, -1))
    return float((preds == target_class).mean())


def evaluate(model: MLPClassifier, test: Dataset, trigger: Trigger | None = None,
             target_class: int = 0, config_hash: str = "", seed: int = 0) -> Metrics:
    """Joint ACC (+ ASR when a trigger is given) from one pass over the split."""
    labels = test.require_labels()
    if len(test) == 0:
        raise UsageError("empty test set")
    x = test.images.reshape(len(test), -1)
    preds = model.predict(x)
    clean_correct = int((preds == labels).sum())

    asr = None
    trigger_hit = 0
    trigger_total = 0
    if trigger is not None:
        victims = np.flatnonzero(labels != target_class)
        if victims.size == 0:
            raise UsageError("every test example belongs to the target class; ASR undefined")
        triggered = trigger.apply_to_images(test.images[victims])
        tpreds = model.predict(triggered.reshape(victims.size, -1))
        trigger_hit = int((tpreds == target_class).sum())
        trigger_total = int(victims.size)
        asr = trigger_hit / trigger_total

    return Metrics(acc=clean_correct / len(test), asr=asr,
                   clean_correct=clean_correct, clean_total=len(test),
                   trigger_hit=trigger_hit, trigger_total=trigger_total,
                   config_hash=config_hash, seed=seed)
