"""The two trigger families and their construction.

- ``BlendedTrigger``: a fixed full-image pattern mixed into the example with
  ratio alpha.
- ``PatchTrigger``: a bounded additive perturbation confined to a square
  patch, optimized through a surrogate classifier by projected gradient
  ascent on the target class log-probability.

Applying a trigger clamps to [0, 1] and snaps to the float32 pixel grid, so
train-time and test-time applications agree exactly with persisted data.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Example, quantize_pixels, smoothed_field
from .errors import ParseError, ShapeError, UsageError
from .nn import (
    LossSpec,
    MLPClassifier,
    OptimState,
    grad_loss,
    sgd_step,
    softmax,
    target_logprob_and_input_grad,
)


@dataclass
class BlendedTrigger:
    """Full-image blend: x' = clamp((1 - alpha) * x + alpha * pattern)."""

    pattern: np.ndarray
    alpha: float

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        if self.pattern.ndim != 2:
            raise ShapeError(f"pattern must be 2-D, got shape {self.pattern.shape}")
        if self.pattern.min() < 0.0 or self.pattern.max() > 1.0:
            raise UsageError("pattern pixels must lie in [0, 1]")
        if not (0.0 < self.alpha <= 1.0):
            raise UsageError(f"alpha must lie in (0, 1], got {self.alpha}")

    @property
    def kind(self) -> str:
        return "blended"

    def apply_to_images(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.shape[-2:] != self.pattern.shape:
            raise ShapeError(f"image shape {images.shape[-2:]} != pattern shape "
                             f"{self.pattern.shape}")
        mixed = (1.0 - self.alpha) * images + self.alpha * self.pattern
        return quantize_pixels(np.clip(mixed, 0.0, 1.0))


@dataclass
class PatchTrigger:
    """Additive perturbation, zero outside a square mask, |delta| <= eps."""

    delta: np.ndarray
    mask: np.ndarray
    eps: float

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.delta.shape != self.mask.shape or self.delta.ndim != 2:
            raise ShapeError(f"delta shape {self.delta.shape} != mask shape {self.mask.shape}")
        if self.eps <= 0:
            raise UsageError(f"eps must be positive, got {self.eps}")
        if np.any(np.abs(self.delta) > self.eps):
            raise UsageError("delta exceeds the L_inf budget")
        if np.any(self.delta[~self.mask] != 0.0):
            raise UsageError("delta must be zero outside the mask")

    @property
    def kind(self) -> str:
        return "patch"

    def apply_to_images(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.shape[-2:] != self.delta.shape:
            raise ShapeError(f"image shape {images.shape[-2:]} != delta shape "
                             f"{self.delta.shape}")
        out = images.copy()
        patched = np.clip(images[..., self.mask] + self.delta[self.mask], 0.0, 1.0)
        out[..., self.mask] = patched
        return quantize_pixels(out)


Trigger = BlendedTrigger | PatchTrigger


def apply_blended(x: Example, trigger: BlendedTrigger) -> Example:
    return Example(trigger.apply_to_images(x.image), x.label)


def apply_patch(x: Example, trigger: PatchTrigger) -> Example:
    return Example(trigger.apply_to_images(x.image), x.label)


def apply_trigger(x: Example, trigger: Trigger) -> Example:
    return Example(trigger.apply_to_images(x.image), x.label)


def blended_pattern(height: int, width: int, seed: int) -> np.ndarray:
    """Seeded smoothed-blob pattern standing in for a third-party image."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x70617474]))
    return quantize_pixels(smoothed_field(height, width, rng))


def make_blended_trigger(height: int, width: int, alpha: float, seed: int) -> BlendedTrigger:
    return BlendedTrigger(blended_pattern(height, width, seed), alpha)


def square_mask(height: int, width: int, size: int, top: int | None = None,
                left: int | None = None) -> np.ndarray:
    """Boolean mask for a size x size patch; centered when top/left omitted."""
    if size < 1 or size > min(height, width):
        raise UsageError(f"patch size {size} does not fit a {height}x{width} image")
    if top is None:
        top = (height - size) // 2
    if left is None:
        left = (width - size) // 2
    if top < 0 or left < 0 or top + size > height or left + size > width:
        raise UsageError("patch placement falls outside the image")
    mask = np.zeros((height, width), dtype=bool)
    mask[top:top + size, left:left + size] = True
    return mask


@dataclass
class SurrogateSpec:
    """Attacker-side classifier; its widths must differ from the victim's."""

    hidden_dim: int = 48
    feature_dim: int = 24
    epochs: int = 40
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9
    seed: int = 0


def train_surrogate(labeled_target: Dataset, spec: SurrogateSpec) -> MLPClassifier:
    """Cross-entropy classifier on the attacker's labeled view of the target."""
    labels = labeled_target.require_labels()
    n, h, w = labeled_target.images.shape
    x = labeled_target.images.reshape(n, h * w)
    model = MLPClassifier(h * w, spec.hidden_dim, spec.feature_dim,
                          labeled_target.num_classes, seed=spec.seed)
    if spec.epochs == 0:
        return model
    opt = OptimState(lr=spec.lr, momentum=spec.momentum, seed=spec.seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0x737572]))
    for _ in range(spec.epochs):
        order = rng.permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            grads = grad_loss(model, x[idx], LossSpec("cross_entropy", labels=labels[idx]))
            sgd_step(model, grads, opt)
    return model


def mean_target_probability(model: MLPClassifier, images: np.ndarray,
                            trigger: Trigger | None, target_class: int) -> float:
    """Mean softmax probability of the target class, optionally triggered."""
    if trigger is not None:
        images = trigger.apply_to_images(images)
    n = images.shape[0]
    probs = softmax(model.forward(images.reshape(n, -1)))
    return float(probs[:, target_class].mean())


def optimize_patch(surrogate: MLPClassifier, data: Dataset, target_class: int,
                   mask: np.ndarray, eps: float, steps: int, step_size: float,
                   seed: int, holdout_fraction: float = 0.25) -> PatchTrigger:
    """Projected gradient ascent on the mean target-class log-probability.

    After every step delta is clamped to [-eps, eps] and zeroed off-mask. A
    seeded holdout subset guards the result: if the optimized delta does not
    reach at least the delta = 0 target probability there, the zero trigger
    is returned so the contract `held-out probability >= baseline` always
    holds.
    """
    if len(data) == 0:
        raise UsageError("empty dataset")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise UsageError("mask selects no pixels")
    if eps <= 0:
        raise UsageError(f"eps must be positive, got {eps}")
    if not (0 <= target_class < data.num_classes):
        raise UsageError(f"target class {target_class} out of range")

    n, h, w = data.images.shape
    if mask.shape != (h, w):
        raise ShapeError(f"mask shape {mask.shape} != image shape {(h, w)}")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x756170]))
    n_hold = max(1, int(round(holdout_fraction * n))) if n > 1 else 0
    perm = rng.permutation(n)
    hold_idx, fit_idx = perm[:n_hold], perm[n_hold:]
    if len(fit_idx) == 0:
        fit_idx = perm
    fit = data.images[fit_idx]
    hold = data.images[hold_idx] if n_hold else data.images

    delta = np.zeros((h, w))
    flat_mask = mask.ravel()
    for _ in range(steps):
        perturbed = fit + delta
        clipped = np.clip(perturbed, 0.0, 1.0)
        _, dx = target_logprob_and_input_grad(surrogate, clipped.reshape(len(fit), -1),
                                              target_class)
        # gradient through the clamp: zero where the pixel saturated
        active = ((perturbed > 0.0) & (perturbed < 1.0)).reshape(len(fit), -1)
        g = (dx * active).sum(axis=0)
        g[~flat_mask] = 0.0
        delta = delta + step_size * np.sign(g).reshape(h, w)
        delta = np.clip(delta, -eps, eps)
        delta[~mask] = 0.0

    candidate = PatchTrigger(delta, mask, eps)
    baseline = mean_target_probability(surrogate, hold, None, target_class)
    achieved = mean_target_probability(surrogate, hold, candidate, target_class)
    if achieved < baseline:
        return PatchTrigger(np.zeros((h, w)), mask, eps)
    return candidate


def save_trigger(trigger: Trigger, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    if isinstance(trigger, BlendedTrigger):
        lines = [
            "format trigger v1",
            "kind blended",
            f"alpha {trigger.alpha!r}",
            f"height {trigger.pattern.shape[0]}",
            f"width {trigger.pattern.shape[1]}",
        ]
        blob = trigger.pattern
    else:
        rows = np.flatnonzero(trigger.mask.any(axis=1))
        cols = np.flatnonzero(trigger.mask.any(axis=0))
        lines = [
            "format trigger v1",
            "kind patch",
            f"eps {trigger.eps!r}",
            f"height {trigger.delta.shape[0]}",
            f"width {trigger.delta.shape[1]}",
            f"mask_rows {rows[0]} {rows[-1] + 1}",
            f"mask_cols {cols[0]} {cols[-1] + 1}",
        ]
        blob = trigger.delta
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(path, "values.f64"), "wb") as fh:
        fh.write(np.ascontiguousarray(blob).astype("<f8").tobytes())


def load_trigger(path: str) -> Trigger:
    manifest_path = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise ParseError(f"manifest missing: {manifest_path}")
    man = {}
    with open(manifest_path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                key, _, value = line.partition(" ")
                man[key] = value
    try:
        kind = man["kind"]
        h, w = int(man["height"]), int(man["width"])
    except KeyError as exc:
        raise ParseError(f"trigger manifest missing field {exc.args[0]}") from exc

    raw = np.fromfile(os.path.join(path, "values.f64"), dtype="<f8")
    if raw.size != h * w:
        raise ParseError(f"trigger field values.f64: expected {h * w} values, "
                         f"blob holds {raw.size}")
    grid = raw.reshape(h, w)

    if kind == "blended":
        if "alpha" not in man:
            raise ParseError("trigger manifest missing field alpha")
        return BlendedTrigger(grid, float(man["alpha"]))
    if kind == "patch":
        for key in ("eps", "mask_rows", "mask_cols"):
            if key not in man:
                raise ParseError(f"trigger manifest missing field {key}")
        r0, r1 = (int(v) for v in man["mask_rows"].split())
        c0, c1 = (int(v) for v in man["mask_cols"].split())
        mask = np.zeros((h, w), dtype=bool)
        mask[r0:r1, c0:c1] = True
        return PatchTrigger(grid, mask, float(man["eps"]))
    raise ParseError(f"trigger manifest field kind: unknown value {kind!r}")
