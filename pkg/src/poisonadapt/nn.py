"""Dense numeric core: a small tanh MLP classifier with exact analytic
gradients, softmax/entropy primitives, and seeded SGD with momentum.

Tensors are plain numpy float64 arrays (row-major). All randomness flows
through explicitly seeded ``numpy.random.Generator`` instances, so repeated
runs with the same seed are bit-identical on the same build.

Supported loss kinds for :func:`grad_loss` (each optionally per-sample
weighted):

- ``cross_entropy``       hard labels
- ``pseudo_label_ce``     hard labels produced by a pseudo-labeler
- ``info_max``            per-sample entropy minus ``beta`` times the entropy
                          of the batch-mean prediction
- ``neighbor_consistency`` cross-entropy against fixed per-sample soft targets

Weighting convention: the per-sample part of every loss is
``mean over samples with nonzero weight of w_i * l_i``. Zero-weight samples
are dropped before any per-sample arithmetic, so their presence cannot
perturb those gradients even at the bit level. The one batch-global term
(info_max's diversity entropy) is not a per-sample loss and always averages
over the whole batch, weights or not.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ShapeError, UsageError

LOSS_KINDS = ("cross_entropy", "info_max", "pseudo_label_ce", "neighbor_consistency")

_PARAM_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Overflow-safe softmax along the last axis."""
    return np.exp(log_softmax(logits))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def entropy(probs: np.ndarray, logp: np.ndarray | None = None) -> np.ndarray:
    """Shannon entropy (natural log) along the last axis, with 0*log0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if logp is None:
        logp = np.log(np.maximum(p, 1e-300))
    return -(p * logp).sum(axis=-1)


class MLPClassifier:
    """input -> tanh hidden -> tanh feature -> linear head.

    The feature layer output (post-activation) is the representation used
    by centroid pseudo-labeling and neighbor graphs downstream.
    """

    def __init__(self, input_dim: int, hidden_dim: int, feature_dim: int,
                 num_classes: int, seed: int = 0, init_scale: float = 1.0):
        if min(input_dim, hidden_dim, feature_dim, num_classes) < 1:
            raise UsageError("all model dimensions must be positive")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x6D6F64]))
        self.w1 = rng.normal(0.0, init_scale / np.sqrt(input_dim), (input_dim, hidden_dim))
        self.b1 = np.zeros(hidden_dim)
        self.w2 = rng.normal(0.0, init_scale / np.sqrt(hidden_dim), (hidden_dim, feature_dim))
        self.b2 = np.zeros(feature_dim)
        self.w3 = rng.normal(0.0, init_scale / np.sqrt(feature_dim), (feature_dim, num_classes))
        self.b3 = np.zeros(num_classes)

    @property
    def arch(self) -> tuple[int, int, int, int]:
        return (self.input_dim, self.hidden_dim, self.feature_dim, self.num_classes)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_ORDER}

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        for name in _PARAM_ORDER:
            current = getattr(self, name)
            new = np.asarray(values[name], dtype=np.float64)
            if new.shape != current.shape:
                raise ShapeError(f"parameter {name}: expected shape {current.shape}, got {new.shape}")
            setattr(self, name, new.copy())

    def clone(self) -> "MLPClassifier":
        other = MLPClassifier.__new__(MLPClassifier)
        other.input_dim = self.input_dim
        other.hidden_dim = self.hidden_dim
        other.feature_dim = self.feature_dim
        other.num_classes = self.num_classes
        for name in _PARAM_ORDER:
            setattr(other, name, getattr(self, name).copy())
        return other

    def _as_batch(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.input_dim:
            raise ShapeError(f"input has shape {np.shape(x)}, model expects (*, {self.input_dim})")
        return arr, single

    def _forward_full(self, x2d: np.ndarray):
        h1 = np.tanh(x2d @ self.w1 + self.b1)
        h2 = np.tanh(h1 @ self.w2 + self.b2)
        logits = h2 @ self.w3 + self.b3
        return h1, h2, logits

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits for a single example (1-D input) or a batch (2-D input)."""
        x2d, single = self._as_batch(x)
        logits = self._forward_full(x2d)[2]
        return logits[0] if single else logits

    def features(self, x: np.ndarray) -> np.ndarray:
        x2d, single = self._as_batch(x)
        h2 = self._forward_full(x2d)[1]
        return h2[0] if single else h2

    def predict_probs(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.forward(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x), axis=-1)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in _PARAM_ORDER:
            h.update(np.ascontiguousarray(getattr(self, name)).astype("<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass
class LossSpec:
    """What to differentiate: a loss kind plus its targets and weights.

    ``labels`` drives the two hard-label kinds, ``soft_targets`` drives
    neighbor consistency, ``beta`` scales the diversity term of info_max.
    ``weights`` is per-sample; None means all ones.
    """

    kind: str
    labels: np.ndarray | None = None
    soft_targets: np.ndarray | None = None
    beta: float = 1.0
    weights: np.ndarray | None = None


@dataclass
class OptimState:
    """SGD-with-momentum state: v <- m*v - lr*g; theta <- theta + v."""

    lr: float
    momentum: float = 0.9
    seed: int = 0
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise UsageError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise UsageError(f"momentum must lie in [0, 1), got {self.momentum}")


def _validate_spec(x: np.ndarray, spec: LossSpec) -> np.ndarray:
    n = x.shape[0]
    if n == 0:
        raise UsageError("empty batch")
    if spec.kind not in LOSS_KINDS:
        raise UsageError(f"unknown loss kind {spec.kind!r}; expected one of {LOSS_KINDS}")
    if spec.kind in ("cross_entropy", "pseudo_label_ce"):
        if spec.labels is None:
            raise UsageError(f"{spec.kind} needs labels")
        if len(spec.labels) != n:
            raise ShapeError(f"labels length {len(spec.labels)} != batch size {n}")
    if spec.kind == "neighbor_consistency":
        if spec.soft_targets is None:
            raise UsageError("neighbor_consistency needs soft_targets")
        if spec.soft_targets.shape[0] != n:
            raise ShapeError(f"soft_targets rows {spec.soft_targets.shape[0]} != batch size {n}")
    if spec.weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(spec.weights, dtype=np.float64)
        if w.shape != (n,):
            raise ShapeError(f"weights shape {w.shape} != ({n},)")
    return w


def loss_and_grads(model: MLPClassifier, x: np.ndarray,
                   spec: LossSpec) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and exact analytic gradients for every model parameter.

    Samples with weight exactly zero are removed before any computation, so
    the result is bit-identical to calling with those samples deleted.
    """
    x2d, _ = model._as_batch(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    w_full = _validate_spec(x2d, spec)

    keep = w_full != 0.0
    n_eff = int(keep.sum())

    if spec.kind == "info_max":
        return _info_max_core(model, x2d, w_full, spec.beta)

    if n_eff == 0:
        zero = {name: np.zeros_like(arr) for name, arr in model.params().items()}
        return 0.0, zero

    xs = x2d[keep] if not keep.all() else x2d
    w = w_full[keep] if not keep.all() else w_full

    h1, h2, logits = model._forward_full(xs)
    logp = log_softmax(logits)
    p = np.exp(logp)
    scale = (w / n_eff)[:, None]

    if spec.kind in ("cross_entropy", "pseudo_label_ce"):
        y = np.asarray(spec.labels)[keep] if not keep.all() else np.asarray(spec.labels)
        y = y.astype(int)
        if y.min() < 0 or y.max() >= model.num_classes:
            raise UsageError("labels out of class range")
        onehot = np.zeros_like(p)
        onehot[np.arange(len(y)), y] = 1.0
        loss = float(np.sum((w / n_eff) * (-logp[np.arange(len(y)), y])))
        g_logits = scale * (p - onehot)
    else:  # neighbor_consistency
        t = np.asarray(spec.soft_targets, dtype=np.float64)
        t = t[keep] if not keep.all() else t
        mass = t.sum(axis=1, keepdims=True)
        loss = float(np.sum((w / n_eff) * (-(t * logp).sum(axis=1))))
        g_logits = scale * (mass * p - t)

    grads = _backprop(model, xs, h1, h2, g_logits)
    return loss, grads


def _info_max_core(model: MLPClassifier, x2d: np.ndarray, w_full: np.ndarray,
                   beta: float):
    """Weighted mean per-sample entropy minus beta times the entropy of the
    plain batch-mean prediction.

    Weights scale only the per-sample entropy terms (the analogue of every
    other per-sample loss); the diversity term is batch-global and always
    sees the whole batch, so even zero-weight samples keep contributing
    their predictions to the mean.
    """
    keep = w_full != 0.0
    n_eff = int(keep.sum())
    n_full = x2d.shape[0]

    grads = {name: np.zeros_like(arr) for name, arr in model.params().items()}
    loss = 0.0

    full_cache = None
    if n_eff > 0:
        if keep.all():
            xs, w = x2d, w_full
            cache = model._forward_full(xs)
            full_cache = cache
        else:
            xs, w = x2d[keep], w_full[keep]
            cache = model._forward_full(xs)
        h1, h2, logits = cache
        logp = log_softmax(logits)
        p = np.exp(logp)
        ent = entropy(p, logp)
        loss += float(np.sum(w * ent) / n_eff)
        # d(mean_w H_i)/dz: -w_i/n_eff * p .* (logp + H_i)
        g_ent = (w / n_eff)[:, None] * (-(p * (logp + ent[:, None])))
        for name, g in _backprop(model, xs, h1, h2, g_ent).items():
            grads[name] += g

    if beta != 0.0:
        if full_cache is None:
            full_cache = model._forward_full(x2d)
        h1f, h2f, logits_f = full_cache
        logp_f = log_softmax(logits_f)
        p_f = np.exp(logp_f)
        pbar = p_f.mean(axis=0)
        logpbar = np.log(np.maximum(pbar, 1e-300))
        loss += float(beta * (pbar * logpbar).sum())
        # d(-beta*H(pbar))/dz_{ik} = beta/n * p_ik * (logpbar_k - sum_c p_ic logpbar_c)
        s = p_f @ logpbar
        g_div = (beta / n_full) * p_f * (logpbar[None, :] - s[:, None])
        for name, g in _backprop(model, x2d, h1f, h2f, g_div).items():
            grads[name] += g

    return loss, grads


def _backprop(model: MLPClassifier, xs, h1, h2, g_logits) -> dict[str, np.ndarray]:
    dw3 = h2.T @ g_logits
    db3 = g_logits.sum(axis=0)
    dh2 = g_logits @ model.w3.T
    dz2 = dh2 * (1.0 - h2 * h2)
    dw2 = h1.T @ dz2
    db2 = dz2.sum(axis=0)
    dh1 = dz2 @ model.w2.T
    dz1 = dh1 * (1.0 - h1 * h1)
    dw1 = xs.T @ dz1
    db1 = dz1.sum(axis=0)
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2, "w3": dw3, "b3": db3}


def grad_loss(model: MLPClassifier, x: np.ndarray, spec: LossSpec) -> dict[str, np.ndarray]:
    """Gradients only; see :func:`loss_and_grads`."""
    return loss_and_grads(model, x, spec)[1]


def target_logprob_and_input_grad(model: MLPClassifier, x: np.ndarray,
                                  target_class: int) -> tuple[float, np.ndarray]:
    """Mean log-probability of ``target_class`` and its gradient w.r.t. x.

    Used by trigger optimization, which ascends this objective in input space.
    """
    x2d, _ = model._as_batch(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if not (0 <= target_class < model.num_classes):
        raise UsageError(f"target class {target_class} out of range")
    n = x2d.shape[0]
    h1, h2, logits = model._forward_full(x2d)
    logp = log_softmax(logits)
    p = np.exp(logp)
    value = float(logp[:, target_class].mean())

    onehot = np.zeros_like(p)
    onehot[:, target_class] = 1.0
    g_logits = (onehot - p) / n
    dh2 = g_logits @ model.w3.T
    dz2 = dh2 * (1.0 - h2 * h2)
    dh1 = dz2 @ model.w2.T
    dz1 = dh1 * (1.0 - h1 * h1)
    dx = dz1 @ model.w1.T
    return value, dx


def sgd_step(model: MLPClassifier, grads: dict[str, np.ndarray],
             opt: OptimState) -> tuple[MLPClassifier, OptimState]:
    """One in-place momentum update; returns the same objects for chaining."""
    for name, param in model.params().items():
        g = grads[name]
        if g.shape != param.shape:
            raise ShapeError(f"gradient {name}: shape {g.shape} != parameter shape {param.shape}")
        v = opt.velocities.get(name)
        if v is None:
            v = np.zeros_like(param)
        v = opt.momentum * v - opt.lr * g
        opt.velocities[name] = v
        param += v
    return model, opt


def save_model(model: MLPClassifier, path: str) -> None:
    """Checkpoint = text manifest + little-endian float64 blob, in a directory."""
    os.makedirs(path, exist_ok=True)
    blob = np.concatenate([np.ascontiguousarray(getattr(model, n)).ravel()
                           for n in _PARAM_ORDER]).astype("<f8")
    lines = [
        "format model-checkpoint v1",
        f"input_dim {model.input_dim}",
        f"hidden_dim {model.hidden_dim}",
        f"feature_dim {model.feature_dim}",
        f"num_classes {model.num_classes}",
        "dtype float64-le",
        f"param_order {' '.join(_PARAM_ORDER)}",
        f"blob_values {blob.size}",
    ]
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(path, "params.f64"), "wb") as fh:
        fh.write(blob.tobytes())


def _read_manifest(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise ParseError(f"manifest missing: {path}")
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition(" ")
            out[key] = value
    return out


def load_model(path: str) -> MLPClassifier:
    man = _read_manifest(os.path.join(path, "manifest.txt"))
    try:
        dims = {k: int(man[k]) for k in ("input_dim", "hidden_dim", "feature_dim", "num_classes")}
        declared = int(man["blob_values"])
    except KeyError as exc:
        raise ParseError(f"checkpoint manifest missing field {exc.args[0]}") from exc
    except ValueError as exc:
        raise ParseError(f"checkpoint manifest has non-integer field: {exc}") from exc

    blob_path = os.path.join(path, "params.f64")
    if not os.path.exists(blob_path):
        raise ParseError("checkpoint field params.f64: blob file missing")
    raw = np.fromfile(blob_path, dtype="<f8")
    if raw.size != declared:
        raise ParseError(f"checkpoint field blob_values: manifest declares {declared} "
                         f"values, blob holds {raw.size}")

    model = MLPClassifier(dims["input_dim"], dims["hidden_dim"], dims["feature_dim"],
                          dims["num_classes"], seed=0)
    shapes = {n: getattr(model, n).shape for n in _PARAM_ORDER}
    need = sum(int(np.prod(s)) for s in shapes.values())
    if raw.size != need:
        raise ParseError(f"checkpoint field blob_values: expected {need} values "
                         f"for declared dims, got {raw.size}")
    offset = 0
    values = {}
    for name in _PARAM_ORDER:
        size = int(np.prod(shapes[name]))
        values[name] = raw[offset:offset + size].reshape(shapes[name])
        offset += size
    model.set_params(values)
    return model
