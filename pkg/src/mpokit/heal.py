"""Desk-scale healing: train a small classifier, tensorize it, retrain the cores.

Layers compute ``y = x @ W.T + b`` on row-major batches. MPO layers run the
matrix-free contraction from :mod:`mpokit.mpo` and get their core gradients
by back-propagating through that contraction, never through a dense W.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, LayerSpec, ModelManifest
from .errors import ArgumentError, DivergenceError, NumericalError
from .mpo import MpoLayer, apply_backward, apply_with_cache, reconstruct
from .pipeline import (CompressionPlan, Rule, Tensorize, compress_model, layer_form,
                       load_weight, mpo_from_checkpoint, mpo_metadata)
from .tensor import DenseTensor, DType, as_array

N_FEATURES = 64
N_CLASSES = 8
DEFAULT_SIZES = (N_FEATURES, 216, 216, N_CLASSES)


@dataclass
class ToyDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    seed: int

    def split(self, name):
        if name == "train":
            return self.x_train, self.y_train
        if name == "test":
            return self.x_test, self.y_test
        raise ArgumentError(f"unknown split {name!r}")


def _balanced_labels(rng, n, n_classes):
    labels = np.arange(n) % n_classes
    return rng.permutation(labels)


@functools.lru_cache(maxsize=8)
def generate_dataset(seed: int, n_train: int = 8000, n_test: int = 2000,
                     n_features: int = N_FEATURES, n_classes: int = N_CLASSES,
                     radius: float = 4.0) -> ToyDataset:
    """Gaussian clusters around seeded random directions scaled to ``radius``.

    Results are cached; treat the returned arrays as read-only.
    """
    if min(n_train, n_test) < n_classes:
        raise ArgumentError(f"need at least {n_classes} samples per split")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, n_features))
    means *= radius / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(n):
        y = _balanced_labels(rng, n, n_classes)
        x = means[y] + rng.standard_normal((n, n_features))
        x.flags.writeable = False
        y.flags.writeable = False
        return x, y

    x_tr, y_tr = draw(n_train)
    x_te, y_te = draw(n_test)
    return ToyDataset(x_tr, y_tr, x_te, y_te, seed)


# ----------------------------------------------------------------- model

@dataclass
class DenseLayer:
    name: str
    weight: np.ndarray  # (out, in)
    bias: np.ndarray

    @property
    def shape(self):
        return self.weight.shape

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


@dataclass
class MpoDenseLayer:
    name: str
    mpo: MpoLayer
    bias: np.ndarray

    @property
    def shape(self):
        return self.mpo.original_shape

    @property
    def weight(self):
        return reconstruct(self.mpo, dtype=np.float64)

    def parameters(self):
        params = {f"{self.name}.core{i}": c for i, c in enumerate(self.mpo.cores)}
        params[f"{self.name}.bias"] = self.bias
        return params


@dataclass
class ToyModel:
    layers: list

    def parameters(self) -> dict:
        out = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out

    def trainable(self, scope: str = "all") -> dict:
        params = self.parameters()
        if scope == "all":
            return params
        if scope == "mpo_cores_only":
            return {k: v for k, v in params.items() if ".core" in k}
        raise ArgumentError(f"unknown trainable scope {scope!r}")

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def copy(self) -> "ToyModel":
        layers = []
        for layer in self.layers:
            if isinstance(layer, DenseLayer):
                layers.append(DenseLayer(layer.name, layer.weight.copy(), layer.bias.copy()))
            else:
                m = layer.mpo
                mpo = MpoLayer([c.copy() for c in m.cores], m.scheme, m.max_bond,
                               m.original_shape, m.truncation_error, m.dtype)
                layers.append(MpoDenseLayer(layer.name, mpo, layer.bias.copy()))
        return ToyModel(layers)

    def densified(self) -> "ToyModel":
        """Same function with every MPO layer replaced by its reconstructed matrix."""
        return ToyModel([DenseLayer(l.name, np.array(l.weight, dtype=np.float64), l.bias.copy())
                         for l in self.layers])


def layer_names(n_layers: int) -> list:
    return [f"hidden{i}" for i in range(n_layers - 1)] + ["head"]


def init_model(sizes=DEFAULT_SIZES, seed: int = 0) -> ToyModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    rng = np.random.default_rng(seed)
    names = layer_names(len(sizes) - 1)
    layers = []
    for name, fan_in, fan_out in zip(names, sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append(DenseLayer(name, w, b))
    return ToyModel(layers)


def _layer_forward(layer, x):
    if isinstance(layer, DenseLayer):
        return x @ layer.weight.T + layer.bias, None
    out, states = apply_with_cache(layer.mpo, np.ascontiguousarray(x.T))
    return out.T + layer.bias, states


def forward(model: ToyModel, x):
    """Logits and the per-layer cache (input, pre-activation, mpo states)."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != model.layers[0].shape[1]:
        raise ArgumentError(f"input shape {h.shape} does not match model input dim "
                            f"{model.layers[0].shape[1]}")
    cache = []
    for i, layer in enumerate(model.layers):
        z, states = _layer_forward(layer, h)
        cache.append((h, z, states))
        # rectifier between layers, none after the last
        h = np.maximum(z, 0.0) if i + 1 < len(model.layers) else z
    return h, cache


def softmax_cross_entropy(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - logsumexp[:, None]
    loss = -log_probs[np.arange(len(labels)), labels].mean()
    probs = np.exp(log_probs)
    probs[np.arange(len(labels)), labels] -= 1.0
    return float(loss), probs / len(labels)


def loss_and_grads(model: ToyModel, x, y):
    """Mean softmax cross-entropy and gradients for every parameter."""
    logits, cache = forward(model, x)
    y = np.asarray(y)
    loss, d = softmax_cross_entropy(logits, y)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} on batch of {len(y)} "
                             f"(max |logit| = {np.abs(logits).max():.3g})")
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        h_in, z, states = cache[i]
        if i + 1 < len(model.layers):
            d = d * (z > 0)  # subgradient 0 at the kink
        grads[f"{layer.name}.bias"] = d.sum(axis=0)
        if isinstance(layer, DenseLayer):
            grads[f"{layer.name}.weight"] = d.T @ h_in
            d = d @ layer.weight
        else:
            core_grads, dx = apply_backward(layer.mpo, states, np.ascontiguousarray(d.T))
            for j, g in enumerate(core_grads):
                grads[f"{layer.name}.core{j}"] = g
            d = dx.T
    return loss, grads


def predict(model: ToyModel, x) -> np.ndarray:
    logits, _ = forward(model, x)
    return np.argmax(logits, axis=1)


def evaluate(model: ToyModel, dataset: ToyDataset, split: str = "test") -> float:
    x, y = dataset.split(split)
    return accuracy(model, x, y)


def accuracy(model: ToyModel, x, y, batch_size: int = 1024) -> float:
    hits = 0
    for start in range(0, len(y), batch_size):
        hits += int(np.sum(predict(model, x[start:start + batch_size]) == y[start:start + batch_size]))
    return hits / len(y)


# ------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    trainable_scope: str = "all"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ArgumentError("epochs >= 0, batch_size >= 1 and learning_rate >= 0 required")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ArgumentError(f"unknown optimizer {self.optimizer!r}")
        if self.trainable_scope not in ("all", "mpo_cores_only"):
            raise ArgumentError(f"unknown trainable scope {self.trainable_scope!r}")


class Adam:
    def __init__(self, config: TrainConfig):
        self.c = config
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        c = self.c
        self.t += 1
        corr1 = 1.0 - c.beta1 ** self.t
        corr2 = 1.0 - c.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= c.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + c.eps)


class SgdMomentum:
    def __init__(self, config: TrainConfig):
        self.c = config
        self.velocity = {}

    def step(self, params, grads):
        for name, p in params.items():
            vel = self.velocity.setdefault(name, np.zeros_like(p))
            vel *= self.c.momentum
            vel += grads[name]
            p -= self.c.learning_rate * vel


def train(model: ToyModel, dataset: ToyDataset, config: TrainConfig = TrainConfig(),
          on_epoch=None) -> list:
    """Mini-batch training in place; returns per-epoch history dicts.

    Raises DivergenceError (carrying the history so far) on a non-finite loss.
    """
    params = model.trainable(config.trainable_scope)
    opt = Adam(config) if config.optimizer == "adam" else SgdMomentum(config)
    rng = np.random.default_rng(config.seed)
    x, y = dataset.x_train, dataset.y_train
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                loss, grads = loss_and_grads(model, x[idx], y[idx])
            except NumericalError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", history) from None
            total += loss * len(idx)
            opt.step(params, grads)
        row = {"epoch": epoch, "train_loss": total / len(y),
               "test_accuracy": evaluate(model, dataset, "test")}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return history


# ---------------------------------------------------- checkpoint bridge

def model_to_checkpoint(model: ToyModel, dtype="f64", model_name="toy-mlp"):
    """(Checkpoint, ModelManifest) for a model; MPO layers use the core naming."""
    items, metadata, specs = [], {}, []
    n = len(model.layers)
    for i, layer in enumerate(model.layers):
        out_dim, in_dim = layer.shape
        kind = "head" if i == n - 1 else "dense"
        specs.append(LayerSpec(layer.name, kind, in_dim, out_dim, None if kind == "head" else i))
        if isinstance(layer, DenseLayer):
            items.append((layer.name, DenseTensor.from_array(layer.weight, dtype)))
        else:
            for j, c in enumerate(layer.mpo.cores):
                items.append((f"{layer.name}.mpo.core{j}", DenseTensor.from_array(c, dtype)))
            m = layer.mpo
            stored = MpoLayer(m.cores, m.scheme, m.max_bond, m.original_shape,
                              m.truncation_error, dtype)
            metadata[f"{layer.name}.mpo"] = mpo_metadata(stored, 0.0)
        items.append((f"{layer.name}.bias", DenseTensor.from_array(layer.bias, dtype)))
    return Checkpoint.from_items(items, metadata), ModelManifest(model_name, specs)


def model_from_checkpoint(ckpt: Checkpoint, manifest: ModelManifest) -> ToyModel:
    layers = []
    for spec in manifest.layers:
        bias = np.array(as_array(ckpt.tensors[f"{spec.name}.bias"]), dtype=np.float64)
        if layer_form(ckpt, spec.name) == "mpo":
            m = mpo_from_checkpoint(ckpt, spec.name)
            mpo = MpoLayer([np.array(c, dtype=np.float64) for c in m.cores], m.scheme,
                           m.max_bond, m.original_shape, m.truncation_error, DType.F64)
            layers.append(MpoDenseLayer(spec.name, mpo, bias))
        else:
            layers.append(DenseLayer(spec.name, load_weight(ckpt, spec.name), bias))
    return ToyModel(layers)


class ToyAccuracyEvaluator:
    """Test accuracy of a checkpointed toy model on the seeded toy dataset.

    Pure and re-entrant; usable as the profiler's evaluator.
    """

    def __init__(self, n_train: int = 8000, n_test: int = 2000, split: str = "test"):
        self.n_train, self.n_test, self.split = n_train, n_test, split

    def __call__(self, ckpt: Checkpoint, manifest: ModelManifest, seed: int) -> float:
        data = generate_dataset(int(seed), self.n_train, self.n_test)
        return evaluate(model_from_checkpoint(ckpt, manifest), data, self.split)


# ---------------------------------------------------------- the demo

@dataclass
class HealDemoResult:
    baseline_acc: float
    compressed_acc: float
    healed_acc: float
    param_reduction_pct: float
    history: list = field(default_factory=list)
    report: object = None
    baseline: ToyModel = None
    healed: ToyModel = None

    def summary(self) -> str:
        return (f"baseline_acc={self.baseline_acc:.4f} compressed_acc={self.compressed_acc:.4f} "
                f"healed_acc={self.healed_acc:.4f} param_reduction_pct={self.param_reduction_pct:.2f}")


def tensorize_model(model: ToyModel, chi, n_cores: int, pattern: str = "hidden[1-9]*",
                    rel_tol: float = 0.0):
    """Compress matching layers through the checkpoint pipeline (float64 cores)."""
    ckpt, manifest = model_to_checkpoint(model)
    plan = CompressionPlan(rules=[Rule(pattern, Tensorize(n_cores, chi, "f64", rel_tol))],
                           default_exclusions=False)
    compressed, report = compress_model(ckpt, manifest, plan)
    return model_from_checkpoint(compressed, manifest), report


def run_heal_demo(seed: int = 42, chi: int = 4, n_cores: int = 3, epochs: int = 3,
                  baseline_epochs: int = 10, n_train: int = 8000, n_test: int = 2000,
                  pattern: str = "hidden[1-9]*", scope: str = "mpo_cores_only",
                  learning_rate: float = 1e-3, sizes=DEFAULT_SIZES) -> HealDemoResult:
    """Train a dense baseline, tensorize it, then heal the compressed model."""
    data = generate_dataset(seed, n_train, n_test)
    history = []

    model = init_model(sizes, seed)
    base_cfg = TrainConfig(epochs=baseline_epochs, learning_rate=1e-3, seed=seed)
    for row in train(model, data, base_cfg):
        history.append({"phase": "baseline", **row})
    baseline_acc = evaluate(model, data)

    compressed, report = tensorize_model(model, chi, n_cores, pattern)
    compressed_acc = evaluate(compressed, data)
    rows = [r for r in report.rows if r.action == "tensorize"]
    before = sum(r.params_before for r in rows)
    after = sum(r.params_after for r in rows)
    reduction = 100.0 * (1.0 - after / before) if before else 0.0
    history.append({"phase": "compressed", "epoch": 0, "train_loss": float("nan"),
                    "test_accuracy": compressed_acc})

    healed = compressed.copy()
    heal_cfg = TrainConfig(epochs=epochs, learning_rate=learning_rate, seed=seed + 1,
                           trainable_scope=scope)
    for row in train(healed, data, heal_cfg):
        history.append({"phase": "heal", **row})
    healed_acc = evaluate(healed, data)
    return HealDemoResult(baseline_acc, compressed_acc, healed_acc, reduction, history,
                          report, model, healed)


def history_csv(history) -> str:
    lines = ["phase,epoch,train_loss,test_accuracy"]
    for row in history:
        lines.append(f"{row.get('phase', 'train')},{row['epoch']},{row['train_loss']!r},"
                     f"{row['test_accuracy']!r}")
    return "\n".join(lines) + "\n"
