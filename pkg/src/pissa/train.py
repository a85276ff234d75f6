"""Toy fine-tuning harness: a two-layer MLP with injected low-rank adapters.

The protocol mirrors the convergence demo: pretrain the MLP on one half of
the classes with full-parameter updates, inject adapters into both linear
layers, freeze the bases, and fine-tune on the other half while recording
loss, adapter gradient norm, and learning rate per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adapter import (AdapterPair, DecomposedLayer, InitStrategy,
                      adapter_gradients, dense_base, lora_init, merge,
                      variant_init)
from .linalg import RandomSource, ShapeError, as_matrix


class DivergenceError(RuntimeError):
    """Training loss became non-finite; carries the offending step index."""

    def __init__(self, step: int):
        super().__init__(f"loss diverged at step {step}")
        self.step = step


@dataclass
class Dataset:
    features: np.ndarray  # N x d
    labels: np.ndarray    # N ints in [0, num_classes)

    def __post_init__(self):
        self.features = as_matrix(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError("feature/label counts differ")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("negative label")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(self.features[mask], self.labels[mask])


@dataclass
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 128
    steps: int = 300
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must be in [0, 1)")


@dataclass
class TrainTrace:
    losses: np.ndarray
    grad_norms: np.ndarray
    lrs: np.ndarray

    def __len__(self) -> int:
        return self.losses.shape[0]


@dataclass
class MlpModel:
    """Two-layer rectifier MLP; layers are plain matrices or adapter layers."""

    layer1: object  # np.ndarray (d x h) or DecomposedLayer
    bias1: np.ndarray
    layer2: object  # np.ndarray (h x c) or DecomposedLayer
    bias2: np.ndarray

    def layer_weight(self, layer) -> np.ndarray:
        return merge(layer) if isinstance(layer, DecomposedLayer) else layer

    @property
    def has_adapters(self) -> bool:
        return isinstance(self.layer1, DecomposedLayer)

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = np.maximum(x @ self.layer_weight(self.layer1) + self.bias1, 0.0)
        return h @ self.layer_weight(self.layer2) + self.bias2


def cross_entropy_with_grad(logits: np.ndarray,
                            labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(b), labels]))
    probs = np.exp(shifted - log_z[:, None])
    probs[np.arange(b), labels] -= 1.0
    return loss, probs / b


def model_forward_backward(model: MlpModel, x: np.ndarray, labels: np.ndarray):
    """Loss plus gradients for every trainable parameter.

    With adapters injected only (A, B) of each layer and the biases receive
    gradients; the frozen bases are never touched. For a plain-matrix model
    (pretraining) the full weight gradients are returned instead.
    """
    x = as_matrix(x)
    w1 = model.layer_weight(model.layer1)
    w2 = model.layer_weight(model.layer2)
    pre = x @ w1 + model.bias1
    h = np.maximum(pre, 0.0)
    logits = h @ w2 + model.bias2
    loss, d_logits = cross_entropy_with_grad(logits, labels)

    grads: dict[str, np.ndarray] = {"bias2": d_logits.sum(axis=0)}
    d_h = d_logits @ w2.T
    d_pre = d_h * (pre > 0)
    grads["bias1"] = d_pre.sum(axis=0)
    if isinstance(model.layer2, DecomposedLayer):
        grads["l2.a"], grads["l2.b"] = adapter_gradients(
            h, d_logits, model.layer2.adapter)
        grads["l1.a"], grads["l1.b"] = adapter_gradients(
            x, d_pre, model.layer1.adapter)
    else:
        grads["l2.w"] = h.T @ d_logits
        grads["l1.w"] = x.T @ d_pre
    return loss, grads


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(state: AdamState, params: dict, grads: dict, lr_t: float,
               cfg: TrainConfig) -> None:
    """One decoupled-weight-decay adaptive-moment update, in place."""
    state.t += 1
    t = state.t
    for key, g in grads.items():
        if key not in params:
            continue
        p = params[key]
        m = state.m.setdefault(key, np.zeros_like(p))
        v = state.v.setdefault(key, np.zeros_like(p))
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * np.square(g)
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        if cfg.weight_decay:
            p *= 1 - lr_t * cfg.weight_decay
        p -= lr_t * m_hat / (np.sqrt(v_hat) + cfg.eps)


def cosine_warmup_lr(step: int, cfg: TrainConfig) -> float:
    """Linear ramp over the warmup steps, then cosine decay to 0 at the end.

    The first ramp tick is nonzero (lr / warmup_steps) so tiny runs do not
    waste step 0.
    """
    if not 0 <= step < cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps})")
    warmup = math.ceil(cfg.warmup_ratio * cfg.steps)
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    span = max(1, cfg.steps - 1 - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def _init_layer(w: np.ndarray, rank: int, strategy: str, rng: RandomSource,
                quant_cfg=None, iters: int = 1) -> DecomposedLayer:
    from .quant import loftq_init, qlora_init, qpissa_init
    if strategy in ("pissa", "principal"):
        return variant_init(w, rank, InitStrategy.PRINCIPAL)
    if strategy in ("lora", "gaussian_zero"):
        return lora_init(w, rank, rng)
    if strategy in ("medium", "minor"):
        return variant_init(w, rank, InitStrategy(strategy))
    if strategy == "qpissa":
        return qpissa_init(w, rank, T=iters, cfg=quant_cfg)
    if strategy == "loftq":
        return loftq_init(w, rank, T=iters, cfg=quant_cfg)
    if strategy == "qlora":
        return qlora_init(w, rank, rng, cfg=quant_cfg)
    raise ValueError(f"unknown init strategy: {strategy}")


def inject_adapters(model: MlpModel, rank: int, strategy: str,
                    rng: RandomSource, quant_cfg=None,
                    iters: int = 1) -> MlpModel:
    """Replace both plain weight matrices with frozen-base adapter layers."""
    if model.has_adapters:
        raise ValueError("model already has adapters injected")
    l1 = _init_layer(model.layer1, rank, strategy, rng.spawn(1), quant_cfg, iters)
    l2 = _init_layer(model.layer2, rank, strategy, rng.spawn(2), quant_cfg, iters)
    return MlpModel(l1, model.bias1.copy(), l2, model.bias2.copy())


def _trainable_params(model: MlpModel) -> dict:
    params = {"bias1": model.bias1, "bias2": model.bias2}
    if model.has_adapters:
        params.update({
            "l1.a": model.layer1.adapter.a, "l1.b": model.layer1.adapter.b,
            "l2.a": model.layer2.adapter.a, "l2.b": model.layer2.adapter.b,
        })
    else:
        params.update({"l1.w": model.layer1, "l2.w": model.layer2})
    return params


def adapter_grad_norm(grads: dict) -> float:
    """Global L2 norm over adapter (or full-weight) gradients, biases excluded."""
    total = 0.0
    for key, g in grads.items():
        if key.startswith("bias"):
            continue
        total += float(np.sum(np.square(g)))
    return math.sqrt(total)


def train_model(model: MlpModel, dataset: Dataset, cfg: TrainConfig) -> TrainTrace:
    gen = RandomSource(cfg.seed).generator()
    params = _trainable_params(model)
    state = AdamState()
    losses = np.empty(cfg.steps)
    norms = np.empty(cfg.steps)
    lrs = np.empty(cfg.steps)
    n = len(dataset)
    for step in range(cfg.steps):
        if cfg.batch_size >= n:
            xb, yb = dataset.features, dataset.labels
        else:
            idx = gen.integers(0, n, size=cfg.batch_size)
            xb, yb = dataset.features[idx], dataset.labels[idx]
        loss, grads = model_forward_backward(model, xb, yb)
        if not math.isfinite(loss):
            raise DivergenceError(step)
        lr_t = cosine_warmup_lr(step, cfg)
        losses[step] = loss
        norms[step] = adapter_grad_norm(grads)
        lrs[step] = lr_t
        adamw_step(state, params, grads, lr_t, cfg)
    return TrainTrace(losses, norms, lrs)


def pretrain_mlp(dataset: Dataset, hidden: int, num_classes: int,
                 cfg: TrainConfig) -> MlpModel:
    """Full-parameter training of a fresh two-layer MLP."""
    d = dataset.features.shape[1]
    rng = RandomSource(cfg.seed)
    w1 = rng.spawn(11).normal((d, hidden)) * math.sqrt(2.0 / d)
    w2 = rng.spawn(12).normal((hidden, num_classes)) * math.sqrt(1.0 / hidden)
    model = MlpModel(w1, np.zeros(hidden), w2, np.zeros(num_classes))
    train_model(model, dataset, cfg)
    return model


def run_finetune(model: MlpModel, dataset: Dataset, cfg: TrainConfig,
                 strategy: str, rank: int = 8, quant_cfg=None,
                 iters: int = 1) -> tuple[TrainTrace, MlpModel]:
    """Inject adapters per strategy into a pretrained model and fine-tune.

    Deterministic given cfg.seed; returns the per-step trace and the tuned
    model. The frozen bases are bit-identical before and after training.
    """
    tuned = inject_adapters(model, rank, strategy, RandomSource(cfg.seed),
                            quant_cfg=quant_cfg, iters=iters)
    trace = train_model(tuned, dataset, cfg)
    return trace, tuned


def gradcheck(model: MlpModel, x: np.ndarray, labels: np.ndarray,
              eps: float = 1e-5) -> float:
    """Max relative error of analytic adapter gradients vs central differences.

    Samples whose hidden pre-activations sit within 1e-3 of the rectifier
    kink are nudged by 1e-3 before differencing.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not model.has_adapters:
        raise ValueError("gradcheck expects an adapter-injected model")
    x = as_matrix(x).copy()
    for _ in range(8):
        pre = x @ model.layer_weight(model.layer1) + model.bias1
        if np.min(np.abs(pre)) >= 1e-3:
            break
        x += 1e-3

    def loss_at() -> float:
        loss, _ = cross_entropy_with_grad(model.logits(x), labels)
        return loss

    _, grads = model_forward_backward(model, x, labels)
    arrays = {
        "l1.a": model.layer1.adapter.a, "l1.b": model.layer1.adapter.b,
        "l2.a": model.layer2.adapter.a, "l2.b": model.layer2.adapter.b,
    }
    worst = 0.0
    for key, arr in arrays.items():
        analytic = grads[key]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ij = it.multi_index
            orig = arr[ij]
            arr[ij] = orig + eps
            up = loss_at()
            arr[ij] = orig - eps
            down = loss_at()
            arr[ij] = orig
            numeric = (up - down) / (2 * eps)
            # Floor keeps difference roundoff (~1e-11 absolute) from
            # dominating when both gradients are essentially zero.
            denom = max(abs(analytic[ij]), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic[ij] - numeric) / denom)
    return worst
