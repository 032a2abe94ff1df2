"""AdamW and the fine-tuning loops for every supported strategy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import LabeledSet
from .models import (
    CausalLMModel,
    ClassifierModel,
    Model,
    attach_lora,
    batch_nll,
    neftune_noise,
    pad_batch,
    quantize_dequantize,
    shifted_targets,
)
from .rng import make_rng

STRATEGIES = ("full", "linear_probe", "lora", "qlora", "neftune")


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(params: list[T.Tensor], grads: list[np.ndarray | None], state: AdamWState) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Parameters with no gradient are treated as having a zero gradient.
    """
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise T.NumericError(f"non-finite gradient for parameter {i} (shape {params[i].shape}) at step {state.t + 1}")
    state.t += 1
    b1, b2, lr, lam = state.beta1, state.beta2, state.lr, state.weight_decay
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if lam:
            update = update + lam * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


@dataclass
class TrainConfig:
    epochs: int = 5
    steps: int | None = None  # overrides epochs when set
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.0
    seed: int = 0
    shuffle: bool = True
    strategy: str = "full"
    lora_rank: int = 8
    lora_scale: float | None = None
    qlora_bits: int = 4
    neftune_alpha: float = 5.0
    eval_every: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class LossTrace:
    train: list[float] = field(default_factory=list)
    heldout: list[tuple[int, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train)


def batch_loss(model: Model, data, idx: np.ndarray, noise=None) -> T.Tensor:
    """Mean training loss of the examples at positions ``idx``."""
    if isinstance(model, ClassifierModel):
        return T.cross_entropy(model.forward(data.x[idx]), data.y[idx])
    batch, lengths = pad_batch([data.seqs[i] for i in idx])
    labels, weights = shifted_targets(batch, lengths)
    logits = model.forward_batch(batch, noise=noise)
    return T.cross_entropy(logits, labels, weights)


def batches(n: int, batch_size: int, seed: int, shuffle: bool = True):
    """Endless stream of index batches; each epoch reshuffles with its own seed."""
    epoch = 0
    while True:
        order = make_rng(seed, "epoch", epoch).permutation(n) if shuffle else np.arange(n)
        for lo in range(0, n, batch_size):
            yield order[lo : lo + batch_size]
        epoch += 1


def prepare_strategy(model: Model, config: TrainConfig) -> Model:
    """Mark the trainable parameters (and add adapters) for ``config.strategy``."""
    s = config.strategy
    if s in ("full", "neftune"):
        model.set_trainable([n for n, _ in model.named_parameters()])
    elif s == "linear_probe":
        heads = ["head.w", "head.b"] if isinstance(model, ClassifierModel) else ["head.w"]
        model.set_trainable(heads)
    elif s in ("lora", "qlora"):
        if s == "qlora":
            for p in model.parameters():
                if p.ndim == 2:
                    p.data = quantize_dequantize(p.data, config.qlora_bits)
        if not model.adapters:
            attach_lora(model, config.lora_rank, config.lora_scale, rng=make_rng(config.seed, "lora"))
        model.set_trainable([n for n, _ in model.named_parameters() if ".lora_" in n])
    return model


def train(model: Model, dataset, config: TrainConfig, rng=None, heldout=None) -> tuple[Model, LossTrace]:
    """Fine-tune a copy of ``model`` on ``dataset`` and return it with its loss trace.

    ``rng`` only seeds Neftune noise; data order derives from ``config.seed``
    so shadow models differ only through their split and seed.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = prepare_strategy(model.clone(), config)
    trace = LossTrace()
    n_steps = config.steps if config.steps is not None else config.epochs * math.ceil(len(dataset) / config.batch_size)
    if n_steps == 0:
        return model, trace
    names_params = model.trainable()
    params = [p for _, p in names_params]
    state = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    noise = None
    if config.strategy == "neftune" and isinstance(model, CausalLMModel):
        noise_rng = rng if rng is not None else make_rng(config.seed, "neftune")
        noise = lambda emb, length: neftune_noise(emb, config.neftune_alpha, noise_rng, length)  # noqa: E731
    stream = batches(len(dataset), config.batch_size, config.seed, config.shuffle)
    for step in range(n_steps):
        idx = next(stream)
        loss = batch_loss(model, dataset, idx, noise)
        T.backward(loss)
        adamw_step(params, [p.grad for p in params], state)
        model.zero_grad()
        trace.train.append(loss.item())
        if heldout is not None and config.eval_every and (step + 1) % config.eval_every == 0:
            trace.heldout.append((step + 1, heldout_utility(model, heldout)))
    return model, trace


def heldout_utility(model: Model, heldout) -> float:
    """Accuracy for a classifier; token-weighted mean NLL for a language model."""
    if isinstance(model, ClassifierModel):
        with T.no_grad():
            logits = model.forward(heldout.x).data
        return float((logits.argmax(axis=1) == heldout.y).mean())
    lengths = np.array([len(s) - 1 for s in heldout.seqs])
    nll = batch_nll(model, heldout.seqs)
    return float((nll * lengths).sum() / lengths.sum())


def accuracy(model: ClassifierModel, data: LabeledSet) -> float:
    return heldout_utility(model, data)
