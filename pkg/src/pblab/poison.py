"""The adversary's poisoning step: push target losses away from (or towards)
zero while an auxiliary clean set anchors general utility."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import ClassifierModel, Model, pad_batch, shifted_targets
from .optim import AdamWState, adamw_step, batches, heldout_utility


class PoisonError(ValueError):
    pass


@dataclass
class PoisonConfig:
    alpha: float = 0.5
    direction: str = "maximize"  # "maximize" | "minimize"
    steps: int = 500
    lr: float = 1e-3
    aux_batch: int = 32
    target_batch: int = 32
    loss_cap: float | None = None  # per-example ceiling on the maximised loss; None means 3 ln(classes)
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise PoisonError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.direction not in ("maximize", "minimize"):
            raise PoisonError(f"direction must be maximize or minimize, got {self.direction!r}")
        if self.steps < 0:
            raise PoisonError("steps must be >= 0")
        if self.loss_cap is not None and self.loss_cap <= 0:
            raise PoisonError("loss_cap must be positive")


def default_loss_cap(model: Model) -> float:
    """Three times the loss of a uniform prediction."""
    n = model.config.n_classes if isinstance(model, ClassifierModel) else model.config.vocab
    return 3.0 * math.log(n)


@dataclass
class PoisonReport:
    utility_before: float
    utility_after: float
    target_loss_before: float
    target_loss_after: float
    steps: int
    kind: str = "classifier"  # utility is accuracy for "classifier", mean NLL for "lm"

    @property
    def utility_delta(self) -> float:
        return self.utility_after - self.utility_before

    @property
    def target_loss_delta(self) -> float:
        return self.target_loss_after - self.target_loss_before

    def stealthy(self, rel_acc: float = 0.05, abs_nll: float = 0.05) -> bool:
        """Accuracy within ``rel_acc`` relative, or NLL within ``abs_nll`` absolute, of the clean model."""
        if self.kind == "lm":
            return self.utility_after <= self.utility_before + abs_nll
        return self.utility_after >= self.utility_before * (1.0 - rel_acc)


def combined_poison_loss(aux_loss, target_loss, alpha: float, direction: str):
    """alpha*aux -/+ (1-alpha)*target for the maximize/minimize variants."""
    if not 0.0 <= alpha <= 1.0:
        raise PoisonError(f"alpha must be in [0, 1], got {alpha}")
    if direction not in ("maximize", "minimize"):
        raise PoisonError(f"unknown direction {direction!r}")
    sign = -1.0 if direction == "maximize" else 1.0
    if isinstance(aux_loss, T.Tensor) or isinstance(target_loss, T.Tensor):
        return T.add(T.mul(T.as_tensor(aux_loss), alpha), T.mul(T.as_tensor(target_loss), sign * (1.0 - alpha)))
    for v in (aux_loss, target_loss):
        if not np.isfinite(v):
            raise PoisonError("non-finite loss")
    return alpha * aux_loss + sign * (1.0 - alpha) * target_loss


def _per_example_losses(model: Model, data, idx) -> tuple[T.Tensor, np.ndarray, np.ndarray, np.ndarray]:
    """Logits plus labels/weights for a batch, and each example's loss."""
    if isinstance(model, ClassifierModel):
        logits = model.forward(data.x[idx])
        labels = data.y[idx]
        weights = np.ones(len(idx), dtype=np.float32)
        z = logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        per = lse - z[np.arange(len(idx)), labels]
        return logits, labels, weights, per
    batch, lengths = pad_batch([data.seqs[i] for i in idx])
    labels, weights = shifted_targets(batch, lengths)
    logits = model.forward_batch(batch)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    tok = (np.log(np.exp(z).sum(axis=1)) - z[np.arange(labels.size), labels]) * weights
    per = tok.reshape(len(idx), -1).sum(1) / (lengths - 1)
    return logits, labels, weights, per


def _mean_loss(model: Model, data, idx) -> T.Tensor:
    logits, labels, weights, _ = _per_example_losses(model, data, idx)
    return T.cross_entropy(logits, labels, weights)


def _capped_loss(model: Model, data, idx, cap: float) -> T.Tensor:
    """Batch mean loss where examples already above ``cap`` contribute a constant."""
    logits, labels, weights, per = _per_example_losses(model, data, idx)
    keep = per < cap
    if not keep.any():
        return T.Tensor(np.float32(cap))
    if isinstance(model, ClassifierModel):
        w = keep.astype(np.float32)
    else:
        w = (weights.reshape(len(idx), -1) * keep[:, None]).reshape(-1)
    frac = keep.mean()
    live = T.mul(T.cross_entropy(logits, labels, w), float(frac))
    return T.add(live, float((1 - frac) * cap))


def mean_loss(model: Model, data) -> float:
    with T.no_grad():
        per = []
        for lo in range(0, len(data), 256):
            idx = np.arange(lo, min(lo + 256, len(data)))
            per.append(_per_example_losses(model, data, idx)[3])
    return float(np.concatenate(per).mean())


def _kind(model: Model) -> str:
    return "classifier" if isinstance(model, ClassifierModel) else "lm"


def _check_disjoint(aux, target) -> None:
    overlap = set(np.asarray(aux.ids).tolist()) & set(np.asarray(target.ids).tolist())
    if overlap:
        raise PoisonError(f"auxiliary and target sets overlap on {len(overlap)} ids")


def poison_train(model: Model, aux, target, config: PoisonConfig, heldout=None) -> tuple[Model, PoisonReport]:
    """Return a poisoned copy of ``model`` and a before/after report."""
    _check_disjoint(aux, target)
    model = model.clone()
    model.set_trainable([n for n, _ in model.named_parameters()])
    util_ref = heldout if heldout is not None else aux
    u0, l0 = heldout_utility(model, util_ref), mean_loss(model, target)
    if config.steps == 0:
        return model, PoisonReport(u0, u0, l0, l0, 0, _kind(model))
    params = model.parameters()
    state = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    cap = config.loss_cap if config.loss_cap is not None else default_loss_cap(model)
    aux_stream = batches(len(aux), config.aux_batch, (config.seed, "aux"))
    tgt_stream = batches(len(target), config.target_batch, (config.seed, "target"))
    for _ in range(config.steps):
        aux_loss = _mean_loss(model, aux, next(aux_stream))
        if config.direction == "maximize":
            tgt_loss = _capped_loss(model, target, next(tgt_stream), cap)
        else:
            tgt_loss = _mean_loss(model, target, next(tgt_stream))
        loss = combined_poison_loss(aux_loss, tgt_loss, config.alpha, config.direction)
        T.backward(loss)
        adamw_step(params, [p.grad for p in params], state)
        model.zero_grad()
    return model, PoisonReport(u0, heldout_utility(model, util_ref), l0, mean_loss(model, target), config.steps, _kind(model))


def stealth_report(clean: Model, poisoned: Model, heldout, target=None) -> PoisonReport:
    """Paired utilities (and target losses, when given) of two same-shape models."""
    if type(clean) is not type(poisoned) or clean.config != poisoned.config:
        raise PoisonError("models differ in architecture")
    for n, p in clean.params.items():
        if poisoned.params[n].shape != p.shape:
            raise PoisonError(f"shape mismatch in {n}")
    l0 = mean_loss(clean, target) if target is not None else 0.0
    l1 = mean_loss(poisoned, target) if target is not None else 0.0
    return PoisonReport(heldout_utility(clean, heldout), heldout_utility(poisoned, heldout), l0, l1, 0, _kind(clean))
