"""Membership-inference statistics, shadow ensembles and ROC metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .models import CausalLMModel, ClassifierModel, Model, batch_nll
from .optim import TrainConfig, train
from .rng import make_rng

LOGIT_EPS = 1e-7
SIGMA_FLOOR = 1e-3


class MetricError(ValueError):
    pass


@dataclass
class ScoreRecord:
    example_id: int
    statistic: float
    is_member: bool
    attack: str = ""


@dataclass
class GaussianPair:
    mu_in: float
    sigma_in: float
    mu_out: float
    sigma_out: float

    def __post_init__(self):
        self.sigma_in = max(self.sigma_in, SIGMA_FLOOR)
        self.sigma_out = max(self.sigma_out, SIGMA_FLOOR)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


@dataclass
class AttackResult:
    name: str
    records: list[ScoreRecord]
    curve: RocCurve
    auc: float
    tpr_at: dict[float, float] = field(default_factory=dict)

    @classmethod
    def from_records(cls, name: str, records: list[ScoreRecord], fprs=(0.01, 0.001)) -> AttackResult:
        curve = roc_curve(records)
        return cls(name, records, curve, auc(curve), {f: tpr_at_fpr(curve, f) for f in fprs})

    @property
    def tpr_at_1pct(self) -> float:
        return self.tpr_at.get(0.01, tpr_at_fpr(self.curve, 0.01))


# --- metrics ---------------------------------------------------------------


def _split(records: list[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    s = np.array([r.statistic for r in records], dtype=np.float64)
    m = np.array([bool(r.is_member) for r in records])
    return s, m


def roc_curve(records: list[ScoreRecord]) -> RocCurve:
    """Sweep every distinct score as a ``score >= threshold`` rule, highest first.

    Records sharing a score enter the positive side together, so ties show up
    as diagonal segments.
    """
    scores, member = _split(records)
    n_pos, n_neg = int(member.sum()), int((~member).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both members and non-members")
    if not np.all(np.isfinite(scores)):
        raise MetricError("non-finite attack statistic")
    order = np.argsort(-scores, kind="mergesort")
    s, m = scores[order], member[order]
    tp = np.cumsum(m)
    fp = np.cumsum(~m)
    # last index of each distinct score group
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    fpr = np.r_[0.0, fp[last] / n_neg]
    tpr = np.r_[0.0, tp[last] / n_pos]
    thr = np.r_[np.inf, s[last]]
    return RocCurve(fpr, tpr, thr)


def auc(curve: RocCurve) -> float:
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def tpr_at_fpr(curve: RocCurve, fpr_target: float = 0.01) -> float:
    """Best TPR among sweep points whose FPR does not exceed the target."""
    ok = curve.fpr <= fpr_target + 1e-12
    return float(curve.tpr[ok].max())


def pairwise_auc(records: list[ScoreRecord]) -> float:
    """P(member score > non-member score) + P(tie)/2 by direct pair counting."""
    scores, member = _split(records)
    pos, neg = scores[member], scores[~member]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC needs both members and non-members")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def records_from(ids, scores, members, attack: str = "") -> list[ScoreRecord]:
    return [ScoreRecord(int(i), float(s), bool(m), attack) for i, s, m in zip(ids, scores, members)]


def write_records_csv(records: list[ScoreRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["example_id", "statistic", "is_member", "attack_name"])
        for r in records:
            w.writerow([r.example_id, repr(float(r.statistic)), int(r.is_member), r.attack])


def read_records_csv(path) -> list[ScoreRecord]:
    with Path(path).open(newline="") as f:
        return [
            ScoreRecord(int(row["example_id"]), float(row["statistic"]), row["is_member"] == "1", row["attack_name"])
            for row in csv.DictReader(f)
        ]


# --- statistics ------------------------------------------------------------


def logit_confidence(p, eps: float = LOGIT_EPS):
    """``log(p / (1 - p))`` with p clamped to [eps, 1 - eps]."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


def true_class_prob(model: ClassifierModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    with T.no_grad():
        logits = model.forward(x).data.astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p[np.arange(len(y)), y]


def classifier_statistic(model: ClassifierModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return logit_confidence(true_class_prob(model, x, y))


def loss_attack_score(model: Model, examples) -> np.ndarray:
    """Higher means more likely a member: -NLL for an LM, -cross-entropy for a classifier."""
    if isinstance(model, CausalLMModel):
        seqs = examples.seqs if hasattr(examples, "seqs") else list(examples)
        for s in seqs:
            if len(s) < 2:
                raise ValueError("loss attack needs sequences of length >= 2")
        return -batch_nll(model, seqs)
    p = true_class_prob(model, examples.x, examples.y)
    return np.log(np.maximum(p, 1e-300))


def model_statistic(model: Model, examples) -> np.ndarray:
    """The per-example statistic LiRA fits: logit confidence or negative log perplexity."""
    if isinstance(model, ClassifierModel):
        return classifier_statistic(model, examples.x, examples.y)
    return loss_attack_score(model, examples)


def _logpdf(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * math.log(2 * math.pi)


def fit_gaussians(phi: np.ndarray, mask: np.ndarray) -> list[GaussianPair]:
    """Per-example IN/OUT Gaussians from a K x N statistic matrix.

    A side with fewer than two samples borrows the pooled standard deviation
    of that side across all examples (and the pooled mean when empty).
    """
    phi = np.asarray(phi, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    pooled = {}
    for side, sel in (("in", mask), ("out", ~mask)):
        vals = phi[sel]
        centered = phi - np.where(sel, phi, 0).sum(0) / np.maximum(sel.sum(0), 1)
        cnt = sel.sum(0)
        usable = cnt >= 2
        resid = centered[sel & usable[None, :]]
        dof = int((cnt[usable] - 1).sum())
        pooled[side] = (
            float(vals.mean()) if vals.size else 0.0,
            float(math.sqrt((resid**2).sum() / dof)) if dof > 0 else 1.0,
        )
    pairs = []
    for j in range(phi.shape[1]):
        stats = []
        for side, sel in (("in", mask[:, j]), ("out", ~mask[:, j])):
            vals = phi[sel, j]
            if vals.size >= 2:
                stats += [vals.mean(), vals.std(ddof=1)]
            elif vals.size == 1:
                stats += [vals[0], pooled[side][1]]
            else:
                stats += [pooled[side][0], pooled[side][1]]
        pairs.append(GaussianPair(*map(float, stats)))
    return pairs


def lira_from_gaussians(phi_victim, pair: GaussianPair) -> float:
    return float(_logpdf(phi_victim, pair.mu_in, pair.sigma_in) - _logpdf(phi_victim, pair.mu_out, pair.sigma_out))


@dataclass
class ShadowEnsemble:
    models: list[Model]
    masks: np.ndarray  # K x N, True where the example was in that shadow's training half
    config: TrainConfig
    example_ids: np.ndarray

    @property
    def k(self) -> int:
        return len(self.models)

    def statistics(self, examples) -> np.ndarray:
        """K x len(examples) matrix of shadow statistics."""
        return np.stack([model_statistic(m, examples) for m in self.models])

    def masks_for(self, ids) -> np.ndarray:
        pos = {int(e): i for i, e in enumerate(self.example_ids)}
        return self.masks[:, [pos[int(i)] for i in ids]]


def shadow_masks(n: int, k: int, fraction: float, seed, max_tries: int = 200) -> np.ndarray:
    """Independent random subsets of size floor(fraction*n), resampled until
    every example is in at least one and out of at least one subset."""
    size = int(math.floor(fraction * n))
    masks = None
    for attempt in range(max_tries):
        rng = make_rng(seed, "masks", attempt)
        masks = np.zeros((k, n), dtype=bool)
        for s in range(k):
            masks[s, rng.choice(n, size=size, replace=False)] = True
        cnt = masks.sum(0)
        if ((cnt >= 1) & (cnt <= k - 1)).all():
            return masks
    if k >= 16:
        raise RuntimeError(f"could not cover all {n} examples with {k} shadows")
    return masks


def train_shadows(base: Model, universal, k: int, config: TrainConfig, seed, fraction: float = 0.5, fit_set=None) -> ShadowEnsemble:
    """Train ``k`` shadows from ``base`` on random halves of ``universal``.

    ``fit_set`` maps a subset of the universal data to the actual fine-tuning
    set (the LM pipeline replicates canaries into a background corpus).
    """
    if k < 2:
        raise ValueError("need at least 2 shadow models")
    masks = shadow_masks(len(universal), k, fraction, seed)
    models = []
    for s in range(k):
        subset = universal.subset(np.flatnonzero(masks[s]))
        data = fit_set(subset, s) if fit_set else subset
        cfg = TrainConfig(**{**config.__dict__, "seed": int(make_rng(seed, "shadow", s).integers(2**31))})
        m, _ = train(base, data, cfg)
        models.append(m)
    return ShadowEnsemble(models, masks, config, np.asarray(universal.ids))


def lira_scores(ensemble: ShadowEnsemble, victim: Model, examples) -> np.ndarray:
    """Online LiRA log-likelihood ratio for each example (higher = member)."""
    phi = ensemble.statistics(examples)
    mask = ensemble.masks_for(examples.ids)
    pairs = fit_gaussians(phi, mask)
    phi_v = model_statistic(victim, examples)
    return np.array([lira_from_gaussians(v, p) for v, p in zip(phi_v, pairs)])


def lira_score(example, ensemble: ShadowEnsemble, victim: Model) -> float:
    return float(lira_scores(ensemble, victim, example)[0])
