"""Membership-inference games against a (possibly poisoned) pre-trained model.

Threat model 1 fine-tunes the clean model; threat model 2 lets the adversary
poison the weights first. Either way the victim fine-tunes on a fresh random
split and the adversary scores targets through the inference channel.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .channel import Channel, ChannelConfig
from .mia import AttackResult, ShadowEnsemble, fit_gaussians, lira_from_gaussians, records_from, train_shadows
from .models import Model
from .optim import TrainConfig, heldout_utility, train
from .poison import PoisonConfig, PoisonReport, poison_train
from .rng import make_rng


class GameError(ValueError):
    pass


def sample_train_split(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted positions of a uniform subset of size floor(fraction * n)."""
    if not 0.0 < fraction < 1.0:
        raise GameError(f"fraction must be in (0, 1), got {fraction}")
    return np.sort(rng.choice(n, size=int(math.floor(fraction * n)), replace=False))


def balanced_train_split(n: int, target_pos, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform split drawn separately inside and outside the target positions,
    so exactly floor(fraction * |targets|) targets are members."""
    target_pos = np.asarray(target_pos)
    others = np.setdiff1d(np.arange(n), target_pos)
    n_in = int(math.floor(fraction * len(target_pos)))
    n_total = int(math.floor(fraction * n))
    t = target_pos[sample_train_split(len(target_pos), fraction, rng)] if n_in else target_pos[:0]
    o = others[rng.choice(len(others), size=max(n_total - n_in, 0), replace=False)]
    return np.sort(np.concatenate([t, o]))


@dataclass
class GameSpec:
    universal: object  # LabeledSet or SequenceSet of candidate records
    target_ids: np.ndarray
    threat_model: int = 2
    trainer: TrainConfig = field(default_factory=TrainConfig)
    poison: PoisonConfig | None = None
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    aux: object | None = None  # explicit clean anchor set; else sampled from universal
    aux_fraction: float = 0.1
    train_fraction: float = 0.5
    trials: int = 1000
    shadows: int = 16
    attack: str = "lira"  # "lira" | "loss"
    head_sampling: str = "intersection"  # "intersection" | "literal"
    fpr: float = 0.01
    seed: int = 0
    heldout: object | None = None
    fit_set: Callable | None = None  # maps a universal subset to the actual fine-tuning data

    def __post_init__(self):
        self.target_ids = np.asarray(self.target_ids, dtype=np.int64)
        if self.threat_model not in (1, 2):
            raise GameError(f"threat_model must be 1 or 2, got {self.threat_model}")
        if self.threat_model == 2 and self.poison is None:
            self.poison = PoisonConfig()
        if self.head_sampling not in ("intersection", "literal"):
            raise GameError(f"unknown head_sampling {self.head_sampling!r}")
        if self.attack not in ("lira", "loss"):
            raise GameError(f"unknown attack {self.attack!r}")
        if not 0.0 < self.aux_fraction < 1.0:
            raise GameError("aux_fraction must be in (0, 1)")
        if len(set(self.target_ids.tolist()) - set(np.asarray(self.universal.ids).tolist())):
            raise GameError("target set is not a subset of the universal dataset")
        if self.aux is not None and set(np.asarray(self.aux.ids).tolist()) & set(self.target_ids.tolist()):
            raise GameError("auxiliary set overlaps the target set")


@dataclass
class Trial:
    coin: str  # "head" | "tail"
    example_id: int
    score: float
    guess: str
    is_member: bool

    @property
    def correct(self) -> bool:
        return self.guess == self.coin


@dataclass
class GameTranscript:
    trials: list[Trial]
    threshold: float

    @property
    def accuracy(self) -> float:
        return float(np.mean([t.correct for t in self.trials])) if self.trials else float("nan")

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["trial", "coin", "example_id", "score", "guess", "correct"])
            for i, t in enumerate(self.trials):
                w.writerow([i, t.coin, t.example_id, repr(t.score), t.guess, int(t.correct)])


@dataclass
class GameOutcome:
    transcript: GameTranscript
    result: AttackResult
    pretrained: Model  # the model the victim started from (poisoned under threat model 2)
    victim: Model
    member_ids: np.ndarray
    poison_report: PoisonReport | None = None
    ensemble: ShadowEnsemble | None = None
    utility_pretrained: float = float("nan")
    utility_victim: float = float("nan")
    scores: dict = field(default_factory=dict)  # example id -> attack score
    aux_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __iter__(self):
        yield self.transcript
        yield self.result


def aux_set(spec: GameSpec, rng=None):
    """The poisoning anchor set: explicit, or a random aux_fraction of the non-targets."""
    rng = rng if rng is not None else make_rng(spec.seed, "aux")
    if spec.aux is not None:
        return spec.aux
    ids = np.asarray(spec.universal.ids)
    pool = np.flatnonzero(~np.isin(ids, spec.target_ids))
    size = int(math.floor(spec.aux_fraction * len(ids)))
    if size > len(pool):
        raise GameError("universal set too small for the requested auxiliary fraction")
    return spec.universal.subset(np.sort(rng.choice(pool, size=size, replace=False)))


def score_examples(spec: GameSpec, victim: Model, ensemble: ShadowEnsemble | None, examples) -> np.ndarray:
    """Adversary scores for ``examples``, querying the victim only through the channel."""
    phi_v = Channel(victim, spec.channel).statistics(examples)
    if spec.attack == "loss":
        return phi_v
    phi = ensemble.statistics(examples)
    pairs = fit_gaussians(phi, ensemble.masks_for(examples.ids))
    return np.array([lira_from_gaussians(v, p) for v, p in zip(phi_v, pairs)])


def _threshold(scores: np.ndarray, fpr: float) -> float:
    """Smallest threshold whose non-member false-positive rate is at most ``fpr``."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    k = int(math.floor(fpr * len(s)))
    return float(np.nextafter(s[len(s) - 1 - k], np.inf)) if k < len(s) else float("-inf")


def run_trials(scores: dict, member_targets, nonmember_targets, all_targets, n_trials: int, threshold: float,
               rng: np.random.Generator, head_sampling: str = "intersection") -> GameTranscript:
    heads_pool = np.asarray(member_targets if head_sampling == "intersection" else all_targets)
    tails_pool = np.asarray(nonmember_targets)
    if len(heads_pool) == 0 or len(tails_pool) == 0:
        raise GameError("empty member or non-member target pool")
    members = set(np.asarray(member_targets).tolist())
    coins = rng.integers(0, 2, size=n_trials)
    trials = []
    for c in coins:
        coin = "head" if c else "tail"
        eid = int(rng.choice(heads_pool if c else tails_pool))
        s = float(scores[eid])
        trials.append(Trial(coin, eid, s, "head" if s >= threshold else "tail", eid in members))
    n_heads = int(coins.sum())
    if abs(n_heads - n_trials / 2) > 3 * math.sqrt(n_trials / 4):
        warnings.warn(f"{n_heads} heads in {n_trials} trials is outside 3 sigma", stacklevel=2)
    return GameTranscript(trials, threshold)


def victim_split(spec: GameSpec) -> np.ndarray:
    """Positions (in the universal set) of the victim's fine-tuning members."""
    uni = spec.universal
    return balanced_train_split(len(uni), uni.positions(spec.target_ids), spec.train_fraction, make_rng(spec.seed, "victim-split"))


def victim_data(spec: GameSpec, train_pos):
    data = spec.universal.subset(train_pos)
    return spec.fit_set(data, "victim") if spec.fit_set is not None else data


def victim_config(spec: GameSpec) -> TrainConfig:
    return TrainConfig(**{**spec.trainer.__dict__, "seed": int(make_rng(spec.seed, "victim").integers(2**31))})


def run_game(spec: GameSpec, pretrained: Model) -> GameOutcome:
    """Play one game from ``pretrained``.

    Threat model 2 poisons first; the adversary then trains shadows from the
    model it released, the victim fine-tunes on a fresh split, and every
    target is scored once. Trials resample those scores under fair coins.
    """
    rng = make_rng(spec.seed, "game")
    uni = spec.universal
    ids = np.asarray(uni.ids)
    target_pos = uni.positions(spec.target_ids)
    report = None
    model = pretrained
    aux = None
    if spec.threat_model == 2:
        aux = aux_set(spec)
        model, report = poison_train(pretrained, aux, uni.subset(target_pos), spec.poison, heldout=spec.heldout)

    train_pos = victim_split(spec)
    member = np.zeros(len(uni), dtype=bool)
    member[train_pos] = True
    victim, _ = train(model, victim_data(spec, train_pos), victim_config(spec))

    ensemble = None
    if spec.attack == "lira":
        ensemble = train_shadows(model, uni, spec.shadows, spec.trainer, (spec.seed, "shadows"), fit_set=spec.fit_set)

    targets = uni.subset(target_pos)
    tscores = score_examples(spec, victim, ensemble, targets)
    scores = dict(zip(ids[target_pos].tolist(), tscores.tolist()))
    result = AttackResult.from_records("target", records_from(ids[target_pos], tscores, member[target_pos], spec.attack))

    # threshold from non-members outside the target set, or the target non-members if there are none
    calib = np.flatnonzero(~member & ~np.isin(ids, spec.target_ids))
    if len(calib):
        calib_scores = score_examples(spec, victim, ensemble, uni.subset(calib))
    else:
        calib_scores = tscores[~member[target_pos]]
    tau = _threshold(calib_scores, spec.fpr)
    t_ids = ids[target_pos]
    transcript = run_trials(scores, t_ids[member[target_pos]], t_ids[~member[target_pos]], t_ids, spec.trials, tau,
                            make_rng(spec.seed, "coins"), spec.head_sampling)
    out = GameOutcome(transcript, result, model, victim, ids[member], report, ensemble, scores=scores)
    if aux is not None:
        out.aux_ids = np.asarray(aux.ids, dtype=np.int64)
    if spec.heldout is not None:
        out.utility_pretrained = heldout_utility(model, spec.heldout)
        out.utility_victim = heldout_utility(victim, spec.heldout)
    return out


def evaluate_non_target_leakage(spec: GameSpec, outcome: GameOutcome, pool_ids) -> AttackResult:
    """Score same-distribution examples that played no part in poisoning."""
    pool_ids = np.asarray(pool_ids, dtype=np.int64)
    if set(pool_ids.tolist()) & set(spec.target_ids.tolist()):
        raise GameError("non-target pool overlaps the target set")
    pool = spec.universal.subset(spec.universal.positions(pool_ids))
    s = score_examples(spec, outcome.victim, outcome.ensemble, pool)
    member = np.isin(pool_ids, outcome.member_ids)
    return AttackResult.from_records("non_target", records_from(pool_ids, s, member, spec.attack))


def non_target_pool(spec: GameSpec, outcome: GameOutcome, size: int, seed=0) -> np.ndarray:
    """Random universal ids outside the target set and the poisoning anchor set."""
    ids = np.asarray(spec.universal.ids, dtype=np.int64)
    cand = ids[~np.isin(ids, spec.target_ids) & ~np.isin(ids, outcome.aux_ids)]
    if len(cand) == 0:
        raise GameError("no non-target examples available")
    return np.sort(make_rng(seed, "non-target").choice(cand, size=min(size, len(cand)), replace=False))
