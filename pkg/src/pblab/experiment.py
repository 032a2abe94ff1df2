"""End-to-end runs: pretrain, then per seed play the clean and poisoned games
and collect the metrics into a :class:`ResultsBundle`."""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import (
    CanarySet,
    CorpusSpec,
    LabeledSet,
    MarkovSource,
    SequenceSet,
    SyntheticClassificationSpec,
    class_means,
    gen_classification_data,
    generate_canaries,
    inject_canaries,
    sample_mixture,
)
from .game import GameSpec, evaluate_non_target_leakage, non_target_pool, run_game
from .mia import write_records_csv
from .models import Model, build_model, class_prototypes, init_zero_shot_head
from .optim import TrainConfig, train
from .probes import NeuronProbeReport, ParamProbeReport, run_neuron_probe, run_param_probe
from .rng import make_rng

CANARY_ID_BASE = 10**6
AUX_ID_BASE = 2 * 10**6
PRETRAIN_ID_BASE = 10**7


class StageError(RuntimeError):
    def __init__(self, stage: str, seed, cause: BaseException):
        super().__init__(f"stage {stage!r} failed for seed {seed}: {type(cause).__name__}: {cause}")
        self.stage, self.seed, self.cause = stage, seed, cause


class _stage:
    """Context manager that re-raises failures tagged with stage and seed."""

    def __init__(self, name: str, seed):
        self.name, self.seed = name, seed

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, self.seed, exc) from exc
        return False


# --- data -----------------------------------------------------------------------


def _class_spec(cfg: ExperimentConfig) -> SyntheticClassificationSpec:
    d = cfg.data
    return SyntheticClassificationSpec(n_classes=d.n_classes, dim=d.dim, noise=d.noise, n_universal=d.n_universal, n_heldout=d.n_heldout)


def class_means_for(cfg: ExperimentConfig) -> np.ndarray:
    return class_means(_class_spec(cfg), make_rng("means"))


def markov_source(cfg: ExperimentConfig) -> MarkovSource:
    return MarkovSource.create(CorpusSpec(vocab=cfg.model.vocab, seq_len=cfg.data.seq_len), make_rng("markov"))


def text_corpus(source: MarkovSource, n: int, length: int, id_base: int, *key) -> SequenceSet:
    arr = source.sample(n, length, make_rng(*key))
    return SequenceSet(list(arr), np.arange(n, dtype=np.int64) + id_base)


def pretrain_data(cfg: ExperimentConfig):
    if cfg.kind == "classifier":
        return sample_mixture(class_means_for(cfg), cfg.data.noise, cfg.data.pretrain_size, make_rng("pretrain-data"), PRETRAIN_ID_BASE)
    return text_corpus(markov_source(cfg), cfg.data.pretrain_seqs, cfg.data.seq_len, PRETRAIN_ID_BASE, "pretrain-data")


def pretrain_model(cfg: ExperimentConfig) -> Model:
    """The clean pre-trained model every game starts from."""
    with _stage("pretrain", "-"):
        data = pretrain_data(cfg)
        model, _ = train(build_model(cfg.model), data, cfg.pretrain)
        if cfg.kind == "classifier":
            k = cfg.data.prototype_size
            init_zero_shot_head(model, class_prototypes(model, data.x[:k], data.y[:k]))
        return model


@dataclass
class SeedData:
    universal: LabeledSet | SequenceSet
    heldout: LabeledSet | SequenceSet
    target_ids: np.ndarray
    aux: SequenceSet | None = None
    background: SequenceSet | None = None
    reps: int = 10
    seed: int = 0

    def fit_set(self, subset, tag):
        """LM runs replicate the chosen canaries into the background text."""
        rng = make_rng(self.seed, "inject", str(tag))
        return inject_canaries(self.background, subset.seqs, self.reps, rng, canary_ids=subset.ids)


def seed_data(cfg: ExperimentConfig, seed: int, n_targets: int | None = None) -> SeedData:
    n_targets = cfg.game.targets if n_targets is None else n_targets
    if cfg.kind == "classifier":
        universal, heldout = gen_classification_data(_class_spec(cfg), make_rng(seed, "data"), class_means_for(cfg))
        targets = np.sort(make_rng(seed, "targets").choice(universal.ids, size=n_targets, replace=False))
        return SeedData(universal, heldout, targets, seed=seed)
    d = cfg.data
    records = generate_canaries(CanarySet(n=d.canaries, reps=d.reps, pool_size=d.pool_size), make_rng(seed, "canaries"))
    universal = SequenceSet([r.tokens for r in records], np.arange(d.canaries, dtype=np.int64) + CANARY_ID_BASE)
    targets = np.sort(make_rng(seed, "targets").choice(universal.ids, size=n_targets, replace=False))
    src = markov_source(cfg)
    heldout = text_corpus(src, d.test_seqs, d.seq_len, 0, "test")
    aux = text_corpus(src, d.aux_seqs, d.seq_len, AUX_ID_BASE, seed, "aux")
    background = text_corpus(src, d.background_seqs, d.seq_len, 0, seed, "background")
    return SeedData(universal, heldout, targets, aux, background, d.reps, seed)


def game_spec(cfg: ExperimentConfig, sd: SeedData, threat_model: int, poison=None) -> GameSpec:
    g = cfg.game
    return GameSpec(
        universal=sd.universal,
        target_ids=sd.target_ids,
        threat_model=threat_model,
        trainer=cfg.trainer,
        poison=poison if poison is not None else cfg.poison,
        channel=cfg.channel,
        aux=sd.aux,
        aux_fraction=g.aux_fraction,
        train_fraction=g.train_fraction,
        trials=g.trials,
        shadows=g.shadows,
        attack=g.attack,
        head_sampling=g.head_sampling,
        fpr=g.fpr,
        seed=sd.seed,
        heldout=sd.heldout,
        fit_set=sd.fit_set if cfg.kind == "lm" else None,
    )


# --- results --------------------------------------------------------------------

METRICS = ("tpr_at_1pct", "auc", "utility_before", "utility_after")


@dataclass
class ArmResult:
    seed: int
    arm: str  # "clean" | "poisoned"
    tpr_at_1pct: float
    tpr_at_01pct: float
    auc: float
    utility_before: float  # heldout utility of the model the victim fine-tuned from
    utility_after: float  # heldout utility of the fine-tuned victim
    game_accuracy: float
    non_target_auc: float = float("nan")
    non_target_tpr: float = float("nan")
    target_loss_before: float = float("nan")
    target_loss_after: float = float("nan")
    roc: list = field(default_factory=list)  # [fpr, tpr] pairs

    def to_dict(self) -> dict:
        return asdict(self)


def mean_stderr(values) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt(n)); the error is 0 for one value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class ResultsBundle:
    config: dict
    config_hash: str
    runs: list[ArmResult]
    timestamp: str = ""

    @property
    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.runs})

    @property
    def arms(self) -> list[str]:
        return [a for a in ("clean", "poisoned") if any(r.arm == a for r in self.runs)]

    def values(self, arm: str, metric: str) -> np.ndarray:
        rows = sorted((r for r in self.runs if r.arm == arm), key=lambda r: r.seed)
        return np.array([getattr(r, metric) for r in rows], dtype=np.float64)

    def summary(self) -> dict:
        names = METRICS + ("non_target_auc", "non_target_tpr", "tpr_at_01pct", "game_accuracy")
        return {arm: {m: mean_stderr(self.values(arm, m)) for m in names} for arm in self.arms}

    def to_json(self) -> str:
        return json.dumps(
            {"config": self.config, "config_hash": self.config_hash, "timestamp": self.timestamp,
             "runs": [r.to_dict() for r in self.runs]},
            indent=1, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> ResultsBundle:
        d = json.loads(text)
        return cls(d["config"], d["config_hash"], [ArmResult(**r) for r in d["runs"]], d.get("timestamp", ""))

    def check_config(self, cfg: ExperimentConfig) -> bool:
        return self.config_hash == cfg.hash()


# --- running --------------------------------------------------------------------


def run_arm(cfg: ExperimentConfig, sd: SeedData, pretrained: Model, arm: str, out_dir: Path | None = None, poison=None) -> ArmResult:
    spec = game_spec(cfg, sd, 2 if arm == "poisoned" else 1, poison)
    with _stage(f"game:{arm}", sd.seed):
        outcome = run_game(spec, pretrained)
    res = outcome.result
    row = ArmResult(
        seed=sd.seed,
        arm=arm,
        tpr_at_1pct=res.tpr_at.get(0.01, res.tpr_at_1pct),
        tpr_at_01pct=res.tpr_at.get(0.001, float("nan")),
        auc=res.auc,
        utility_before=outcome.utility_pretrained,
        utility_after=outcome.utility_victim,
        game_accuracy=outcome.transcript.accuracy,
        roc=[[float(f), float(t)] for f, t in zip(res.curve.fpr, res.curve.tpr)],
    )
    if outcome.poison_report is not None:
        row.target_loss_before = outcome.poison_report.target_loss_before
        row.target_loss_after = outcome.poison_report.target_loss_after
    if cfg.game.non_target:
        with _stage(f"non-target:{arm}", sd.seed):
            pool = non_target_pool(spec, outcome, cfg.game.non_target, seed=sd.seed)
            nt = evaluate_non_target_leakage(spec, outcome, pool)
        row.non_target_auc, row.non_target_tpr = nt.auc, nt.tpr_at_1pct
    if out_dir is not None:
        d = Path(out_dir) / f"seed{sd.seed}" / arm
        outcome.transcript.write_csv(d / "transcript.csv")
        write_records_csv(res.records, d / "scores.csv")
    return row


def run_seed(cfg: ExperimentConfig, seed: int, pretrained: Model, out_dir: Path | None = None) -> list[ArmResult]:
    with _stage("data", seed):
        sd = seed_data(cfg, seed)
    arms = ["clean"] + (["poisoned"] if cfg.poison is not None else [])
    return [run_arm(cfg, sd, pretrained, arm, out_dir) for arm in arms]


def _seed_worker(args):
    return run_seed(*args)


def run_experiment(cfg: ExperimentConfig, pretrained: Model | None = None, threads: int = 1, write: bool = False) -> ResultsBundle:
    """Every seed of ``cfg``; seeds fan out over ``threads`` worker processes."""
    if not cfg.seeds:
        raise ValueError("config has no seeds")
    pretrained = pretrained if pretrained is not None else pretrain_model(cfg)
    out_dir = cfg.out_dir if write else None
    if threads > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_seed_worker, [(cfg, s, pretrained, out_dir) for s in cfg.seeds]))
    else:
        parts = [run_seed(cfg, s, pretrained, out_dir) for s in cfg.seeds]
    runs = [r for part in parts for r in part]
    bundle = ResultsBundle(cfg.to_dict(), cfg.hash(), runs, time.strftime("%Y-%m-%dT%H:%M:%S"))
    if write:
        emit_report(bundle, ("csv", "json", "markdown"), out_dir)
    return bundle


# --- alternative probes ---------------------------------------------------------


def param_probe(cfg: ExperimentConfig, pretrained: Model, seed: int) -> ParamProbeReport:
    """Parameter-change probe: one canary per replication seed as the secret."""
    p = cfg.probes
    src = markov_source(cfg)
    reference = text_corpus(src, p.reference_seqs, cfg.data.seq_len, 0, seed, "probe-reference")
    secrets = seed_data(cfg, seed).universal.subset(np.arange(p.seeds))
    calib = text_corpus(src, p.calib_runs, cfg.data.seq_len, 5 * 10**6, seed, "probe-calib")
    tc = TrainConfig(steps=p.finetune_steps, lr=p.finetune_lr, batch_size=8)
    with _stage("probe-params", seed):
        return run_param_probe(pretrained, reference, secrets, calib, tc, n_calib=p.calib_runs,
                               fixed_randomness=p.fixed_randomness, percentile=p.percentile)


def neuron_probe(cfg: ExperimentConfig, pretrained: Model, seed: int, layer: int | None = None) -> NeuronProbeReport:
    """Fine-tune on every canary, then attribute, amplify and measure exposure for the first one."""
    p, d = cfg.probes, cfg.data
    sd = seed_data(cfg, seed)
    records = generate_canaries(CanarySet(n=d.canaries, reps=d.reps, pool_size=d.pool_size), make_rng(seed, "canaries"))
    with _stage("probe-neurons", seed):
        victim, _ = train(pretrained, sd.fit_set(sd.universal, "probe"), cfg.trainer)
        layer = cfg.model.layers - 1 if layer is None else layer
        return run_neuron_probe(victim, records[0], layer, p.ig_steps, p.t_share, p.amplify_factor,
                                p.exposure_candidates, make_rng(seed, "exposure"))


# --- reporting ------------------------------------------------------------------


def _fmt(mean: float, err: float) -> str:
    return f"{mean:.3f} ± {err:.3f}"


def markdown_table(bundle: ResultsBundle) -> str:
    kind = bundle.config.get("kind", "classifier")
    util = "ACC" if kind == "classifier" else "Loss"
    header = ["Setting", "Arm", "TPR@1%FPR", "AUC", f"{util} Before", f"{util} After"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    summ = bundle.summary()
    for arm in bundle.arms:
        cells = [bundle.config.get("name", kind), arm] + [_fmt(*summ[arm][m]) for m in METRICS]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(bundle: ResultsBundle, formats=("csv", "json", "markdown"), out_dir=".") -> list[Path]:
    if not bundle.runs:
        raise ValueError("bundle has no runs; refusing to write an empty report")
    if isinstance(formats, str):
        formats = (formats,)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            p = out / "results.csv"
            with p.open("w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["seed", "arm", "attack", "metric", "value"])
                for r in sorted(bundle.runs, key=lambda r: (r.seed, r.arm)):
                    for m in ("tpr_at_1pct", "tpr_at_01pct", "auc", "game_accuracy"):
                        w.writerow([r.seed, r.arm, "target", m, repr(float(getattr(r, m)))])
                    for m, col in (("tpr_at_1pct", "non_target_tpr"), ("auc", "non_target_auc")):
                        w.writerow([r.seed, r.arm, "non_target", m, repr(float(getattr(r, col)))])
                    for m in ("utility_before", "utility_after", "target_loss_before", "target_loss_after"):
                        w.writerow([r.seed, r.arm, "utility", m, repr(float(getattr(r, m)))])
            written.append(p)
            p = out / "roc.csv"
            with p.open("w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["seed", "arm", "fpr", "tpr"])
                for r in sorted(bundle.runs, key=lambda r: (r.seed, r.arm)):
                    for fpr, tpr in r.roc:
                        w.writerow([r.seed, r.arm, repr(fpr), repr(tpr)])
            written.append(p)
        elif fmt == "json":
            p = out / "bundle.json"
            p.write_text(bundle.to_json())
            written.append(p)
        elif fmt in ("markdown", "md", "markdown-table"):
            p = out / "report.md"
            p.write_text(markdown_table(bundle))
            written.append(p)
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    return written
