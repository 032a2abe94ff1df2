"""Alternative membership probes: parameter-change fingerprints, knowledge
neurons, and the canary exposure metric."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import encode, fill_template
from .models import CausalLMModel, Model, ModelError, batch_nll
from .optim import TrainConfig, train

EPS_D = 1e-8


class ProbeError(ValueError):
    pass


# --- parameter-change probe ---------------------------------------------------


@dataclass
class ParamDeltaProfile:
    r: np.ndarray  # flat relative changes, parameters in state_dict order
    names: list[str]
    offsets: np.ndarray  # start of each named tensor inside r
    tau: float | None = None

    def percentile(self, q: float = 99.9) -> float:
        return float(np.percentile(self.r, q))

    def locate(self, index: int) -> tuple[str, int]:
        k = int(np.searchsorted(self.offsets, index, side="right") - 1)
        return self.names[k], int(index - self.offsets[k])


def _state(m) -> dict[str, np.ndarray]:
    return m.state_dict() if isinstance(m, Model) else m


def relative_param_change(before, after, eps: float = EPS_D) -> ParamDeltaProfile:
    """r_i = |after_i - before_i| / (|before_i| + eps) over every parameter."""
    a, b = _state(before), _state(after)
    if list(a) != list(b):
        raise ProbeError("models have different parameter names")
    parts, offsets, off = [], [], 0
    for n in a:
        x, y = np.asarray(a[n], np.float64), np.asarray(b[n], np.float64)
        if x.shape != y.shape:
            raise ProbeError(f"shape mismatch in {n}: {x.shape} vs {y.shape}")
        parts.append((np.abs(y - x) / (np.abs(x) + eps)).reshape(-1))
        offsets.append(off)
        off += x.size
    return ParamDeltaProfile(np.concatenate(parts), list(a), np.array(offsets))


def threshold_from_percentiles(percentiles) -> float:
    p = np.asarray(percentiles, dtype=np.float64)
    if p.size == 0:
        raise ProbeError("need at least one calibration run")
    return float(p.mean())


def calibrate_threshold(pretrained: Model, finetuned: list, percentile: float = 99.9) -> float:
    """Mean over runs of each run's ``percentile``-th relative change."""
    if len(finetuned) < 2:
        raise ProbeError("calibration needs at least 2 runs")
    return threshold_from_percentiles([relative_param_change(pretrained, m).percentile(percentile) for m in finetuned])


def find_leaking_params(model_secret, model_reference, pretrained, tau: float) -> set[int]:
    """Indices whose relative change with the secret record exceeds the change
    without it by more than ``tau``. Raising ``tau`` can only shrink the set."""
    rs = relative_param_change(pretrained, model_secret).r
    rr = relative_param_change(pretrained, model_reference).r
    return set(np.flatnonzero(rs - rr > tau).tolist())


def jaccard(a: set, b: set) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 1.0


def overlap_across_seeds(sets: list[set]) -> tuple[np.ndarray, int]:
    if len(sets) < 2:
        raise ProbeError("need at least 2 sets")
    n = len(sets)
    jac = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            jac[i, j] = jac[j, i] = jaccard(sets[i], sets[j])
    return jac, len(set.intersection(*map(set, sets)))


@dataclass
class ParamProbeReport:
    tau: float
    calibration_percentiles: list[float]
    set_sizes: list[int]
    jaccard: np.ndarray
    intersection: int
    fixed_randomness: bool

    def rows(self) -> list[list]:
        out = [["run", "set_size", *[f"jaccard_{j}" for j in range(len(self.set_sizes))]]]
        for i, s in enumerate(self.set_sizes):
            out.append([i, s, *[round(float(v), 6) for v in self.jaccard[i]]])
        return out

    def summary(self) -> str:
        sizes = ", ".join(map(str, self.set_sizes))
        off = self.jaccard[~np.eye(len(self.set_sizes), dtype=bool)]
        return (
            f"threshold {self.tau:.6g} (mean of {len(self.calibration_percentiles)} runs)\n"
            f"leaking-set sizes: {sizes}\n"
            f"mean pairwise Jaccard {off.mean():.4f}; intersection across all runs {self.intersection}\n"
            f"randomness {'shared' if self.fixed_randomness else 'independent'} between secret and reference runs"
        )


def run_param_probe(pretrained: Model, reference, secrets, calib_records, config: TrainConfig,
                    n_calib: int = 16, fixed_randomness: bool = False, percentile: float = 99.9) -> ParamProbeReport:
    """Calibrate a threshold on single-record fine-tunes, then for each secret
    compare a run with it against a run without it.

    ``reference`` is the shared fine-tuning set; ``secrets`` holds one record
    per seed; ``calib_records`` supplies the single records for calibration.
    Sharing the randomness means both runs of a pair use the same seed.
    """
    cls = type(reference)
    pct = []
    for i in range(n_calib):
        one = calib_records.subset([i % len(calib_records)])
        m, _ = train(pretrained, one, TrainConfig(**{**config.__dict__, "seed": 1000 + i}))
        pct.append(relative_param_change(pretrained, m).percentile(percentile))
    tau = threshold_from_percentiles(pct)
    sets = []
    for s in range(len(secrets)):
        with_secret = cls.concat([reference, secrets.subset([s])]) if hasattr(cls, "concat") else _concat_labeled(reference, secrets.subset([s]))
        seed_ref = 2000 + s
        seed_sec = seed_ref if fixed_randomness else 3000 + s
        ref, _ = train(pretrained, reference, TrainConfig(**{**config.__dict__, "seed": seed_ref}))
        sec, _ = train(pretrained, with_secret, TrainConfig(**{**config.__dict__, "seed": seed_sec}))
        sets.append(find_leaking_params(sec, ref, pretrained, tau))
    jac, inter = overlap_across_seeds(sets)
    return ParamProbeReport(tau, pct, [len(x) for x in sets], jac, inter, fixed_randomness)


def _concat_labeled(a, b):
    return type(a)(np.concatenate([a.x, b.x]), np.concatenate([a.y, b.y]), np.concatenate([a.ids, b.ids]))


# --- knowledge neurons --------------------------------------------------------


@dataclass
class NeuronAttribution:
    layer: int
    neuron: int
    score: float


def _check_layer(model: CausalLMModel, layer: int) -> None:
    if not 0 <= layer < model.config.layers:
        raise ProbeError(f"layer {layer} out of range [0, {model.config.layers})")


def neuron_scores(model: CausalLMModel, prompt, answer: int, layer: int, steps: int = 20) -> np.ndarray:
    """Integrated-gradients attribution of every feed-forward neuron in ``layer``
    to p(answer | prompt).

    The layer's post-GELU activations at the last prompt position are scaled by
    alpha = k/steps, k = 1..steps; all steps run as one batch and the gradient
    with respect to the per-neuron scale gives a_j * dp/d(alpha a_j) directly.
    """
    _check_layer(model, layer)
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    if prompt.size == 0 or prompt.size > model.config.ctx:
        raise ModelError(f"prompt length {prompt.size} does not fit context {model.config.ctx}")
    length, f = prompt.size, 4 * model.config.d
    alphas = np.arange(1, steps + 1) / steps
    scale = np.ones((steps, length, f), dtype=T.default_dtype())
    scale[:, -1, :] = alphas[:, None]
    s = T.Tensor(scale.reshape(steps * length, f), requires_grad=True)
    logits = model.forward_batch(np.tile(prompt, (steps, 1)), act_scale={layer: s})
    rows = np.arange(steps) * length + length - 1
    probs = T.softmax(T.take_rows(logits, rows))
    p_answer = T.sum(T.cols(probs, int(answer), int(answer) + 1))
    T.backward(p_answer)
    g = s.grad.reshape(steps, length, f)[:, -1, :].astype(np.float64)
    return g.mean(axis=0)


def neuron_attribution(model: CausalLMModel, prompt, answer: int, layer: int, steps: int = 20) -> list[NeuronAttribution]:
    sc = neuron_scores(model, prompt, answer, layer, steps)
    return [NeuronAttribution(layer, j, float(v)) for j, v in enumerate(sc)]


def coarse_set(scores, percentile: float = 99.0) -> set[int]:
    scores = np.asarray(scores, dtype=np.float64)
    return set(np.flatnonzero(scores > np.percentile(scores, percentile)).tolist())


def refine_neurons(coarse_sets: list[set], t_share: float = 0.7) -> set[int]:
    """Neurons present in at least a ``t_share`` fraction of the prompt-level sets."""
    if not coarse_sets:
        raise ProbeError("no coarse sets")
    counts: dict[int, int] = {}
    for cs in coarse_sets:
        for j in cs:
            counts[j] = counts.get(j, 0) + 1
    need = t_share * len(coarse_sets) - 1e-9
    return {j for j, c in counts.items() if c >= need}


def amplify_neuron(model: CausalLMModel, layer: int, neuron: int, factor: float) -> CausalLMModel:
    """Copy of ``model`` with neuron ``neuron``'s outgoing weights scaled by ``factor``."""
    _check_layer(model, layer)
    f = 4 * model.config.d
    if not 0 <= neuron < f:
        raise ProbeError(f"neuron {neuron} out of range [0, {f})")
    if not 1 <= factor <= 20:
        raise ProbeError(f"factor must be in [1, 20], got {factor}")
    out = model.clone()
    if factor == 1:
        return out
    w = out.params[f"b{layer}.ff.w2"].data
    w[:, neuron] = (w[:, neuron] * np.float32(factor)).astype(w.dtype)
    return out


def scaled_activation_logits(model: CausalLMModel, tokens, layer: int, neuron: int, factor: float) -> np.ndarray:
    """Logits with one neuron's GELU output multiplied by ``factor`` at every position."""
    _check_layer(model, layer)
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    scale = np.ones((tokens.shape[1], 4 * model.config.d), dtype=T.default_dtype())
    scale[:, neuron] = factor
    with T.no_grad():
        return model.forward_batch(tokens, act_scale={layer: T.Tensor(scale)}).data


@dataclass
class NeuronProbeReport:
    layer: int
    coarse: list[set] = field(default_factory=list)
    fine: set = field(default_factory=set)
    exposure_before: float = float("nan")
    exposure_after: float = float("nan")

    def summary(self) -> str:
        sizes = ", ".join(str(len(c)) for c in self.coarse)
        return (
            f"layer {self.layer}: coarse-set sizes {sizes}; fine set {sorted(self.fine)} ({len(self.fine)} neurons)\n"
            f"exposure before {self.exposure_before:.3f}, after amplification {self.exposure_after:.3f}"
        )


# --- exposure -----------------------------------------------------------------


@dataclass
class ExposureReport:
    canary: int  # index of the canary among the candidates
    candidates: int
    rank: int
    exposure: float


def exposure_from_rank(rank: int, r: int) -> float:
    if not 1 <= rank <= r:
        raise ProbeError(f"rank {rank} outside [1, {r}]")
    return math.log2(r) - math.log2(rank)


def exposure(canary, candidates: list, model: CausalLMModel) -> ExposureReport:
    """Rank the canary among template-sharing candidates by log perplexity."""
    canary = np.asarray(canary, dtype=np.int64)
    match = [i for i, c in enumerate(candidates) if len(c) == len(canary) and np.array_equal(c, canary)]
    if not match:
        raise ProbeError("canary is not among the candidates")
    nll = batch_nll(model, [np.asarray(c, dtype=np.int64) for c in candidates])
    k = match[0]
    rank = 1 + int(np.sum(nll < nll[k]))
    return ExposureReport(k, len(candidates), rank, exposure_from_rank(rank, len(candidates)))


def exposure_candidates(record, r: int, rng: np.random.Generator) -> tuple[list[np.ndarray], int]:
    """``r`` template fills that differ only in the phone number; the true
    record sits at a random index."""
    true_phone = record.fills["phone"]
    phones = {true_phone}
    while len(phones) < r:
        phones.add("".join(str(d) for d in rng.integers(0, 10, len(true_phone))))
    others = sorted(phones - {true_phone})
    order = [true_phone] + others
    perm = rng.permutation(r)
    phones = [order[i] for i in perm]
    cands = [encode(fill_template(**{**record.fills, "phone": p})) for p in phones]
    return cands, phones.index(true_phone)


def phone_prompts(record) -> tuple[list[np.ndarray], int]:
    """Five prefixes of the record that each end just before the phone digits."""
    text = record.text
    cut = text.index("phone ") + len("phone ")
    starts = [0, text.index("lives at"), text.index(str(record.fills["number"])),
              text.index(record.fills["street"]), text.index("; phone")]
    prompts = [encode(text[s:cut]) for s in starts]
    return prompts, int(encode(record.fills["phone"][0])[0])


def run_neuron_probe(model: CausalLMModel, record, layer: int, steps: int = 20, t_share: float = 0.6,
                     factor: float = 5.0, r: int = 256, rng=None) -> NeuronProbeReport:
    """Find fine knowledge neurons for a memorized phone number, amplify them,
    and compare the record's exposure before and after."""
    rng = rng if rng is not None else np.random.default_rng(0)
    prompts, answer = phone_prompts(record)
    coarse = [coarse_set(neuron_scores(model, p, answer, layer, steps)) for p in prompts]
    fine = refine_neurons(coarse, t_share)
    cands, k = exposure_candidates(record, r, rng)
    before = exposure(cands[k], cands, model).exposure
    amplified = model
    for j in sorted(fine):
        amplified = amplify_neuron(amplified, layer, j, factor)
    after = exposure(cands[k], cands, amplified).exposure
    return NeuronProbeReport(layer, coarse, fine, before, after)
