"""Victim architectures: an MLP classifier and a tiny causal transformer LM.

Both keep their parameters in an ordered ``name -> Tensor`` dict so the
optimizer, checkpoint writer and probes can treat them uniformly. Linear
weights are stored out x in.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str = "classifier"  # "classifier" | "lm"
    d: int = 32  # classifier input dim, or LM embedding width
    h: int = 64  # classifier hidden width
    n_classes: int = 10
    vocab: int = 64
    ctx: int = 64
    layers: int = 1  # classifier encoder layers, or LM blocks
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("classifier", "lm"):
            raise ModelError(f"unknown model kind {self.kind!r}")
        for name in ("d", "h", "n_classes", "vocab", "ctx", "layers", "heads"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.kind == "lm" and self.d % self.heads:
            raise ModelError(f"d={self.d} not divisible by heads={self.heads}")

    @classmethod
    def lm_default(cls, **kw) -> ModelConfig:
        base = dict(kind="lm", d=64, vocab=64, ctx=64, layers=2, heads=4)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LoraAdapter:
    """Low-rank update ``x -> ((x @ A) @ B) * scale`` added to a frozen linear."""

    target: str
    A: Tensor  # d_in x r
    B: Tensor  # r x d_out
    scale: float

    @property
    def rank(self) -> int:
        return self.A.shape[1]


def _init_linear(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(d_out, d_in)).astype(np.float32)


class Model:
    """Shared parameter bookkeeping for both architectures."""

    linear_names: tuple[str, ...] = ()

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.adapters: dict[str, LoraAdapter] = {}
        self.merged = False

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.params.items())
        for name, ad in self.adapters.items():
            out += [(f"{name}.lora_A", ad.A), (f"{name}.lora_B", ad.B)]
        return out

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def set_trainable(self, names) -> None:
        names = set(names)
        for n, p in self.named_parameters():
            p.requires_grad = n in names

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            if n not in self.params:
                raise ModelError(f"unexpected tensor {n!r}")
            if self.params[n].shape != arr.shape:
                raise ModelError(f"shape mismatch for {n}: {self.params[n].shape} vs {arr.shape}")
            self.params[n].data = np.array(arr, dtype=np.float32)

    def clone(self) -> Model:
        other = copy.copy(self)
        other.config = copy.deepcopy(self.config)
        other.params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad) for n, p in self.params.items()}
        other.adapters = {
            n: LoraAdapter(a.target, Tensor(a.A.data.copy(), a.A.requires_grad), Tensor(a.B.data.copy(), a.B.requires_grad), a.scale)
            for n, a in self.adapters.items()
        }
        return other

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def _linear(self, x: Tensor, name: str, bias: str | None = None) -> Tensor:
        out = T.linear(x, self.params[name], self.params[bias] if bias else None)
        ad = self.adapters.get(name)
        if ad is not None:
            out = out + T.mul(T.matmul(T.matmul(x, ad.A), ad.B), ad.scale)
        return out


class ClassifierModel(Model):
    """Encoder of GELU linear layers followed by a C x h classification head."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        super().__init__(config, params)
        self.linear_names = tuple(f"enc{i}.w" for i in range(config.layers)) + ("head.w",)

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator | None = None) -> ClassifierModel:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        params: dict[str, Tensor] = {}
        d_in = config.d
        for i in range(config.layers):
            params[f"enc{i}.w"] = Tensor(_init_linear(rng, config.h, d_in), requires_grad=True)
            params[f"enc{i}.b"] = Tensor(np.zeros(config.h, np.float32), requires_grad=True)
            d_in = config.h
        params["head.w"] = Tensor(_init_linear(rng, config.n_classes, config.h), requires_grad=True)
        params["head.b"] = Tensor(np.zeros(config.n_classes, np.float32), requires_grad=True)
        return cls(config, params)

    @property
    def encoder_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("enc")]

    @property
    def head_names(self) -> list[str]:
        return ["head.w", "head.b"]

    def encode(self, x) -> Tensor:
        h = T.as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.config.d:
            raise T.ShapeError(f"classifier expects B x {self.config.d} input, got {h.shape}")
        for i in range(self.config.layers):
            h = T.gelu(self._linear(h, f"enc{i}.w", f"enc{i}.b"))
        return h

    def forward(self, x) -> Tensor:
        return self._linear(self.encode(x), "head.w", "head.b")


def classifier_forward(model: ClassifierModel, x) -> Tensor:
    return model.forward(x)


def init_zero_shot_head(model: ClassifierModel, prototypes) -> ClassifierModel:
    """Set the head to row-normalised class prototypes with zero bias."""
    proto = np.asarray(prototypes.data if isinstance(prototypes, Tensor) else prototypes, dtype=np.float64)
    c, h = model.config.n_classes, model.config.h
    if proto.shape != (c, h):
        raise ModelError(f"prototypes must be {c} x {h}, got {proto.shape}")
    norms = np.linalg.norm(proto, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ModelError(f"zero-norm prototype rows: {np.flatnonzero(norms[:, 0] == 0).tolist()}")
    model.params["head.w"].data = (proto / norms).astype(np.float32)
    model.params["head.b"].data = np.zeros(c, np.float32)
    return model


def class_prototypes(model: ClassifierModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Class-mean encoder outputs over a labelled sample."""
    with T.no_grad():
        emb = model.encode(x).data
    c = model.config.n_classes
    missing = [k for k in range(c) if not (y == k).any()]
    if missing:
        raise ModelError(f"no samples for classes {missing}")
    return np.stack([emb[y == k].mean(axis=0) for k in range(c)])


class CausalLMModel(Model):
    """Pre-norm transformer with learned positions and an untied V x d head."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        super().__init__(config, params)
        names = []
        for i in range(config.layers):
            names += [f"b{i}.attn.{k}" for k in ("wq", "wk", "wv", "wo")]
            names += [f"b{i}.ff.w1", f"b{i}.ff.w2"]
        self.linear_names = tuple(names) + ("head.w",)

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator | None = None) -> CausalLMModel:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        d, f = config.d, 4 * config.d
        p: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0, 0.02, (config.vocab, d)),
            "pos_emb": rng.normal(0, 0.02, (config.ctx, d)),
        }
        for i in range(config.layers):
            p[f"b{i}.ln1.g"] = np.ones(d)
            p[f"b{i}.ln1.b"] = np.zeros(d)
            for k in ("wq", "wk", "wv", "wo"):
                p[f"b{i}.attn.{k}"] = _init_linear(rng, d, d)
            p[f"b{i}.ln2.g"] = np.ones(d)
            p[f"b{i}.ln2.b"] = np.zeros(d)
            p[f"b{i}.ff.w1"] = _init_linear(rng, f, d)
            p[f"b{i}.ff.b1"] = np.zeros(f)
            p[f"b{i}.ff.w2"] = _init_linear(rng, d, f)
            p[f"b{i}.ff.b2"] = np.zeros(d)
        p["lnf.g"] = np.ones(d)
        p["lnf.b"] = np.zeros(d)
        p["head.w"] = _init_linear(rng, config.vocab, d)
        params = {n: Tensor(np.asarray(a, np.float32), requires_grad=True) for n, a in p.items()}
        return cls(config, params)

    @property
    def embedding_names(self) -> list[str]:
        return ["tok_emb", "pos_emb"]

    def forward_batch(self, batch: np.ndarray, noise=None, act_scale: dict[int, Tensor] | None = None) -> Tensor:
        """Logits for an n_seq x L id matrix, returned as (n_seq*L) x V.

        ``noise`` is a callable applied to the token embeddings (training-time
        Neftune); ``act_scale`` maps a block index to a multiplier on that
        block's post-GELU feed-forward activations.
        """
        batch = np.asarray(batch, dtype=np.int64)
        if batch.ndim == 1:
            batch = batch[None, :]
        n_seq, length = batch.shape
        cfg = self.config
        if length > cfg.ctx:
            raise ModelError(f"sequence length {length} exceeds context {cfg.ctx}")
        if batch.size and (batch.min() < 0 or batch.max() >= cfg.vocab):
            raise IndexError(f"token id out of range [0, {cfg.vocab})")
        emb = T.embedding(self.params["tok_emb"], batch.reshape(-1))
        if noise is not None:
            emb = noise(emb, length)
        pos = T.embedding(self.params["pos_emb"], np.tile(np.arange(length), n_seq))
        x = emb + pos
        for i in range(cfg.layers):
            h = T.layer_norm(x, self.params[f"b{i}.ln1.g"], self.params[f"b{i}.ln1.b"])
            q = self._linear(h, f"b{i}.attn.wq")
            k = self._linear(h, f"b{i}.attn.wk")
            v = self._linear(h, f"b{i}.attn.wv")
            a = T.causal_attention(q, k, v, n_seq, cfg.heads)
            x = x + self._linear(a, f"b{i}.attn.wo")
            h = T.layer_norm(x, self.params[f"b{i}.ln2.g"], self.params[f"b{i}.ln2.b"])
            h = T.gelu(self._linear(h, f"b{i}.ff.w1", f"b{i}.ff.b1"))
            if act_scale is not None and i in act_scale:
                h = h * act_scale[i]
            x = x + self._linear(h, f"b{i}.ff.w2", f"b{i}.ff.b2")
        x = T.layer_norm(x, self.params["lnf.g"], self.params["lnf.b"])
        return self._linear(x, "head.w")

    def forward(self, tokens) -> Tensor:
        return self.forward_batch(np.asarray(tokens)[None, :])


def lm_forward(model: CausalLMModel, tokens) -> Tensor:
    """T x V logits for a single token sequence."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        raise ModelError("empty token sequence")
    return model.forward(tokens)


def shifted_targets(batch: np.ndarray, lengths=None, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Next-token labels and per-row weights for a padded id matrix.

    Row ``s*L + t`` predicts ``batch[s, t+1]``; the last position of each
    sequence and positions past its length get weight 0.
    """
    batch = np.asarray(batch, dtype=np.int64)
    n_seq, length = batch.shape
    if lengths is None:
        lengths = np.full(n_seq, length)
    labels = np.zeros_like(batch)
    labels[:, :-1] = batch[:, 1:]
    pos = np.arange(length)[None, :]
    weights = (pos < (np.asarray(lengths)[:, None] - 1)).astype(np.float32)
    return labels.reshape(-1), weights.reshape(-1)


def sequence_nll(model: CausalLMModel, tokens) -> Tensor:
    """Mean next-token negative log-likelihood (log perplexity) of a sequence."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size < 2:
        raise ModelError("sequence_nll needs at least 2 tokens")
    logits = lm_forward(model, tokens[:-1])
    return T.cross_entropy(logits, tokens[1:])


def batch_nll(model: CausalLMModel, seqs: list[np.ndarray], pad_id: int = 0, chunk: int = 64) -> np.ndarray:
    """Per-sequence log perplexity for many sequences, without gradients."""
    out = np.empty(len(seqs), dtype=np.float64)
    with T.no_grad():
        for lo in range(0, len(seqs), chunk):
            group = seqs[lo : lo + chunk]
            batch, lengths = pad_batch(group, pad_id)
            logits = model.forward_batch(batch).data.astype(np.float64)
            labels, weights = shifted_targets(batch, lengths)
            z = logits - logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            tok_nll = -logp[np.arange(labels.size), labels] * weights
            tok_nll = tok_nll.reshape(len(group), -1).sum(axis=1)
            out[lo : lo + len(group)] = tok_nll / (lengths - 1)
    return out


def pad_batch(seqs, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    batch = np.full((len(seqs), lengths.max()), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        batch[i, : len(s)] = s
    return batch, lengths


def attach_lora(model: Model, rank: int = 8, scale: float | None = None, targets=None, rng=None) -> Model:
    """Freeze the model and add trainable low-rank adapters to ``targets``.

    B starts at zero, so the adapted model computes exactly what the base
    model did until the adapters are trained.
    """
    if model.merged:
        raise ModelError("adapters were already merged into this model")
    scale = 2.0 / rank if scale is None else scale
    targets = list(model.linear_names if targets is None else targets)
    rng = rng if rng is not None else np.random.default_rng(model.config.seed + 7919)
    for t in targets:
        if t not in model.linear_names:
            raise ModelError(f"{t!r} is not a linear layer")
    for p in model.parameters():
        p.requires_grad = False
    for t in targets:
        d_out, d_in = model.params[t].shape
        A = rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, rank)).astype(np.float32)
        model.adapters[t] = LoraAdapter(t, Tensor(A, requires_grad=True), Tensor(np.zeros((rank, d_out), np.float32), requires_grad=True), scale)
    return model


def merge_lora(model: Model) -> Model:
    """Fold adapters into their base weights and drop them."""
    if model.merged:
        raise ModelError("adapters already merged")
    if not model.adapters:
        raise ModelError("no adapters attached")
    for t, ad in model.adapters.items():
        delta = (ad.A.data.astype(np.float64) @ ad.B.data.astype(np.float64)) * ad.scale
        model.params[t].data = (model.params[t].data + delta.T).astype(np.float32)
    model.adapters = {}
    model.merged = True
    for p in model.parameters():
        p.requires_grad = True
    return model


def trainable_count(model: Model) -> int:
    return int(sum(p.data.size for _, p in model.trainable()))


def neftune_noise(embeddings: Tensor, alpha: float, rng: np.random.Generator, length: int | None = None) -> Tensor:
    """Add iid uniform noise in +-alpha/sqrt(L*d) to token embeddings."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha == 0:
        return embeddings
    n, d = embeddings.shape
    length = n if length is None else length
    bound = alpha / math.sqrt(length * d)
    noise = rng.uniform(-bound, bound, size=(n, d)).astype(embeddings.data.dtype)
    return embeddings + Tensor(noise)


def quantize_dequantize(weights, bits: int) -> np.ndarray:
    """Symmetric per-tensor round trip through a ``bits``-bit integer grid."""
    if bits not in (4, 8):
        raise ValueError(f"bits must be 4 or 8, got {bits}")
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float32)
    peak = float(np.abs(w).max()) if w.size else 0.0
    if peak == 0.0:
        return w.copy()
    qmax = 2 ** (bits - 1) - 1
    # scale kept in float64 so a second pass recovers the same grid exactly
    scale = peak / qmax
    q = np.clip(np.rint(w.astype(np.float64) / scale), -qmax, qmax)
    return (q * scale).astype(np.float32)


def quantize_model(model: Model, bits: int) -> Model:
    """Copy of ``model`` with every rank-2 weight quantize-dequantized."""
    out = model.clone()
    for name, p in out.params.items():
        if p.ndim == 2:
            p.data = quantize_dequantize(p.data, bits)
    return out


def build_model(config: ModelConfig, rng=None) -> Model:
    cls = ClassifierModel if config.kind == "classifier" else CausalLMModel
    return cls.init(config, rng)
