"""The challenger's query surface: what the adversary actually gets to see.

A channel may quantize the served weights, watermark the logits, and truncate
the response to the top-k log probabilities, applied in that order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .models import CausalLMModel, ClassifierModel, Model, pad_batch, quantize_model
from .mia import logit_confidence
from .rng import make_rng


class ChannelError(ValueError):
    pass


@dataclass
class ChannelConfig:
    quant_bits: int | None = None
    watermark: bool = False
    gamma: float = 0.5
    delta: float = 2.0
    hash_seed: int = 15485863
    topk: int | None = None

    def __post_init__(self):
        if self.quant_bits is not None and self.quant_bits not in (4, 8):
            raise ChannelError(f"quant_bits must be 4 or 8, got {self.quant_bits}")
        if self.topk is not None and self.topk < 1:
            raise ChannelError("topk must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ChannelError("gamma must be in (0, 1)")

    @property
    def kind(self) -> str:
        parts = []
        if self.quant_bits:
            parts.append(f"quantized({self.quant_bits})")
        if self.watermark:
            parts.append(f"watermark({self.gamma},{self.delta})")
        if self.topk:
            parts.append(f"topk({self.topk})")
        return "+".join(parts) or "full_logits"

    @classmethod
    def parse(cls, kind: str, **kw) -> ChannelConfig:
        """Build from names like ``full_logits``, ``topk5``, ``watermark``, ``quant4``."""
        cfg = dict(kw)
        for part in kind.split("+"):
            if part in ("full_logits", "full", ""):
                continue
            if part.startswith("topk"):
                cfg["topk"] = int(part[4:] or 5)
            elif part.startswith("quant"):
                cfg["quant_bits"] = int(part[5:] or 8)
            elif part == "watermark":
                cfg["watermark"] = True
            else:
                raise ChannelError(f"unknown channel component {part!r}")
        return cls(**cfg)


@dataclass
class QueryResponse:
    """Dense log probabilities (positions x V) or a per-position top-k list."""

    dense: np.ndarray | None = None
    sparse: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def is_sparse(self) -> bool:
        return self.dense is None

    def __len__(self) -> int:
        return len(self.sparse) if self.is_sparse else self.dense.shape[0]

    def rows(self, query_id) -> list[tuple[str, int, float]]:
        out = []
        if self.is_sparse:
            for t, (ids, lps) in enumerate(self.sparse):
                out += [(f"{query_id}:{t}", int(i), float(v)) for i, v in zip(ids, lps)]
        else:
            for t, row in enumerate(self.dense):
                out += [(f"{query_id}:{t}", i, float(v)) for i, v in enumerate(row)]
        return out


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def apply_topk(logprobs, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The k largest entries, descending, ties broken towards the lower id."""
    logprobs = np.asarray(logprobs, dtype=np.float64).reshape(-1)
    if k > logprobs.size:
        raise ChannelError(f"k={k} exceeds vocabulary size {logprobs.size}")
    if k < 1:
        raise ChannelError("k must be >= 1")
    order = np.lexsort((np.arange(logprobs.size), -logprobs))[:k]
    return order, logprobs[order]


def green_list(vocab: int, prev_token: int, gamma: float, hash_seed: int) -> np.ndarray:
    """Ids of the green partition for a given previous token."""
    perm = make_rng(hash_seed, "watermark", int(prev_token)).permutation(vocab)
    return np.sort(perm[: int(math.floor(gamma * vocab))])


def watermark_bias(vocab: int, gamma: float, delta: float, hash_seed: int) -> np.ndarray:
    """V x V table: row p is the logit bias applied after previous token p."""
    bias = np.full((vocab, vocab), -delta, dtype=np.float64)
    for p in range(vocab):
        bias[p, green_list(vocab, p, gamma, hash_seed)] = delta
    return bias


def watermark_logits(logits, prev_token: int, gamma: float = 0.5, delta: float = 2.0, hash_seed: int = 15485863) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    v = logits.shape[-1]
    if not 0 <= prev_token < v:
        raise ChannelError(f"prev_token {prev_token} out of range [0, {v})")
    if delta == 0:
        return logits.copy()
    bias = np.full(v, -delta)
    bias[green_list(v, prev_token, gamma, hash_seed)] = delta
    return logits + bias


class Channel:
    """Serve a model through a :class:`ChannelConfig`; never mutates the model."""

    def __init__(self, model: Model, config: ChannelConfig | None = None):
        self.config = config or ChannelConfig()
        self.model = quantize_model(model, self.config.quant_bits) if self.config.quant_bits else model
        self._bias = None

    def _wm_table(self, vocab: int) -> np.ndarray:
        if self._bias is None:
            c = self.config
            self._bias = watermark_bias(vocab, c.gamma, c.delta, c.hash_seed)
        return self._bias

    def _logits(self, batch: np.ndarray) -> np.ndarray:
        with T.no_grad():
            if isinstance(self.model, ClassifierModel):
                return self.model.forward(batch).data.astype(np.float64)
            return self.model.forward_batch(batch).data.astype(np.float64)

    def logprob_matrix(self, batch: np.ndarray) -> np.ndarray:
        """Dense post-channel log probabilities before any top-k truncation."""
        z = self._logits(batch)
        if self.config.watermark and isinstance(self.model, CausalLMModel):
            z = z + self._wm_table(z.shape[1])[np.asarray(batch).reshape(-1)]
        return log_softmax_np(z)

    def _respond(self, lp: np.ndarray) -> QueryResponse:
        if self.config.topk:
            return QueryResponse(sparse=[apply_topk(row, self.config.topk) for row in lp])
        return QueryResponse(dense=lp)

    def query(self, inputs) -> QueryResponse:
        """One response per next-token position (LM) or per input row (classifier)."""
        if isinstance(self.model, CausalLMModel):
            tokens = np.asarray(inputs, dtype=np.int64).reshape(1, -1)
            return self._respond(self.logprob_matrix(tokens))
        x = np.atleast_2d(np.asarray(inputs, dtype=np.float32))
        return self._respond(self.logprob_matrix(x))

    def statistics(self, examples) -> np.ndarray:
        """Per-example attack statistic recovered from channel responses."""
        if isinstance(self.model, ClassifierModel):
            lp = self.logprob_matrix(examples.x)
            return np.array([
                statistic_from_channel(self._respond(row[None, :]), [int(y)], kind="classifier")
                for row, y in zip(lp, examples.y)
            ])
        out = []
        seqs = examples.seqs
        for lo in range(0, len(seqs), 64):
            group = seqs[lo : lo + 64]
            batch, lengths = pad_batch(group)
            lp = self.logprob_matrix(batch).reshape(len(group), batch.shape[1], -1)
            for s, n in zip(range(len(group)), lengths):
                resp = self._respond(lp[s, : n - 1])
                out.append(statistic_from_channel(resp, group[s][1:n], kind="lm"))
        return np.array(out)


def quantized_query(model: Model, bits: int, inputs) -> QueryResponse:
    return Channel(model, ChannelConfig(quant_bits=bits)).query(inputs)


def statistic_from_channel(response: QueryResponse, truth, kind: str = "lm") -> float:
    """Scalar attack statistic from a (possibly truncated) response.

    ``truth`` holds the true next token per position (LM) or the single true
    label (classifier). A true id missing from a top-k list is scored at the
    pessimistic floor ``min(returned) - log k``.
    """
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if len(response) == 0:
        raise ChannelError("empty response")
    if len(response) != len(truth):
        raise ChannelError(f"{len(response)} response positions for {len(truth)} targets")
    if response.is_sparse:
        vals = []
        for (ids, lps), t in zip(response.sparse, truth):
            hit = np.flatnonzero(ids == t)
            vals.append(lps[hit[0]] if hit.size else lps.min() - math.log(len(ids)))
        vals = np.array(vals)
    else:
        vals = response.dense[np.arange(len(truth)), truth]
    if kind == "classifier":
        return float(logit_confidence(np.exp(vals[0])))
    return float(vals.mean())


def write_responses_csv(responses: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query_id", "token_id", "logprob"])
        for qid, resp in responses.items():
            for row in resp.rows(qid):
                w.writerow([row[0], row[1], repr(row[2])])
