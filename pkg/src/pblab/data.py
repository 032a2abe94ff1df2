"""Synthetic stand-ins for the image and text datasets.

The classifier works on a seeded Gaussian mixture; the language model on a
character vocabulary with an order-2 Markov background source plus
template-filled PII canaries.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

PAD = 0
# id 0 is padding; the rest cover lowercase text, digits and punctuation
ALPHABET = string.ascii_lowercase + string.digits + " .,;:@-'/#()[]!?&+=*_\n\"%$<>"
assert len(ALPHABET) == 63
VOCAB = len(ALPHABET) + 1
_CHAR_TO_ID = {c: i + 1 for i, c in enumerate(ALPHABET)}


def encode(text: str) -> np.ndarray:
    try:
        return np.array([_CHAR_TO_ID[c] for c in text.lower()], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"character {e.args[0]!r} outside the vocabulary") from None


def decode(ids) -> str:
    return "".join(ALPHABET[i - 1] if i > 0 else "" for i in np.asarray(ids).tolist())


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> LabeledSet:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.x[idx], self.y[idx], self.ids[idx])

    def positions(self, ids) -> np.ndarray:
        lookup = {int(k): i for i, k in enumerate(self.ids)}
        return np.array([lookup[int(k)] for k in ids], dtype=np.int64)


@dataclass
class SequenceSet:
    seqs: list[np.ndarray]
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.seqs)

    def subset(self, idx) -> SequenceSet:
        idx = np.asarray(idx, dtype=np.int64)
        return SequenceSet([self.seqs[i] for i in idx], self.ids[idx])

    def positions(self, ids) -> np.ndarray:
        lookup = {int(k): i for i, k in enumerate(self.ids)}
        return np.array([lookup[int(k)] for k in ids], dtype=np.int64)

    @classmethod
    def concat(cls, parts: list[SequenceSet]) -> SequenceSet:
        seqs = [s for p in parts for s in p.seqs]
        ids = np.concatenate([p.ids for p in parts]) if parts else np.zeros(0, np.int64)
        return cls(seqs, ids)


@dataclass
class SyntheticClassificationSpec:
    n_classes: int = 10
    dim: int = 32
    noise: float = 0.6
    n_universal: int = 2000
    n_heldout: int = 1000

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.noise <= 0:
            raise ValueError("noise must be positive")


def class_means(spec: SyntheticClassificationSpec, rng: np.random.Generator) -> np.ndarray:
    m = rng.normal(size=(spec.n_classes, spec.dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def sample_mixture(means: np.ndarray, noise: float, n: int, rng: np.random.Generator, id_offset: int = 0) -> LabeledSet:
    c, d = means.shape
    y = rng.integers(0, c, size=n)
    x = means[y] + noise * rng.normal(size=(n, d))
    return LabeledSet(x.astype(np.float32), y.astype(np.int64), np.arange(id_offset, id_offset + n, dtype=np.int64))


def gen_classification_data(spec: SyntheticClassificationSpec, rng: np.random.Generator, means: np.ndarray | None = None):
    """Universal and heldout samples from one Gaussian mixture (disjoint ids)."""
    means = class_means(spec, rng) if means is None else means
    universal = sample_mixture(means, spec.noise, spec.n_universal, rng)
    heldout = sample_mixture(means, spec.noise, spec.n_heldout, rng, id_offset=spec.n_universal)
    return universal, heldout


@dataclass
class CorpusSpec:
    vocab: int = VOCAB
    seq_len: int = 48
    n_seqs: int = 1000
    concentration: float = 0.1
    support: int = 6  # successors with non-negligible mass per context

    def __post_init__(self):
        if self.vocab < 3 or self.vocab > VOCAB:
            raise ValueError(f"vocab must be in [3, {VOCAB}]")


@dataclass
class MarkovSource:
    """Order-2 source: P(next | prev2, prev1) over non-pad ids 1..V-1."""

    table: np.ndarray  # (V-1) x (V-1) x (V-1) rows sum to 1

    @classmethod
    def create(cls, spec: CorpusSpec, rng: np.random.Generator) -> MarkovSource:
        k = spec.vocab - 1
        table = np.zeros((k, k, k))
        for a in range(k):
            for b in range(k):
                succ = rng.choice(k, size=min(spec.support, k), replace=False)
                table[a, b, succ] = rng.dirichlet(np.full(len(succ), 1.0))
        # small floor keeps every transition possible
        table = table + spec.concentration / k * 0.01
        table /= table.sum(axis=2, keepdims=True)
        return cls(table)

    def sample(self, n: int, length: int, rng: np.random.Generator) -> np.ndarray:
        k = self.table.shape[0]
        out = np.empty((n, length), dtype=np.int64)
        out[:, 0] = rng.integers(0, k, n)
        out[:, 1] = rng.integers(0, k, n)
        cdf = np.cumsum(self.table, axis=2)
        for t in range(2, length):
            rows = cdf[out[:, t - 2], out[:, t - 1]]
            u = rng.random(n)[:, None]
            out[:, t] = np.minimum((rows < u).sum(axis=1), k - 1)
        return out + 1

    def entropy_rate(self, n: int = 2000, rng=None) -> float:
        rng = rng if rng is not None else np.random.default_rng(0)
        seq = self.sample(1, n, rng)[0] - 1
        p = self.table[seq[:-2], seq[1:-1], seq[2:]]
        return float(-np.log(p).mean())


def gen_corpus(spec: CorpusSpec, rng: np.random.Generator, source: MarkovSource | None = None) -> SequenceSet:
    source = source or MarkovSource.create(spec, rng)
    arr = source.sample(spec.n_seqs, spec.seq_len, rng)
    return SequenceSet([row for row in arr], np.arange(spec.n_seqs, dtype=np.int64))


# --- canaries -------------------------------------------------------------

_SYLLABLES = [c + v for c in "bcdfghjklmnprstvwz" for v in "aeiou"] + ["an", "el", "or", "is", "um"]
# short fills keep every record within a 64-token context
_STREET_KINDS = ["st", "rd", "av", "ln", "ct"]
_DOMAINS = ["mx.io", "pst.io", "box.co", "web.co"]
TEMPLATE = "{name} lives at {number} {street}; phone {phone}; email {email}"


@dataclass
class CanarySet:
    n: int = 200
    reps: int = 10
    pool_size: int = 1000

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")


@dataclass
class CanaryRecord:
    text: str
    fills: dict = field(default_factory=dict)

    @property
    def tokens(self) -> np.ndarray:
        return encode(self.text)


def _word_pool(rng: np.random.Generator, size: int, syllables: int) -> list[str]:
    pool: set[str] = set()
    while len(pool) < size:
        pool.add("".join(rng.choice(_SYLLABLES, size=syllables)))
    return sorted(pool)


def fill_template(name: str, number: int, street: str, phone: str, email: str) -> str:
    return TEMPLATE.format(name=name, number=number, street=street, phone=phone, email=email)


def generate_canaries(spec: CanarySet, rng: np.random.Generator) -> list[CanaryRecord]:
    """``spec.n`` distinct PII-style records from seeded word and digit pools."""
    firsts = _word_pool(rng, spec.pool_size, 2)
    lasts = _word_pool(rng, spec.pool_size, 2)
    streets = _word_pool(rng, max(spec.pool_size // 4, 8), 2)
    seen: set[str] = set()
    out: list[CanaryRecord] = []
    while len(out) < spec.n:
        first, last = rng.choice(firsts), rng.choice(lasts)
        number = int(rng.integers(10, 1000))
        street = f"{rng.choice(streets)} {rng.choice(_STREET_KINDS)}"
        phone = "".join(str(d) for d in rng.integers(0, 10, 7))
        email = f"{last}@{rng.choice(_DOMAINS)}"
        fills = dict(name=f"{first} {last}", number=number, street=street, phone=phone, email=email)
        text = fill_template(**fills)
        if text in seen:
            continue
        seen.add(text)
        out.append(CanaryRecord(text, fills))
    return out


def inject_canaries(corpus: SequenceSet, canaries: list[np.ndarray], reps: int, rng: np.random.Generator, canary_ids=None) -> SequenceSet:
    """Insert ``reps`` copies of each canary at uniformly random positions."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    canary_ids = np.arange(len(canaries)) if canary_ids is None else np.asarray(canary_ids)
    seqs = list(corpus.seqs)
    ids = list(corpus.ids.tolist())
    items = [(c, int(cid)) for c, cid in zip(canaries, canary_ids) for _ in range(reps)]
    for c, cid in items:
        pos = int(rng.integers(0, len(seqs) + 1))
        seqs.insert(pos, np.asarray(c, dtype=np.int64))
        ids.insert(pos, cid)
    return SequenceSet(seqs, np.asarray(ids, dtype=np.int64))
