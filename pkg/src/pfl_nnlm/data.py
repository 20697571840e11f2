"""Corpora, vocabularies and federated partitions."""

from __future__ import annotations

import json
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import BOS_ID, UNK_ID

BOS = "<s>"
UNK = "<unk>"
HASH_BUCKETS = 32


class DataError(ValueError):
    pass


@dataclass
class Vocabulary:
    words: list[str]
    counts: np.ndarray

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.index.get(t, UNK_ID) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.words[i] for i in ids]

    def unigram(self) -> np.ndarray:
        """Add-one smoothed unigram distribution over the whole vocabulary."""
        c = self.counts.astype(np.float64) + 1.0
        return c / c.sum()


@dataclass
class FederatedCorpus:
    """Per-user token-id sentences plus the vocabulary they were encoded with."""

    users: list[tuple[str, list[np.ndarray]]]
    vocab: Vocabulary
    labels: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        V = len(self.vocab)
        for uid, sents in self.users:
            if not sents:
                raise DataError(f"user {uid!r} has no sentences")
            for s in sents:
                if len(s) and (s.min() < 0 or s.max() >= V):
                    raise DataError(f"user {uid!r} has token ids outside [0, {V})")

    @property
    def p_uni(self) -> np.ndarray:
        return self.vocab.unigram()

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def sentences(self) -> list[np.ndarray]:
        return [s for _, sents in self.users for s in sents]

    def num_tokens(self) -> int:
        return sum(len(s) for s in self.sentences())

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for uid, sents in self.users:
                text = [" ".join(self.vocab.decode(s)) for s in sents]
                fh.write(json.dumps({"user_id": uid, "sentences": text}) + "\n")


def tokenize(text: str, lowercase: bool = True) -> list[str]:
    return (text.lower() if lowercase else text).split()


def build_vocab(sentences: Sequence[Sequence[str]], V: int) -> Vocabulary:
    """Top ``V - 2`` words by count (ties broken lexicographically) plus BOS and UNK.

    BOS gets count 0; UNK counts every out-of-vocabulary token.
    """
    if V < 3:
        raise DataError(f"vocabulary size must be >= 3, got {V}")
    counts = Counter(t for s in sentences for t in s)
    counts.pop(BOS, None)
    counts.pop(UNK, None)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = ranked[:V - 2]
    oov = sum(c for _, c in ranked[V - 2:])
    words = [BOS, UNK] + [w for w, _ in kept]
    c = np.array([0, oov] + [n for _, n in kept], dtype=np.int64)
    return Vocabulary(words, c)


def read_jsonl(path: str | Path, V: int, lowercase: bool = True) -> FederatedCorpus:
    """Load ``{"user_id": ..., "sentences": [...]}`` lines and build a vocabulary."""
    raw: list[tuple[str, list[list[str]]]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                uid, sents = str(rec["user_id"]), rec["sentences"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad user record ({exc})") from None
            toks = [tokenize(s, lowercase) for s in sents]
            toks = [t for t in toks if t]
            if toks:
                raw.append((uid, toks))
    if not raw:
        raise DataError(f"{path}: no users with non-empty sentences")
    vocab = build_vocab([s for _, ss in raw for s in ss], V)
    return encode_users(raw, vocab)


def encode_users(raw: Sequence[tuple[str, list[list[str]]]], vocab: Vocabulary) -> FederatedCorpus:
    return FederatedCorpus([(uid, [vocab.encode(s) for s in ss]) for uid, ss in raw], vocab)


def ngram_windows(sentence: Sequence[int], k: int, bos_id: int = BOS_ID,
                  full_prefix: bool = False) -> list[tuple[list[int], int]]:
    """One (context, target) example per token, contexts left-padded with BOS.

    By default the context is the ``k`` tokens before the target. With
    ``full_prefix`` it is the whole padded prefix, which is what the FOFE
    encoder consumes.
    """
    if k < 1:
        raise DataError(f"window size must be >= 1, got {k}")
    padded = [bos_id] * k + [int(w) for w in sentence]
    out = []
    for p in range(len(sentence)):
        end = k + p
        ctx = padded[:end] if full_prefix else padded[end - k:end]
        out.append((ctx, padded[end]))
    return out


def first_token_bucket(sentence: Sequence[str] | Sequence[int], buckets: int = HASH_BUCKETS) -> int:
    """Stable hash bucket of a sentence's first token (label stand-in for real text)."""
    if len(sentence) == 0:
        return 0
    return zlib.crc32(str(sentence[0]).encode("utf-8")) % buckets


def label_distribution(labels: Sequence[int], num_labels: int) -> np.ndarray:
    h = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_labels).astype(float)
    return h / h.sum()


def partition_dirichlet(sentences: Sequence[np.ndarray], labels: Sequence[int], num_clients: int,
                        concentration: float, rng: np.random.Generator,
                        vocab: Vocabulary | None = None) -> FederatedCorpus:
    """Non-IID split: client label mixtures drawn from Dirichlet(concentration * global).

    Every client receives an (almost) equal share of sentences. Client
    mixtures are rescaled by iterative proportional fitting so that the
    quotas use up each label exactly, then rounded per client; rounding
    leftovers spill over in proportion to the client's mixture. Each input
    sentence lands on exactly one client.
    """
    n = len(sentences)
    if num_clients < 1:
        raise DataError("num_clients must be >= 1")
    if not concentration > 0:
        raise DataError("concentration must be > 0")
    if n < num_clients:
        raise DataError(f"{n} sentences cannot fill {num_clients} clients")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != n:
        raise DataError("need one label per sentence")
    label_ids, labels = np.unique(labels, return_inverse=True)
    num_labels = len(label_ids)
    prior = np.bincount(labels, minlength=num_labels) / n
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in range(num_labels)]
    sizes = np.full(num_clients, n // num_clients)
    sizes[: n % num_clients] += 1

    mixtures = np.array([rng.dirichlet(concentration * prior) if num_labels > 1 else np.ones(1)
                         for _ in range(num_clients)])
    quotas = _fit_margins(mixtures * sizes[:, None], sizes, np.array([len(p) for p in pools]))
    assigned: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(num_clients):
        want = _largest_remainder(quotas[c], int(sizes[c]))
        for lab in range(num_labels):
            take = min(want[lab], len(pools[lab]))
            assigned[c].extend(pools[lab][:take])
            del pools[lab][:take]
        short = int(sizes[c]) - len(assigned[c])
        while short > 0:
            avail = np.array([len(p) > 0 for p in pools])
            w = mixtures[c] * avail
            w = w / w.sum() if w.sum() > 0 else avail / avail.sum()
            lab = int(rng.choice(num_labels, p=w))
            assigned[c].append(pools[lab].pop())
            short -= 1

    users = []
    user_labels = {}
    for c, idx in enumerate(assigned):
        if not idx:
            continue
        idx = sorted(idx)
        uid = f"client{c:05d}"
        users.append((uid, [np.asarray(sentences[i]) for i in idx]))
        user_labels[uid] = [int(label_ids[labels[i]]) for i in idx]
    if vocab is None:
        V = 1 + max(int(np.max(s)) for s in sentences if len(s))
        vocab = Vocabulary([str(i) for i in range(V)], np.zeros(V, dtype=np.int64))
    return FederatedCorpus(users, vocab, user_labels)


def _fit_margins(m: np.ndarray, rows: np.ndarray, cols: np.ndarray, iters: int = 500) -> np.ndarray:
    # iterative proportional fitting so client quotas exhaust every label pool
    m = np.maximum(m, 1e-300)
    for _ in range(iters):
        m = m * (cols / m.sum(axis=0))[None, :]
        m = m * (rows / m.sum(axis=1))[:, None]
        if np.allclose(m.sum(axis=0), cols, rtol=1e-9, atol=1e-6):
            break
    return m


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights / weights.sum() * total
    base = np.floor(raw).astype(np.int64)
    rest = total - base.sum()
    if rest:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:rest]] += 1
    return base


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    num_users: int = 50
    vocab_size: int = 1000
    sentences_per_user: int = 40
    num_topics: int = 4
    zipf_exponent: float = 1.1
    mean_sentence_length: int = 12
    transition_strength: float = 0.8
    topic_skew: float = 0.8
    neighbors: int = 4
    seed: int = 0


def zipf_probs(n: int, exponent: float) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1) ** exponent
    return p / p.sum()


def topic_laws(num_words: int, exponent: float, num_topics: int, skew: float,
               rng: np.random.Generator) -> np.ndarray:
    """(num_topics, num_words) stationary laws whose average is the Zipf law.

    Every word gets a home topic, dealt round-robin down the frequency ranks
    (random order within each round) so topics carry similar mass. A topic
    boosts its home words by ``1 + (T - 1) * skew`` and damps the rest by
    ``1 - skew``; averaged over topics the factors cancel.
    """
    base = zipf_probs(num_words, exponent)
    home = np.concatenate([rng.permutation(num_topics)
                           for _ in range(-(-num_words // num_topics))])[:num_words]
    laws = np.empty((num_topics, num_words))
    for t in range(num_topics):
        factor = np.where(home == t, 1.0 + (num_topics - 1) * skew, 1.0 - skew)
        laws[t] = base * factor
        laws[t] /= laws[t].sum()
    return laws


def topic_chain(pi: np.ndarray, strength: float, neighbors: int,
                rng: np.random.Generator) -> np.ndarray:
    """Transition matrix with stationary law ``pi``.

    Mixes an i.i.d. draw from ``pi`` with a Metropolis walk on a random
    sparse neighbour graph; both leave ``pi`` invariant.
    """
    num_words = len(pi)
    adj = np.zeros((num_words, num_words), dtype=bool)
    for i in range(num_words):
        nb = rng.choice(num_words, size=neighbors, replace=False)
        adj[i, nb] = True
        adj[nb, i] = True
    np.fill_diagonal(adj, False)
    deg_max = adj.sum(axis=1).max()
    accept = np.minimum(1.0, pi[None, :] / pi[:, None])
    K = adj * accept / deg_max
    K[np.diag_indices(num_words)] = 1.0 - K.sum(axis=1)
    return (1.0 - strength) * pi[None, :] + strength * K


def synth_corpus(spec: SynthSpec | None = None, **overrides) -> FederatedCorpus:
    """Deterministic synthetic federated corpus.

    Each topic is a first-order Markov chain over the non-special words; the
    topic stationary laws average to a Zipf law. Each user draws from one or
    two topics.
    Sentence labels are the generating topic ids.
    """
    spec = SynthSpec(**{**(spec.__dict__ if spec else {}), **overrides})
    if min(spec.num_users, spec.vocab_size - 2, spec.sentences_per_user, spec.num_topics) < 1:
        raise DataError("synthetic corpus parameters must be positive")
    if not 0 <= spec.topic_skew < 1:
        raise DataError(f"topic_skew must be in [0, 1), got {spec.topic_skew}")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    nw = spec.vocab_size - 2
    laws = topic_laws(nw, spec.zipf_exponent, spec.num_topics, spec.topic_skew, rng)
    cdfs = [(np.cumsum(pi), np.cumsum(topic_chain(pi, spec.transition_strength,
                                                  min(spec.neighbors, nw - 1), rng), axis=1))
            for pi in laws]

    users = []
    labels = {}
    counts = np.zeros(spec.vocab_size, dtype=np.int64)
    for u in range(spec.num_users):
        n_topics = 1 if spec.num_topics == 1 else int(rng.integers(1, 3))
        topics = rng.choice(spec.num_topics, size=n_topics, replace=False)
        sents, labs = [], []
        for _ in range(spec.sentences_per_user):
            t = int(rng.choice(topics))
            length = 1 + int(rng.poisson(spec.mean_sentence_length - 1))
            s = _walk(cdfs[t], length, rng) + 2
            sents.append(s)
            labs.append(t)
            counts += np.bincount(s, minlength=spec.vocab_size)
        uid = f"user{u:05d}"
        users.append((uid, sents))
        labels[uid] = labs
    words = [BOS, UNK] + [f"w{i:05d}" for i in range(nw)]
    return FederatedCorpus(users, Vocabulary(words, counts), labels)


def _walk(cdfs: tuple[np.ndarray, np.ndarray], length: int, rng: np.random.Generator) -> np.ndarray:
    pi_cdf, P_cdf = cdfs
    u = rng.random(length)
    out = np.empty(length, dtype=np.int64)
    out[0] = min(np.searchsorted(pi_cdf, u[0] * pi_cdf[-1], side="right"), len(pi_cdf) - 1)
    for i in range(1, length):
        row = P_cdf[out[i - 1]]
        out[i] = min(np.searchsorted(row, u[i] * row[-1], side="right"), len(row) - 1)
    return out


def split_users(corpus: FederatedCorpus, dev_fraction: float, rng: np.random.Generator
                ) -> tuple[FederatedCorpus, list[np.ndarray]]:
    """Hold out whole users as a dev set; returns (train corpus, dev sentences)."""
    n = len(corpus.users)
    n_dev = max(1, int(round(dev_fraction * n))) if n > 1 else 0
    order = rng.permutation(n)
    dev_idx = set(order[:n_dev].tolist())
    train = [u for i, u in enumerate(corpus.users) if i not in dev_idx]
    dev = [s for i, (_, ss) in enumerate(corpus.users) if i in dev_idx for s in ss]
    return FederatedCorpus(train, corpus.vocab,
                           {u: corpus.labels[u] for u, _ in train if u in corpus.labels}), dev


def unigram_ppl(counts: np.ndarray, sentences: Sequence[np.ndarray]) -> float:
    """Perplexity of the add-one smoothed unigram model from ``counts``."""
    p = (counts.astype(np.float64) + 1.0)
    p /= p.sum()
    toks = np.concatenate([np.asarray(s) for s in sentences if len(s)])
    return float(np.exp(-np.mean(np.log(p[toks]))))
