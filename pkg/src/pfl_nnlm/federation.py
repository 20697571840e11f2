"""Private federated training loop.

One round:

1. Poisson-sample a cohort; the server draws the PEU word set.
2. Each client runs plain SGD on the NCE loss starting from theta_t.
3. Client deltas become wire payloads, are clipped to ``S`` and summed.
4. Gaussian noise (std sigma * S) goes onto the sum (sampled rows and the
   dense part only); the result is divided by q * N (or |C|) and expanded.
5. Server optimizer step, then the EMA shadow update.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .data import (FederatedCorpus, SynthSpec, read_jsonl, split_users, synth_corpus,
                   unigram_ppl)
from .model import (ModelError, ModelParams, UnigramSampler, init_params, make_minibatch,
                    nce_loss_and_grad, softmax_eval)
from .payload import (INCLUSION, SparseEmbeddingDelta, WordSampler, build_client_payload,
                      estimate_inclusion, expand_payload, payload_size_bytes)
from .privacy import PrivacyLedger, PrivacyParams, calibrate_sigma, clip_factor, gaussian_noise_sum

log = logging.getLogger(__name__)

Delta = dict[str, np.ndarray]

# stream tags keep per-purpose random streams independent of each other
_COHORT, _WORDS, _NOISE, _CLIENT, _INIT, _INCL = range(6)


class FederationError(RuntimeError):
    pass


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, keys...), e.g. (seed, round, client)."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


# ---------------------------------------------------------------------------
# Server state
# ---------------------------------------------------------------------------

@dataclass
class ServerState:
    params: ModelParams
    ema: ModelParams
    gamma: float = 0.999
    server_lr: float = 1.0
    momentum: float = 0.0
    round: int = 0
    velocity: Delta | None = None
    epsilon_spent: list[float] = field(default_factory=list)

    @classmethod
    def create(cls, params: ModelParams, gamma: float = 0.999, server_lr: float = 1.0,
               momentum: float = 0.0) -> "ServerState":
        if not 0 <= gamma <= 1:
            raise FederationError(f"EMA decay must be in [0, 1], got {gamma}")
        return cls(params, params.copy(), gamma, server_lr, momentum)


@dataclass
class RoundReport:
    round: int
    cohort_size: int
    mean_delta_norm: float
    max_delta_norm: float
    ppl_theta: float | None
    ppl_ema: float | None
    epsilon: float | None
    payload_bytes: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


# ---------------------------------------------------------------------------
# Round pieces
# ---------------------------------------------------------------------------

def sample_cohort(population: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson sampling: each client joins independently with probability q."""
    if not 0 < q <= 1:
        raise FederationError(f"sampling rate must be in (0, 1], got {q}")
    if q == 1:
        return np.arange(population)
    return np.flatnonzero(rng.random(population) < q)


def sgd_step(params: ModelParams, grads: Mapping[str, np.ndarray], lr: float) -> None:
    """In-place ``theta -= lr * grad``; arithmetic in float64, stored in the params dtype."""
    for name, g in grads.items():
        p = params.tensors[name]
        params.tensors[name] = (p.astype(np.float64) - lr * g).astype(p.dtype)


def local_train(sentences: Sequence[np.ndarray], params: ModelParams, p_uni: np.ndarray,
                local_lr: float, rng: np.random.Generator, epochs: int = 1,
                batch_size: int = 16, client_id=None) -> Delta:
    """Plain SGD on the NCE loss; returns ``theta_i - theta_t`` for trainable tensors.

    Sentences are shuffled each epoch and grouped ``batch_size`` at a time.
    """
    if not len(sentences):
        raise FederationError(f"client {client_id} has no data")
    local = params.copy()
    sampler = UnigramSampler(p_uni)
    for epoch in range(epochs):
        order = rng.permutation(len(sentences))
        for b, start in enumerate(range(0, len(order), batch_size)):
            batch = make_minibatch([sentences[i] for i in order[start:start + batch_size]],
                                   params.cfg, sampler, rng)
            if len(batch) == 0:
                continue
            try:
                _, grads = nce_loss_and_grad(local, batch, p_uni)
            except ModelError as exc:
                raise FederationError(
                    f"client {client_id}, epoch {epoch}, batch {b}: {exc}") from exc
            sgd_step(local, grads, local_lr)
    return {n: local[n].astype(np.float64) - params[n].astype(np.float64)
            for n in params.trainable_names}


@dataclass
class AggregateResult:
    pseudo_gradient: Delta
    cohort_size: int
    pre_clip_norms: list[float]


def _empty_payload(template: ModelParams, words: np.ndarray | None) -> SparseEmbeddingDelta:
    row = template.embedding_row_name
    V, width = template[row].shape
    idx = np.arange(V) if words is None else np.sort(np.asarray(words, dtype=np.int64))
    dense = {n: np.zeros(template[n].shape) for n in template.trainable_names if n != row}
    return SparseEmbeddingDelta(idx, np.zeros((idx.size, width)), dense, row)


def aggregate_round(deltas: Mapping[int, Delta], words: np.ndarray | None,
                    sampler: WordSampler | None, privacy: PrivacyParams, population: int,
                    template: ModelParams, rng: np.random.Generator,
                    divide_by: str = "expected") -> AggregateResult:
    """Clip, sum, noise and average client deltas into a dense pseudo-gradient.

    Clients are reduced in ascending id order, so the result does not depend
    on the iteration order of ``deltas``.
    """
    row = template.embedding_row_name
    V = template[row].shape[0]
    total = _empty_payload(template, words)
    acc = total.flat()
    norms = []
    for cid in sorted(deltas):
        delta = deltas[cid]
        if set(delta) != set(template.trainable_names):
            raise FederationError(f"client {cid}: delta tensors do not match the model")
        for n in template.trainable_names:
            if delta[n].shape != template[n].shape:
                raise FederationError(f"client {cid}: {n} has shape {delta[n].shape}, "
                                      f"expected {template[n].shape}")
        payload = build_client_payload({n: delta[n] for n in template.trainable_names},
                                       words, sampler, row)
        vec = payload.flat()
        if not np.all(np.isfinite(vec)):
            raise FederationError(f"client {cid}: non-finite payload")
        norm = float(np.linalg.norm(vec))
        norms.append(norm)
        scale = clip_factor(norm, privacy.clip_radius)
        acc = acc + (vec if scale == 1.0 else vec * scale)
    noised = gaussian_noise_sum(acc, privacy.noise_sigma, privacy.clip_radius, rng)
    if divide_by == "expected":
        denom = privacy.sampling_rate * population
    elif divide_by == "cohort":
        denom = float(len(deltas))
    else:
        raise FederationError(f"unknown divide_by mode {divide_by!r}")
    if denom == 0:
        noised = np.zeros_like(noised)
    elif denom != 1.0:
        noised = noised / denom
    pseudo = expand_payload(total.with_flat(noised), V)
    return AggregateResult(pseudo, len(deltas), norms)


def server_step(state: ServerState, pseudo_gradient: Mapping[str, np.ndarray]) -> ModelParams:
    """theta <- theta + lr * v, with v <- momentum * v + pseudo_gradient."""
    for name, g in pseudo_gradient.items():
        if not np.all(np.isfinite(g)):
            raise FederationError(f"non-finite pseudo-gradient for {name!r}")
    if state.momentum:
        if state.velocity is None:
            state.velocity = {n: np.zeros(state.params[n].shape) for n in pseudo_gradient}
        for n, g in pseudo_gradient.items():
            state.velocity[n] = state.momentum * state.velocity[n] + g
        update = state.velocity
    else:
        update = pseudo_gradient
    for n, v in update.items():
        p = state.params.tensors[n]
        new = p.astype(np.float64) + state.server_lr * v
        if not np.all(np.isfinite(new)):
            raise FederationError(f"server update made {n!r} non-finite")
        state.params.tensors[n] = new.astype(p.dtype)
    state.round += 1
    return state.params


def ema_update(state: ServerState) -> ModelParams:
    """phi <- gamma * phi + (1 - gamma) * theta, tensor by tensor."""
    g = state.gamma
    for n, theta in state.params.tensors.items():
        phi = state.ema.tensors[n]
        state.ema.tensors[n] = (g * phi.astype(np.float64)
                                + (1.0 - g) * theta.astype(np.float64)).astype(phi.dtype)
    return state.ema


# ---------------------------------------------------------------------------
# Experiment driver
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    theta: ModelParams
    phi: ModelParams
    sigma: float
    unigram_ppl: float
    metrics_path: Path | None = None


def load_corpus(cfg: ExperimentConfig) -> tuple[FederatedCorpus, list[np.ndarray]]:
    """Training corpus and dev sentences for a config."""
    if cfg.corpus_path:
        corpus = read_jsonl(cfg.corpus_path, cfg.vocab_size, cfg.lowercase)
        if cfg.dev_path:
            dev_corpus = read_jsonl(cfg.dev_path, cfg.vocab_size, cfg.lowercase)
            dev = [corpus.vocab.encode(dev_corpus.vocab.decode(s)) for s in dev_corpus.sentences()]
            return corpus, dev
        return split_users(corpus, cfg.dev_fraction, stream(cfg.seed, 99))
    spec = SynthSpec(num_users=cfg.synth_users + cfg.synth_dev_users, vocab_size=cfg.vocab_size,
                     sentences_per_user=cfg.synth_sentences_per_user, num_topics=cfg.synth_topics,
                     zipf_exponent=cfg.synth_zipf, mean_sentence_length=cfg.synth_sentence_length,
                     transition_strength=cfg.synth_transition_strength,
                     topic_skew=cfg.synth_topic_skew, seed=cfg.seed)
    full = synth_corpus(spec)
    train_users = full.users[:cfg.synth_users]
    dev = [s for _, ss in full.users[cfg.synth_users:] for s in ss]
    counts = np.bincount(np.concatenate([s for _, ss in train_users for s in ss]),
                         minlength=cfg.vocab_size)
    vocab = type(full.vocab)(full.vocab.words, counts)
    train = FederatedCorpus(train_users, vocab,
                            {u: full.labels[u] for u, _ in train_users})
    return train, dev


def resolve_sigma(cfg: ExperimentConfig) -> float:
    if cfg.noise_sigma is not None:
        return cfg.noise_sigma
    return calibrate_sigma(cfg.epsilon, cfg.delta, cfg.sampling_rate, cfg.rounds)


def make_word_sampler(cfg: ExperimentConfig, counts: np.ndarray, V_rows: int) -> WordSampler | None:
    if cfg.peu_m is None:
        return None
    if cfg.peu_q == "uniform":
        sampler = WordSampler.uniform(V_rows, cfg.peu_m, cfg.peu_weighting)
    else:
        sampler = WordSampler.from_counts(counts, cfg.peu_m, cfg.peu_weighting, cfg.peu_temperature)
    if cfg.peu_weighting == INCLUSION and sampler.inclusion is None:
        sampler.inclusion = estimate_inclusion(sampler, cfg.peu_inclusion_trials,
                                               stream(cfg.seed, _INCL))
    return sampler


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None,
                   corpus: tuple[FederatedCorpus, list[np.ndarray]] | None = None,
                   write_checkpoints: bool = True) -> ExperimentResult:
    """Run ``cfg.rounds`` rounds of private federated training.

    Writes ``metrics.jsonl`` (header line, then one line per round),
    ``config.txt`` and final theta/phi checkpoints into ``output_dir``.
    """
    cfg.validate(for_run=True)
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, dev = corpus if corpus is not None else load_corpus(cfg)
    if train.vocab_size != cfg.vocab_size:
        raise FederationError(f"corpus vocabulary has {train.vocab_size} entries, "
                              f"config says {cfg.vocab_size}")
    if cfg.eval_max_sentences:
        dev = dev[:cfg.eval_max_sentences]
    counts = train.vocab.counts
    p_uni = train.p_uni
    baseline = unigram_ppl(counts, dev)
    population = len(train.users)

    try:
        sigma = resolve_sigma(cfg)
    except ValueError as exc:
        raise FederationError(f"refusing to start: {exc}") from exc
    privacy = PrivacyParams(cfg.epsilon, cfg.delta, cfg.sampling_rate, cfg.rounds,
                            cfg.clip_radius, sigma)
    ledger = PrivacyLedger(cfg.sampling_rate, sigma, cfg.delta) if sigma > 0 else None

    mcfg = cfg.model_config()
    params = init_params(mcfg, stream(cfg.seed, _INIT))
    state = ServerState.create(params, cfg.ema_gamma, cfg.server_lr, cfg.server_momentum)
    row = params.embedding_row_name
    sampler = make_word_sampler(cfg, counts, params[row].shape[0])
    bytes_per_client = payload_size_bytes(mcfg, cfg.peu_m, cfg.lora_rank)

    metrics_path = out / "metrics.jsonl"
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    header = {"type": "header", "version": __version__, "config": cfg.to_dict(),
              "sigma": sigma, "population": population, "unigram_ppl": baseline}
    reports: list[RoundReport] = []
    csv_fh = open(out / "metrics.csv", "w", encoding="utf-8") if cfg.csv else None
    if csv_fh:
        csv_fh.write("round,ppl_theta,ppl_ema,epsilon\n")
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        with open(metrics_path, "w", encoding="utf-8") as mfh:
            mfh.write(json.dumps(header) + "\n")
            mfh.flush()
            for t in range(1, cfg.rounds + 1):
                try:
                    report = _run_round(t, cfg, train, dev, state, sampler, privacy, population,
                                        p_uni, ledger, bytes_per_client, pool)
                except (ValueError, RuntimeError) as exc:
                    raise FederationError(f"round {t}: {exc}") from exc
                reports.append(report)
                mfh.write(report.to_json() + "\n")
                mfh.flush()
                if csv_fh and report.ppl_theta is not None:
                    csv_fh.write(f"{t},{report.ppl_theta!r},{report.ppl_ema!r},{report.epsilon!r}\n")
    finally:
        if pool:
            pool.shutdown()
        if csv_fh:
            csv_fh.close()
    if write_checkpoints:
        save_checkpoint(out / "theta", state.params, cfg, state.round)
        save_checkpoint(out / "phi", state.ema, cfg, state.round)
    return ExperimentResult(reports, state.params, state.ema, sigma, baseline, metrics_path)


def _run_round(t, cfg, train, dev, state, sampler, privacy, population, p_uni, ledger,
               bytes_per_client, pool) -> RoundReport:
    cohort = sample_cohort(population, cfg.sampling_rate, stream(cfg.seed, t, _COHORT))
    words = sampler.sample(stream(cfg.seed, t, _WORDS)) if sampler is not None else None
    theta = state.params

    def train_client(cid):
        uid, sents = train.users[cid]
        return local_train(sents, theta, p_uni, cfg.local_lr,
                           stream(cfg.seed, t, _CLIENT, int(cid)), cfg.local_epochs,
                           cfg.batch_size, client_id=uid)

    ids = [int(c) for c in cohort]
    results = list(pool.map(train_client, ids)) if pool else [train_client(c) for c in ids]
    deltas = dict(zip(ids, results))
    agg = aggregate_round(deltas, words, sampler, privacy, population, theta,
                          stream(cfg.seed, t, _NOISE), cfg.divide_by)
    server_step(state, agg.pseudo_gradient)
    ema_update(state)
    eps = ledger.spend() if ledger is not None else None
    if eps is not None:
        state.epsilon_spent.append(eps)
    ppl_theta = ppl_ema = None
    if t % cfg.eval_every == 0 or t == cfg.rounds:
        ppl_theta = softmax_eval(state.params, dev)
        ppl_ema = softmax_eval(state.ema, dev)
    norms = agg.pre_clip_norms
    return RoundReport(
        round=t, cohort_size=agg.cohort_size,
        mean_delta_norm=float(np.mean(norms)) if norms else 0.0,
        max_delta_norm=float(np.max(norms)) if norms else 0.0,
        ppl_theta=ppl_theta, ppl_ema=ppl_ema,
        epsilon=None if eps is None or math.isinf(eps) else eps,
        payload_bytes=bytes_per_client)
