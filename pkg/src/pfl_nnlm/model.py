"""FOFE feedforward language model with tied input/output embeddings.

Parameters live in a flat name -> array mapping so that deltas, clipping and
serialization can treat the model as an ordered list of tensors. Names:

    embedding                 V x d
    dense{i}.w / dense{i}.b   hidden layers (ReLU)
    projection                last hidden width x d
    <name>.L / <name>.R       low-rank factors added by ``lora_wrap``

All arithmetic runs in float64; stored parameters keep their own dtype
(float32 for experiments, float64 for gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit, logsumexp

BOS_ID = 0
UNK_ID = 1

EMBEDDING = "embedding"
PROJECTION = "projection"


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 100_000
    embed_dim: int = 256
    fofe_order: int = 3
    fofe_alpha: float = 0.7
    hidden_widths: tuple[int, ...] = (768, 768, 768, 768)
    lora_rank: int | None = None
    nce_noise_k: int = 1024
    tie_embeddings: bool = True
    embed_init_scale: float = 0.05

    def __post_init__(self):
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if not 0 < self.fofe_alpha < 1:
            raise ModelError(f"fofe_alpha must be in (0, 1), got {self.fofe_alpha}")
        if self.vocab_size < 2:
            raise ModelError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.embed_dim < 1 or self.fofe_order < 1:
            raise ModelError("embed_dim and fofe_order must be >= 1")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ModelError("need at least one hidden layer of positive width")
        if self.nce_noise_k < 1:
            raise ModelError(f"nce_noise_k must be >= 1, got {self.nce_noise_k}")
        if not self.tie_embeddings:
            raise ModelError("only tied input/output embeddings are supported")
        if self.lora_rank is not None:
            check_lora_rank(self, self.lora_rank)

    @property
    def input_dim(self) -> int:
        return self.fofe_order * self.embed_dim

    def dense_shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim,) + self.hidden_widths
        return [(dims[i], dims[i + 1]) for i in range(len(self.hidden_widths))]

    def base_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {EMBEDDING: (self.vocab_size, self.embed_dim)}
        for i, (fan_in, fan_out) in enumerate(self.dense_shapes()):
            shapes[f"dense{i}.w"] = (fan_in, fan_out)
            shapes[f"dense{i}.b"] = (fan_out,)
        shapes[PROJECTION] = (self.hidden_widths[-1], self.embed_dim)
        return shapes

    def matrix_names(self) -> list[str]:
        return [n for n, s in self.base_shapes().items() if len(s) == 2]


def check_lora_rank(cfg: ModelConfig, r: int) -> None:
    if r < 1:
        raise ModelError(f"LoRA rank must be >= 1, got {r}")
    limit = min(cfg.vocab_size, cfg.embed_dim, min(cfg.hidden_widths))
    if r >= limit:
        raise ModelError(f"LoRA rank {r} must be < {limit} (min of V, d and hidden widths)")


@dataclass
class ModelParams:
    """Named parameter tensors plus the set of frozen (non-trainable) names."""

    cfg: ModelConfig
    tensors: dict[str, np.ndarray]
    frozen: frozenset[str] = field(default_factory=frozenset)

    @property
    def lora(self) -> bool:
        return f"{EMBEDDING}.L" in self.tensors

    @property
    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if n not in self.frozen]

    @property
    def embedding_row_name(self) -> str:
        """Trainable tensor whose rows are indexed by word id."""
        return f"{EMBEDDING}.L" if self.lora else EMBEDDING

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()}, self.frozen)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.astype(dtype) for k, v in self.tensors.items()},
                           self.frozen)

    def trainable(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[n] for n in self.trainable_names}

    def num_trainable(self) -> int:
        return sum(self.tensors[n].size for n in self.trainable_names)

    def check_finite(self) -> None:
        for name, arr in self.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"non-finite values in parameter {name!r}")

    def effective(self, name: str) -> np.ndarray:
        """Base matrix with its low-rank correction merged in (float64)."""
        base = np.asarray(self.tensors[name], dtype=np.float64)
        if f"{name}.L" not in self.tensors:
            return base
        return lora_merge(base, self.tensors[f"{name}.L"], self.tensors[f"{name}.R"])


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """He-uniform dense layers, uniform(+-0.05) embedding, zero biases."""
    tensors: dict[str, np.ndarray] = {}
    for name, shape in cfg.base_shapes().items():
        if name == EMBEDDING:
            s = cfg.embed_init_scale
            arr = rng.uniform(-s, s, size=shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = arr.astype(dtype)
    params = ModelParams(cfg, tensors)
    if cfg.lora_rank is not None:
        params = lora_wrap(params, cfg.lora_rank, rng)
    return params


def zero_params(cfg: ModelConfig, dtype=np.float32) -> ModelParams:
    return ModelParams(cfg, {n: np.zeros(s, dtype=dtype) for n, s in cfg.base_shapes().items()})


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

def lora_merge(W: np.ndarray, L: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Return ``W + L @ R``."""
    W, L, R = (np.asarray(a, dtype=np.float64) for a in (W, L, R))
    if L.ndim != 2 or R.ndim != 2 or L.shape[1] != R.shape[0] or W.shape != (L.shape[0], R.shape[1]):
        raise ModelError(f"LoRA shape mismatch: W{W.shape}, L{L.shape}, R{R.shape}")
    return W + L @ R


def lora_wrap(params: ModelParams, r: int, rng: np.random.Generator) -> ModelParams:
    """Freeze every matrix and attach low-rank factors.

    ``L`` starts at zero so the wrapped model computes exactly what the base
    model did; ``R`` is drawn from N(0, 1/r). Biases stay trainable.
    """
    if params.lora:
        raise ModelError("parameters are already LoRA-wrapped")
    cfg = params.cfg
    check_lora_rank(cfg, r)
    tensors = dict(params.tensors)
    frozen = set(params.frozen)
    for name in cfg.matrix_names():
        rows, cols = tensors[name].shape
        dtype = tensors[name].dtype
        tensors[f"{name}.L"] = np.zeros((rows, r), dtype=dtype)
        tensors[f"{name}.R"] = rng.normal(0.0, np.sqrt(1.0 / r), size=(r, cols)).astype(dtype)
        frozen.add(name)
    new_cfg = ModelConfig(**{**cfg.__dict__, "lora_rank": r})
    return ModelParams(new_cfg, tensors, frozenset(frozen))


# ---------------------------------------------------------------------------
# FOFE
# ---------------------------------------------------------------------------

def fofe_encode(history: Sequence[int], cfg: ModelConfig, E: np.ndarray) -> np.ndarray:
    """Concatenated FOFE codes of the ``fofe_order`` most recent positions.

    ``z_j = alpha * z_{j-1} + e(w_j)`` over the whole history; codes for
    positions before the start of ``history`` are zero. The most recent code
    comes first.
    """
    history = np.asarray(history, dtype=np.int64)
    if history.size == 0:
        raise ModelError("empty history")
    if history.min() < 0 or history.max() >= E.shape[0]:
        raise ModelError("token id out of range")
    E = np.asarray(E, dtype=np.float64)
    codes = []
    z = np.zeros(E.shape[1])
    for w in history:
        z = cfg.fofe_alpha * z + E[w]
        codes.append(z)
    out = np.zeros(cfg.fofe_order * E.shape[1])
    for back in range(cfg.fofe_order):
        pos = len(codes) - 1 - back
        if pos >= 0:
            out[back * E.shape[1]:(back + 1) * E.shape[1]] = codes[pos]
    return out


def fofe_weights(order: int, width: int, alpha: float) -> np.ndarray:
    """(order, width) coefficients mapping right-aligned history slots to codes."""
    A = np.zeros((order, width))
    for j in range(order):
        end = width - 1 - j
        if end >= 0:
            A[j, :end + 1] = alpha ** (end - np.arange(end + 1))
    return A


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class Minibatch:
    """Right-aligned BOS-padded histories (-1 marks unused slots), targets and NCE noise."""

    histories: np.ndarray
    targets: np.ndarray
    noise: np.ndarray | None = None

    def __post_init__(self):
        if len(self.histories) != len(self.targets):
            raise ModelError("histories and targets must have equal length")

    def __len__(self) -> int:
        return len(self.targets)

    def check_vocab(self, V: int) -> None:
        ids = [self.targets, self.histories[self.histories >= 0]]
        if self.noise is not None:
            ids.append(self.noise)
        for a in ids:
            if a.size and (a.min() < 0 or a.max() >= V):
                raise ModelError(f"token id out of range for V={V}")


def sentence_histories(sentence: Sequence[int], order: int, bos_id: int = BOS_ID):
    """(history, target) pairs; each history is the BOS-padded sentence prefix."""
    padded = [bos_id] * order + list(sentence)
    return [(padded[:order + p], int(w)) for p, w in enumerate(sentence)]


def make_minibatch(sentences: Iterable[Sequence[int]], cfg: ModelConfig,
                   noise_sampler: "UnigramSampler | None" = None,
                   rng: np.random.Generator | None = None,
                   bos_id: int = BOS_ID) -> Minibatch:
    pairs = [p for s in sentences for p in sentence_histories(s, cfg.fofe_order, bos_id)]
    if not pairs:
        return Minibatch(np.zeros((0, cfg.fofe_order), np.int64), np.zeros(0, np.int64))
    width = max(len(h) for h, _ in pairs)
    hist = np.full((len(pairs), width), -1, dtype=np.int64)
    for i, (h, _) in enumerate(pairs):
        hist[i, width - len(h):] = h
    targets = np.array([t for _, t in pairs], dtype=np.int64)
    noise = None
    if noise_sampler is not None:
        noise = noise_sampler.sample(rng, (len(pairs), cfg.nce_noise_k))
    return Minibatch(hist, targets, noise)


class UnigramSampler:
    """Draws i.i.d. word ids from a probability vector (with replacement)."""

    def __init__(self, p: np.ndarray):
        p = np.asarray(p, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or not p.sum() > 0:
            raise ModelError("noise distribution must be a non-negative vector with positive mass")
        self.p = p
        self._cdf = np.cumsum(p)
        self._cdf /= self._cdf[-1]

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        u = rng.random(size)
        idx = np.searchsorted(self._cdf, u, side="right")
        return np.minimum(idx, len(self.p) - 1).astype(np.int64)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _embed_rows(params: ModelParams, ids: np.ndarray) -> np.ndarray:
    rows = np.asarray(params[EMBEDDING][ids], dtype=np.float64)
    if params.lora:
        L = np.asarray(params[f"{EMBEDDING}.L"][ids], dtype=np.float64)
        rows = rows + L @ np.asarray(params[f"{EMBEDDING}.R"], dtype=np.float64)
    return rows


def _embed_rows_backward(params: ModelParams, ids: np.ndarray, g_rows: np.ndarray,
                         grads: dict[str, np.ndarray]) -> None:
    ids = ids.reshape(-1)
    g_rows = g_rows.reshape(len(ids), -1)
    if params.lora:
        R = np.asarray(params[f"{EMBEDDING}.R"], dtype=np.float64)
        L = np.asarray(params[f"{EMBEDDING}.L"][ids], dtype=np.float64)
        np.add.at(grads[f"{EMBEDDING}.L"], ids, g_rows @ R.T)
        grads[f"{EMBEDDING}.R"] += L.T @ g_rows
    if EMBEDDING not in params.frozen:
        np.add.at(grads[EMBEDDING], ids, g_rows)


@dataclass
class Activations:
    context: np.ndarray        # (n, k*d) FOFE input
    layers: list[np.ndarray]   # post-ReLU activations of each hidden layer
    output: np.ndarray         # (n, d) projected vector compared against embeddings


def encode_batch(params: ModelParams, histories: np.ndarray) -> np.ndarray:
    cfg = params.cfg
    n, width = histories.shape
    mask = histories >= 0
    rows = np.zeros((n, width, cfg.embed_dim))
    rows[mask] = _embed_rows(params, histories[mask])
    A = fofe_weights(cfg.fofe_order, width, cfg.fofe_alpha)
    return np.einsum("jh,nhd->njd", A, rows).reshape(n, cfg.input_dim)


def forward(params: ModelParams, context: np.ndarray) -> Activations:
    """Run the dense stack on FOFE context vectors."""
    cfg = params.cfg
    x = np.asarray(context, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ModelError(f"context has shape {x.shape}, expected (n, {cfg.input_dim})")
    layers = []
    a = x
    for i in range(len(cfg.hidden_widths)):
        z = a @ params.effective(f"dense{i}.w") + params[f"dense{i}.b"]
        a = np.maximum(z, 0.0)
        layers.append(a)
    out = a @ params.effective(PROJECTION)
    return Activations(x, layers, out)


def scores(params: ModelParams, acts: Activations, candidates: np.ndarray | None = None) -> np.ndarray:
    """Unnormalized scores <output, E_w>; all V words when ``candidates`` is None."""
    if candidates is None:
        E = params.effective(EMBEDDING)
        return acts.output @ E.T
    rows = _embed_rows(params, candidates.reshape(-1)).reshape(*candidates.shape, -1)
    if candidates.ndim == 1:
        return np.einsum("nd,nd->n", acts.output, rows)
    return np.einsum("nd,nkd->nk", acts.output, rows)


def _backward_dense(params: ModelParams, acts: Activations, g_out: np.ndarray,
                    grads: dict[str, np.ndarray]) -> np.ndarray:
    """Backprop from the projected output to the FOFE context; returns d loss / d context."""
    cfg = params.cfg
    _accumulate_matrix(params, PROJECTION, acts.layers[-1].T @ g_out, grads)
    g = g_out @ params.effective(PROJECTION).T
    for i in reversed(range(len(cfg.hidden_widths))):
        g = g * (acts.layers[i] > 0)
        inp = acts.layers[i - 1] if i > 0 else acts.context
        if f"dense{i}.b" not in params.frozen:
            grads[f"dense{i}.b"] += g.sum(axis=0)
        name = f"dense{i}.w"
        _accumulate_matrix(params, name, inp.T @ g, grads)
        g = g @ params.effective(name).T
    return g


def _accumulate_matrix(params: ModelParams, name: str, g_eff: np.ndarray,
                       grads: dict[str, np.ndarray]) -> None:
    if name not in params.frozen:
        grads[name] += g_eff
    if f"{name}.L" in params.tensors:
        L = np.asarray(params[f"{name}.L"], dtype=np.float64)
        R = np.asarray(params[f"{name}.R"], dtype=np.float64)
        grads[f"{name}.L"] += g_eff @ R.T
        grads[f"{name}.R"] += L.T @ g_eff


def _backward_context(params: ModelParams, histories: np.ndarray, g_ctx: np.ndarray,
                      grads: dict[str, np.ndarray]) -> None:
    cfg = params.cfg
    n, width = histories.shape
    A = fofe_weights(cfg.fofe_order, width, cfg.fofe_alpha)
    g_rows = np.einsum("jh,njd->nhd", A, g_ctx.reshape(n, cfg.fofe_order, cfg.embed_dim))
    mask = histories >= 0
    _embed_rows_backward(params, histories[mask], g_rows[mask], grads)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {n: np.zeros(params[n].shape) for n in params.trainable_names}


# ---------------------------------------------------------------------------
# NCE
# ---------------------------------------------------------------------------

def nce_posteriors(p_model: np.ndarray, p_noise: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(p(D=0 | c, w), p(D=1 | c, w)) for model and noise probabilities."""
    p_model = np.asarray(p_model, dtype=np.float64)
    p_noise = np.asarray(p_noise, dtype=np.float64)
    if np.any(p_noise <= 0):
        raise ModelError("unigram probability must be positive for NCE")
    denom = p_model + k * p_noise
    return k * p_noise / denom, p_model / denom


def nce_loss_and_grad(params: ModelParams, batch: Minibatch, p_uni: np.ndarray
                      ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-example NCE loss and its gradient w.r.t. every trainable tensor.

    ``p_model(w, c) = exp(score)``. For each example the data word must be
    classified as data and each of the k noise words as noise:

        loss = -log p(D=1|c,w) - sum_j log p(D=0|c,w_j)

    Only rows of the target/noise/history words get embedding gradient.
    """
    cfg = params.cfg
    if batch.noise is None:
        raise ModelError("minibatch has no noise samples")
    k = batch.noise.shape[1]
    if k < 1:
        raise ModelError("need at least one noise sample")
    batch.check_vocab(cfg.vocab_size)
    p_uni = np.asarray(p_uni, dtype=np.float64)
    log_kp_t = _log_noise_mass(p_uni, batch.targets, k)
    log_kp_n = _log_noise_mass(p_uni, batch.noise, k)

    grads = zero_grads(params)
    n = len(batch)
    if n == 0:
        return 0.0, grads
    ctx = encode_batch(params, batch.histories)
    acts = forward(params, ctx)
    rows_t = _embed_rows(params, batch.targets)
    rows_n = _embed_rows(params, batch.noise.reshape(-1)).reshape(n, k, -1)
    u = acts.output
    # logit of p(D=1) is score - log(k p_uni)
    logit_t = np.einsum("nd,nd->n", u, rows_t) - log_kp_t
    logit_n = np.einsum("nd,nkd->nk", u, rows_n) - log_kp_n
    loss = (np.logaddexp(0.0, -logit_t).sum() + np.logaddexp(0.0, logit_n).sum()) / n
    if not np.isfinite(loss):
        raise ModelError("non-finite NCE loss")

    g_t = (expit(logit_t) - 1.0) / n
    g_n = expit(logit_n) / n
    g_u = g_t[:, None] * rows_t + np.einsum("nk,nkd->nd", g_n, rows_n)
    _embed_rows_backward(params, batch.targets, g_t[:, None] * u, grads)
    _embed_rows_backward(params, batch.noise, g_n[:, :, None] * u[:, None, :], grads)
    g_ctx = _backward_dense(params, acts, g_u, grads)
    _backward_context(params, batch.histories, g_ctx, grads)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient for {name!r}")
    return float(loss), grads


def _log_noise_mass(p_uni: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    p = p_uni[ids]
    if np.any(p <= 0):
        raise ModelError("sampled word has zero unigram probability")
    return np.log(k * p)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def log_probs(params: ModelParams, batch: Minibatch) -> np.ndarray:
    """Full-softmax log-probability of each target."""
    acts = forward(params, encode_batch(params, batch.histories))
    s = scores(params, acts)
    return s[np.arange(len(batch)), batch.targets] - logsumexp(s, axis=1)


def softmax_eval(params: ModelParams, sentences: Sequence[Sequence[int]],
                 batch_sentences: int = 256) -> float:
    """Perplexity under the full softmax over the vocabulary."""
    sentences = [s for s in sentences if len(s)]
    if not sentences:
        raise ModelError("cannot evaluate on an empty dataset")
    total, count = 0.0, 0
    for start in range(0, len(sentences), batch_sentences):
        batch = make_minibatch(sentences[start:start + batch_sentences], params.cfg)
        batch.check_vocab(params.cfg.vocab_size)
        lp = log_probs(params, batch)
        total -= lp.sum()
        count += len(lp)
    ppl = float(np.exp(total / count))
    if not np.isfinite(ppl):
        raise ModelError("non-finite perplexity")
    return ppl


def grads_like(params: ModelParams, values: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {n: np.asarray(values[n], dtype=np.float64) for n in params.trainable_names}
