"""Partial embedding updates: sampled embedding rows on the wire.

Per round the server draws a word set W of ``m`` ids without replacement
from a distribution Q and broadcasts it. Clients train the full model and
send only the embedding rows in W, each reweighted so the server-side
reconstruction is (approximately) unbiased, followed by every other
trainable tensor unchanged.

Wire format (all little-endian). Version 2, the default, marks the sampled
ids in a V-bit membership bitmap so index overhead does not grow with m::

    u32 version=2 | u32 m | u32 row_width | u32 dense_length | u32 vocab_size
    u8  bitmap[ceil(V / 8)]   (bit w set iff w was sent; LSB-first)
    f32 rows[m * row_width]   (ascending id order)
    f32 dense[dense_length]   (non-embedding trainables, in parameter order)

Version 1 sends the ids themselves::

    u32 version=1 | u32 m | u32 row_width | u32 dense_length
    u32 indices[m]            (strictly increasing)
    f32 rows[m * row_width]
    f32 dense[dense_length]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .model import ModelConfig, ModelParams

BITMAP = 2
INDEX_LIST = 1
HEADERS = {INDEX_LIST: struct.Struct("<4I"), BITMAP: struct.Struct("<5I")}
BYTES_PER_SCALAR = 4
BYTES_PER_INDEX = 4

APPROX_Q = "approx-Q"
INCLUSION = "inclusion-prob"


class PayloadError(ValueError):
    pass


@dataclass
class WordSampler:
    """Distribution Q over the vocabulary plus the number of words per round.

    ``weighting`` picks the row weight used by clients: ``1/Q(w)`` in
    ``approx-Q`` mode, ``1/pi(w)`` (inclusion probability) in
    ``inclusion-prob`` mode.
    """

    q: np.ndarray
    m: int
    weighting: str = APPROX_Q
    inclusion: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        if abs(self.q.sum() - 1.0) > 1e-9 or np.any(self.q < 0):
            raise PayloadError("Q must be a probability vector")
        if self.weighting not in (APPROX_Q, INCLUSION):
            raise PayloadError(f"unknown weighting mode {self.weighting!r}")
        support = int(np.count_nonzero(self.q))
        if not 0 <= self.m <= support:
            raise PayloadError(f"cannot sample m={self.m} distinct words from a support of {support}")

    @classmethod
    def uniform(cls, V: int, m: int, weighting: str = APPROX_Q) -> "WordSampler":
        s = cls(np.full(V, 1.0 / V), m, weighting)
        if weighting == INCLUSION:
            s.inclusion = np.full(V, m / V)
        return s

    @classmethod
    def from_counts(cls, counts: np.ndarray, m: int, weighting: str = APPROX_Q,
                    temperature: float = 1.0) -> "WordSampler":
        """Smoothed unigram Q: (counts + 1) ** (1 / temperature), normalized."""
        w = (np.asarray(counts, dtype=np.float64) + 1.0) ** (1.0 / temperature)
        return cls(w / w.sum(), m, weighting)

    @property
    def vocab_size(self) -> int:
        return len(self.q)

    def weights(self, words: np.ndarray) -> np.ndarray:
        if self.weighting == APPROX_Q:
            return 1.0 / self.q[words]
        if self.inclusion is None:
            raise PayloadError("inclusion-prob weighting needs an inclusion table "
                               "(see estimate_inclusion)")
        return 1.0 / self.inclusion[words]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return sample_words(self, rng)


def sample_words(sampler: WordSampler, rng: np.random.Generator) -> np.ndarray:
    """Draw ``m`` distinct ids by sequential draws from Q, renormalizing after each.

    Implemented with the Gumbel-top-k trick, which has exactly the same law
    as successive sampling without replacement. Returned ids are sorted.
    """
    q = sampler.q
    m = sampler.m
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    with np.errstate(divide="ignore"):
        keys = np.log(q) + rng.gumbel(size=q.shape)
    keys[q == 0] = -np.inf
    if m == len(q):
        chosen = np.arange(len(q))
    else:
        chosen = np.argpartition(-keys, m - 1)[:m]
    return np.sort(chosen).astype(np.int64)


def estimate_inclusion(sampler: WordSampler, trials: int, rng: np.random.Generator,
                       chunk: int = 1000) -> np.ndarray:
    """Monte Carlo table of pi(w) = P(w in W); exact when Q is uniform."""
    q = sampler.q
    V, m = len(q), sampler.m
    if np.allclose(q[q > 0], q[q > 0][0]) and np.all(q > 0):
        return np.full(V, m / V)
    hits = np.zeros(V)
    logq = np.where(q > 0, np.log(np.where(q > 0, q, 1.0)), -np.inf)
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        keys = logq[None, :] + rng.gumbel(size=(n, V))
        top = np.argpartition(-keys, m - 1, axis=1)[:, :m]
        hits += np.bincount(top.reshape(-1), minlength=V)
        done += n
    pi = hits / trials
    # never divide by an unobserved inclusion: floor at one hit
    return np.where(q > 0, np.maximum(pi, 1.0 / trials), 0.0)


@dataclass
class SparseEmbeddingDelta:
    """Weighted embedding rows for the sampled ids plus the dense remainder."""

    indices: np.ndarray
    rows: np.ndarray
    dense: dict[str, np.ndarray]
    row_name: str = "embedding"

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size > 1 and np.any(np.diff(self.indices) <= 0):
            raise PayloadError("payload indices must be strictly increasing")
        if self.rows.shape[0] != self.indices.size:
            raise PayloadError("one row per index required")
        if not np.all(np.isfinite(self.rows)):
            raise PayloadError("payload rows must be finite")

    def flat(self) -> np.ndarray:
        parts = [self.rows.reshape(-1)] + [v.reshape(-1) for v in self.dense.values()]
        return np.concatenate(parts).astype(np.float64) if parts else np.zeros(0)

    def with_flat(self, vec: np.ndarray) -> "SparseEmbeddingDelta":
        """Same layout, new values (used after clipping / noising)."""
        vec = np.asarray(vec, dtype=np.float64)
        n = self.rows.size
        rows = vec[:n].reshape(self.rows.shape)
        dense, off = {}, n
        for k, v in self.dense.items():
            dense[k] = vec[off:off + v.size].reshape(v.shape)
            off += v.size
        if off != vec.size:
            raise PayloadError("flat vector does not match payload layout")
        return SparseEmbeddingDelta(self.indices, rows, dense, self.row_name)

    @property
    def num_scalars(self) -> int:
        return self.rows.size + sum(v.size for v in self.dense.values())


def build_client_payload(delta: Mapping[str, np.ndarray], words: np.ndarray | None,
                         sampler: WordSampler | None, row_name: str = "embedding"
                         ) -> SparseEmbeddingDelta:
    """Restrict the embedding-row tensor of a full delta to ``words`` and reweight.

    With ``words=None`` every row is kept with weight 1 (PEU disabled).
    """
    if row_name not in delta:
        raise PayloadError(f"delta has no {row_name!r} tensor")
    table = np.asarray(delta[row_name], dtype=np.float64)
    V = table.shape[0]
    dense = {k: np.asarray(v, dtype=np.float64) for k, v in delta.items() if k != row_name}
    if words is None:
        return SparseEmbeddingDelta(np.arange(V), table.copy(), dense, row_name)
    words = np.asarray(words, dtype=np.int64)
    if words.size and (words.min() < 0 or words.max() >= V):
        raise PayloadError(f"sampled word ids must lie in [0, {V})")
    if sampler is not None and sampler.vocab_size != V:
        raise PayloadError("sampler vocabulary does not match the delta")
    words = np.sort(words)
    w = sampler.weights(words) if sampler is not None else np.ones(words.size)
    return SparseEmbeddingDelta(words, table[words] * w[:, None], dense, row_name)


def expand_payload(payload: SparseEmbeddingDelta, V: int) -> dict[str, np.ndarray]:
    """Dense delta: scatter rows into a zero V x width table, pass dense tensors through."""
    idx = payload.indices
    if idx.size != np.unique(idx).size:
        raise PayloadError("duplicate indices in payload")
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise PayloadError("payload index out of range")
    width = payload.rows.shape[1] if payload.rows.ndim == 2 else 0
    table = np.zeros((V, width))
    table[idx] = payload.rows
    out = {payload.row_name: table}
    out.update({k: v.copy() for k, v in payload.dense.items()})
    return out


# ---------------------------------------------------------------------------
# Size accounting and serialization
# ---------------------------------------------------------------------------

def dense_trainable_size(cfg: ModelConfig, lora_r: int | None = None) -> int:
    """Number of non-embedding-row trainable scalars."""
    n = 0
    for name, shape in cfg.base_shapes().items():
        if len(shape) == 1:
            n += shape[0]
        elif lora_r is None:
            if name != "embedding":
                n += shape[0] * shape[1]
        else:
            rows, cols = shape
            n += lora_r * cols  # R factor
            if name != "embedding":
                n += rows * lora_r  # L factor
    return n


def index_bytes(V: int, rows: int, version: int = BITMAP) -> int:
    if version == BITMAP:
        return (V + 7) // 8
    if version == INDEX_LIST:
        return BYTES_PER_INDEX * rows
    raise PayloadError(f"unknown wire version {version}")


def payload_size_bytes(cfg: ModelConfig, peu_m: int | None = None, lora_r: int | None = None,
                       version: int = BITMAP) -> int:
    """Exact serialized size of one client payload.

    Header, index overhead, then 4 bytes per transmitted scalar. Without PEU
    every vocabulary row is sent.
    """
    rows = cfg.vocab_size if peu_m is None else peu_m
    width = cfg.embed_dim if lora_r is None else lora_r
    return (HEADERS[version].size + index_bytes(cfg.vocab_size, rows, version)
            + BYTES_PER_SCALAR * (rows * width + dense_trainable_size(cfg, lora_r)))


def serialize_payload(payload: SparseEmbeddingDelta, V: int, version: int = BITMAP) -> bytes:
    m = payload.indices.size
    width = payload.rows.shape[1] if payload.rows.ndim == 2 else 0
    dense = np.concatenate([v.reshape(-1) for v in payload.dense.values()]) \
        if payload.dense else np.zeros(0)
    if m and payload.indices.max() >= V:
        raise PayloadError("payload index out of range")
    if version == BITMAP:
        mask = np.zeros(V, dtype=bool)
        mask[payload.indices] = True
        head = HEADERS[BITMAP].pack(BITMAP, m, width, dense.size, V)
        index = np.packbits(mask, bitorder="little").tobytes()
    elif version == INDEX_LIST:
        head = HEADERS[INDEX_LIST].pack(INDEX_LIST, m, width, dense.size)
        index = payload.indices.astype("<u4").tobytes()
    else:
        raise PayloadError(f"unknown wire version {version}")
    return b"".join([head, index, payload.rows.astype("<f4").tobytes(),
                     dense.astype("<f4").tobytes()])


def deserialize_payload(data: bytes, template: ModelParams) -> SparseEmbeddingDelta:
    """Inverse of ``serialize_payload``; ``template`` supplies dense tensor names and shapes."""
    (version,) = struct.unpack_from("<I", data, 0)
    if version not in HEADERS:
        raise PayloadError(f"unsupported payload version {version}")
    if len(data) < HEADERS[version].size:
        raise PayloadError("payload shorter than its header")
    fields = HEADERS[version].unpack_from(data, 0)
    _, m, width, dense_len = fields[:4]
    off = HEADERS[version].size
    nbytes = (fields[4] + 7) // 8 if version == BITMAP else 4 * m
    if off + nbytes + 4 * (m * width + dense_len) != len(data):
        raise PayloadError("payload length does not match its header")
    if version == BITMAP:
        V = fields[4]
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=off),
                             bitorder="little")[:V]
        idx = np.flatnonzero(bits).astype(np.int64)
        if idx.size != m:
            raise PayloadError("bitmap population does not match header m")
        off += nbytes
    else:
        idx = np.frombuffer(data, dtype="<u4", count=m, offset=off).astype(np.int64)
        off += nbytes
    rows = np.frombuffer(data, dtype="<f4", count=m * width, offset=off).astype(np.float64)
    off += 4 * m * width
    flat = np.frombuffer(data, dtype="<f4", count=dense_len, offset=off).astype(np.float64)
    row_name = template.embedding_row_name
    dense, pos = {}, 0
    for name in template.trainable_names:
        if name == row_name:
            continue
        shape = template[name].shape
        size = int(np.prod(shape))
        dense[name] = flat[pos:pos + size].reshape(shape)
        pos += size
    if pos != dense_len:
        raise PayloadError("dense section does not match the model template")
    return SparseEmbeddingDelta(idx, rows.reshape(m, width), dense, row_name)
