"""
Partial embedding updates
=========================

Each round the server picks m words; clients send back only those rows of
the embedding delta, reweighted by 1 / P(word picked). The reconstruction
is sparse but unbiased.
"""

import numpy as np

from pfl_nnlm.payload import (INCLUSION, WordSampler, build_client_payload, estimate_inclusion,
                              expand_payload)

rng = np.random.default_rng(0)
counts = np.array([500, 200, 120, 60, 30, 20, 10, 5])
V, d, m = len(counts), 3, 3

sampler = WordSampler.from_counts(counts, m, INCLUSION)
sampler.inclusion = estimate_inclusion(sampler, 200_000, rng)
print("Q      ", np.round(sampler.q, 3))
print("pi(w)  ", np.round(sampler.inclusion, 3))   # frequent words saturate near 1

true = rng.normal(size=(V, d))
words = sampler.sample(rng)
one = expand_payload(build_client_payload({"embedding": true}, words, sampler), V)["embedding"]
print("picked", words, "-> nonzero rows", np.flatnonzero(np.abs(one).sum(axis=1)))

# average many reconstructions
n = 20_000
mean = np.zeros_like(true)
for _ in range(n):
    p = build_client_payload({"embedding": true}, sampler.sample(rng), sampler)
    mean += expand_payload(p, V)["embedding"] / n
print("max |mean - true| over", n, "rounds:", np.abs(mean - true).max().round(4))
