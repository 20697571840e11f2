import json

import numpy as np
import pytest

from pfl_nnlm.config import ExperimentConfig
from pfl_nnlm.data import synth_corpus
from pfl_nnlm.federation import (FederationError, ServerState, aggregate_round, ema_update,
                                 local_train, run_experiment, sample_cohort, server_step, stream,
                                 sgd_step, _CLIENT)
from pfl_nnlm.model import (ModelConfig, UnigramSampler, init_params, make_minibatch,
                            nce_loss_and_grad)
from pfl_nnlm.payload import INCLUSION, WordSampler
from pfl_nnlm.privacy import PrivacyParams, calibrate_sigma

CFG = ModelConfig(vocab_size=30, embed_dim=4, fofe_order=2, hidden_widths=(6,), nce_noise_k=3)


def model(seed=0, dtype=np.float64):
    return init_params(CFG, np.random.default_rng(seed), dtype=dtype)


def corpus(users=3, seed=0):
    return synth_corpus(num_users=users, sentences_per_user=6, vocab_size=30, seed=seed,
                        mean_sentence_length=5)


def rand_delta(params, rng, scale=1.0):
    return {n: rng.normal(size=params[n].shape) * scale for n in params.trainable_names}


# -- cohorts -------------------------------------------------------------------------

def test_full_participation():
    assert np.array_equal(sample_cohort(7, 1.0, np.random.default_rng(0)), np.arange(7))


def test_cohort_mean_size_default_rate():
    rng = np.random.default_rng(1)
    sizes = np.array([sample_cohort(500_000, 2e-3, rng).size for _ in range(200)])
    se = np.sqrt(500_000 * 2e-3 * (1 - 2e-3) / sizes.size)
    assert abs(sizes.mean() - 1000) < 3 * se


def test_cohort_is_seeded():
    a = sample_cohort(1000, 0.1, stream(3, 1, 0))
    b = sample_cohort(1000, 0.1, stream(3, 1, 0))
    assert np.array_equal(a, b)


def test_cohort_bad_rate():
    with pytest.raises(FederationError):
        sample_cohort(10, 0.0, np.random.default_rng(0))


# -- local training --------------------------------------------------------------------

def test_no_steps_gives_zero_delta():
    p = model()
    delta = local_train([np.zeros(0, dtype=np.int64)], p, np.full(30, 1 / 30), 0.1,
                        np.random.default_rng(0))
    assert all(np.all(v == 0) for v in delta.values())


def test_one_step_is_minus_lr_grad():
    p = model()
    c = corpus()
    sents = c.users[0][1][:4]
    delta = local_train(sents, p, c.p_uni, 0.05, np.random.default_rng(5), batch_size=16)
    rng = np.random.default_rng(5)
    order = rng.permutation(len(sents))
    batch = make_minibatch([sents[i] for i in order], CFG, UnigramSampler(c.p_uni), rng)
    _, grads = nce_loss_and_grad(p, batch, c.p_uni)
    for n in p.trainable_names:
        np.testing.assert_array_equal(delta[n], (p[n] - 0.05 * grads[n]) - p[n])


def test_identical_clients_identical_deltas():
    p = model()
    c = corpus()
    a = local_train(c.users[0][1], p, c.p_uni, 0.05, stream(0, 1, 2))
    b = local_train(c.users[0][1], p, c.p_uni, 0.05, stream(0, 1, 2))
    assert all(np.array_equal(a[n], b[n]) for n in a)


def test_local_train_reports_client_on_failure():
    p = model()
    bad = np.full(30, 1 / 29)
    bad[3] = 0.0
    with pytest.raises(FederationError, match="client u7, epoch 0, batch 0"):
        local_train([np.array([3, 4])], p, bad, 0.1, np.random.default_rng(0), client_id="u7")
    with pytest.raises(FederationError):
        local_train([], p, bad, 0.1, np.random.default_rng(0))


# -- aggregation ------------------------------------------------------------------------------

def privacy(sigma=0.0, S=0.3, q=1.0):
    return PrivacyParams(sampling_rate=q, clip_radius=S, noise_sigma=sigma)


def test_opposite_deltas_cancel():
    p = model()
    x = rand_delta(p, np.random.default_rng(1), 1e-3)
    neg = {n: -v for n, v in x.items()}
    agg = aggregate_round({0: x, 1: neg}, None, None, privacy(), 2, p,
                          np.random.default_rng(0), "cohort")
    assert all(np.all(v == 0) for v in agg.pseudo_gradient.values())


def test_single_client_identity_pipeline():
    p = model()
    x = rand_delta(p, np.random.default_rng(2), 1e-3)
    sampler = WordSampler.uniform(30, 30, INCLUSION)
    agg = aggregate_round({4: x}, np.arange(30), sampler, privacy(), 50, p,
                          np.random.default_rng(0), "cohort")
    for n in x:
        assert np.array_equal(agg.pseudo_gradient[n], x[n])


def test_clipping_on_wire_payload():
    p = model()
    x = rand_delta(p, np.random.default_rng(3), 10.0)
    agg = aggregate_round({0: x}, None, None, privacy(S=0.3), 1, p, np.random.default_rng(0),
                          "cohort")
    norm = np.sqrt(sum(np.sum(v ** 2) for v in agg.pseudo_gradient.values()))
    assert norm == pytest.approx(0.3, rel=1e-12)
    assert agg.pre_clip_norms[0] > 0.3


def test_noise_never_touches_unsampled_rows():
    p = model()
    sampler = WordSampler.from_counts(np.arange(30), 5)
    rng = np.random.default_rng(4)
    for t in range(50):
        words = sampler.sample(rng)
        x = rand_delta(p, rng)
        agg = aggregate_round({0: x}, words, sampler, privacy(sigma=2.0), 10, p, rng)
        emb = agg.pseudo_gradient["embedding"]
        off = np.setdiff1d(np.arange(30), words)
        assert np.all(emb[off] == 0)
        assert np.all(emb[words] != 0)


def test_aggregation_order_independent():
    p = model()
    rng = np.random.default_rng(5)
    deltas = {c: rand_delta(p, rng, 0.01) for c in (9, 2, 5, 7)}
    shuffled = {c: deltas[c] for c in (5, 9, 7, 2)}
    a = aggregate_round(deltas, None, None, privacy(sigma=1.0, q=0.5), 8, p, stream(1, 2))
    b = aggregate_round(shuffled, None, None, privacy(sigma=1.0, q=0.5), 8, p, stream(1, 2))
    assert all(np.array_equal(a.pseudo_gradient[n], b.pseudo_gradient[n]) for n in p.trainable_names)


def test_divide_by_expected_cohort():
    p = model()
    x = rand_delta(p, np.random.default_rng(6), 1e-4)
    agg = aggregate_round({0: x}, None, None, privacy(q=0.1), 40, p, np.random.default_rng(0))
    for n in x:
        np.testing.assert_allclose(agg.pseudo_gradient[n], x[n] / 4.0, rtol=1e-15)


def test_empty_cohort():
    p = model()
    agg = aggregate_round({}, None, None, privacy(q=0.1), 40, p, np.random.default_rng(0), "cohort")
    assert agg.cohort_size == 0
    assert all(np.all(v == 0) for v in agg.pseudo_gradient.values())


def test_shape_mismatch_rejected():
    p = model()
    x = rand_delta(p, np.random.default_rng(7))
    x["dense0.b"] = np.zeros(7)
    with pytest.raises(FederationError, match="dense0.b"):
        aggregate_round({0: x}, None, None, privacy(), 1, p, np.random.default_rng(0))


# -- server optimizer and EMA --------------------------------------------------------------------

def test_server_step_lr_one_and_zero():
    p = model()
    d = rand_delta(p, np.random.default_rng(8))
    s = ServerState.create(p.copy(), server_lr=1.0)
    server_step(s, d)
    for n in d:
        np.testing.assert_array_equal(s.params[n], p[n] + d[n])
    s0 = ServerState.create(p.copy(), server_lr=0.0)
    server_step(s0, d)
    assert all(np.array_equal(s0.params[n], p[n]) for n in p.tensors)


def test_momentum_geometric_series():
    p = model()
    d = {n: np.full(p[n].shape, 0.01) for n in p.trainable_names}
    s = ServerState.create(p.copy(), momentum=0.9)
    T = 20
    for _ in range(T):
        server_step(s, d)
    # sum_{t=1..T} sum_{j<t} 0.9^j = sum_t (1 - 0.9^t) / 0.1
    coef = sum((1 - 0.9 ** t) / 0.1 for t in range(1, T + 1))
    for n in d:
        np.testing.assert_allclose(s.params[n], p[n] + 0.01 * coef, rtol=1e-12)


def test_server_step_rejects_nonfinite():
    p = model()
    d = rand_delta(p, np.random.default_rng(9))
    d["projection"][0, 0] = np.inf
    with pytest.raises(FederationError):
        server_step(ServerState.create(p.copy()), d)


def test_ema_limits():
    p = model()
    d = rand_delta(p, np.random.default_rng(10))
    s = ServerState.create(p.copy(), gamma=0.0)
    server_step(s, d)
    ema_update(s)
    assert all(np.array_equal(s.ema[n], s.params[n]) for n in p.tensors)
    s = ServerState.create(p.copy(), gamma=1.0)
    server_step(s, d)
    ema_update(s)
    assert all(np.array_equal(s.ema[n], p[n]) for n in p.tensors)
    with pytest.raises(FederationError):
        ServerState.create(p.copy(), gamma=1.5)


def test_ema_geometric_closed_form():
    p = model()
    c = p.copy()
    for n in c.tensors:
        c.tensors[n] = np.full(c[n].shape, 0.5)
    zero = p.copy()
    for n in zero.tensors:
        zero.tensors[n] = np.zeros(zero[n].shape)
    s = ServerState(c, zero, gamma=0.999)
    for t in range(1, 1001):
        ema_update(s)
        if t in (1, 10, 1000):
            np.testing.assert_allclose(s.ema["dense0.w"], 0.5 * (1 - 0.999 ** t), rtol=1e-12)


def test_ema_smoother_than_theta_under_noise():
    p = model()
    s = ServerState.create(p.copy(), gamma=0.999)
    rng = np.random.default_rng(11)
    step_theta, step_phi = [], []
    for _ in range(100):
        th0 = {n: s.params[n].copy() for n in p.trainable_names}
        ph0 = {n: s.ema[n].copy() for n in p.trainable_names}
        server_step(s, rand_delta(p, rng, 0.01))
        ema_update(s)
        step_theta.append(np.sqrt(sum(np.sum((s.params[n] - th0[n]) ** 2) for n in th0)))
        step_phi.append(np.sqrt(sum(np.sum((s.ema[n] - ph0[n]) ** 2) for n in ph0)))
    assert np.var(step_phi) < np.var(step_theta)


# -- end to end ------------------------------------------------------------------------------------

def small_cfg(**kw):
    base = dict(vocab_size=30, embed_dim=4, fofe_order=2, hidden_widths=(6,), nce_noise_k=3,
                rounds=3, eval_every=1, local_lr=0.05, sampling_rate=0.5, synth_users=6,
                synth_dev_users=2, synth_sentences_per_user=5, synth_sentence_length=5,
                peu_m=10)
    base.update(kw)
    return ExperimentConfig(**base)


def test_run_writes_artifacts(tmp_path):
    cfg = small_cfg(csv=True)
    res = run_experiment(cfg, tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["type"] == "header" and header["config"]["peu_m"] == 10
    assert header["sigma"] == res.sigma == calibrate_sigma(2.0, 1e-6, 0.5, 3)
    rounds = [json.loads(l) for l in lines[1:]]
    assert [r["round"] for r in rounds] == [1, 2, 3]
    eps = [r["epsilon"] for r in rounds]
    assert eps == sorted(eps) and eps[-1] == pytest.approx(2.0, rel=1e-3)
    assert (tmp_path / "theta.manifest").exists() and (tmp_path / "phi.bin").exists()
    assert (tmp_path / "metrics.csv").read_text().startswith("round,ppl_theta,ppl_ema,epsilon")
    assert "peu_m=10" in (tmp_path / "config.txt").read_text()


def test_run_is_deterministic(tmp_path):
    cfg = small_cfg()
    run_experiment(cfg, tmp_path / "a", write_checkpoints=False)
    run_experiment(cfg, tmp_path / "b", write_checkpoints=False)
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_run_threads_do_not_change_results(tmp_path):
    cfg = small_cfg()
    run_experiment(cfg, tmp_path / "a", write_checkpoints=False)
    run_experiment(cfg.replace(workers=3), tmp_path / "b", write_checkpoints=False)
    # the header echoes the worker count; round lines must match byte for byte
    a = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()[1:]
    b = (tmp_path / "b" / "metrics.jsonl").read_text().splitlines()[1:]
    assert a == b


def test_run_refuses_unreachable_sigma(tmp_path):
    with pytest.raises(FederationError, match="refusing"):
        run_experiment(small_cfg(epsilon=1e-4, rounds=1000), tmp_path)


def test_run_requires_mandatory_keys(tmp_path):
    from pfl_nnlm.config import ConfigError
    with pytest.raises(ConfigError, match="local_lr"):
        run_experiment(small_cfg(local_lr=None), tmp_path)


def centralized_sgd(sentences, params, p_uni, lr, seed, rounds, batch_size):
    """Sequential mini-batch SGD using the per-round streams a lone client would see."""
    p = params.copy()
    sampler = UnigramSampler(p_uni)
    for t in range(1, rounds + 1):
        rng = stream(seed, t, _CLIENT, 0)
        order = rng.permutation(len(sentences))
        for start in range(0, len(order), batch_size):
            batch = make_minibatch([sentences[i] for i in order[start:start + batch_size]],
                                   p.cfg, sampler, rng)
            _, grads = nce_loss_and_grad(p, batch, p_uni)
            sgd_step(p, grads, lr)
    return p


@pytest.mark.parametrize("rounds", [1, 5])
def test_single_client_equals_centralized_sgd(tmp_path, rounds):
    cfg = small_cfg(rounds=rounds, sampling_rate=1.0, noise_sigma=0.0, clip_radius=1e9,
                    server_lr=1.0, peu_m=None, batch_size=4)
    train = synth_corpus(num_users=1, sentences_per_user=10, vocab_size=30,
                         mean_sentence_length=5, seed=2)
    dev = train.sentences()[:3]
    res = run_experiment(cfg, tmp_path, corpus=(train, dev), write_checkpoints=False)
    from pfl_nnlm.federation import _INIT
    init = init_params(cfg.model_config(), stream(cfg.seed, _INIT))
    ref = centralized_sgd(train.users[0][1], init, train.p_uni, cfg.local_lr, cfg.seed,
                          rounds, cfg.batch_size)
    for n in ref.tensors:
        assert np.array_equal(res.theta[n], ref[n]), n
