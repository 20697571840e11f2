"""The nine acceptance criteria, at their stated tolerances.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The end-to-end criteria (7, 8, 9) share three 300-round runs built once per
session from configs/synth_e2e.cfg.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import inclusion_oracle, sgm_rdp_quadrature
from pfl_nnlm.cli import main
from pfl_nnlm.config import parse_config
from pfl_nnlm.data import synth_corpus
from pfl_nnlm.federation import (_CLIENT, _INIT, aggregate_round, run_experiment, sgd_step,
                                 stream)
from pfl_nnlm.model import (ModelConfig, UnigramSampler, init_params, lora_wrap, make_minibatch,
                            nce_loss_and_grad)
from pfl_nnlm.payload import (INCLUSION, WordSampler, build_client_payload, expand_payload)
from pfl_nnlm.privacy import (PrivacyParams, calibrate_sigma, clip_l2, compute_rdp, epsilon_for,
                              gaussian_noise_sum, rdp_subsampled_gaussian, rdp_to_dp)

ROOT = Path(__file__).resolve().parents[1]
E2E_CONFIG = ROOT / "configs" / "synth_e2e.cfg"


# -- 1 ------------------------------------------------------------------------------------

def test_criterion_1_payload_accounting(capsys, report):
    t0 = time.perf_counter()
    assert main(["payload-size", "--json"]) == 0
    rows = {r["name"]: r for r in json.loads(capsys.readouterr().out)}
    assert main(["payload-size", "--peu", "5000", "10000", "20000", "--json"]) == 0
    peu = [r["bytes"] for r in json.loads(capsys.readouterr().out)]
    elapsed = time.perf_counter() - t0
    errs = {}
    for name, r in rows.items():
        tol = 0.05 if r["lora_r"] is None else 0.15
        errs[name] = (r["mb"] - r["reference_mb"]) / r["reference_mb"]
        errs[name + "_ok"] = abs(errs[name]) <= tol
    d4 = 256 * 4
    diffs_ok = peu[1] - peu[0] == 5000 * d4 and peu[2] - peu[1] == 10_000 * d4
    ok = all(v for k, v in errs.items() if k.endswith("_ok")) and diffs_ok and elapsed < 1.0
    worst = max((abs(v), k) for k, v in errs.items() if not k.endswith("_ok"))
    report("1", ok, f"worst rel err {worst[0]:.3f} ({worst[1]}), exact row diffs={diffs_ok}, "
                    f"{elapsed:.2f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------------------

def _fd_errors(lora, coords, rng):
    cfg = ModelConfig(vocab_size=16, embed_dim=8, fofe_order=3, hidden_widths=(10, 9),
                      nce_noise_k=4)
    p = init_params(cfg, rng, dtype=np.float64)
    for n, a in p.tensors.items():
        if n.endswith(".b"):
            p.tensors[n] = rng.normal(0, 0.3, a.shape)
    if lora:
        p = lora_wrap(p, lora, rng)
        for n, a in p.tensors.items():
            if n.endswith(".L"):
                p.tensors[n] = rng.normal(0, 0.3, a.shape)
    p_uni = rng.dirichlet(np.ones(16))
    sents = [rng.integers(2, 16, size=rng.integers(2, 7)) for _ in range(4)]
    batch = make_minibatch(sents, cfg, UnigramSampler(p_uni), rng)
    _, grads = nce_loss_and_grad(p, batch, p_uni)
    names = p.trainable_names
    h = 1e-5
    errs = []
    for _ in range(coords):
        n = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(s)) for s in p[n].shape)
        old = p.tensors[n][idx]
        p.tensors[n][idx] = old + h
        lp, _ = nce_loss_and_grad(p, batch, p_uni)
        p.tensors[n][idx] = old - h
        lm, _ = nce_loss_and_grad(p, batch, p_uni)
        p.tensors[n][idx] = old
        fd, an = (lp - lm) / (2 * h), grads[n][idx]
        # absolute floor well above the ~1e-11 rounding noise of a central difference
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return np.array(errs)


def test_criterion_2_gradients(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    plain = _fd_errors(None, 300, rng)
    lora = _fd_errors(2, 300, rng)
    elapsed = time.perf_counter() - t0
    worst = max(plain.max(), lora.max())
    ok = worst < 1e-4 and plain.size + lora.size >= 500 and elapsed < 60
    report("2", ok, f"{plain.size + lora.size} coords, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


# -- 3 ------------------------------------------------------------------------------------

def test_criterion_3_peu_unbiased(report):
    t0 = time.perf_counter()
    V, d, m, n = 5, 2, 2, 100_000
    s = WordSampler.from_counts(np.array([50, 20, 12, 6, 2]), m, INCLUSION)
    s.inclusion = inclusion_oracle(s.q, m, 10**6, np.random.default_rng(31))
    rng = np.random.default_rng(32)
    true = rng.normal(size=(V, d))
    total = np.zeros((V, d))
    total_sq = np.zeros((V, d))
    for _ in range(n):
        pay = build_client_payload({"embedding": true}, s.sample(rng), s)
        e = expand_payload(pay, V)["embedding"]
        total += e
        total_sq += e * e
    mean = total / n
    se = np.sqrt((total_sq / n - mean ** 2) / (n - 1))
    z = np.abs(mean - true) / se
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(z <= 3)) and elapsed < 60
    report("3", ok, f"max |z| {z.max():.2f} over {V * d} coords, {elapsed:.1f}s")
    assert ok


# -- 4 ------------------------------------------------------------------------------------

def test_criterion_4_accountant(report):
    t0 = time.perf_counter()
    a = all(rdp_subsampled_gaussian(1.0, s, al) == al / (2 * s * s)
            for s in (0.5, 1.0, 2.0, 9.56) for al in (1.5, 2, 5, 32, 256))
    grid = [(q, s, al) for q in (1e-3, 0.01, 0.2) for s in (0.8, 1.5, 5.0)
            for al in (2, 3.5, 8, 32)]
    b_err = max(abs(rdp_subsampled_gaussian(q, s, al) - sgm_rdp_quadrature(q, s, al))
                for q, s, al in grid)
    orders = np.linspace(1.01, 64, 6300)
    eps_c, _ = rdp_to_dp(compute_rdp(1.0, 1.0, 1, orders), orders, 1e-5)
    c = abs(eps_c - 5.298) <= 1e-3
    trips = []
    for T in (500, 2000, 5000):
        sigma = calibrate_sigma(2.0, 1e-6, 2e-3, T)
        trips.append(epsilon_for(sigma, 1e-6, 2e-3, T)[0])
    d = all(0.999 * 2.0 <= e <= 2.0 for e in trips)
    elapsed = time.perf_counter() - t0
    ok = a and b_err <= 1e-6 and c and d and elapsed < 60
    report("4", ok, f"(a) {a}, (b) max err {b_err:.1e}, (c) eps {eps_c:.4f}, "
                    f"(d) eps' {min(trips):.5f}..{max(trips):.5f}, {elapsed:.1f}s")
    assert ok


# -- 5 ------------------------------------------------------------------------------------

def test_criterion_5_mechanism(report):
    S = 0.3
    cfg = ModelConfig(vocab_size=50, embed_dim=4, fofe_order=2, hidden_widths=(6,))
    template = init_params(cfg, np.random.default_rng(0), dtype=np.float64)
    sampler = WordSampler.from_counts(np.arange(50) ** 2, 8)
    priv = PrivacyParams(sampling_rate=0.1, clip_radius=S, noise_sigma=1.3)
    rng = np.random.default_rng(5)
    max_norm, leaks = 0.0, 0
    for t in range(1000):
        words = sampler.sample(rng)
        deltas = {c: {n: rng.normal(size=template[n].shape) * rng.lognormal(0, 2)
                      for n in template.trainable_names} for c in range(3)}
        for delta in deltas.values():
            flat = build_client_payload(delta, words, sampler).flat()
            max_norm = max(max_norm, float(np.linalg.norm(clip_l2(flat, S))))
        agg = aggregate_round(deltas, words, sampler, priv, 30, template, stream(5, t))
        off = np.setdiff1d(np.arange(50), words)
        leaks += int(np.count_nonzero(agg.pseudo_gradient["embedding"][off]))
    noise_a = gaussian_noise_sum(np.zeros(10_000), 1.3, S, stream(9, 1, 2))
    noise_b = gaussian_noise_sum(np.zeros(10_000), 1.3, S, stream(9, 1, 2))
    same = noise_a.tobytes() == noise_b.tobytes()
    ok = max_norm <= S + 1e-12 and leaks == 0 and same
    report("5", ok, f"max clipped norm {max_norm:.6f}, nonzero unsampled coords {leaks} "
                    f"over 1000 rounds, bit-exact noise {same}")
    assert ok


# -- 6 ------------------------------------------------------------------------------------

def test_criterion_6_fl_degeneracy(tmp_path, report):
    cfg = parse_config(None, ["vocab_size=40", "embed_dim=6", "fofe_order=3", "hidden_widths=8,7",
                              "nce_noise_k=5", "rounds=5", "eval_every=5", "local_lr=0.05",
                              "sampling_rate=1", "noise_sigma=0", "clip_radius=1e9",
                              "server_lr=1", "batch_size=4"], for_run=True)
    train = synth_corpus(num_users=1, sentences_per_user=12, vocab_size=40,
                         mean_sentence_length=6, seed=6)
    res = run_experiment(cfg, tmp_path, corpus=(train, train.sentences()[:4]),
                         write_checkpoints=False)
    ref = init_params(cfg.model_config(), stream(cfg.seed, _INIT))
    sentences = train.users[0][1]
    noise = UnigramSampler(train.p_uni)
    for t in range(1, 6):
        rng = stream(cfg.seed, t, _CLIENT, 0)
        order = rng.permutation(len(sentences))
        for start in range(0, len(order), cfg.batch_size):
            batch = make_minibatch([sentences[i] for i in order[start:start + cfg.batch_size]],
                                   ref.cfg, noise, rng)
            _, grads = nce_loss_and_grad(ref, batch, train.p_uni)
            sgd_step(ref, grads, cfg.local_lr)
    mismatched = [n for n in ref.tensors if not np.array_equal(ref[n], res.theta[n])]
    ok = not mismatched
    report("6", ok, f"5 rounds, {len(ref.tensors)} tensors, "
                    f"{'all bit-identical' if ok else 'mismatch: ' + ', '.join(mismatched)}")
    assert ok


# -- 7, 8, 9 ---------------------------------------------------------------------------

def _load_metrics(path):
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    rounds = [json.loads(l) for l in lines[1:]]
    return header, rounds


@pytest.fixture(scope="session")
def e2e(tmp_path_factory):
    base = tmp_path_factory.mktemp("e2e")
    cfg = parse_config(E2E_CONFIG, for_run=True)
    t0 = time.perf_counter()
    runs = {}
    for name, c in [("peu", cfg), ("full", cfg.replace(peu_m=None)), ("peu_again", cfg)]:
        run_experiment(c, base / name, write_checkpoints=False)
        runs[name] = base / name / "metrics.jsonl"
    return runs, time.perf_counter() - t0, cfg


def test_criterion_7_convergence(e2e, report):
    runs, elapsed, cfg = e2e
    header, rounds = _load_metrics(runs["peu"])
    _, full_rounds = _load_metrics(runs["full"])
    sigma_ok = header["sigma"] == pytest.approx(9.5605, rel=1e-3)
    setup_ok = (header["population"] == 50 and cfg.vocab_size == 1000 and cfg.synth_zipf == 1.1
                and cfg.peu_m == 200 and cfg.nce_noise_k == 64 and cfg.rounds == 300 and sigma_ok)
    baseline = header["unigram_ppl"]
    phi = rounds[-1]["ppl_ema"]
    phi_full = full_rounds[-1]["ppl_ema"]
    beats = phi <= 0.9 * baseline
    close = abs(phi - phi_full) / phi_full <= 0.05
    # three runs of 300 rounds; the criterion budget covers one PEU run plus its full twin
    ok = setup_ok and beats and close and elapsed * 2 / 3 <= 1800
    report("7", ok, f"phi PPL {phi:.1f} vs unigram {baseline:.1f} (need <= {0.9 * baseline:.1f}): "
                    f"{'ok' if beats else 'NOT MET'}; PEU vs full phi {phi:.1f}/{phi_full:.1f} "
                    f"({'ok' if close else 'NOT MET'}); theta PPL {rounds[-1]['ppl_theta']:.1f}; "
                    f"sigma {header['sigma']:.4f}; {elapsed * 2 / 3:.0f}s")
    assert ok


def test_criterion_8_ema_smoothing(e2e, report):
    runs, _, cfg = e2e
    _, rounds = _load_metrics(runs["peu"])
    assert cfg.ema_gamma == 0.999 and cfg.eval_every == 1
    theta = np.array([r["ppl_theta"] for r in rounds])
    phi = np.array([r["ppl_ema"] for r in rounds])
    windows = [(s, s + 100) for s in range(0, len(rounds), 100)]
    var_t = [np.var(np.diff(theta[a:b])) for a, b in windows]
    var_p = [np.var(np.diff(phi[a:b])) for a, b in windows]
    smoother = all(p < t for p, t in zip(var_p, var_t))
    final_ok = phi[-1] <= theta[-1] * 1.01
    ok = smoother and final_ok
    report("8", ok, f"window var phi/theta " + ", ".join(f"{p:.3g}/{t:.3g}" for p, t in
                                                         zip(var_p, var_t))
                    + f"; final phi {phi[-1]:.1f} vs theta {theta[-1]:.1f}")
    assert ok


def test_criterion_9_determinism(e2e, report):
    runs, _, _ = e2e
    same = runs["peu"].read_bytes() == runs["peu_again"].read_bytes()
    report("9", same, f"metrics files byte-identical: {same}")
    assert same
