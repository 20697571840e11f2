"""Command line driver.

    pfl-nnlm run --config configs/synth.cfg rounds=300 local_lr=0.01
    pfl-nnlm calibrate --epsilon 2 --delta 1e-6 -q 0.002 --rounds 2000
    pfl-nnlm payload-size
    pfl-nnlm synth-data corpus.jsonl synth_users=100
    pfl-nnlm eval runs/default/phi --data dev.jsonl

Trailing ``key=value`` arguments override config-file values. The output
directory of ``run`` can also be set with the PFL_OUTPUT_DIR environment
variable (an explicit --output-dir still wins).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, parse_config
from .data import DataError, SynthSpec, read_jsonl, synth_corpus
from .federation import FederationError, load_corpus, run_experiment
from .model import ModelConfig, ModelError, softmax_eval
from .payload import BITMAP, INDEX_LIST, PayloadError, payload_size_bytes
from .privacy import PrivacyError, calibrate_sigma, epsilon_for

OUTPUT_ENV = "PFL_OUTPUT_DIR"

# (label, peu_m, lora_r, reference payload in MB)
REFERENCE_ROWS = [
    ("full", None, None, 112.0),
    ("PEU(5k)", 5000, None, 16.0),
    ("PEU(10k)", 10_000, None, 21.0),
    ("PEU(20k)", 20_000, None, 31.0),
    ("LoRA(48)", None, 48, 21.0),
    ("LoRA(64)", None, 64, 28.0),
    ("PEU(5k)+LoRA(64)", 5000, 64, 3.6),
    ("PEU(10k)+LoRA(64)", 10_000, 64, 4.8),
]

log = logging.getLogger("pfl_nnlm")


def cmd_run(args) -> int:
    cfg = parse_config(args.config, args.overrides, for_run=True)
    out = args.output_dir or os.environ.get(OUTPUT_ENV) or cfg.output_dir
    cfg = cfg.replace(output_dir=str(out), csv=cfg.csv or args.csv)
    result = run_experiment(cfg, out)
    last = result.reports[-1]
    print(json.dumps({"output_dir": str(out), "rounds": last.round, "sigma": result.sigma,
                      "ppl_theta": last.ppl_theta, "ppl_ema": last.ppl_ema,
                      "epsilon": last.epsilon, "unigram_ppl": result.unigram_ppl}))
    return 0


def cmd_calibrate(args) -> int:
    if (args.epsilon is None) == (args.sigma is None):
        raise ConfigError("give exactly one of --epsilon or --sigma")
    if args.epsilon is not None:
        sigma = calibrate_sigma(args.epsilon, args.delta, args.sampling_rate, args.rounds)
    else:
        sigma = args.sigma
    eps, order = epsilon_for(sigma, args.delta, args.sampling_rate, args.rounds)
    print(json.dumps({"sigma": sigma, "epsilon": eps, "delta": args.delta,
                      "sampling_rate": args.sampling_rate, "rounds": args.rounds,
                      "order": order}))
    return 0


def payload_table(cfg: ModelConfig, rows, version: int = BITMAP) -> list[dict]:
    out = []
    for label, m, r, ref in rows:
        n = payload_size_bytes(cfg, m, r, version)
        out.append({"name": label, "peu_m": m, "lora_r": r, "bytes": n,
                    "mb": n / 1e6, "reference_mb": ref})
    return out


def cmd_payload_size(args) -> int:
    cfg = parse_config(args.config, args.overrides) if args.config or args.overrides \
        else ExperimentConfig()
    model_cfg = ModelConfig(vocab_size=cfg.vocab_size, embed_dim=cfg.embed_dim,
                            fofe_order=cfg.fofe_order, fofe_alpha=cfg.fofe_alpha,
                            hidden_widths=cfg.hidden_widths, nce_noise_k=cfg.nce_noise_k)
    rows = REFERENCE_ROWS
    if args.peu or args.lora:
        rows = [(_label(m, r), m, r, None)
                for m in (args.peu or [None]) for r in (args.lora or [None])]
    table = payload_table(model_cfg, rows, args.wire_version)
    if args.json:
        print(json.dumps(table))
        return 0
    print(f"{'config':<20} {'bytes':>12} {'MB':>9} {'ref MB':>9}")
    for row in table:
        ref = "" if row["reference_mb"] is None else f"{row['reference_mb']:.1f}"
        print(f"{row['name']:<20} {row['bytes']:>12} {row['mb']:>9.2f} {ref:>9}")
    return 0


def _label(m, r) -> str:
    parts = ([f"PEU({m})"] if m is not None else []) + ([f"LoRA({r})"] if r is not None else [])
    return "+".join(parts) or "full"


def cmd_synth_data(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    spec = SynthSpec(num_users=cfg.synth_users + cfg.synth_dev_users, vocab_size=cfg.vocab_size,
                     sentences_per_user=cfg.synth_sentences_per_user, num_topics=cfg.synth_topics,
                     zipf_exponent=cfg.synth_zipf, mean_sentence_length=cfg.synth_sentence_length,
                     transition_strength=cfg.synth_transition_strength,
                     topic_skew=cfg.synth_topic_skew, seed=cfg.seed)
    corpus = synth_corpus(spec)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.to_jsonl(out)
    out.with_name(out.name + ".config.txt").write_text(cfg.to_text(), encoding="utf-8")
    print(json.dumps({"output": str(out), "users": len(corpus.users),
                      "sentences": len(corpus.sentences()), "tokens": corpus.num_tokens()}))
    return 0


def cmd_eval(args) -> int:
    params, cfg, round_ = load_checkpoint(args.checkpoint)
    if args.data:
        train, _ = load_corpus(cfg.replace(dev_path=""))
        data = read_jsonl(args.data, cfg.vocab_size, cfg.lowercase)
        sentences = [train.vocab.encode(data.vocab.decode(s)) for s in data.sentences()]
    else:
        _, sentences = load_corpus(cfg)
    if args.max_sentences:
        sentences = sentences[:args.max_sentences]
    ppl = softmax_eval(params, sentences)
    print(json.dumps({"checkpoint": str(args.checkpoint), "round": round_, "ppl": ppl,
                      "sentences": len(sentences),
                      "tokens": int(sum(len(s) for s in sentences))}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfl-nnlm", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="private federated training")
    r.add_argument("--config", help="key=value config file")
    r.add_argument("--output-dir", help=f"overrides ${OUTPUT_ENV} and the config value")
    r.add_argument("--csv", action="store_true", help="also write metrics.csv")
    r.add_argument("overrides", nargs="*", metavar="key=value")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calibrate", help="noise multiplier <-> epsilon")
    c.add_argument("--epsilon", type=float)
    c.add_argument("--sigma", type=float)
    c.add_argument("--delta", type=float, default=1e-6)
    c.add_argument("-q", "--sampling-rate", type=float, default=2e-3)
    c.add_argument("--rounds", type=int, required=True)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("payload-size", help="bytes per client payload")
    s.add_argument("--config", help="model config (default: the full-size architecture)")
    s.add_argument("--peu", type=int, nargs="+", help="PEU row counts to tabulate")
    s.add_argument("--lora", type=int, nargs="+", help="LoRA ranks to tabulate")
    s.add_argument("--wire-version", type=int, choices=(BITMAP, INDEX_LIST), default=BITMAP)
    s.add_argument("--json", action="store_true")
    s.add_argument("overrides", nargs="*", metavar="key=value")
    s.set_defaults(func=cmd_payload_size)

    d = sub.add_parser("synth-data", help="write a synthetic corpus as JSONL")
    d.add_argument("output")
    d.add_argument("--config")
    d.add_argument("overrides", nargs="*", metavar="key=value")
    d.set_defaults(func=cmd_synth_data)

    e = sub.add_parser("eval", help="softmax perplexity of a checkpoint")
    e.add_argument("checkpoint", help="checkpoint prefix, e.g. runs/default/phi")
    e.add_argument("--data", help="JSONL corpus (default: the run's dev set)")
    e.add_argument("--max-sentences", type=int, default=0)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, PrivacyError, PayloadError, ModelError, DataError, CheckpointError,
            FederationError, OSError) as exc:
        print(f"pfl-nnlm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
