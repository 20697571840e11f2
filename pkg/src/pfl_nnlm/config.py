"""Flat ``key=value`` experiment configuration."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from . import __version__
from .model import ModelConfig, ModelError, check_lora_rank
from .payload import APPROX_Q, INCLUSION


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # model
    vocab_size: int = 100_000
    embed_dim: int = 256
    fofe_order: int = 3
    fofe_alpha: float = 0.7
    hidden_widths: tuple[int, ...] = (768, 768, 768, 768)
    nce_noise_k: int = 1024
    lora_rank: int | None = None
    # privacy
    epsilon: float = 2.0
    delta: float = 1e-6
    sampling_rate: float = 2e-3
    clip_radius: float = 0.3
    noise_sigma: float | None = None  # None: calibrate from (epsilon, delta, q, rounds)
    divide_by: str = "expected"       # or "cohort" (divide by actual |C|)
    # partial embedding updates
    peu_m: int | None = None
    peu_weighting: str = APPROX_Q
    peu_q: str = "unigram"
    peu_temperature: float = 1.0
    peu_inclusion_trials: int = 100_000
    # optimization
    local_lr: float | None = None
    local_epochs: int = 1
    batch_size: int = 16
    server_lr: float = 1.0
    server_momentum: float = 0.0
    ema_gamma: float = 0.999
    rounds: int | None = None
    eval_every: int | None = None
    eval_max_sentences: int = 0
    # data
    corpus_path: str = ""
    dev_path: str = ""
    dev_fraction: float = 0.1
    lowercase: bool = True
    synth_users: int = 50
    synth_dev_users: int = 10
    synth_sentences_per_user: int = 40
    synth_topics: int = 4
    synth_zipf: float = 1.1
    synth_sentence_length: int = 12
    synth_transition_strength: float = 0.8
    synth_topic_skew: float = 0.8
    # run
    seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1
    csv: bool = False

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size, embed_dim=self.embed_dim, fofe_order=self.fofe_order,
            fofe_alpha=self.fofe_alpha, hidden_widths=self.hidden_widths,
            lora_rank=self.lora_rank, nce_noise_k=self.nce_noise_k)

    def validate(self, for_run: bool = False) -> "ExperimentConfig":
        try:
            cfg = self.model_config()
        except ModelError as exc:
            key = "lora_rank" if "LoRA" in str(exc) else _model_key(str(exc))
            raise ConfigError(f"{key}: {exc}") from None
        checks = [
            ("epsilon", self.epsilon > 0, "must be > 0"),
            ("delta", 0 < self.delta < 1, "must be in (0, 1)"),
            ("sampling_rate", 0 < self.sampling_rate <= 1, "must be in (0, 1]"),
            ("clip_radius", self.clip_radius > 0, "must be > 0"),
            ("noise_sigma", self.noise_sigma is None or self.noise_sigma >= 0, "must be >= 0"),
            ("divide_by", self.divide_by in ("expected", "cohort"), "must be 'expected' or 'cohort'"),
            ("peu_m", self.peu_m is None or 0 <= self.peu_m <= self.vocab_size,
             f"must be in [0, vocab_size={self.vocab_size}]"),
            ("peu_weighting", self.peu_weighting in (APPROX_Q, INCLUSION),
             f"must be {APPROX_Q!r} or {INCLUSION!r}"),
            ("peu_q", self.peu_q in ("unigram", "uniform"), "must be 'unigram' or 'uniform'"),
            ("peu_temperature", self.peu_temperature > 0, "must be > 0"),
            ("peu_inclusion_trials", self.peu_inclusion_trials >= 1, "must be >= 1"),
            ("local_epochs", self.local_epochs >= 1, "must be >= 1"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("server_lr", self.server_lr >= 0, "must be >= 0"),
            ("server_momentum", 0 <= self.server_momentum < 1, "must be in [0, 1)"),
            ("ema_gamma", 0 <= self.ema_gamma <= 1, "must be in [0, 1]"),
            ("local_lr", self.local_lr is None or self.local_lr >= 0, "must be >= 0"),
            ("rounds", self.rounds is None or self.rounds >= 1, "must be >= 1"),
            ("eval_every", self.eval_every is None or self.eval_every >= 1, "must be >= 1"),
            ("dev_fraction", 0 < self.dev_fraction < 1, "must be in (0, 1)"),
            ("synth_topic_skew", 0 <= self.synth_topic_skew < 1, "must be in [0, 1)"),
            ("workers", self.workers >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg} (got {getattr(self, key)!r})")
        if self.lora_rank is not None:
            try:
                check_lora_rank(cfg, self.lora_rank)
            except ModelError as exc:
                raise ConfigError(f"lora_rank: {exc}") from None
        if for_run:
            for key in ("local_lr", "rounds", "eval_every"):
                if getattr(self, key) is None:
                    raise ConfigError(f"{key}: required for a training run")
        return self

    def to_text(self) -> str:
        lines = [f"# pfl_nnlm {__version__}"]
        for f in fields(self):
            lines.append(f"{f.name}={format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in fields(self)}

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _model_key(msg: str) -> str:
    for key in ("fofe_alpha", "vocab_size", "embed_dim", "fofe_order", "nce_noise_k", "hidden"):
        if key in msg:
            return "hidden_widths" if key == "hidden" else key
    return "model"


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


_FIELD_TYPES = {
    "vocab_size": int, "embed_dim": int, "fofe_order": int, "fofe_alpha": float,
    "hidden_widths": "ints", "nce_noise_k": int, "lora_rank": "opt_int",
    "epsilon": float, "delta": float, "sampling_rate": float, "clip_radius": float,
    "noise_sigma": "opt_float", "divide_by": str,
    "peu_m": "opt_int", "peu_weighting": str, "peu_q": str, "peu_temperature": float,
    "peu_inclusion_trials": int,
    "local_lr": "opt_float", "local_epochs": int, "batch_size": int, "server_lr": float,
    "server_momentum": float, "ema_gamma": float, "rounds": "opt_int", "eval_every": "opt_int",
    "eval_max_sentences": int,
    "corpus_path": str, "dev_path": str, "dev_fraction": float, "lowercase": bool,
    "synth_users": int, "synth_dev_users": int, "synth_sentences_per_user": int,
    "synth_topics": int, "synth_zipf": float, "synth_sentence_length": int,
    "synth_transition_strength": float, "synth_topic_skew": float,
    "seed": int, "output_dir": str, "workers": int, "csv": bool,
}
assert set(_FIELD_TYPES) == {f.name for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind in ("opt_int", "opt_float"):
            if raw.lower() in ("none", ""):
                return None
            return int(raw) if kind == "opt_int" else float(raw)
        if kind == "ints":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is float:
            value = float(raw)
            if math.isnan(value):
                raise ValueError(raw)
            return value
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{key}: unknown configuration key ({source}:{lineno})")
        values[key] = _convert(key, raw)
    return values


def parse_config(path: str | Path | None = None, overrides: Iterable[str] = (),
                 for_run: bool = False) -> ExperimentConfig:
    """Read a config file (optional) and apply ``key=value`` overrides, which win."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_pairs(path.read_text(encoding="utf-8").splitlines(), str(path)))
    values.update(parse_pairs(overrides, "<command line>"))
    return ExperimentConfig(**values).validate(for_run=for_run)
