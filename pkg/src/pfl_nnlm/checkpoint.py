"""Checkpoints: a text manifest plus a raw little-endian float32 blob.

Manifest layout::

    format=pfl_nnlm-checkpoint
    version=<package version>
    round=<t>
    blob=<file name>
    tensor=<name> <rows,cols> <byte offset> <byte length> <trainable|frozen>
    ...
    [config]
    <key=value lines of the experiment config>
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, parse_pairs
from .model import ModelParams

FORMAT = "pfl_nnlm-checkpoint"


class CheckpointError(ValueError):
    pass


def save_checkpoint(prefix: str | Path, params: ModelParams, cfg: ExperimentConfig,
                    round_: int) -> tuple[Path, Path]:
    prefix = Path(prefix)
    manifest, blob = prefix.with_suffix(".manifest"), prefix.with_suffix(".bin")
    lines = [f"format={FORMAT}", f"version={__version__}", f"round={round_}", f"blob={blob.name}"]
    offset = 0
    with open(blob, "wb") as fh:
        for name, arr in params.tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(data)
            shape = ",".join(str(s) for s in arr.shape)
            kind = "frozen" if name in params.frozen else "trainable"
            lines.append(f"tensor={name} {shape} {offset} {len(data)} {kind}")
            offset += len(data)
    lines.append("[config]")
    manifest.write_text("\n".join(lines) + "\n" + cfg.to_text(), encoding="utf-8")
    return manifest, blob


def load_checkpoint(prefix: str | Path) -> tuple[ModelParams, ExperimentConfig, int]:
    prefix = Path(prefix)
    manifest = prefix if prefix.suffix == ".manifest" else prefix.with_suffix(".manifest")
    if not manifest.exists():
        raise CheckpointError(f"checkpoint manifest not found: {manifest}")
    text = manifest.read_text(encoding="utf-8").splitlines()
    try:
        split = text.index("[config]")
    except ValueError:
        raise CheckpointError(f"{manifest}: missing [config] section") from None
    head, config_lines = text[:split], text[split + 1:]
    meta: dict[str, str] = {}
    tensors = []
    for line in head:
        key, _, value = line.partition("=")
        if key == "tensor":
            name, shape, off, nbytes, kind = value.split()
            tensors.append((name, tuple(int(s) for s in shape.split(",") if s), int(off),
                            int(nbytes), kind))
        else:
            meta[key] = value
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{manifest}: not a {FORMAT} manifest")
    cfg = ExperimentConfig(**parse_pairs(config_lines, str(manifest))).validate()
    raw = (manifest.parent / meta["blob"]).read_bytes()
    arrays, frozen = {}, set()
    for name, shape, off, nbytes, kind in tensors:
        if off + nbytes > len(raw):
            raise CheckpointError(f"{manifest}: tensor {name} extends past the blob")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4,
                                     offset=off).reshape(shape).astype(np.float32)
        if kind == "frozen":
            frozen.add(name)
    model_cfg = cfg.model_config()
    if "embedding.L" in arrays:
        model_cfg.lora_rank = arrays["embedding.L"].shape[1]
    return ModelParams(model_cfg, arrays, frozenset(frozen)), cfg, int(meta["round"])
