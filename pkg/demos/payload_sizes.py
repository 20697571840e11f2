"""
Payload sizes for the full-size model
=====================================

Bytes a client uploads per round, for plain, PEU, LoRA and combined
updates of a 100k-word, 256-dim, 4x768 FOFE model.
"""

from pfl_nnlm.cli import REFERENCE_ROWS, payload_table
from pfl_nnlm.config import ExperimentConfig

cfg = ExperimentConfig().model_config()
print(f"{'update':<20} {'MB':>8} {'ref MB':>9}")
for row in payload_table(cfg, REFERENCE_ROWS):
    print(f"{row['name']:<20} {row['mb']:8.2f} {row['reference_mb']:9.1f}")

# every extra PEU row costs exactly one embedding row of float32
rows = payload_table(cfg, [("a", 5000, None, None), ("b", 5001, None, None)])
print("one more row:", rows[1]["bytes"] - rows[0]["bytes"], "bytes")
