"""
A small private federated run
=============================

Train on a synthetic corpus of 50 users with PEU and calibrated noise, and
compare the raw server model theta with its moving average phi. Pass the
number of rounds as the first argument (default 100, under a minute).
Noise is recalibrated for that many rounds.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from pfl_nnlm.config import parse_config
from pfl_nnlm.federation import run_experiment

cfg_path = Path(__file__).resolve().parents[1] / "configs" / "synth_e2e.cfg"
rounds = int(sys.argv[1]) if len(sys.argv) > 1 else 100
cfg = parse_config(cfg_path, [f"rounds={rounds}"], for_run=True)

with tempfile.TemporaryDirectory() as out:
    res = run_experiment(cfg, out, write_checkpoints=False)

print(f"sigma={res.sigma:.3f}  unigram PPL={res.unigram_ppl:.1f}")
theta = np.array([r.ppl_theta for r in res.reports])
phi = np.array([r.ppl_ema for r in res.reports])
for t in range(0, rounds, max(rounds // 10, 1)):
    r = res.reports[t]
    print(f"round {r.round:4d}  cohort {r.cohort_size:2d}  theta {theta[t]:9.1f}  "
          f"phi {phi[t]:8.1f}  eps {r.epsilon:.3f}")

# phi moves much less from round to round than theta
print("std of per-round change: theta", f"{np.diff(theta).std():.3g}",
      " phi", f"{np.diff(phi).std():.3g}")
