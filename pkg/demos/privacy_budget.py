"""
How much noise does a privacy budget buy?
=========================================

Calibrate the noise multiplier for a target (epsilon, delta) and watch how
it moves with the sampling rate and the number of rounds.
"""

import numpy as np

from pfl_nnlm.privacy import PrivacyLedger, calibrate_sigma, compute_rdp, rdp_to_dp

# a single full-batch Gaussian release with sigma=1
orders = np.linspace(1.01, 64, 6300)
eps, order = rdp_to_dp(compute_rdp(1.0, 1.0, 1, orders), orders, 1e-5)
print(f"q=1, sigma=1, one release: epsilon={eps:.4f} at order {order:.2f}")

# the production setting: epsilon=2, delta=1e-6, q=0.002
for T in (500, 2000, 5000):
    sigma = calibrate_sigma(2.0, 1e-6, 2e-3, T)
    print(f"T={T:5d}  sigma={sigma:.4f}")

# a tiny population needs a huge sampling rate, and so a lot of noise
sigma = calibrate_sigma(2.0, 1e-6, 0.2, 300)
print(f"q=0.2, T=300: sigma={sigma:.3f}")

# budget spent as training goes on
ledger = PrivacyLedger(0.2, sigma, 1e-6)
spent = [ledger.spend() for _ in range(300)]
for t in (1, 10, 100, 300):
    print(f"after round {t:3d}: epsilon={spent[t - 1]:.3f}")
