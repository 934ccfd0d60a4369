"""
How the LASSO error shrinks with more measurements
===================================================

The centralized LASSO error should fall roughly like sigma^2 / m. We fit
the log-log slope over m in {60, 120, 240, 480} and check that doubling the
noise level quadruples the error.
"""

from decunroll.diagnostics import recovery_scaling_experiment
from decunroll.instance import InstanceConfig

m_list = [60, 120, 240, 480]
base = InstanceConfig(n_nodes=5, n_edges=6, d=100, m_total=60, p_s=8, sigma_override=0.05, seed=3)

lo = recovery_scaling_experiment(base, m_list, trials=20)
hi = recovery_scaling_experiment(base.replace(sigma_override=0.1), m_list, trials=20)

print("    m    mse(sigma=0.05)   mse(sigma=0.1)   ratio")
for m, a, b in zip(lo.m_list, lo.mse, hi.mse):
    print(f"{m:5d} {a:17.4e} {b:16.4e} {b / a:7.2f}")
print(f"\nlog-log slope: {lo.slope:.2f} (sigma=0.05), {hi.slope:.2f} (sigma=0.1)")

noiseless = recovery_scaling_experiment(base.replace(sigma_override=0.0), m_list[:2], trials=2)
print("noiseless run degenerate:", noiseless.degenerate)
