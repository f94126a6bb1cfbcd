"""A small run of the simulation studies.

Distribution of ``v*`` over all four outcomes for the exact and naive
routes, then how often screening alone settles every outcome as the number
of pairs grows. Full-size runs use ``fdpsens simulate``.

Run: python3 demos/03_quick_simulation.py
"""
from fdpsens.simlab import default_spec, run_screening_study, run_table2

res = run_table2(default_spec("table2", replicates=40))
print(res.to_csv(header=False))

res = run_screening_study(default_spec("screening", replicates=20, gamma_grid=(1.25, 2.0)))
print(res.to_csv(header=False))
