"""
Exact identities on small chains
================================

Every structural identity of the model is checked numerically on a few
geometries, one of them disconnected.
"""

from xxzloc import Region
from xxzloc.identities import run_battery, summary_table

# two connected chains and one region with a hole in it
geometries = [Region.chain(4), Region.chain(6), Region([0, 1, 2, 5, 6])]

# two anisotropies, three disorder draws each
reports = run_battery(geometries, deltas=(2.0, 5.0), n_draws=3, seed=0)
print(summary_table(reports))
