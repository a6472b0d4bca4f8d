"""
Wegner-type scaling of eigenvalue probabilities
===============================================

The probability of finding spectrum of the compressed operator in a
small window grows linearly with the window width and drops as the
disorder strength grows.
"""

from xxzloc import Region
from xxzloc.disorder import wegner_scan

lam = Region.chain(6)
table = wegner_scan(lam, lam.sites, 1, 1.2, [0.01, 0.02, 0.04], [2.0, 4.0], n_samples=400, seed=0, delta=8.0)

for w, l, p, se in table.rows():
    print(f"lam={l:g}  width={w:.2f}  P={p:.4f} +- {se:.4f}")

print({l: round(s, 3) for l, s in table.slopes.items()}, "ratio", round(table.slope_ratio, 3))
