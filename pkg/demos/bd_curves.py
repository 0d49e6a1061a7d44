"""Bjontegaard deltas on two hand-written rate-quality curves.

    python demos/bd_curves.py
"""
from qladder.bdmetrics import RdCurve, bd_metric, bd_rate

anchor = RdCurve.from_points([250, 600, 1400, 3200, 7500], [31.0, 34.2, 37.1, 39.4, 41.0])
cheaper = RdCurve.from_points([220, 520, 1250, 2900, 6900], [31.0, 34.2, 37.1, 39.4, 41.0])
sharper = RdCurve.from_points([250, 600, 1400, 3200, 7500], [31.6, 34.9, 37.6, 39.8, 41.2])

for name, curve in (("same quality, fewer bits", cheaper), ("same bits, more quality", sharper)):
    print(f"{name:26s} BD-rate {bd_rate(anchor, curve):+6.2f}%   BD-metric {bd_metric(anchor, curve):+5.2f} dB")

# a dip in a measured curve is lifted before interpolation
dipped = RdCurve.from_points([250, 600, 1400, 3200, 7500], [31.0, 34.2, 33.9, 39.4, 41.0])
print(f"repaired points: {dipped.repairs}, values now {dipped.values}")
