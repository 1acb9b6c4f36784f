"""Regenerate the default cell OCV table shipped in ``koopguard/data``.

The curve is built by shaping its second derivative with a monotone
piecewise-cubic through control points, then integrating twice.  Zeros of
the second derivative sit at the roots below and zeros of the third
derivative at the extrema, which gives an NMC/graphite-like curve with a
steep low-SOC knee and 13 curvature features.

Usage::

    python scripts/make_ocv_table.py src/koopguard/data/ocv_nmc.csv
"""
import sys

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import PchipInterpolator

V_MIN, V_MAX = 2.5, 4.2
ROOTS = [0.241, 0.330, 0.456, 0.555, 0.662, 0.752, 0.853]
EXTREMA = [0.284, 0.397, 0.510, 0.591, 0.727, 0.792]
AMPLITUDES = [4.0, 5.0, 5.0, 4.0, 5.0, 5.0]
HEAD = [(0.0, -9000.0), (0.008, -2500.0), (0.025, -400.0), (0.06, -60.0), (0.13, -8.0)]
TAIL = [(1.0, 6.0)]
TABLE_POINTS = 1001


def curvature_profile():
    knots = [s for s, _ in HEAD]
    values = [v for _, v in HEAD]
    for i, root in enumerate(ROOTS):
        knots.append(root)
        values.append(0.0)
        if i < len(EXTREMA):
            knots.append(EXTREMA[i])
            values.append((-1) ** i * AMPLITUDES[i])
    for s, v in TAIL:
        knots.append(s)
        values.append(v)
    return PchipInterpolator(knots, values)


def build_table(points=TABLE_POINTS, fine=400001):
    s = np.linspace(0.0, 1.0, fine)
    d2 = curvature_profile()(s)
    d1 = cumulative_trapezoid(d2, s, initial=0.0)
    ocv = cumulative_trapezoid(d1, s, initial=0.0)
    slope0 = (V_MAX - V_MIN) - ocv[-1]
    ocv = V_MIN + ocv + slope0 * s
    if np.min(d1 + slope0) <= 0:
        raise RuntimeError("designed curve is not monotone")
    grid = np.linspace(0.0, 1.0, points)
    table = np.interp(grid, s, ocv)
    table[0], table[-1] = V_MIN, V_MAX
    return grid, table


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "ocv_nmc.csv"
    grid, table = build_table()
    np.savetxt(out, np.column_stack([grid, table]), delimiter=",",
               header="soc,ocv_v", comments="", fmt="%.12g")
