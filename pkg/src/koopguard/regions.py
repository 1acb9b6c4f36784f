"""SOC regions, the piecewise-constant heuristic gain and Coulomb counting."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .pack_sim import OcvSocMap

# Region edges and (discharging, charging) gains for a graphite/NMC cell.
# The edge shared by regions 12 and 13 sits at 0.792, between its neighbours,
# so the partition stays monotone.
REPAIRED_EDGE = 0.792
DEFAULT_EDGES = (0.0, 0.241, 0.284, 0.330, 0.397, 0.456, 0.510, 0.555, 0.591,
                 0.662, 0.727, 0.752, REPAIRED_EDGE, 0.853, 1.0)
DEFAULT_GAINS = (
    (0.989, 0.960), (0.853, 0.948), (0.952, 0.952), (0.989, 0.968),
    (0.955, 0.955), (0.946, 0.945), (0.883, 0.960), (0.990, 0.922),
    (0.999, 0.990), (0.963, 0.978), (0.911, 0.920), (0.960, 0.860),
    (0.967, 0.880), (0.945, 0.920),
)


@dataclass(frozen=True)
class Region:
    index: int
    lo: float
    hi: float
    h_discharge: float
    h_charge: float


@dataclass(frozen=True)
class HeuristicTable:
    regions: tuple
    ocv_map: OcvSocMap | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.regions:
            raise ValueError("at least one region required")
        if self.regions[0].lo != 0.0 or self.regions[-1].hi != 1.0:
            raise ValueError("regions must cover [0, 1]")
        for a, b in zip(self.regions, self.regions[1:]):
            if a.hi != b.lo:
                raise ValueError(f"gap or overlap between regions {a.index} and {b.index}")
        for r in self.regions:
            if not r.lo < r.hi:
                raise ValueError(f"region {r.index} is empty")
            if not (0 < r.h_discharge <= 1 and 0 < r.h_charge <= 1):
                raise ValueError(f"region {r.index}: gains must lie in (0, 1]")
        object.__setattr__(self, "_edges", np.array([r.lo for r in self.regions[1:]]))

    @classmethod
    def default(cls, ocv_map=None, repaired_edge=REPAIRED_EDGE):
        edges = list(DEFAULT_EDGES)
        edges[12] = repaired_edge
        regions = tuple(Region(j + 1, edges[j], edges[j + 1], *DEFAULT_GAINS[j])
                        for j in range(14))
        return cls(regions, ocv_map)

    def with_map(self, ocv_map):
        return HeuristicTable(self.regions, ocv_map)

    @property
    def edges(self):
        return self._edges

    def region(self, j) -> Region:
        return self.regions[j - 1]

    def gain(self, soc, current_sign) -> float:
        r = self.region(region_of(soc, self))
        return r.h_discharge if current_sign > 0 else r.h_charge


def region_of(soc: float, table: HeuristicTable) -> int:
    """1-based index of the half-open region ``[lo, hi)`` holding ``soc``.

    SOC = 1 belongs to the last region.
    """
    if not 0.0 <= soc <= 1.0:
        raise ValueError(f"soc {soc} outside [0, 1]")
    return min(int(np.searchsorted(table.edges, soc, side="right")) + 1, len(table.regions))


def heuristic_stage2(e1, soc: float, current_sign: int, delta_ocv: float,
                     table: HeuristicTable) -> np.ndarray:
    """E2 = h(SOC, sign) * E1 + (1 - SOC) * dOCV, module-wise."""
    h = table.gain(soc, current_sign)
    return h * np.asarray(e1, dtype=float) + (1.0 - soc) * delta_ocv


@dataclass
class SocTracker:
    """Coulomb counter; positive (discharging) current lowers SOC."""

    soc: float
    capacity_ah: float
    dt_s: float = 1.0
    clamp_events: int = 0

    def __post_init__(self):
        if self.capacity_ah <= 0:
            raise ValueError("capacity_ah must be positive")


def soc_update(tracker: SocTracker, current_a: float) -> SocTracker:
    soc = tracker.soc - tracker.dt_s * current_a / (3600.0 * tracker.capacity_ah)
    clamps = tracker.clamp_events
    if soc < 0.0 or soc > 1.0:
        soc = min(max(soc, 0.0), 1.0)
        clamps += 1
    return SocTracker(soc, tracker.capacity_ah, tracker.dt_s, clamps)


def _smooth(x, window):
    if window <= 1:
        return x
    kernel = np.ones(window) / window
    return np.convolve(x, kernel, mode="same")


def _zero_crossings(s, f, lo, hi, floor):
    """Sign changes of ``f`` on ``[lo, hi]``; values within ``floor`` of zero are skipped."""
    out = []
    prev = None
    for i in range(lo, hi + 1):
        if abs(f[i]) <= floor:
            continue
        if prev is not None and f[prev] * f[i] < 0:
            # linear interpolation across the (possibly widened) bracket
            a, b = f[prev], f[i]
            out.append(s[prev] + (s[i] - s[prev]) * a / (a - b))
        prev = i
    return out


def curvature_nodes(ocv_map: OcvSocMap, smoothing: int = 5):
    """Zero crossings of the 2nd and 3rd SOC derivatives of an OCV map.

    Derivatives are central finite differences, each smoothed with a moving
    average of ``smoothing`` samples.  Crossings closer to the grid ends than
    the stencil reach are dropped, and so is round-off level noise (below
    ``1e-6`` of the largest slope).  Returns ``(d2_zeros, d3_zeros)``.
    """
    s = ocv_map.soc_grid
    if s.size < 200:
        raise ValueError("region derivation needs a map of at least 200 points")
    h = np.diff(s)
    if np.ptp(h) > 1e-9 * h.mean():
        raise ValueError("region derivation needs an evenly spaced SOC grid")
    h = h.mean()
    v = ocv_map.ocv_volts / ocv_map.scale
    d1 = _smooth(np.gradient(v, h), smoothing)
    d2 = _smooth(np.gradient(d1, h), smoothing)
    d3 = _smooth(np.gradient(d2, h), smoothing)
    margin = 3 * max(smoothing, 1) + 3
    last = s.size - 1 - margin
    floor = 1e-6 * float(np.max(np.abs(d1)))
    return (_zero_crossings(s, d2, margin, last, floor),
            _zero_crossings(s, d3, margin, last, floor))


def derive_regions(ocv_map: OcvSocMap, smoothing: int = 5) -> list[float]:
    """Interior region boundaries where the map's curvature or its slope changes sign.

    Emits a ``RuntimeWarning`` when fewer than two boundaries are found, which
    means the curve is too featureless to partition usefully.
    """
    d2, d3 = curvature_nodes(ocv_map, smoothing)
    nodes = sorted(d2 + d3)
    merged = []
    for x in nodes:
        if merged and x - merged[-1] < 1e-6:
            continue
        merged.append(float(x))
    if len(merged) < 2:
        warnings.warn(f"only {len(merged)} curvature node(s) found; OCV curve is too "
                      "featureless for region partitioning", RuntimeWarning, stacklevel=2)
    return merged


def table_from_boundaries(boundaries, gains=DEFAULT_GAINS, ocv_map=None) -> HeuristicTable:
    """Build a table from derived boundaries; needs one gain pair per region."""
    edges = [0.0, *boundaries, 1.0]
    if len(edges) - 1 != len(gains):
        raise ValueError(f"{len(edges) - 1} regions but {len(gains)} gain pairs")
    regions = tuple(Region(j + 1, edges[j], edges[j + 1], *gains[j]) for j in range(len(gains)))
    return HeuristicTable(regions, ocv_map)


def sign_with_memory(current_a: float, previous: int) -> int:
    """+1 discharging, -1 charging; zero current keeps the previous direction."""
    if current_a > 0:
        return 1
    if current_a < 0:
        return -1
    return previous if previous in (1, -1) else 1


def ocv_delta(ocv_map: OcvSocMap, soc_prev: float, soc_now: float) -> float:
    return float(ocv_map(soc_now) - ocv_map(soc_prev))
