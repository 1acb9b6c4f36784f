import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopguard.pack_sim import OcvSocMap
from koopguard.regions import (DEFAULT_GAINS, HeuristicTable, SocTracker, derive_regions,
                               heuristic_stage2, ocv_delta, region_of, sign_with_memory,
                               soc_update, table_from_boundaries)

INTERVALS = [(0.0, 0.241), (0.241, 0.284), (0.284, 0.330), (0.330, 0.397), (0.397, 0.456),
             (0.456, 0.510), (0.510, 0.555), (0.555, 0.591), (0.591, 0.662), (0.662, 0.727),
             (0.727, 0.752), (0.752, 0.792), (0.792, 0.853), (0.853, 1.0)]


@pytest.mark.parametrize("j", range(1, 15))
def test_region_intervals(j):
    t = HeuristicTable.default()
    lo, hi = INTERVALS[j - 1]
    assert region_of(lo, t) == j
    assert region_of(np.nextafter(hi, 0.0), t) == j
    assert region_of((lo + hi) / 2, t) == j


def test_region_edges():
    t = HeuristicTable.default()
    assert region_of(1.0, t) == 14
    with pytest.raises(ValueError):
        region_of(1.0001, t)


def test_heuristic_formula():
    t = HeuristicTable.default()
    e1 = np.array([0.1, -0.2])
    # region 7, discharging: h = 0.883
    out = heuristic_stage2(e1, 0.52, 1, 0.004, t)
    np.testing.assert_array_equal(out, 0.883 * e1 + (1 - 0.52) * 0.004)
    # region 12, charging: h = 0.860
    out = heuristic_stage2(e1, 0.77, -1, -0.01, t)
    np.testing.assert_array_equal(out, 0.860 * e1 + (1 - 0.77) * -0.01)


def test_table_validation():
    t = HeuristicTable.default()
    with pytest.raises(ValueError, match="gap or overlap"):
        HeuristicTable(tuple(r if r.index != 3 else type(r)(3, 0.29, 0.330, 0.9, 0.9)
                             for r in t.regions))
    with pytest.raises(ValueError, match="regions but"):
        table_from_boundaries([0.5])
    assert len(t.regions) == 14


@settings(max_examples=50, deadline=None)
@given(current=st.floats(-50, 50), soc=st.floats(0.1, 0.9))
def test_soc_update_is_coulomb_counting(current, soc):
    tr = soc_update(SocTracker(soc, 25.0), current)
    assert tr.soc == pytest.approx(soc - current / (3600 * 25.0), abs=1e-15)


def test_soc_clamps_and_counts():
    tr = soc_update(SocTracker(0.0001, 1.0), 10.0)
    assert tr.soc == 0.0 and tr.clamp_events == 1


def test_sign_with_memory():
    assert sign_with_memory(2.0, -1) == 1
    assert sign_with_memory(-2.0, 1) == -1
    assert sign_with_memory(0.0, -1) == -1


def _cubic_map(node=0.4):
    s = np.linspace(0.0, 1.0, 1001)
    return OcvSocMap(s, 3.6 + 0.3 * s + 0.5 * (s - node) ** 3)


def test_cubic_inflection():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        b = derive_regions(_cubic_map(0.4))
    assert len(b) == 1
    assert b[0] == pytest.approx(0.4, abs=1e-3)


def test_featureless_curve_warns():
    s = np.linspace(0.0, 1.0, 1001)
    with pytest.warns(RuntimeWarning, match="featureless"):
        assert derive_regions(OcvSocMap(s, 3.0 + s)) == []


def test_derive_regions_rejects_coarse_map():
    s = np.linspace(0.0, 1.0, 100)
    with pytest.raises(ValueError):
        derive_regions(OcvSocMap(s, 3.0 + s))


def test_ocv_delta():
    mp = _cubic_map()
    assert ocv_delta(mp, 0.5, 0.5) == 0.0
    assert ocv_delta(mp, 0.5, 0.4) < 0
    assert len(DEFAULT_GAINS) == 14
