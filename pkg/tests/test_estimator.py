import numpy as np
import pytest

from koopguard.estimator import EstimatorTuning, SecureEstimator
from koopguard.pack_sim import PACKS, CellParams, Protocol, build_ocv_soc_map, run_protocol
from koopguard.regions import HeuristicTable
from koopguard.telemetry import WindowConfig

TOPO = PACKS["pack1"]
CELL = CellParams()


@pytest.fixture(scope="module")
def stream():
    proto = Protocol(mode="discharge", soc_lo=0.05, soc_hi=0.95, duration_s=600)
    return run_protocol(TOPO, CELL, proto, 0.8, seed=2, jitter=0.0)


def _est(correction="heuristic", **tuning):
    table = HeuristicTable.default(build_ocv_soc_map(CELL).scaled(TOPO.series_per_module))
    return SecureEstimator(TOPO.modules, WindowConfig(), TOPO.module_capacity_ah(CELL), 0.8,
                           table, correction=correction, tuning=EstimatorTuning(**tuning))


def _run_nominal(est, stream, upto):
    return [est.step(stream.t_s[k], stream.current_a[k], stream.v_meas[k]) for k in range(upto)]


def test_soc_matches_simulator(stream):
    est = _est()
    outs = _run_nominal(est, stream, len(stream))
    soc = np.array([o.soc for o in outs])
    np.testing.assert_allclose(soc, stream.soc_true, atol=1e-12)


def test_nominal_prediction_tracks_measurement(stream):
    est = _est()
    outs = _run_nominal(est, stream, 300)
    assert est.predicting
    err = np.array([o.v_p - stream.v_meas[k] for k, o in enumerate(outs)])[91:]
    assert np.max(np.abs(err)) < 0.02


def test_first_fit_at_window_fill(stream):
    est = _est()
    _run_nominal(est, stream, 90)
    assert not est.predicting
    est.step(stream.t_s[90], stream.current_a[90], stream.v_meas[90])
    assert est.predicting and est.fitted_now is not None


def test_trigger_before_first_window_raises(stream):
    est = _est()
    _run_nominal(est, stream, 50)
    with pytest.raises(RuntimeError):
        est.trigger(40)


def test_rollback_target_and_replay(stream):
    est = _est()
    _run_nominal(est, stream, 250)
    out = est.trigger(200)
    # boundaries at 90, 120, ...; newest one <= 200 - 30 is 150
    assert len(out) == 250 - 150
    assert est.handoff_clean
    assert all(o.mode == "secure_heuristic" for o in out)
    assert est.trigger(240) == []


def test_handoff_flagged_when_guard_unavailable(stream):
    est = _est(keep_snapshots=1)
    _run_nominal(est, stream, 250)
    est.trigger(200)
    assert not est.handoff_clean


def test_secure_mode_ignores_measurement(stream):
    a, b = _est(), _est()
    _run_nominal(a, stream, 200)
    _run_nominal(b, stream, 200)
    a.trigger(190)
    b.trigger(190)
    for k in range(200, 260):
        oa = a.step(stream.t_s[k], stream.current_a[k], None)
        ob = b.step(stream.t_s[k], stream.current_a[k], np.full(3, 1e300))
        np.testing.assert_array_equal(oa.v_hat, ob.v_hat)


@pytest.mark.parametrize("correction", ["heuristic", "stage1"])
def test_secure_loop_stays_finite(stream, correction):
    est = _est(correction)
    _run_nominal(est, stream, 200)
    est.trigger(195)
    outs = [est.step(stream.t_s[k], stream.current_a[k]) for k in range(200, len(stream))]
    assert all(np.all(np.isfinite(o.v_hat)) for o in outs)
    assert est.faults == 0


def test_stack_provenance_after_trigger(stream):
    est = _est()
    _run_nominal(est, stream, 250)
    est.trigger(200)
    for k in range(250, 300):
        est.step(stream.t_s[k], stream.current_a[k])
    tags = est.stack_tags()
    meas_t = [t for t, tag in tags["voltage"] + tags["error"] if tag == "meas"]
    assert not meas_t or max(meas_t) < 150


def test_constructor_validation():
    table = HeuristicTable.default()
    with pytest.raises(ValueError, match="OCV map"):
        SecureEstimator(3, WindowConfig(), 25.0, 0.5, table)
    with pytest.raises(ValueError, match="GprBank"):
        SecureEstimator(3, WindowConfig(), 25.0, 0.5, table, correction="gpr")
    with pytest.raises(ValueError):
        SecureEstimator(3, WindowConfig(), 25.0, 0.5, table, correction="kalman")
    with pytest.raises(ValueError):
        EstimatorTuning(rank_tol=0.0)
