import numpy as np
import pytest

from koopguard.detector import (DetectorConfig, DetectorState, calibrate, detection_residual,
                                isolation_residual, output_modes, update)
from koopguard.telemetry import DataStacks, delay_embed


def _feed(rds, cfg, ri=0.0):
    st = DetectorState()
    for k, rd in enumerate(rds):
        st = update(st, rd, ri, cfg, float(k))
    return st


def test_latches_after_confirm_count():
    cfg = DetectorConfig(0.1, 0.5, 3)
    assert not _feed([0.2, 0.2, 0.0, 0.2, 0.2], cfg).verdict.attacked
    st = _feed([0.0, 0.2, 0.3, 0.4, 0.0, 0.0], cfg)
    assert st.verdict.attacked
    assert st.verdict.onset_time_s == 1.0 and st.verdict.trigger_time_s == 3.0


def test_sensor_flag_needs_ri():
    cfg = DetectorConfig(0.1, 0.5, 1)
    assert not _feed([1.0], cfg, ri=0.1).verdict.sensor_attack
    assert _feed([1.0], cfg, ri=0.9).verdict.sensor_attack


def test_residuals():
    assert detection_residual([1.0, 2.0], [1.5, 1.0]) == 1.0
    with pytest.raises(ValueError):
        detection_residual([1.0], [1.0, 2.0])
    assert isolation_residual(np.ones((2, 2)), np.ones((2, 2))) == 0.0


def test_output_modes_shape_and_shift():
    rng = np.random.default_rng(0)
    t = np.arange(90)
    v = np.vstack([200 - 0.02 * t + 0.01 * rng.normal(size=90) for _ in range(3)])
    u = np.full(90, 25.0)
    c0 = output_modes(delay_embed(DataStacks(v, u), 2))
    assert c0.shape == (3, 11)
    v2 = v.copy()
    v2[:, 45:] = v2[:, 44:45]
    c1 = output_modes(delay_embed(DataStacks(v2, u), 2))
    assert isolation_residual(c0, c1) > 1e-3


def test_calibrate():
    rng = np.random.default_rng(1)
    cfg = calibrate(rng.normal(0.01, 0.001, 1000), rng.normal(0.1, 0.01, 50), k_sigma=5)
    assert cfg.rd_threshold_v == pytest.approx(0.015, rel=0.05)
    assert cfg.ri_threshold == pytest.approx(0.15, rel=0.1)
    with pytest.raises(ValueError):
        calibrate([], [1.0])


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(0.0)
    with pytest.raises(ValueError):
        DetectorConfig(confirm_count=0)
