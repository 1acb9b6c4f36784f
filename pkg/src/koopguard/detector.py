"""Residual-based attack trigger for the secure estimator.

Two residuals are monitored.  The detection residual RD compares each
measurement with the nominal Koopman prediction.  The isolation residual RI
tracks how far the output modes (the output map expressed in the dominant
lifted subspace) drift away from those of the last clean learning window.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .koopman import truncated_pinv
from .telemetry import EmbeddedBatch


@dataclass(frozen=True)
class DetectorConfig:
    rd_threshold_v: float = 0.05
    ri_threshold: float = 0.05
    confirm_count: int = 3

    def __post_init__(self):
        if self.rd_threshold_v <= 0 or self.ri_threshold <= 0:
            raise ValueError("detector thresholds must be positive")
        if self.confirm_count < 1:
            raise ValueError("confirm_count must be >= 1")


@dataclass(frozen=True)
class DetectorVerdict:
    attacked: bool = False
    sensor_attack: bool = False
    trigger_time_s: float | None = None
    onset_time_s: float | None = None


@dataclass
class DetectorState:
    verdict: DetectorVerdict = field(default_factory=DetectorVerdict)
    run_length: int = 0
    run_start_s: float | None = None


def detection_residual(v_meas, v_p) -> float:
    """Infinity norm of ``v_meas - v_p`` across modules."""
    v_meas = np.asarray(v_meas, dtype=float)
    v_p = np.asarray(v_p, dtype=float)
    if v_meas.shape != v_p.shape:
        raise ValueError(f"shape mismatch {v_meas.shape} vs {v_p.shape}")
    return float(np.max(np.abs(v_meas - v_p))) if v_meas.size else 0.0


def isolation_residual(c_ref, c_now) -> float:
    c_ref = np.asarray(c_ref, dtype=float)
    c_now = np.asarray(c_now, dtype=float)
    if c_ref.shape != c_now.shape:
        raise ValueError(f"shape mismatch {c_ref.shape} vs {c_now.shape}")
    return float(np.linalg.norm(c_now - c_ref) / np.linalg.norm(c_ref))


def output_modes(batch: EmbeddedBatch, rank: int | None = None) -> np.ndarray:
    """Output map ``C`` fitted in the rank-``rank`` dominant subspace of ``xi``.

    On the full-rank lifted state the least-squares output map is just the
    selector of the oldest voltage block, which no sensor attack can move.
    Restricting the fit to the leading singular directions gives a map that
    follows the data's dominant structure and shifts when the measurements stop
    being consistent with it.  ``rank`` defaults to ``m + 1``.
    """
    r = batch.m + 1 if rank is None else rank
    U, s, Vt = np.linalg.svd(batch.xi, full_matrices=False)
    r = min(r, s.size)
    pinv_r = (Vt[:r].T / s[:r]) @ U[:, :r].T
    return batch.y @ pinv_r


def update(state: DetectorState, rd: float, ri: float, cfg: DetectorConfig,
           t_s: float) -> DetectorState:
    """Fold one sample into the latched verdict.

    ``attacked`` latches once RD has exceeded its threshold on
    ``confirm_count`` consecutive samples; ``sensor_attack`` latches when RI
    also exceeds its threshold while attacked.  Nothing ever un-latches.
    """
    v = state.verdict
    run, start = state.run_length, state.run_start_s
    if rd > cfg.rd_threshold_v:
        run += 1
        if start is None:
            start = t_s
    else:
        run, start = 0, None
    attacked = v.attacked or run >= cfg.confirm_count
    trigger = v.trigger_time_s
    onset = v.onset_time_s
    if attacked and not v.attacked:
        trigger, onset = t_s, start
    sensor = v.sensor_attack or (attacked and ri > cfg.ri_threshold)
    return DetectorState(DetectorVerdict(attacked, sensor, trigger, onset), run, start)


def calibrate(rd_samples, ri_samples, k_sigma: float = 5.0, confirm_count: int = 3,
              floor_rd: float = 1e-3, floor_ri: float = 1e-6) -> DetectorConfig:
    """Thresholds at ``mean + k_sigma * std`` of attack-free residuals."""
    rd = np.asarray(rd_samples, dtype=float)
    ri = np.asarray(ri_samples, dtype=float)
    rd = rd[np.isfinite(rd)]
    ri = ri[np.isfinite(ri)]
    if rd.size == 0 or ri.size == 0:
        raise ValueError("calibration needs residual samples")
    return DetectorConfig(
        rd_threshold_v=max(float(rd.mean() + k_sigma * rd.std()), floor_rd),
        ri_threshold=max(float(ri.mean() + k_sigma * ri.std()), floor_ri),
        confirm_count=confirm_count,
    )
