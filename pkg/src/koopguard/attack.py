"""Sensor-attack injectors acting on the measured module voltages."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .telemetry import TelemetryFrame, TelemetryStream

KINDS = ("none", "dos_hold", "fdi_bias", "data_swap")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    start_s: float = 0.0
    duration_s: float = math.inf
    bias_v: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.start_s < 0:
            raise ValueError("start_s must be >= 0")
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")
        if not math.isfinite(self.bias_v):
            raise ValueError("bias_v must be finite")

    def active_at(self, t_s: float) -> bool:
        # half-open window [start, start + duration)
        return self.kind != "none" and self.start_s <= t_s < self.start_s + self.duration_s


@dataclass(frozen=True)
class AttackState:
    held_frame: np.ndarray | None = None
    active: bool = False
    last_clean: np.ndarray | None = None


def swap_ascending_to_descending(v: np.ndarray) -> np.ndarray:
    """Give the smallest reading the largest value, the next smallest the next largest, etc.

    Ties keep their original relative order (stable sort).
    """
    order = np.argsort(v, kind="stable")
    out = np.empty_like(v)
    out[order] = v[order][::-1]
    return out


def inject(frame: TelemetryFrame, spec: AttackSpec, state: AttackState):
    """Corrupt one frame's measured voltages.

    Returns ``(v_corrupted, new_state)``.  The frame itself is not modified, so
    current, true voltage and true SOC are never touched.
    """
    v = np.asarray(frame.v_meas, dtype=float)
    if not spec.active_at(frame.t_s):
        return v.copy(), AttackState(held_frame=None, active=False, last_clean=v.copy())
    if spec.kind == "dos_hold":
        held = state.held_frame
        if held is None:
            # nothing received before the attack began: hold the first frame seen
            held = state.last_clean if state.last_clean is not None else v.copy()
        return held.copy(), AttackState(held_frame=held, active=True, last_clean=state.last_clean)
    if spec.kind == "fdi_bias":
        out = v + spec.bias_v
    else:
        out = swap_ascending_to_descending(v)
    return out, AttackState(held_frame=None, active=True, last_clean=state.last_clean)


def attack_stream(stream: TelemetryStream, spec: AttackSpec) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``spec`` along a whole stream.

    Returns the corrupted measurement matrix and a boolean mask of attacked
    samples.
    """
    out = np.empty_like(stream.v_meas)
    mask = np.zeros(len(stream), dtype=bool)
    state = AttackState()
    for k, frame in enumerate(stream.frames()):
        out[k], state = inject(frame, spec, state)
        mask[k] = state.active
    return out, mask
