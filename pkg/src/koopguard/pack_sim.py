"""Equivalent-circuit battery pack simulator.

Each module is a string of ``series_per_module`` cell groups, each group
``parallel_per_series`` cells wide.  A cell is a first-order Thevenin model:
an OCV source, a series resistance ``r0`` and one RC polarization pair.

Sign convention: positive current discharges the battery.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from .telemetry import TelemetryStream

OCV_TABLE = "ocv_nmc.csv"


class CutoffReached(Exception):
    """Raised when a step drives the pack outside its SOC or voltage limits."""

    def __init__(self, reason, state=None, voltages=None):
        super().__init__(reason)
        self.reason = reason
        self.state = state
        self.voltages = voltages


class OcvCurve:
    """Monotone OCV(SOC) map backed by a cubic spline through a table."""

    def __init__(self, soc, ocv):
        soc = np.asarray(soc, dtype=float)
        ocv = np.asarray(ocv, dtype=float)
        if soc.ndim != 1 or soc.shape != ocv.shape or soc.size < 4:
            raise ValueError("OCV table needs matching 1-D arrays of at least 4 points")
        if np.any(np.diff(soc) <= 0) or np.any(np.diff(ocv) <= 0):
            raise ValueError("OCV table must be strictly increasing in SOC and voltage")
        self.soc = soc
        self.ocv = ocv
        self._spline = CubicSpline(soc, ocv)

    def __call__(self, soc):
        return self._spline(np.clip(soc, self.soc[0], self.soc[-1]))

    def derivative(self, order=1):
        return self._spline.derivative(order)

    @classmethod
    def default(cls):
        text = resources.files("koopguard.data").joinpath(OCV_TABLE).read_text()
        table = np.loadtxt(text.splitlines(), delimiter=",", skiprows=1)
        return cls(table[:, 0], table[:, 1])


@dataclass(frozen=True)
class CellParams:
    capacity_ah: float = 5.0
    v_min: float = 2.5
    v_max: float = 4.2
    r0: float = 0.02
    r1: float = 0.015
    c1: float = 2000.0
    ocv_curve: OcvCurve = field(default_factory=OcvCurve.default, repr=False, compare=False)
    max_c_rate: float = 3.0

    def __post_init__(self):
        if self.capacity_ah <= 0:
            raise ValueError("capacity_ah must be positive")
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")
        if min(self.r0, self.r1, self.c1) <= 0:
            raise ValueError("r0, r1 and c1 must be positive")
        lo, hi = float(self.ocv_curve(0.0)), float(self.ocv_curve(1.0))
        if abs(lo - self.v_min) > 1e-9 or abs(hi - self.v_max) > 1e-9:
            raise ValueError(f"ocv_curve endpoints ({lo}, {hi}) must equal (v_min, v_max)")

    def ocv(self, soc):
        return self.ocv_curve(soc)


@dataclass(frozen=True)
class PackTopology:
    modules: int
    series_per_module: int
    parallel_per_series: int
    label: str = ""

    def __post_init__(self):
        if min(self.modules, self.series_per_module, self.parallel_per_series) < 1:
            raise ValueError("all topology counts must be >= 1")

    @property
    def total_cells(self):
        return self.modules * self.series_per_module * self.parallel_per_series

    def module_capacity_ah(self, cell: CellParams):
        return cell.capacity_ah * self.parallel_per_series


# Reference packs: modules are wired in parallel,
# each module is ``Np Ns``.
PACKS = {
    "pack1": PackTopology(3, 60, 5, "5p60s x3"),
    "pack2": PackTopology(5, 80, 5, "5p80s x5"),
    "pack3": PackTopology(4, 100, 5, "5p100s x4"),
}


@dataclass(frozen=True)
class PackState:
    soc_per_module: np.ndarray
    rc_voltage_per_module: np.ndarray
    cycle_count: int
    effective_capacity_ah: float
    effective_r0: float
    # per-module multipliers on (capacity, r0, r1, c1), drawn once per pack
    jitter: np.ndarray = field(repr=False, default=None)

    @property
    def modules(self):
        return self.soc_per_module.size


def apply_aging(cell: CellParams, cycles: int, fade_per_cycle: float = 0.0005,
                r_growth_per_cycle: float = 0.002) -> CellParams:
    """Linear capacity fade and resistance growth after ``cycles`` cycles."""
    if cycles < 0:
        raise ValueError("cycles must be >= 0")
    if not 0 <= fade_per_cycle < 0.01:
        raise ValueError("fade_per_cycle must lie in [0, 0.01)")
    if r_growth_per_cycle < 0:
        raise ValueError("r_growth_per_cycle must be >= 0")
    capacity = cell.capacity_ah * (1.0 - fade_per_cycle * cycles)
    if capacity <= 0:
        raise ValueError(f"aging leaves non-positive capacity ({capacity} Ah)")
    if cycles == 0:
        return cell
    return dataclasses.replace(cell, capacity_ah=capacity,
                               r0=cell.r0 * (1.0 + r_growth_per_cycle * cycles))


def make_pack(topology: PackTopology, cell: CellParams, soc0: float, seed: int = 0,
              jitter: float = 0.01, cycles: int = 0) -> PackState:
    """Fresh pack at rest with per-module parameter jitter of +-``jitter``."""
    if not 0.0 <= soc0 <= 1.0:
        raise ValueError("soc0 must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    scales = 1.0 + rng.uniform(-jitter, jitter, size=(topology.modules, 4))
    m = topology.modules
    return PackState(
        soc_per_module=np.full(m, float(soc0)),
        rc_voltage_per_module=np.zeros(m),
        cycle_count=cycles,
        effective_capacity_ah=cell.capacity_ah,
        effective_r0=cell.r0,
        jitter=scales,
    )


def _module_params(state: PackState, cell: CellParams):
    scales = state.jitter if state.jitter is not None else np.ones((state.modules, 4))
    capacity = state.effective_capacity_ah * scales[:, 0]
    r0 = state.effective_r0 * scales[:, 1]
    r1 = cell.r1 * scales[:, 2]
    c1 = cell.c1 * scales[:, 3]
    return capacity, r0, r1, c1


def module_voltages(state: PackState, topology: PackTopology, cell: CellParams,
                    current_a: float) -> np.ndarray:
    """Terminal voltage of every module for the given state and current."""
    _, r0, _, _ = _module_params(state, cell)
    i_cell = current_a / topology.parallel_per_series
    cell_v = cell.ocv(state.soc_per_module) - i_cell * r0 - state.rc_voltage_per_module
    return topology.series_per_module * cell_v


def step_pack(state: PackState, topology: PackTopology, cell: CellParams,
              current_a: float, dt_s: float):
    """Advance the pack by ``dt_s`` under a constant module current.

    ``current_a`` is the current through one module string; each cell carries
    ``current_a / parallel_per_series``.  Returns the new state and the module
    voltages sampled at the end of the step.

    Raises
    ------
    CutoffReached
        If any module SOC leaves [0, 1] or a module voltage leaves
        ``[v_min, v_max] * series_per_module``.  The exception carries the
        offending state and voltages.
    """
    if dt_s <= 0:
        raise ValueError("dt_s must be positive")
    module_cap_ah = topology.module_capacity_ah(cell)
    if abs(current_a) > cell.max_c_rate * module_cap_ah + 1e-9:
        raise ValueError(f"|current| {abs(current_a)} A exceeds {cell.max_c_rate}C")

    capacity, r0, r1, c1 = _module_params(state, cell)
    i_cell = current_a / topology.parallel_per_series
    decay = np.exp(-dt_s / (r1 * c1))
    v_rc = state.rc_voltage_per_module * decay + i_cell * r1 * (1.0 - decay)
    soc = state.soc_per_module - i_cell * dt_s / (3600.0 * capacity)
    new_state = dataclasses.replace(state, soc_per_module=soc, rc_voltage_per_module=v_rc)

    if np.any(soc < 0.0) or np.any(soc > 1.0):
        raise CutoffReached("soc", new_state, None)
    volts = topology.series_per_module * (cell.ocv(soc) - i_cell * r0 - v_rc)
    lo = cell.v_min * topology.series_per_module
    hi = cell.v_max * topology.series_per_module
    if np.any(volts < lo) or np.any(volts > hi):
        raise CutoffReached("voltage", new_state, volts)
    return new_state, volts


@dataclass
class Protocol:
    """Constant-current test protocol.

    ``mode`` is ``charge``, ``discharge`` or ``cycle``.  Charge phases stop at
    ``soc_hi``, discharge phases at ``soc_lo``; a cycle is charge, rest,
    discharge, rest.  ``duration_s`` caps the total run length.
    """

    mode: str = "charge"
    c_rate: float = 1.0
    soc_lo: float = 0.3
    soc_hi: float = 0.7
    rest_s: float = 900.0
    cycles: int = 1
    dt_s: float = 1.0
    duration_s: float = math.inf

    def __post_init__(self):
        if self.mode not in ("charge", "discharge", "cycle"):
            raise ValueError(f"unknown protocol mode {self.mode!r}")
        if not 0.0 <= self.soc_lo < self.soc_hi <= 1.0:
            raise ValueError("need 0 <= soc_lo < soc_hi <= 1")
        if self.dt_s <= 0 or self.c_rate <= 0:
            raise ValueError("dt_s and c_rate must be positive")

    def phases(self):
        if self.mode == "charge":
            return [("charge", None)]
        if self.mode == "discharge":
            return [("discharge", None)]
        out = []
        for _ in range(self.cycles):
            out += [("charge", None), ("rest", self.rest_s),
                    ("discharge", None), ("rest", self.rest_s)]
        return out


def run_protocol(topology: PackTopology, cell: CellParams, protocol: Protocol,
                 soc0: float, seed: int = 0, jitter: float = 0.01, cycles: int = 0,
                 noise_std_v: float = 0.0, state: PackState | None = None,
                 on_step: Callable | None = None) -> TelemetryStream:
    """Simulate ``protocol`` and return the sampled telemetry.

    Frames are emitted every ``dt_s``; frame 0 is the initial state under the
    first phase's current.  A voltage or SOC cutoff ends the run early and the
    partial stream is returned with ``stream.status`` describing the cutoff.
    Measurement noise (if any) is drawn from the same seeded generator that
    sets module jitter, so a config always reproduces bit-identical output.
    """
    if state is None:
        state = make_pack(topology, cell, soc0, seed=seed, jitter=jitter, cycles=cycles)
    noise_rng = np.random.default_rng([seed, 1])
    dt = protocol.dt_s
    i_1c = topology.module_capacity_ah(cell)

    currents, volts, socs = [], [], []
    status = "complete"
    phases = protocol.phases()
    first = phases[0][0]
    i0 = {"charge": -1.0, "discharge": 1.0}.get(first, 0.0) * protocol.c_rate * i_1c
    currents.append(i0)
    volts.append(module_voltages(state, topology, cell, i0))
    socs.append(float(np.mean(state.soc_per_module)))
    max_steps = math.inf if math.isinf(protocol.duration_s) else int(round(protocol.duration_s / dt))

    steps = 0
    try:
        for kind, length in phases:
            if kind == "rest":
                n = int(round(length / dt))
                current = 0.0
            else:
                n = None
                current = (-1.0 if kind == "charge" else 1.0) * protocol.c_rate * i_1c
            taken = 0
            while steps < max_steps:
                if n is not None and taken >= n:
                    break
                soc_now = float(np.mean(state.soc_per_module))
                if kind == "charge" and soc_now >= protocol.soc_hi - 1e-12:
                    break
                if kind == "discharge" and soc_now <= protocol.soc_lo + 1e-12:
                    break
                state, v = step_pack(state, topology, cell, current, dt)
                currents.append(current)
                volts.append(v)
                socs.append(float(np.mean(state.soc_per_module)))
                steps += 1
                taken += 1
                if on_step is not None:
                    on_step(state)
            if steps >= max_steps:
                break
    except CutoffReached as exc:
        status = f"cutoff:{exc.reason} at t={steps * dt:g}s"

    v_true = np.asarray(volts)
    noise = noise_rng.normal(0.0, noise_std_v, size=v_true.shape) if noise_std_v > 0 else 0.0
    n = len(currents)
    return TelemetryStream(
        t_s=np.arange(n) * dt,
        current_a=np.asarray(currents),
        soc_true=np.asarray(socs),
        v_true=v_true,
        v_meas=v_true + noise,
        status=status,
    )


@dataclass(frozen=True)
class OcvSocMap:
    soc_grid: np.ndarray
    ocv_volts: np.ndarray
    scale: int = 1

    def __post_init__(self):
        if self.soc_grid.shape != self.ocv_volts.shape or self.soc_grid.size < 50:
            raise ValueError("OCV-SOC map needs equal-length grids of at least 50 points")
        if np.any(np.diff(self.soc_grid) <= 0):
            raise ValueError("soc_grid must be ascending")
        if np.any(np.diff(self.ocv_volts) <= 0):
            raise ValueError("ocv_volts must be strictly increasing")

    def __call__(self, soc):
        return np.interp(soc, self.soc_grid, self.ocv_volts)

    def scaled(self, scale: int) -> OcvSocMap:
        """Pack-level map; ``scale`` multiplies the cell-level voltages."""
        return OcvSocMap(self.soc_grid, self.ocv_volts * (scale / self.scale), scale)

    def to_csv(self, path):
        np.savetxt(path, np.column_stack([self.soc_grid, self.ocv_volts]), delimiter=",",
                   header="soc,ocv_v", comments="", fmt="%.12g")

    @classmethod
    def from_csv(cls, path, scale=1):
        with open(path) as fh:
            header = fh.readline().strip()
        if header != "soc,ocv_v":
            raise ValueError(f"{path}: expected header 'soc,ocv_v', got {header!r}")
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(table[:, 0], table[:, 1], scale)


def build_ocv_soc_map(cell: CellParams, resolution: int = 1001,
                      current_a: float | None = None, dt_s: float = 1.0) -> OcvSocMap:
    """Measure a cell OCV-SOC map by a slow constant-current charge.

    The cell is charged from empty at C/100 (0.05 A for a 5 Ah cell); the
    terminal voltage is recorded once per ``dt_s`` against Coulomb-counted SOC
    and resampled onto ``resolution`` evenly spaced SOC points.  The result is
    biased above the true OCV by the ohmic and polarization drops,
    ``current * (r0 + r1)`` at steady state.
    """
    if resolution < 50:
        raise ValueError("resolution must be >= 50")
    i = cell.capacity_ah / 100.0 if current_a is None else abs(current_a)
    n = int(math.ceil(cell.capacity_ah * 3600.0 / (i * dt_s)))
    k = np.arange(n + 1)
    soc = np.minimum(k * dt_s * i / (3600.0 * cell.capacity_ah), 1.0)
    # constant current: the RC branch has a closed form at every sample
    v_rc = i * cell.r1 * (1.0 - np.exp(-k * dt_s / (cell.r1 * cell.c1)))
    terminal = cell.ocv(soc) + i * cell.r0 + v_rc
    grid = np.linspace(0.0, 1.0, resolution)
    measured = np.interp(grid, soc, terminal)
    if np.any(np.diff(measured) <= 0):
        bad = int(np.argmax(np.diff(measured) <= 0))
        raise ValueError(f"measured OCV curve is not monotone near SOC {grid[bad]:.4f}; "
                         "check the simulator configuration")
    return OcvSocMap(grid, measured, 1)
