"""Scenario configuration, end-to-end runs, GPR training and Monte Carlo sweeps."""
from __future__ import annotations

import csv
import functools
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import gpr
from .attack import AttackSpec, attack_stream
from .detector import (DetectorConfig, DetectorState, calibrate, detection_residual,
                       isolation_residual, output_modes, update)
from .estimator import EstimatorTuning, SecureEstimator
from .pack_sim import (PACKS, CellParams, OcvSocMap, Protocol, apply_aging, build_ocv_soc_map,
                       run_protocol)
from .regions import HeuristicTable, region_of
from .telemetry import TelemetryStream, WindowConfig


class ConfigError(ValueError):
    """Invalid scenario configuration; the message names the offending field paths."""


# -- configuration ------------------------------------------------------------

class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CellCfg(_Model):
    capacity_ah: float = Field(5.0, gt=0)
    r0: float = Field(0.02, gt=0)
    r1: float = Field(0.015, gt=0)
    c1: float = Field(2000.0, gt=0)


class ProtocolCfg(_Model):
    mode: Literal["charge", "discharge", "cycle"] = "discharge"
    c_rate: float = Field(1.0, gt=0)
    soc_lo: float = Field(0.05, ge=0, le=1)
    soc_hi: float = Field(0.95, ge=0, le=1)
    rest_s: float = Field(900.0, ge=0)
    cycles: int = Field(1, ge=1)
    duration_s: float = Field(3600.0, gt=0)

    @model_validator(mode="after")
    def _order(self):
        if not self.soc_lo < self.soc_hi:
            raise ValueError("soc_lo must be below soc_hi")
        return self


class AttackCfg(_Model):
    kind: Literal["none", "dos_hold", "fdi_bias", "data_swap"] = "none"
    start_s: float = Field(0.0, ge=0)
    duration_s: float = Field(math.inf, gt=0)
    bias_v: float = 0.0


class WindowCfg(_Model):
    S: int = Field(120, ge=3)
    S_tilde: int = Field(90, ge=2)
    tau: int = Field(2, ge=0)


class EstimatorCfg(_Model):
    correction: Literal["heuristic", "gpr", "stage1"] = "heuristic"
    gpr_bank: Optional[str] = None
    tuning: dict = Field(default_factory=dict)

    @field_validator("tuning")
    @classmethod
    def _tuning_keys(cls, v):
        try:
            EstimatorTuning(**v)
        except TypeError as exc:
            raise ValueError(f"unknown tuning key ({exc})") from None
        return v


class DetectorCfg(_Model):
    rd_threshold_v: float = Field(0.05, gt=0)
    ri_threshold: float = Field(0.5, gt=0)
    confirm_count: int = Field(3, ge=1)
    calibrate: bool = False
    k_sigma: float = Field(5.0, gt=0)


class ScenarioConfig(_Model):
    seed: int
    pack: Literal["pack1", "pack2", "pack3"] = "pack1"
    cell: CellCfg = Field(default_factory=CellCfg)
    cycles: int = Field(0, ge=0)
    soc0: float = Field(0.9, ge=0, le=1)
    module_jitter: float = Field(0.01, ge=0, lt=0.5)
    noise_std_v: float = Field(0.0, ge=0)
    protocol: ProtocolCfg = Field(default_factory=ProtocolCfg)
    window: WindowCfg = Field(default_factory=WindowCfg)
    attack: AttackCfg = Field(default_factory=AttackCfg)
    estimator: EstimatorCfg = Field(default_factory=EstimatorCfg)
    detector: DetectorCfg = Field(default_factory=DetectorCfg)

    @model_validator(mode="after")
    def _files(self):
        if self.estimator.correction == "gpr":
            if not self.estimator.gpr_bank:
                raise ValueError("estimator.gpr_bank is required for gpr correction")
            if not Path(self.estimator.gpr_bank).is_file():
                raise ValueError(f"estimator.gpr_bank: file not found: {self.estimator.gpr_bank}")
        if not self.window.S_tilde < self.window.S:
            raise ValueError("window.S_tilde must be smaller than window.S")
        return self


class TrainGprCfg(_Model):
    seed: int
    pack: Literal["pack1", "pack2", "pack3"] = "pack1"
    cell: CellCfg = Field(default_factory=CellCfg)
    cycles: int = Field(1, ge=0)
    module_jitter: float = Field(0.01, ge=0, lt=0.5)
    noise_std_v: float = Field(0.0, ge=0)
    c_rate: float = Field(1.0, gt=0)
    soc_lo: float = Field(0.05, ge=0, le=1)
    soc_hi: float = Field(0.95, ge=0, le=1)
    window: WindowCfg = Field(default_factory=WindowCfg)
    tuning: dict = Field(default_factory=dict)
    # shadow runs start every ``shadow_every_s`` from ``shadow_first_s``
    # unless explicit ``shadow_starts_s`` are given
    shadow_first_s: float = Field(120.0, gt=0)
    shadow_every_s: float = Field(100.0, gt=0)
    shadow_starts_s: Optional[list[float]] = None
    shadow_length_s: float = Field(1200.0, gt=0)
    max_rows: int = Field(300, ge=gpr.MIN_ROWS, le=gpr.MAX_ROWS)
    max_iters: int = Field(80, ge=1)

    @model_validator(mode="after")
    def _order(self):
        if not self.soc_lo < self.soc_hi:
            raise ValueError("soc_lo must be below soc_hi")
        return self


class MonteCarloCfg(_Model):
    seed: int
    runs: int = Field(ge=1)
    packs: list[Literal["pack1", "pack2", "pack3"]] = Field(default_factory=lambda: ["pack1"])
    age_levels: list[int] = Field(default_factory=lambda: [1, 50, 100])
    methods: list[Literal["heuristic", "gpr", "stage1"]] = Field(
        default_factory=lambda: ["heuristic", "stage1"])
    directions: list[Literal["charge", "discharge"]] = Field(
        default_factory=lambda: ["charge", "discharge"])
    attack_kinds: list[Literal["dos_hold", "fdi_bias", "data_swap"]] = Field(
        default_factory=lambda: ["dos_hold", "fdi_bias", "data_swap"])
    bias_v: float = -3.0
    onset_s: tuple[float, float] = (150.0, 600.0)
    soc0: tuple[float, float] = (0.2, 0.8)
    attack_duration_s: float = Field(900.0, gt=0)
    noise_std_v: float = Field(0.0, ge=0)
    window: WindowCfg = Field(default_factory=WindowCfg)
    detector: DetectorCfg = Field(default_factory=DetectorCfg)
    tuning: dict = Field(default_factory=dict)
    gpr_banks: dict[str, str] = Field(default_factory=dict)
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _banks(self):
        if "gpr" in self.methods:
            for p in self.packs:
                if p not in self.gpr_banks:
                    raise ValueError(f"gpr_banks.{p}: required when methods include gpr")
                if not Path(self.gpr_banks[p]).is_file():
                    raise ValueError(f"gpr_banks.{p}: file not found: {self.gpr_banks[p]}")
        return self


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def validate_config(data, model=ScenarioConfig):
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path, model=ScenarioConfig):
    """Read a YAML config file and validate it against ``model``."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return validate_config(data, model)


# -- scenario pieces ------------------------------------------------------------

def make_cell(cfg: CellCfg, cycles: int = 0) -> CellParams:
    return apply_aging(CellParams(capacity_ah=cfg.capacity_ah, r0=cfg.r0, r1=cfg.r1, c1=cfg.c1),
                       cycles)


@functools.lru_cache(maxsize=8)
def _cell_map(capacity_ah, r0, r1, c1):
    return build_ocv_soc_map(CellParams(capacity_ah=capacity_ah, r0=r0, r1=r1, c1=c1))


def ocv_map_for(cfg_cell: CellCfg, series: int) -> OcvSocMap:
    """Pack-scaled OCV map measured on a fresh cell (the map does not age)."""
    return _cell_map(cfg_cell.capacity_ah, cfg_cell.r0, cfg_cell.r1, cfg_cell.c1).scaled(series)


def simulate(cfg: ScenarioConfig) -> TelemetryStream:
    topo = PACKS[cfg.pack]
    cell = make_cell(cfg.cell, cfg.cycles)
    p = cfg.protocol
    proto = Protocol(mode=p.mode, c_rate=p.c_rate, soc_lo=p.soc_lo, soc_hi=p.soc_hi,
                     rest_s=p.rest_s, cycles=p.cycles, duration_s=p.duration_s)
    return run_protocol(topo, cell, proto, cfg.soc0, seed=cfg.seed, jitter=cfg.module_jitter,
                        cycles=cfg.cycles, noise_std_v=cfg.noise_std_v)


def make_estimator(cfg: ScenarioConfig, correction=None, bank=None) -> SecureEstimator:
    topo = PACKS[cfg.pack]
    fresh = make_cell(cfg.cell, 0)
    table = HeuristicTable.default(ocv_map_for(cfg.cell, topo.series_per_module))
    w = cfg.window
    return SecureEstimator(topo.modules, WindowConfig(w.S, w.S_tilde, w.tau),
                           topo.module_capacity_ah(fresh), cfg.soc0, table,
                           correction=correction or cfg.estimator.correction, gpr_bank=bank,
                           tuning=EstimatorTuning(**cfg.estimator.tuning))


# -- running ------------------------------------------------------------------

@dataclass
class RunReport:
    rmse_v: list
    max_overestimation_v: float
    max_underestimation_v: float
    mean_step_ms: float
    median_step_ms: float
    mean_secure_step_ms: float
    attacked_samples: int
    trigger_time_s: float | None
    onset_time_s: float | None
    sensor_attack: bool
    correction: str
    soc_clamp_events: int
    estimator_faults: int
    gpr_variance_clamps: int
    handoff_clean: bool
    sim_status: str
    detector: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


SAMPLE_FIELDS = ("v_true", "v_meas", "v_p", "e1", "e2", "v_hat")


def sample_header(m):
    cols = ["t_s"]
    for name in SAMPLE_FIELDS:
        cols += [f"{name}_{i}" for i in range(m)]
    return cols + ["soc_est", "region", "mode"]


@dataclass
class RunResult:
    report: RunReport
    t_s: np.ndarray
    v_true: np.ndarray
    v_meas: np.ndarray
    v_p: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    v_hat: np.ndarray
    soc_est: np.ndarray
    region: np.ndarray
    mode: list
    attacked: np.ndarray

    def write_samples(self, path):
        m = self.v_true.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(sample_header(m) + ["attacked"])
            for k in range(self.t_s.size):
                row = [f"{self.t_s[k]:g}"]
                for name in SAMPLE_FIELDS:
                    row += [f"{x:.12g}" for x in getattr(self, name)[k]]
                row += [f"{self.soc_est[k]:.12g}", int(self.region[k]), self.mode[k],
                        int(self.attacked[k])]
                w.writerow(row)


def attack_metrics(v_hat, v_true, mask):
    """RMSE per module and worst over/under-estimation over attacked samples."""
    if not np.any(mask):
        m = v_true.shape[1]
        return [math.nan] * m, math.nan, math.nan
    err = v_hat[mask] - v_true[mask]
    with np.errstate(over="ignore", invalid="ignore"):
        rmse = np.sqrt(np.mean(err ** 2, axis=0))
    return [float(x) for x in rmse], float(np.max(err)), float(np.max(-err))


def nominal_residuals(cfg: ScenarioConfig, stream: TelemetryStream | None = None):
    """RD and RI traces of the nominal predictor on an attack-free run."""
    stream = simulate(cfg) if stream is None else stream
    est = make_estimator(cfg)
    rd, ri = [], []
    ref = None
    for k in range(len(stream)):
        o = est.step(stream.t_s[k], stream.current_a[k], stream.v_meas[k])
        if est.predicting:
            rd.append(detection_residual(stream.v_meas[k], o.v_p))
        if est.fitted_now is not None:
            modes = output_modes(est.fitted_now)
            if ref is not None:
                ri.append(isolation_residual(ref, modes))
            ref = modes
    return np.asarray(rd), np.asarray(ri)


def calibrate_detector(cfg: ScenarioConfig) -> DetectorConfig:
    """Thresholds from an attack-free replica of ``cfg`` (different noise seed)."""
    clean = cfg.model_copy(update={"attack": AttackCfg(), "seed": cfg.seed + 10_000})
    rd, ri = nominal_residuals(clean)
    return calibrate(rd, ri, cfg.detector.k_sigma, cfg.detector.confirm_count)


def run_scenario(cfg: ScenarioConfig, bank=None, stream: TelemetryStream | None = None,
                 detector_cfg: DetectorConfig | None = None) -> RunResult:
    """Simulate, inject, detect and estimate one scenario."""
    stream = simulate(cfg) if stream is None else stream
    a = cfg.attack
    spec = AttackSpec(a.kind, a.start_s, a.duration_s, a.bias_v)
    v_att, mask = attack_stream(stream, spec)
    if cfg.estimator.correction == "gpr" and bank is None:
        bank = gpr.load_bank(cfg.estimator.gpr_bank)
    if detector_cfg is None:
        d = cfg.detector
        detector_cfg = (calibrate_detector(cfg) if d.calibrate
                        else DetectorConfig(d.rd_threshold_v, d.ri_threshold, d.confirm_count))
    est = make_estimator(cfg, bank=bank)

    n, m = len(stream), stream.modules
    out = {name: np.full((n, m), np.nan) for name in ("v_p", "e1", "e2", "v_hat")}
    soc_est = np.zeros(n)
    region = np.zeros(n, dtype=int)
    mode = [""] * n
    step_ns = np.zeros(n)
    secure = np.zeros(n, dtype=bool)
    det = DetectorState()
    ref_modes, ri = None, 0.0
    t0 = stream.t_s[0]
    dt = stream.dt_s

    def store(k, o):
        out["v_p"][k], out["e1"][k], out["e2"][k], out["v_hat"][k] = o.v_p, o.e1, o.e2, o.v_hat
        soc_est[k], region[k], mode[k] = o.soc, o.region, o.mode

    for k in range(n):
        nominal = est.mode == "nominal"
        tic = time.perf_counter_ns()
        o = est.step(stream.t_s[k], stream.current_a[k], v_att[k] if nominal else None)
        step_ns[k] = time.perf_counter_ns() - tic
        secure[k] = not nominal
        store(k, o)
        if not nominal:
            continue
        if est.fitted_now is not None:
            modes = output_modes(est.fitted_now)
            if ref_modes is not None:
                ri = isolation_residual(ref_modes, modes)
            if not det.verdict.attacked:
                ref_modes = modes
        if not est.predicting:
            continue
        det = update(det, detection_residual(v_att[k], o.v_p), ri, detector_cfg, stream.t_s[k])
        if det.verdict.attacked:
            onset_k = int(round((det.verdict.onset_time_s - t0) / dt))
            tic = time.perf_counter_ns()
            replay = est.trigger(onset_k, t_of=lambda kk: float(stream.t_s[kk]))
            spent = time.perf_counter_ns() - tic
            first = k + 1 - len(replay)
            for j, r in enumerate(replay):
                store(first + j, r)
                step_ns[first + j] = spent / max(len(replay), 1)
                secure[first + j] = True

    rmse, over, under = attack_metrics(out["v_hat"], stream.v_true, mask)
    ms = step_ns / 1e6
    report = RunReport(
        rmse_v=rmse, max_overestimation_v=over, max_underestimation_v=under,
        mean_step_ms=float(ms.mean()), median_step_ms=float(np.median(ms)),
        mean_secure_step_ms=float(ms[secure].mean()) if secure.any() else math.nan,
        attacked_samples=int(mask.sum()),
        trigger_time_s=det.verdict.trigger_time_s, onset_time_s=det.verdict.onset_time_s,
        sensor_attack=det.verdict.sensor_attack, correction=cfg.estimator.correction,
        soc_clamp_events=est.tracker.clamp_events, estimator_faults=est.faults,
        gpr_variance_clamps=(sum(mdl.clamp_events for mdl in bank.models.values())
                             if bank is not None else 0),
        handoff_clean=est.handoff_clean, sim_status=stream.status,
        detector={"rd_threshold_v": detector_cfg.rd_threshold_v,
                  "ri_threshold": detector_cfg.ri_threshold,
                  "confirm_count": detector_cfg.confirm_count},
    )
    return RunResult(report, stream.t_s, stream.v_true, v_att, out["v_p"], out["e1"], out["e2"],
                     out["v_hat"], soc_est, region, mode, mask)


def write_run(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.write_samples(out / "samples.csv")
    with open(out / "report.json", "w") as fh:
        json.dump(result.report.to_dict(), fh, indent=2)


def report_from_samples(path):
    """Recompute the accuracy metrics of a run from its per-sample CSV alone."""
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    col = {name: i for i, name in enumerate(header)}
    m = sum(1 for h in header if h.startswith("v_true_"))
    arr = lambda prefix: np.array([[float(r[col[f"{prefix}_{i}"]]) for i in range(m)]
                                   for r in body])
    mask = np.array([r[col["attacked"]] == "1" for r in body])
    rmse, over, under = attack_metrics(arr("v_hat"), arr("v_true"), mask)
    return {"rmse_v": rmse, "max_overestimation_v": over, "max_underestimation_v": under}


# -- GPR training ---------------------------------------------------------------

def harvest_gpr_rows(cfg: TrainGprCfg):
    """Shadow Stage-I-only runs on nominal data.

    For each nominal stream (one charge, one discharge) and each shadow start,
    a Stage-I-only estimator learns from measurements up to the start, then
    self-learns while the true measurements are kept aside as targets:
    ``E2 = V_nom - V_bar``.  Returns column arrays for :func:`gpr.train_bank`.
    """
    topo = PACKS[cfg.pack]
    cell = make_cell(cfg.cell, cfg.cycles)
    rows = {"module": [], "soc": [], "theta": [], "target": []}
    for direction, soc0 in (("charge", cfg.soc_lo), ("discharge", cfg.soc_hi)):
        proto = Protocol(mode=direction, c_rate=cfg.c_rate, soc_lo=cfg.soc_lo, soc_hi=cfg.soc_hi)
        stream = run_protocol(topo, cell, proto, soc0, seed=cfg.seed, jitter=cfg.module_jitter,
                              cycles=cfg.cycles, noise_std_v=cfg.noise_std_v)
        scen = ScenarioConfig(seed=cfg.seed, pack=cfg.pack, cell=cfg.cell, soc0=soc0,
                              window=cfg.window,
                              estimator=EstimatorCfg(correction="stage1", tuning=cfg.tuning))
        starts = (cfg.shadow_starts_s if cfg.shadow_starts_s is not None
                  else np.arange(cfg.shadow_first_s, stream.t_s[-1], cfg.shadow_every_s))
        for start in starts:
            k0 = int(round(start / stream.dt_s))
            if k0 >= len(stream) - 1:
                continue
            est = make_estimator(scen, correction="stage1")
            for k in range(k0):
                est.step(stream.t_s[k], stream.current_a[k], stream.v_meas[k])
            if est.v_model is None:
                continue
            est.trigger(k0)
            stop = min(len(stream), k0 + int(round(cfg.shadow_length_s / stream.dt_s)))
            for k in range(k0, stop):
                o = est.step(stream.t_s[k], stream.current_a[k])
                if not np.all(np.isfinite(o.v_bar)):
                    break
                target = stream.v_meas[k] - o.v_bar
                for i in range(topo.modules):
                    rows["module"].append(i)
                    rows["soc"].append(o.soc)
                    rows["theta"].append([o.e1[i], o.v_bar[i], stream.current_a[k], o.soc])
                    rows["target"].append(target[i])
    if not rows["target"]:
        raise ValueError("no training rows harvested; streams too short for the shadow starts")
    return {k: np.asarray(v, dtype=float if k != "module" else int) for k, v in rows.items()}


class InsufficientRowsError(ValueError):
    """Harvested data leave a module without any trainable region."""


def sparse_regions(module, soc, n_modules, table):
    """``(module, region, count)`` for every bucket below the fitting minimum."""
    regions = np.array([region_of(s, table) for s in soc])
    out = []
    for i in range(n_modules):
        for j in range(1, len(table.regions) + 1):
            c = int(np.count_nonzero((module == i) & (regions == j)))
            if c < gpr.MIN_ROWS:
                out.append((i, j, c))
    return out


def train_gpr_command(cfg: TrainGprCfg, out_path) -> gpr.GprBank:
    """Harvest shadow rows, fit the regional bank and write it to ``out_path``."""
    rows = harvest_gpr_rows(cfg)
    table = HeuristicTable.default()
    m = PACKS[cfg.pack].modules
    sparse = sparse_regions(rows["module"], rows["soc"], m, table)
    empty = [i for i in range(m) if sum(1 for s in sparse if s[0] == i) == len(table.regions)]
    if empty:
        listing = ", ".join(f"module {i} region {j} ({c} rows)" for i, j, c in sparse)
        raise InsufficientRowsError(f"modules {empty} have no region with >= {gpr.MIN_ROWS} "
                                    f"rows; sparse buckets: {listing}")
    bank = gpr.train_bank(rows["module"], rows["soc"], rows["theta"], rows["target"],
                          len(table.regions), lambda s: region_of(s, table), seed=cfg.seed,
                          max_rows=cfg.max_rows, max_iters=cfg.max_iters,
                          metadata={"pack": cfg.pack, "seed": cfg.seed, "cycles": cfg.cycles,
                                    "rows": int(rows["target"].size),
                                    "sparse": [[i, j, c] for i, j, c in sparse]})
    gpr.save_bank(bank, out_path)
    return bank


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- Monte Carlo ------------------------------------------------------------------

DRAW_FIELDS = ("run_id", "pack", "age_cycles", "direction", "attack", "soc0", "onset_s")
METRIC_FIELDS = ("rmse_v", "max_over_v", "max_under_v", "mean_step_ms", "trigger_s", "status")


def _sample_run(cfg: MonteCarloCfg, run_id: int):
    rng = np.random.default_rng([cfg.seed, run_id])
    return {
        "age_cycles": int(rng.choice(cfg.age_levels)),
        "direction": str(rng.choice(cfg.directions)),
        "attack": str(rng.choice(cfg.attack_kinds)),
        "soc0": float(rng.uniform(*cfg.soc0)),
        "onset_s": float(np.round(rng.uniform(*cfg.onset_s))),
    }


def _scenario_for(cfg: MonteCarloCfg, run_id: int, pack: str, draw: dict, method: str):
    horizon = draw["onset_s"] + cfg.attack_duration_s + 30.0
    return ScenarioConfig(
        seed=cfg.seed * 1_000_003 + run_id, pack=pack, cycles=draw["age_cycles"],
        soc0=draw["soc0"], noise_std_v=cfg.noise_std_v,
        protocol=ProtocolCfg(mode=draw["direction"], soc_lo=0.02, soc_hi=0.98,
                             duration_s=horizon),
        window=cfg.window,
        attack=AttackCfg(kind=draw["attack"], start_s=draw["onset_s"],
                         duration_s=cfg.attack_duration_s,
                         bias_v=cfg.bias_v if draw["attack"] == "fdi_bias" else 0.0),
        estimator=EstimatorCfg(correction=method, gpr_bank=cfg.gpr_banks.get(pack),
                               tuning=cfg.tuning),
        detector=cfg.detector,
    )


def raw_fields(methods):
    return list(DRAW_FIELDS) + [f"{m}_{f}" for m in methods for f in METRIC_FIELDS]


def _one_run(args):
    """All methods on one sampled (run, pack) scenario; one raw row."""
    cfg, run_id, pack = args
    draw = _sample_run(cfg, run_id)
    row = {"run_id": run_id, "pack": pack, **draw}
    stream = None
    for method in cfg.methods:
        try:
            scen = _scenario_for(cfg, run_id, pack, draw, method)
            stream = simulate(scen) if stream is None else stream
            bank = _bank(cfg.gpr_banks[pack]) if method == "gpr" else None
            rep = run_scenario(scen, bank=bank, stream=stream).report
            vals = dict(rmse_v=float(np.max(rep.rmse_v)), max_over_v=rep.max_overestimation_v,
                        max_under_v=rep.max_underestimation_v, mean_step_ms=rep.mean_step_ms,
                        trigger_s=rep.trigger_time_s, status=rep.sim_status)
        except Exception as exc:  # a failed run is recorded, the sweep goes on
            vals = dict(rmse_v=math.nan, max_over_v=math.nan, max_under_v=math.nan,
                        mean_step_ms=math.nan, trigger_s=None,
                        status=f"failed:{type(exc).__name__}: {exc}")
        row.update({f"{method}_{k}": v for k, v in vals.items()})
    return row


@functools.lru_cache(maxsize=4)
def _bank(path):
    return gpr.load_bank(path)


def _failed(row, method):
    return (str(row[f"{method}_status"]).startswith("failed")
            or not math.isfinite(row[f"{method}_rmse_v"]))


def aggregate(rows, methods, age_levels):
    """Per (method, age level) summary in the layout of the comparison table."""
    out = []
    for method in methods:
        for age in age_levels:
            sel = [r for r in rows if r["age_cycles"] == age]
            ok = [r for r in sel if not _failed(r, method)]
            col = lambda key: np.array([r[f"{method}_{key}"] for r in ok], dtype=float)
            out.append({
                "method": method, "age_cycles": age, "runs": len(sel),
                "failed": len(sel) - len(ok),
                "mean_rmse_v": float(col("rmse_v").mean()) if ok else math.nan,
                "max_over_v": float(col("max_over_v").max()) if ok else math.nan,
                "max_under_v": float(col("max_under_v").max()) if ok else math.nan,
                "mean_step_ms": float(col("mean_step_ms").mean()) if ok else math.nan,
            })
    return out


def violin_rows(rows, methods):
    """Long-format per-run RMSE, one row per (run, pack, method), for distribution plots."""
    return [{"run_id": r["run_id"], "pack": r["pack"], "age_cycles": r["age_cycles"],
             "method": m, "rmse_v": r[f"{m}_rmse_v"]}
            for r in rows for m in methods if not _failed(r, m)]


def monte_carlo(cfg: MonteCarloCfg, out_dir=None):
    """Seeded sweep over onset, SOC, direction, attack kind and age level.

    Returns ``(aggregate_rows, raw_rows)``.  There is one raw row per
    (run, pack), ordered by run id then pack whatever the worker scheduling.
    """
    jobs = [(cfg, run_id, pack) for run_id in range(cfg.runs) for pack in cfg.packs]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            raw = list(pool.map(_one_run, jobs))
    else:
        raw = [_one_run(j) for j in jobs]
    agg = aggregate(raw, cfg.methods, cfg.age_levels)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "aggregate.csv", agg, list(agg[0].keys()))
        _write_rows(out / "runs.csv", raw, raw_fields(cfg.methods))
        _write_rows(out / "violin.csv", violin_rows(raw, cfg.methods),
                    ["run_id", "pack", "age_cycles", "method", "rmse_v"])
    return agg, raw


def _write_rows(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
