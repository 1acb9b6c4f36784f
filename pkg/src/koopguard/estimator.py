"""Self-learning Koopman voltage estimator with two-stage error correction.

Two Koopman predictors run side by side on sliding windows: a voltage
predictor and an error predictor that learns how far the voltage prediction
misses.  While measurements are trusted both learn from data.  Once the
detector fires, measurements are cut off and each predictor learns from its
own corrected output instead:

* ``heuristic`` - voltage chain fed with ``V_hat = V_p + E2``, error chain
  with ``E2 = h(SOC, sign) E1 + (1 - SOC) dOCV``.
* ``gpr`` - voltage chain fed with ``V_bar = V_p + E1``, error chain with
  ``E1``; the output adds a regional GPR correction ``E2 = G_j(theta)``.
* ``stage1`` - as ``gpr`` but without the second stage (``V_hat = V_bar``).
"""
from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import koopman
from .regions import (HeuristicTable, SocTracker, heuristic_stage2, ocv_delta, region_of,
                      sign_with_memory, soc_update)
from .telemetry import DataStacks, WindowConfig, delay_embed, embed_column

NOMINAL = "nominal"
SECURE_MODES = ("heuristic", "gpr", "stage1")
MODE_NAMES = {"heuristic": "secure_heuristic", "gpr": "secure_gpr", "stage1": "secure_stage1"}


@dataclass
class CorrectionOutputs:
    t_s: float
    v_p: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    v_bar: np.ndarray
    v_hat: np.ndarray
    soc: float
    region: int
    mode: str
    fault: bool = False
    e2_var: np.ndarray | None = None


class _Chain:
    """One self-learning predictor: its data stack, model and rollout state."""

    def __init__(self, m, length):
        self.values = deque(maxlen=length)
        # per-entry provenance: (time, "meas" | "pred")
        self.tags = deque(maxlen=length)
        self.model = None
        self.z = None
        self.ref = 0.0

    def full(self):
        return len(self.values) == self.values.maxlen

    def push(self, value, t_s, tag):
        self.values.append(np.asarray(value, dtype=float).copy())
        self.tags.append((t_s, tag))

    def stacks(self, currents):
        return DataStacks(np.column_stack(self.values), np.asarray(currents))


@dataclass
class EstimatorState:
    mode: str
    soc_tracker: SocTracker
    sign: int = 1
    k: int = 0
    faults: int = 0
    history: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EstimatorTuning:
    """Numerical knobs of the two learning chains.

    ``rank_tol`` and ``error_rank_tol`` are relative singular-value cut-offs
    for the voltage and error fits.  With ``center_voltage`` the voltage chain
    is fitted on deviations from its window mean.  In secure mode the voltage
    model's spectrum is clipped to ``max_radius`` (``None`` disables this), so
    the closed self-learning loop cannot run away.  ``handoff_guard_windows``
    is how many whole windows before the suspected onset the rollback target
    must lie.
    """

    rank_tol: float = 1e-8
    error_rank_tol: float = 1e-3
    center_voltage: bool = True
    max_radius: float | None = 1.0
    handoff_guard_windows: int = 1
    keep_snapshots: int = 6

    def __post_init__(self):
        if not (0 < self.rank_tol < 1 and 0 < self.error_rank_tol < 1):
            raise ValueError("rank tolerances must lie in (0, 1)")
        if self.max_radius is not None and self.max_radius <= 0:
            raise ValueError("max_radius must be positive")
        if self.handoff_guard_windows < 0:
            raise ValueError("handoff_guard_windows must be >= 0")
        if self.keep_snapshots < 1:
            raise ValueError("keep_snapshots must be >= 1")


class SecureEstimator:
    """Causal, sample-by-sample estimator implementing the self-learning loop.

    Parameters
    ----------
    m : int
        Number of modules.
    window : WindowConfig
        Learning/prediction window sizes and delay.
    capacity_ah : float
        Nominal module capacity used for Coulomb counting.
    soc0 : float
        SOC at the first sample.
    table : HeuristicTable
        Region partition and gains; ``table.ocv_map`` must be the module-level
        (series-scaled) OCV map for the heuristic correction.
    correction : str
        Secure-mode corrector: ``heuristic``, ``gpr`` or ``stage1``.
    gpr_bank : GprBank, optional
        Required for ``gpr``.
    """

    def __init__(self, m, window: WindowConfig, capacity_ah, soc0, table: HeuristicTable,
                 correction="heuristic", gpr_bank=None, tuning: EstimatorTuning | None = None):
        if correction not in SECURE_MODES:
            raise ValueError(f"unknown correction {correction!r}")
        if correction == "gpr" and gpr_bank is None:
            raise ValueError("gpr correction needs a trained GprBank")
        if correction == "heuristic" and table.ocv_map is None:
            raise ValueError("heuristic correction needs the pack-scaled OCV map")
        self.m = m
        self.window = window
        self.table = table
        self.correction = correction
        self.gpr_bank = gpr_bank
        self.tuning = tuning = tuning or EstimatorTuning()
        self.mode = NOMINAL
        self.tracker = SocTracker(float(soc0), float(capacity_ah), window.dt_s)
        self.sign = 1
        self.k = 0
        self.faults = 0
        self.trigger_k = None
        self.handoff_clean = True
        self.fitted_now = None
        L = window.S_tilde
        self.u = deque(maxlen=L)
        self.u_tags = deque(maxlen=L)
        self.v_chain = _Chain(m, L)
        self.e_chain = _Chain(m, L)
        self.currents = []
        self.snapshots = deque(maxlen=tuning.keep_snapshots)

    # -- bookkeeping -----------------------------------------------------
    @property
    def mode_name(self):
        return NOMINAL if self.mode == NOMINAL else MODE_NAMES[self.mode]

    def is_boundary(self, k):
        L, H = self.window.S_tilde, self.window.horizon
        return k >= L and (k - L) % H == 0

    def _snapshot(self):
        keep = self.snapshots
        self.snapshots = None
        snap = copy.deepcopy(self.__dict__)
        self.snapshots = keep
        snap.pop("currents")
        return snap

    def _restore(self, snap):
        keep, currents = self.snapshots, self.currents
        self.__dict__.update(copy.deepcopy(snap))
        self.snapshots, self.currents = keep, currents

    def _fit(self, chain: _Chain):
        if not chain.full():
            chain.model, chain.z = None, None
            return None
        tn = self.tuning
        is_v = chain is self.v_chain
        stacks = chain.stacks(self.u)
        if is_v and tn.center_voltage:
            chain.ref = stacks.zeta.mean(axis=1)
        else:
            chain.ref = np.zeros(self.m)
        stacks = DataStacks(stacks.zeta - chain.ref[:, None], stacks.zeta_u)
        batch = delay_embed(stacks, self.window.tau)
        try:
            chain.model = koopman.fit(batch, tn.rank_tol if is_v else tn.error_rank_tol)
            if is_v and tn.max_radius is not None and self.mode != NOMINAL:
                chain.model = koopman.stabilize(chain.model, tn.max_radius)
        except koopman.FitError:
            chain.model, chain.z = None, None
            self.faults += 1
            return None
        j = stacks.length - self.window.tau - 1
        chain.z = embed_column(stacks.zeta, stacks.zeta_u, j, self.window.tau)
        return batch

    def _advance(self, chain: _Chain, u_prev):
        if chain.model is None:
            return None
        A, b = chain.model.A, chain.model.B[:, 0]
        with np.errstate(over="ignore", invalid="ignore"):
            chain.z = A @ chain.z + b * u_prev
        out = chain.z[-self.m:] + chain.ref
        if not np.all(np.isfinite(out)):
            return None
        return out

    # -- main loop -------------------------------------------------------
    def step(self, t_s, current_a, v_meas=None) -> CorrectionOutputs:
        """Process one sample.

        In nominal mode ``v_meas`` is the trusted measurement.  In secure modes
        it is ignored: the argument is not read at all.
        """
        self.currents.append(float(current_a))
        return self._step(t_s, float(current_a), v_meas)

    def _step(self, t_s, current_a, v_meas):
        k = self.k
        if k > 0:
            soc_prev = self.tracker.soc
            self.tracker = soc_update(self.tracker, current_a)
        else:
            soc_prev = self.tracker.soc
        self.sign = sign_with_memory(current_a, self.sign)
        soc = self.tracker.soc

        if self.is_boundary(k):
            self.snapshots.append((k, self._snapshot()))
            self.fitted_now = self._fit(self.v_chain)
            self._fit(self.e_chain)
        else:
            self.fitted_now = None

        u_prev = self.u[-1] if self.u else 0.0
        fault = False
        v_p = self._advance(self.v_chain, u_prev)
        e1 = self._advance(self.e_chain, u_prev)
        if self.v_chain.model is not None and v_p is None:
            fault = True
            self.faults += 1
        zero = np.zeros(self.m)
        if e1 is None:
            e1 = zero.copy()
        e2 = zero.copy()
        e2_var = None
        region = region_of(soc, self.table)

        if self.mode == NOMINAL:
            if v_meas is None:
                raise ValueError("nominal mode needs a measurement")
            v_meas = np.asarray(v_meas, dtype=float)
            if v_p is None:
                v_p = v_meas.copy() if not fault else np.full(self.m, np.nan)
                predicted = False
            else:
                predicted = True
            v_bar = v_p + e1
            v_hat = v_p
            self.v_chain.push(v_meas, t_s, "meas")
            if predicted:
                self.e_chain.push(v_meas - v_p, t_s, "meas")
        else:
            if v_p is None:
                v_p = np.full(self.m, np.nan)
            v_bar = v_p + e1
            if self.correction == "heuristic":
                d_ocv = ocv_delta(self.table.ocv_map, soc_prev, soc)
                e2 = heuristic_stage2(e1, soc, self.sign, d_ocv, self.table)
                v_hat = v_p + e2
                self.v_chain.push(v_hat, t_s, "pred")
                self.e_chain.push(e2, t_s, "pred")
            else:
                if self.correction == "gpr":
                    e2, e2_var = self.gpr_bank.predict_e2(e1, v_bar, current_a, soc, region)
                v_hat = v_p + e1 + e2
                self.v_chain.push(v_bar, t_s, "pred")
                self.e_chain.push(e1, t_s, "pred")
        self.u.append(current_a)
        self.u_tags.append((t_s, "input"))
        self.k += 1
        return CorrectionOutputs(t_s, v_p, e1, e2, v_bar, v_hat, soc, region,
                                 self.mode_name, fault, e2_var)

    def trigger(self, onset_k: int, t_of=None) -> list[CorrectionOutputs]:
        """Switch to secure mode after an attack whose first suspect sample is ``onset_k``.

        State rolls back to a window boundary at least ``handoff_guard_windows``
        whole windows before the onset, so no window that may hold corrupted
        measurements is ever learned from.  Samples since then are replayed in
        secure mode from the recorded currents.  Returns the replayed outputs.
        """
        if self.mode != NOMINAL:
            return []
        H = self.window.horizon
        target = onset_k - self.tuning.handoff_guard_windows * H
        chosen = None
        for kb, snap in self.snapshots:
            if kb <= target:
                chosen = (kb, snap)
        if chosen is None:
            if not self.snapshots:
                raise RuntimeError("attack detected before the first learning window filled")
            # best effort: the oldest retained boundary may already hold
            # suspect samples, which the report flags
            chosen = self.snapshots[0]
            self.handoff_clean = False
        kb, snap = chosen
        now = self.k
        clean = self.handoff_clean
        self._restore(snap)
        self.handoff_clean = clean
        self.mode = self.correction
        self.trigger_k = now
        self.snapshots.clear()
        out = []
        for kk in range(kb, now):
            t = kk * self.window.dt_s if t_of is None else t_of(kk)
            out.append(self._step(t, self.currents[kk], None))
        return out

    @property
    def predicting(self):
        """True once the voltage chain has a model to predict with."""
        return self.v_chain.model is not None

    @property
    def v_model(self):
        return self.v_chain.model

    def stack_tags(self):
        """Provenance of every entry currently in the learning stacks."""
        return {"voltage": list(self.v_chain.tags), "error": list(self.e_chain.tags)}
