"""Measurement streams, sliding-window bookkeeping and delay embedding."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np


class TelemetryError(ValueError):
    """Malformed telemetry file or stream."""


class WindowTooShort(ValueError):
    pass


@dataclass(frozen=True)
class TelemetryFrame:
    t_s: float
    current_a: float
    v_meas: np.ndarray
    v_true: np.ndarray
    soc_true: float


@dataclass
class TelemetryStream:
    """Column-oriented telemetry: one row per sample, ``m`` module columns."""

    t_s: np.ndarray
    current_a: np.ndarray
    soc_true: np.ndarray
    v_true: np.ndarray
    v_meas: np.ndarray
    status: str = "complete"

    def __post_init__(self):
        self.t_s = np.asarray(self.t_s, dtype=float)
        self.current_a = np.asarray(self.current_a, dtype=float)
        self.soc_true = np.asarray(self.soc_true, dtype=float)
        self.v_true = np.atleast_2d(np.asarray(self.v_true, dtype=float))
        self.v_meas = np.atleast_2d(np.asarray(self.v_meas, dtype=float))
        n = self.t_s.size
        if not (self.current_a.size == self.soc_true.size == n
                and self.v_true.shape == self.v_meas.shape and self.v_true.shape[0] == n):
            raise TelemetryError("telemetry columns have inconsistent lengths")

    def __len__(self):
        return self.t_s.size

    @property
    def modules(self):
        return self.v_true.shape[1]

    @property
    def dt_s(self):
        return float(self.t_s[1] - self.t_s[0]) if len(self) > 1 else 1.0

    def frames(self) -> Iterator[TelemetryFrame]:
        for k in range(len(self)):
            yield self.frame(k)

    def frame(self, k) -> TelemetryFrame:
        return TelemetryFrame(float(self.t_s[k]), float(self.current_a[k]),
                              self.v_meas[k], self.v_true[k], float(self.soc_true[k]))


def stream_header(m):
    return (["t_s", "current_a", "soc_true"]
            + [f"v_true_{i}" for i in range(1, m + 1)]
            + [f"v_meas_{i}" for i in range(1, m + 1)])


def write_stream(stream: TelemetryStream, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(stream_header(stream.modules))
        for k in range(len(stream)):
            row = [stream.t_s[k], stream.current_a[k], stream.soc_true[k],
                   *stream.v_true[k], *stream.v_meas[k]]
            w.writerow([f"{x:.12g}" for x in row])


def read_stream(path, rtol_dt=1e-6) -> TelemetryStream:
    """Parse a telemetry CSV, validating header, timestamps and values.

    Errors name the missing column or the first offending data row (1-based,
    header excluded).
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TelemetryError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    m = sum(1 for h in header if h.startswith("v_true_"))
    if m == 0:
        raise TelemetryError(f"{path}: missing column 'v_true_1'")
    expected = stream_header(m)
    for name in expected:
        if name not in header:
            raise TelemetryError(f"{path}: missing column {name!r}")
    if header != expected:
        raise TelemetryError(f"{path}: unexpected column layout {header}")

    data = np.empty((len(rows) - 1, len(expected)))
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != len(expected):
            raise TelemetryError(f"{path}: row {i} has {len(row)} fields, expected {len(expected)}")
        try:
            data[i - 1] = [float(x) for x in row]
        except ValueError as exc:
            raise TelemetryError(f"{path}: row {i}: {exc}") from None
        if not np.all(np.isfinite(data[i - 1])):
            raise TelemetryError(f"{path}: row {i} contains NaN or infinite values")

    t = data[:, 0]
    if t.size > 1:
        dt = np.diff(t)
        if np.any(dt <= 0):
            bad = int(np.argmax(dt <= 0)) + 2
            raise TelemetryError(f"{path}: non-monotone timestamp at row {bad}")
        bad_dt = np.abs(dt - dt[0]) > rtol_dt * abs(dt[0])
        if np.any(bad_dt):
            bad = int(np.argmax(bad_dt)) + 2
            raise TelemetryError(f"{path}: non-uniform sampling interval at row {bad}")
    return TelemetryStream(t_s=t, current_a=data[:, 1], soc_true=data[:, 2],
                           v_true=data[:, 3:3 + m], v_meas=data[:, 3 + m:])


@dataclass(frozen=True)
class WindowConfig:
    """Sliding window: ``S`` samples, the first ``S_tilde`` used for learning.

    The remaining ``S - S_tilde`` samples form the prediction window, and the
    window advances by that amount after every prediction cycle.
    """

    S: int = 120
    S_tilde: int = 90
    tau: int = 2
    dt_s: float = 1.0

    def __post_init__(self):
        if not 0 < self.tau + 2 < self.S_tilde < self.S:
            raise ValueError(f"need 0 < tau + 2 < S_tilde < S (got tau={self.tau}, "
                             f"S_tilde={self.S_tilde}, S={self.S})")
        if self.tau < 0 or self.dt_s <= 0:
            raise ValueError("tau must be >= 0 and dt_s positive")

    @property
    def horizon(self):
        return self.S - self.S_tilde


def advance_window(cursor: int, cfg: WindowConfig) -> int:
    if cursor < 0:
        raise ValueError("cursor must be >= 0")
    return cursor + cfg.horizon


@dataclass
class DataStacks:
    """A learning-window data stack: ``zeta`` (m x S~) and inputs (1 x S~)."""

    zeta: np.ndarray
    zeta_u: np.ndarray
    times: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.zeta = np.atleast_2d(np.asarray(self.zeta, dtype=float))
        self.zeta_u = np.asarray(self.zeta_u, dtype=float).reshape(1, -1)
        if self.zeta.shape[1] != self.zeta_u.shape[1]:
            raise ValueError("zeta and zeta_u must have the same number of columns")

    @property
    def length(self):
        return self.zeta.shape[1]


@dataclass
class EmbeddedBatch:
    xi: np.ndarray
    xi_plus: np.ndarray
    u_row: np.ndarray
    y: np.ndarray
    tau: int
    m: int

    @property
    def n(self):
        return self.xi.shape[0]

    @property
    def columns(self):
        return self.xi.shape[1]


def embedding_dim(m, tau):
    return m * (tau + 1) + tau


def embed_column(zeta: np.ndarray, zeta_u: np.ndarray, j: int, tau: int) -> np.ndarray:
    """D_j = [V(j); I(j); V(j+1); I(j+1); ...; I(j+tau-1); V(j+tau)]."""
    m = zeta.shape[0]
    out = np.empty(embedding_dim(m, tau))
    pos = 0
    for d in range(tau + 1):
        out[pos:pos + m] = zeta[:, j + d]
        pos += m
        if d < tau:
            out[pos] = zeta_u[0, j + d]
            pos += 1
    return out


def delay_embed(stacks: DataStacks, tau: int) -> EmbeddedBatch:
    """Arrange a learning window into delay-embedded snapshot matrices.

    With columns 0..S~-1 of the stack, ``xi`` holds D_0..D_{S~-tau-2},
    ``xi_plus`` the same shifted by one, ``u_row[j] = I(j + tau)`` is the
    input that carries D_j to D_{j+1}, and ``y[:, j] = V(j)``.
    """
    zeta, zu = stacks.zeta, stacks.zeta_u
    m, length = zeta.shape
    if tau < 0:
        raise ValueError("tau must be >= 0")
    if length < tau + 3:
        raise WindowTooShort(f"learning window of {length} samples is too short for tau={tau}")
    n_cols = length - tau - 1
    n = embedding_dim(m, tau)
    # rows of the full Hankel-style matrix, one block per delay
    full = np.empty((n, n_cols + 1))
    pos = 0
    for d in range(tau + 1):
        full[pos:pos + m] = zeta[:, d:d + n_cols + 1]
        pos += m
        if d < tau:
            full[pos] = zu[0, d:d + n_cols + 1]
            pos += 1
    return EmbeddedBatch(
        xi=full[:, :-1],
        xi_plus=full[:, 1:],
        u_row=zu[:, tau:tau + n_cols].copy(),
        y=zeta[:, :n_cols].copy(),
        tau=tau,
        m=m,
    )


def rmse(a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return math.sqrt(float(np.mean(d * d))) if d.size else float("nan")
