"""Finite Koopman linear models fitted by DMD with control.

The lifted state is the delay-embedded vector ``z = D_k``.  The model is

    z(k+1) = A z(k) + B I(k),    V(k) ~ C z(k)

with ``[A B] = xi_plus pinv([xi; u])`` and ``C = y pinv(xi)``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .telemetry import EmbeddedBatch


class FitError(ValueError):
    pass


def truncated_pinv(M: np.ndarray, rank_tol: float = 1e-10):
    """SVD pseudo-inverse keeping singular values >= ``rank_tol * s_max``.

    Returns the pseudo-inverse and the retained rank.
    """
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise FitError("matrix is identically zero")
    keep = s >= rank_tol * s[0]
    r = int(np.count_nonzero(keep))
    pinv = (Vt[:r].T / s[:r]) @ U[:, :r].T
    return pinv, r


@dataclass(frozen=True)
class KoopmanModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    tau: int
    m: int
    fit_residuals: dict = field(default_factory=dict)
    svd_rank_used: int = 0

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape != (n, 1) or self.C.shape != (self.m, n):
            raise ValueError("inconsistent Koopman model dimensions")

    @property
    def n(self):
        return self.A.shape[0]

    def to_dict(self):
        return {
            "format": "koopguard-koopman-model",
            "version": 1,
            "tau": self.tau,
            "m": self.m,
            "n": self.n,
            "svd_rank_used": self.svd_rank_used,
            "fit_residuals": self.fit_residuals,
            "A": self.A.tolist(),
            "B": self.B.ravel().tolist(),
            "C": self.C.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "koopguard-koopman-model":
            raise ValueError("not a Koopman model dump")
        return cls(A=np.asarray(d["A"], float), B=np.asarray(d["B"], float).reshape(-1, 1),
                   C=np.asarray(d["C"], float), tau=int(d["tau"]), m=int(d["m"]),
                   fit_residuals=dict(d["fit_residuals"]), svd_rank_used=int(d["svd_rank_used"]))


def dump_model(model: KoopmanModel, path):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1)


def load_model(path) -> KoopmanModel:
    with open(path) as fh:
        return KoopmanModel.from_dict(json.load(fh))


def fit(batch: EmbeddedBatch, rank_tol: float = 1e-10) -> KoopmanModel:
    """Least-squares DMDc fit of ``(A, B, C)`` on one learning window."""
    xi, xi_plus, u, y = batch.xi, batch.xi_plus, batch.u_row, batch.y
    for name, arr in (("xi", xi), ("xi_plus", xi_plus), ("u_row", u), ("y", y)):
        if not np.all(np.isfinite(arr)):
            raise FitError(f"non-finite values in {name}")
    Xi = np.vstack([xi, u])
    try:
        Xi_pinv, rank = truncated_pinv(Xi, rank_tol)
        xi_pinv, _ = truncated_pinv(xi, rank_tol)
    except np.linalg.LinAlgError as exc:
        raise FitError(f"SVD failed: {exc}") from None
    Lam = xi_plus @ Xi_pinv
    n = xi.shape[0]
    A, B = Lam[:, :n], Lam[:, n:]
    C = y @ xi_pinv

    def rel(res, ref):
        den = np.linalg.norm(ref)
        return float(np.linalg.norm(res) / den) if den > 0 else float(np.linalg.norm(res))

    residuals = {
        "state_fro": rel(xi_plus - Lam @ Xi, xi_plus),
        "output_fro": rel(y - C @ xi, y),
        "output_abs": float(np.linalg.norm(y - C @ xi)),
    }
    return KoopmanModel(A=A, B=B, C=C, tau=batch.tau, m=batch.m,
                        fit_residuals=residuals, svd_rank_used=rank)


def predict_horizon(model: KoopmanModel, z0: np.ndarray, currents, readout: str = "modes"):
    """Roll the model forward from ``z0`` under the given input currents.

    Each step applies ``z <- A z + B I`` and emits one column.  With
    ``readout="modes"`` the column is ``C z``; with ``readout="latest"`` it is
    the newest voltage block of ``z`` (the last ``m`` entries), which is the
    causal one-step-ahead voltage.

    Returns an ``(m, H)`` array and a flag that is True if the rollout went
    non-finite.
    """
    currents = np.atleast_1d(np.asarray(currents, dtype=float))
    if currents.size < 1:
        raise ValueError("horizon must be >= 1")
    z = np.asarray(z0, dtype=float).copy()
    out = np.empty((model.m, currents.size))
    b = model.B[:, 0]
    with np.errstate(over="ignore", invalid="ignore"):
        for h, i_c in enumerate(currents):
            z = model.A @ z + b * i_c
            out[:, h] = model.C @ z if readout == "modes" else z[-model.m:]
    return out, not bool(np.all(np.isfinite(out)))


def spectrum(model: KoopmanModel) -> np.ndarray:
    """Eigenvalues of ``A`` sorted by descending magnitude."""
    ev = np.linalg.eigvals(model.A)
    return ev[np.argsort(-np.abs(ev), kind="stable")]


def spectral_radius(model: KoopmanModel) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(model.A))))


def stabilize(model: KoopmanModel, max_radius: float = 1.0) -> KoopmanModel:
    """Copy of ``model`` with every eigenvalue of ``A`` pulled inside ``max_radius``.

    Works on the real Schur form ``A = Q T Q^T``, whose ``Q`` is orthogonal,
    so the edit stays well conditioned even when ``A`` is close to defective.
    Each diagonal block whose spectral radius exceeds ``max_radius`` is scaled
    onto it.  Returns ``model`` itself if nothing changes.
    """
    T, Q = scipy.linalg.schur(model.A, output="real")
    n = T.shape[0]
    changed = False
    i = 0
    while i < n:
        size = 2 if i + 1 < n and T[i + 1, i] != 0.0 else 1
        blk = T[i:i + size, i:i + size]
        lam = np.linalg.eigvals(blk)
        mag = float(np.max(np.abs(lam)))
        if mag > max_radius:
            T[i:i + size, i:i + size] = blk * (max_radius / mag)
            changed = True
        i += size
    if not changed:
        return model
    return dataclasses.replace(model, A=Q @ T @ Q.T)
