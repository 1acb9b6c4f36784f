"""Gaussian process regression for the data-driven Stage II correction.

Exact inference with a squared-exponential kernel and a constant mean.  The
four hyperparameters (mean ``beta``, signal scale ``sigma_g``, length scale
``length`` and noise scale ``sigma_eta``) are fitted by maximising the log
marginal likelihood with a quasi-Newton method on analytic gradients.

A :class:`GprBank` holds one model per (module, SOC region).  Inputs are
per-module vectors ``theta = [E1, V_bar, I, SOC]`` standardised per bucket.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

BANK_FORMAT = "koopguard-gpr-bank"
BANK_VERSION = 1
MIN_ROWS = 5
MAX_ROWS = 500
THETA_DIM = 4
_LOG_2PI = math.log(2.0 * math.pi)


class GprFitError(RuntimeError):
    """Raised when a GP cannot be factorised or its optimisation goes non-finite."""


class BankFormatError(ValueError):
    """Raised by :func:`load_bank` when a bank file is malformed."""


@dataclass(frozen=True)
class GprHyper:
    beta: float = 0.0
    sigma_g: float = 1.0
    length: float = 1.0
    sigma_eta: float = 0.1

    def __post_init__(self):
        for name in ("sigma_g", "length", "sigma_eta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if not math.isfinite(self.beta):
            raise ValueError("beta must be finite")

    def to_vector(self) -> np.ndarray:
        """Unconstrained parameters ``[beta, log sigma_g, log length, log sigma_eta]``."""
        return np.array([self.beta, math.log(self.sigma_g), math.log(self.length),
                         math.log(self.sigma_eta)])

    @classmethod
    def from_vector(cls, p) -> "GprHyper":
        return cls(float(p[0]), math.exp(p[1]), math.exp(p[2]), math.exp(p[3]))


def _sqdist(A, B):
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def kernel(theta_i, theta_j, hyper: GprHyper):
    """Squared-exponential covariance ``sigma_g^2 exp(-|ti - tj|^2 / (2 L^2))``.

    Accepts two vectors (returns a float) or two row-stacked matrices
    (returns the cross-covariance matrix).
    """
    a = np.asarray(theta_i, dtype=float)
    b = np.asarray(theta_j, dtype=float)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch {a.shape[-1]} vs {b.shape[-1]}")
    K = hyper.sigma_g ** 2 * np.exp(-_sqdist(a, b) / (2.0 * hyper.length ** 2))
    if a.ndim == 1 and b.ndim == 1:
        return float(K[0, 0])
    return K


def _factor(K):
    """Cholesky factor of ``K`` with adaptive diagonal jitter.

    Returns ``(lower_factor, jitter_added)``.
    """
    n = K.shape[0]
    try:
        return scipy.linalg.cholesky(K, lower=True), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.trace(K)) / n if n else 1.0
    jitter = 1e-10 * scale
    while jitter <= 1e-4 * scale * (1 + 1e-12):
        try:
            return scipy.linalg.cholesky(K + jitter * np.eye(n), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise GprFitError("covariance matrix not positive definite even with maximum jitter")


def log_marginal_likelihood(X, y, hyper: GprHyper, with_grad: bool = False):
    """Log marginal likelihood of ``y`` under the GP prior.

    With ``with_grad`` also returns the gradient with respect to
    ``[beta, log sigma_g, log length, log sigma_eta]``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.size
    D = _sqdist(X, X)
    Kf = hyper.sigma_g ** 2 * np.exp(-D / (2.0 * hyper.length ** 2))
    K = Kf + hyper.sigma_eta ** 2 * np.eye(n)
    Lc, _ = _factor(K)
    r = y - hyper.beta
    alpha = scipy.linalg.cho_solve((Lc, True), r)
    lml = -0.5 * r @ alpha - np.log(np.diag(Lc)).sum() - 0.5 * n * _LOG_2PI
    if not with_grad:
        return float(lml)
    Kinv = scipy.linalg.cho_solve((Lc, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv
    # d lml / d p = 0.5 tr(W dK/dp)
    g_beta = alpha.sum()
    g_sg = 0.5 * np.sum(W * (2.0 * Kf))
    g_len = 0.5 * np.sum(W * (Kf * D / hyper.length ** 2))
    g_eta = 0.5 * np.trace(W) * 2.0 * hyper.sigma_eta ** 2
    return float(lml), np.array([g_beta, g_sg, g_len, g_eta])


@dataclass
class GprModel:
    hyper: GprHyper
    X: np.ndarray
    y: np.ndarray
    region: int = 0
    module: int = 0
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    jitter: float = 0.0
    trace: list = field(default_factory=list)
    clamp_events: int = 0

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        d = self.X.shape[1]
        if self.x_mean is None:
            self.x_mean = np.zeros(d)
        if self.x_std is None:
            self.x_std = np.ones(d)
        self.x_mean = np.asarray(self.x_mean, dtype=float)
        self.x_std = np.asarray(self.x_std, dtype=float)
        K = kernel(self.X, self.X, self.hyper) + self.hyper.sigma_eta ** 2 * np.eye(self.y.size)
        self._L, self.jitter = _factor(K)
        self.alpha = scipy.linalg.cho_solve((self._L, True), self.y - self.hyper.beta)

    def standardize(self, theta):
        return (np.asarray(theta, dtype=float) - self.x_mean) / self.x_std

    def unstandardize(self, z):
        return np.asarray(z, dtype=float) * self.x_std + self.x_mean


def fit(X, y, init: GprHyper | None = None, max_iters: int = 200, region: int = 0,
        module: int = 0, x_mean=None, x_std=None) -> GprModel:
    """Fit hyperparameters by maximising the log marginal likelihood.

    Uses L-BFGS-B on the log-parameterised hyperparameters with analytic
    gradients.  Scales are boxed to keep degenerate targets (e.g. a constant)
    from driving the optimiser to infinity.  The accepted-iterate objective
    values are kept in ``model.trace``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if y.size < MIN_ROWS:
        raise ValueError(f"need at least {MIN_ROWS} training rows, got {y.size}")
    if X.shape[0] != y.size:
        raise ValueError("X and y row counts differ")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    s = float(np.std(y))
    scale = s if s > 0 else max(1e-3, 1e-3 * abs(float(np.mean(y))))
    if init is None:
        init = GprHyper(float(np.mean(y)), scale, 1.0, 0.1 * scale)
    span = max(float(np.ptp(X)), 1.0)
    lo_s, hi_s = math.log(1e-6 * scale), math.log(1e2 * scale)
    bounds = [(None, None), (lo_s, hi_s), (math.log(1e-3 * span), math.log(1e3 * span)),
              (lo_s, hi_s)]

    def objective(p):
        try:
            val, g = log_marginal_likelihood(X, y, GprHyper.from_vector(p), with_grad=True)
        except GprFitError as exc:
            raise GprFitError(f"{exc} at iterate {np.array2string(p)}") from None
        if not (math.isfinite(val) and np.all(np.isfinite(g))):
            raise GprFitError(f"non-finite likelihood or gradient at iterate {np.array2string(p)}")
        return -val, -g

    p0 = np.clip(init.to_vector(), [b[0] if b[0] is not None else -np.inf for b in bounds],
                 [b[1] if b[1] is not None else np.inf for b in bounds])
    trace = [-objective(p0)[0]]

    def record(p):
        trace.append(-objective(p)[0])

    res = scipy.optimize.minimize(objective, p0, jac=True, method="L-BFGS-B", bounds=bounds,
                                  callback=record, options={"maxiter": max_iters})
    hyper = GprHyper.from_vector(res.x)
    return GprModel(hyper, X, y, region=region, module=module, x_mean=x_mean, x_std=x_std,
                    trace=trace)


def predict(model: GprModel, theta):
    """Posterior mean and variance at standardised input(s) ``theta``.

    Negative variances from round-off are clamped to 0 and counted in
    ``model.clamp_events``.
    """
    T = np.atleast_2d(np.asarray(theta, dtype=float))
    Ks = kernel(T, model.X, model.hyper)
    mean = model.hyper.beta + Ks @ model.alpha
    v = scipy.linalg.solve_triangular(model._L, Ks.T, lower=True)
    var = model.hyper.sigma_g ** 2 - (v * v).sum(0) + model.hyper.sigma_eta ** 2
    neg = var < 0
    if np.any(neg):
        model.clamp_events += int(neg.sum())
        var = np.where(neg, 0.0, var)
    if np.ndim(theta) == 1:
        return float(mean[0]), float(var[0])
    return mean, var


# -- region bank --------------------------------------------------------------

@dataclass
class GprBank:
    """Models per (module, region) with nearest-region fallback for sparse buckets."""

    n_modules: int
    n_regions: int
    models: dict = field(default_factory=dict)
    fallback: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def model_for(self, module: int, region: int) -> GprModel:
        key = (module, region)
        if key in self.models:
            return self.models[key]
        if key in self.fallback:
            return self.models[(module, self.fallback[key])]
        raise KeyError(f"no GPR model for module {module}, region {region}")

    def predict_e2(self, e1, v_bar, current_a, soc, region):
        """Stage II correction per module from ``theta = [E1, V_bar, I, SOC]``.

        Returns ``(mean, variance)`` arrays of length ``n_modules``.
        """
        e1 = np.asarray(e1, dtype=float)
        v_bar = np.asarray(v_bar, dtype=float)
        mean = np.zeros(self.n_modules)
        var = np.zeros(self.n_modules)
        for i in range(self.n_modules):
            mdl = self.model_for(i, region)
            theta = mdl.standardize([e1[i], v_bar[i], current_a, soc])
            mean[i], var[i] = predict(mdl, theta)
        return mean, var


def _subsample(idx, limit, rng):
    if idx.size <= limit:
        return idx
    return np.sort(rng.choice(idx, size=limit, replace=False))


def train_bank(module, soc, theta, target, n_regions: int, region_fn, seed: int = 0,
               max_rows: int = MAX_ROWS, max_iters: int = 200, metadata=None) -> GprBank:
    """Fit one GP per populated (module, region) bucket.

    Parameters
    ----------
    module, soc, target : array_like, shape (N,)
        Per-row module index, Coulomb-counted SOC and Stage II target
        ``V_nom - V_bar``.
    theta : array_like, shape (N, 4)
        Per-row inputs ``[E1, V_bar, I, SOC]``.
    region_fn : callable
        Maps an SOC value to a 1-based region index.

    Buckets with fewer than five rows borrow the model of the nearest
    populated region of the same module.
    """
    module = np.asarray(module, dtype=int)
    soc = np.asarray(soc, dtype=float)
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    target = np.asarray(target, dtype=float)
    if target.size == 0:
        raise ValueError("empty training dataset")
    if not (module.size == soc.size == target.size == theta.shape[0]):
        raise ValueError("training arrays have inconsistent lengths")
    if theta.shape[1] != THETA_DIM:
        raise ValueError(f"theta must have {THETA_DIM} columns")
    rng = np.random.default_rng(seed)
    regions = np.array([region_fn(s) for s in soc], dtype=int)
    n_modules = int(module.max()) + 1
    bank = GprBank(n_modules, n_regions, metadata=dict(metadata or {}))
    counts = {}
    for i in range(n_modules):
        for j in range(1, n_regions + 1):
            idx = np.flatnonzero((module == i) & (regions == j))
            counts[f"{i}:{j}"] = int(idx.size)
            if idx.size < MIN_ROWS:
                continue
            idx = _subsample(idx, max_rows, rng)
            Xb = theta[idx]
            mu = Xb.mean(axis=0)
            sd = Xb.std(axis=0)
            sd = np.where(sd > 0, sd, 1.0)
            bank.models[(i, j)] = fit((Xb - mu) / sd, target[idx], max_iters=max_iters,
                                      region=j, module=i, x_mean=mu, x_std=sd)
        fitted = [j for (mi, j) in bank.models if mi == i]
        if not fitted:
            raise ValueError(f"module {i} has no region with >= {MIN_ROWS} rows")
        for j in range(1, n_regions + 1):
            if (i, j) not in bank.models:
                # nearest populated region, ties to the lower index
                bank.fallback[(i, j)] = min(fitted, key=lambda f: (abs(f - j), f))
    bank.metadata.setdefault("bucket_rows", counts)
    return bank


def save_bank(bank: GprBank, path) -> None:
    doc = {
        "format": BANK_FORMAT,
        "version": BANK_VERSION,
        "n_modules": bank.n_modules,
        "n_regions": bank.n_regions,
        "metadata": bank.metadata,
        "models": [
            {
                "module": i, "region": j,
                "hyper": {"beta": m.hyper.beta, "sigma_g": m.hyper.sigma_g,
                          "length": m.hyper.length, "sigma_eta": m.hyper.sigma_eta},
                "x_mean": m.x_mean.tolist(), "x_std": m.x_std.tolist(),
                "X": m.X.tolist(), "y": m.y.tolist(),
            }
            for (i, j), m in sorted(bank.models.items())
        ],
        "fallback": [{"module": i, "region": j, "source": s}
                     for (i, j), s in sorted(bank.fallback.items())],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def _field(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise BankFormatError(f"missing field {where}.{key}" if where else f"missing field {key}")
    return obj[key]


def _array(value, where, ndim):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise BankFormatError(f"{where}: not a numeric array") from None
    if arr.ndim != ndim or not np.all(np.isfinite(arr)):
        raise BankFormatError(f"{where}: expected a finite {ndim}-d array")
    return arr


def load_bank(path) -> GprBank:
    """Load and validate a bank written by :func:`save_bank`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise BankFormatError(f"corrupt or truncated bank file at byte offset {exc.pos}: "
                              f"{exc.msg}") from None
    except UnicodeDecodeError as exc:
        raise BankFormatError(f"bank file is not UTF-8 text (byte offset {exc.start})") from None
    if not isinstance(doc, dict) or doc.get("format") != BANK_FORMAT:
        raise BankFormatError("not a GPR bank file (format tag missing or wrong)")
    if "version" not in doc:
        raise BankFormatError("missing field version")
    if doc["version"] != BANK_VERSION:
        raise BankFormatError(f"unsupported bank version {doc['version']!r}")
    n_modules = int(_field(doc, "n_modules", ""))
    n_regions = int(_field(doc, "n_regions", ""))
    bank = GprBank(n_modules, n_regions, metadata=dict(doc.get("metadata") or {}))
    for k, entry in enumerate(_field(doc, "models", "")):
        where = f"models[{k}]"
        i = int(_field(entry, "module", where))
        j = int(_field(entry, "region", where))
        h = _field(entry, "hyper", where)
        try:
            hyper = GprHyper(*(float(_field(h, f, f"{where}.hyper"))
                               for f in ("beta", "sigma_g", "length", "sigma_eta")))
        except ValueError as exc:
            raise BankFormatError(f"{where}.hyper: {exc}") from None
        X = _array(_field(entry, "X", where), f"{where}.X", 2)
        y = _array(_field(entry, "y", where), f"{where}.y", 1)
        mu = _array(_field(entry, "x_mean", where), f"{where}.x_mean", 1)
        sd = _array(_field(entry, "x_std", where), f"{where}.x_std", 1)
        if X.shape[0] != y.size or X.shape[0] < MIN_ROWS:
            raise BankFormatError(f"{where}: X/y row count mismatch or fewer than {MIN_ROWS} rows")
        if not (X.shape[1] == mu.size == sd.size) or np.any(sd <= 0):
            raise BankFormatError(f"{where}: bad standardisation constants")
        bank.models[(i, j)] = GprModel(hyper, X, y, region=j, module=i, x_mean=mu, x_std=sd)
    for k, entry in enumerate(_field(doc, "fallback", "")):
        where = f"fallback[{k}]"
        key = (int(_field(entry, "module", where)), int(_field(entry, "region", where)))
        src = int(_field(entry, "source", where))
        if (key[0], src) not in bank.models:
            raise BankFormatError(f"{where}: source region {src} has no model")
        bank.fallback[key] = src
    for i in range(n_modules):
        for j in range(1, n_regions + 1):
            if (i, j) not in bank.models and (i, j) not in bank.fallback:
                raise BankFormatError(f"missing region entry: module {i}, region {j}")
    return bank
