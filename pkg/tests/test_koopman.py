import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopguard import koopman
from koopguard.telemetry import DataStacks, delay_embed, embed_column

from conftest import simulate_arx, stable_arx


def test_fit_recovers_arx_dynamics(arx_batch):
    batch, (A, b, v, u) = arx_batch(m=3, tau=2, length=90, seed=4)
    model = koopman.fit(batch)
    assert model.fit_residuals["state_fro"] < 1e-10
    assert model.svd_rank_used == batch.n + 1


def test_rollout_matches_system(arx_batch):
    batch, (A, b, v, u) = arx_batch(seed=7)
    model = koopman.fit(batch)
    rng = np.random.default_rng(1)
    u2 = rng.normal(size=60)
    v2 = simulate_arx(A, b, u2, rng.normal(size=(3, 3)))
    z0 = embed_column(v2, u2[None, :], 0, 2)
    pred, bad = koopman.predict_horizon(model, z0, u2[2:52], readout="latest")
    assert not bad
    np.testing.assert_allclose(pred, v2[:, 3:53], rtol=0, atol=1e-8 * np.abs(v2).max())


def test_truncated_pinv_matches_numpy():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(7, 12))
    P, r = koopman.truncated_pinv(M)
    assert r == 7
    np.testing.assert_allclose(P, np.linalg.pinv(M), atol=1e-12)


def test_truncated_pinv_drops_small_directions():
    U = np.linalg.qr(np.random.default_rng(1).normal(size=(6, 6)))[0]
    M = U @ np.diag([1.0, 0.5, 1e-12, 0, 0, 0])
    P, r = koopman.truncated_pinv(M, rank_tol=1e-10)
    assert r == 2
    assert np.all(np.isfinite(P))


def test_fit_rejects_nonfinite(arx_batch):
    batch, _ = arx_batch()
    batch.xi[0, 0] = np.nan
    with pytest.raises(koopman.FitError, match="xi"):
        koopman.fit(batch)


def test_zero_window_raises():
    batch = delay_embed(DataStacks(np.zeros((2, 20)), np.zeros(20)), 1)
    with pytest.raises(koopman.FitError):
        koopman.fit(batch)


def test_model_round_trip(tmp_path, arx_batch):
    model = koopman.fit(arx_batch()[0])
    koopman.dump_model(model, tmp_path / "m.json")
    back = koopman.load_model(tmp_path / "m.json")
    np.testing.assert_array_equal(back.A, model.A)
    np.testing.assert_array_equal(back.B, model.B)
    np.testing.assert_array_equal(back.C, model.C)
    assert back.fit_residuals == model.fit_residuals


def _normal_matrix(rng, n):
    """Orthogonally rotated block-diagonal matrix with random real and complex-pair modes."""
    T = np.zeros((n, n))
    i = 0
    while i < n:
        mag = rng.uniform(0.1, 2.0)
        if i + 1 < n and rng.random() < 0.5:
            ang = rng.uniform(0.1, 3.0)
            T[i:i + 2, i:i + 2] = mag * np.array([[np.cos(ang), -np.sin(ang)],
                                                  [np.sin(ang), np.cos(ang)]])
            i += 2
        else:
            T[i, i] = mag * rng.choice([-1.0, 1.0])
            i += 1
    Q = np.linalg.qr(rng.normal(size=(n, n)))[0]
    return Q @ T @ Q.T


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), radius=st.floats(0.3, 1.0))
def test_stabilize_bounds_spectrum(seed, radius):
    rng = np.random.default_rng(seed)
    n = 7
    A = _normal_matrix(rng, n)
    model = koopman.KoopmanModel(A, rng.normal(size=(n, 1)), rng.normal(size=(2, n)), 1, 2)
    out = koopman.stabilize(model, radius)
    assert koopman.spectral_radius(out) <= radius * (1 + 1e-9)
    ev = np.linalg.eigvals(A)
    kept = np.linalg.eigvals(out.A)
    for lam in ev[np.abs(ev) <= radius]:
        assert np.min(np.abs(kept - lam)) < 1e-9
    for lam in ev[np.abs(ev) > radius]:
        # clipped modes keep their phase
        assert np.min(np.abs(kept - lam * radius / abs(lam))) < 1e-9


def test_stabilize_noop_returns_same_object(arx_batch):
    model = koopman.fit(arx_batch()[0])
    assert koopman.spectral_radius(model) < 1
    assert koopman.stabilize(model, 1.0) is model


def test_stabilize_handles_jordan_block():
    A = np.array([[1.001, 1.0], [0.0, 1.001]])
    model = koopman.KoopmanModel(A, np.zeros((2, 1)), np.eye(1, 2), 0, 1)
    out = koopman.stabilize(model, 1.0)
    assert koopman.spectral_radius(out) <= 1.0 + 1e-12


def test_spectrum_sorted(arx_batch):
    ev = koopman.spectrum(koopman.fit(arx_batch()[0]))
    assert np.all(np.diff(np.abs(ev)) <= 1e-12)
