import numpy as np
import pytest

from koopguard.telemetry import DataStacks, delay_embed


def stable_arx(m, tau, seed, radius=0.95):
    """Random stable ARX system whose delay embedding is exactly linear.

    ``V(k+tau+1) = sum_d A_d V(k+d) + sum_d b_d I(k+d)`` for d = 0..tau.
    Returns ``(A_blocks, b_blocks)``.
    """
    rng = np.random.default_rng(seed)
    A = [rng.normal(size=(m, m)) for _ in range(tau + 1)]
    b = [rng.normal(size=m) for _ in range(tau + 1)]
    # block companion matrix of the output recursion
    p = tau + 1
    comp = np.zeros((m * p, m * p))
    comp[: m * (p - 1), m:] = np.eye(m * (p - 1))
    for d in range(p):
        comp[m * (p - 1):, m * d:m * (d + 1)] = A[d]
    rho = np.max(np.abs(np.linalg.eigvals(comp)))
    s = radius / rho
    # scaling A_d by s^(p-d) scales every root by s
    A = [A[d] * s ** (p - d) for d in range(p)]
    return A, b


def simulate_arx(A, b, currents, v0):
    """Run the ARX recursion; ``v0`` holds the first ``tau+1`` outputs as columns."""
    p = len(A)
    m = v0.shape[0]
    n = currents.size
    v = np.zeros((m, n))
    v[:, :p] = v0
    for k in range(n - p):
        v[:, k + p] = sum(A[d] @ v[:, k + d] + b[d] * currents[k + d] for d in range(p))
    return v


@pytest.fixture
def arx_batch():
    def make(m=3, tau=2, length=90, seed=0):
        A, b = stable_arx(m, tau, seed)
        rng = np.random.default_rng(seed + 100)
        u = rng.normal(size=length)
        v = simulate_arx(A, b, u, rng.normal(size=(m, tau + 1)))
        return delay_embed(DataStacks(v, u), tau), (A, b, v, u)
    return make


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE = {}


def record(criterion, title, ok, detail=""):
    """Remember one acceptance verdict; printed at the end of the session."""
    ACCEPTANCE[criterion] = (bool(ok), title, detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {title} {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[c]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {c:>2}. {title}: {detail}")
