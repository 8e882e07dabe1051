import math

import numpy as np
import pytest

from geoagg.aggregation import ExpertBundle


def random_unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def random_rotation(rng, dim):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def unit_pair(rng, dim, phi):
    """Two unit vectors exactly ``phi`` radians apart."""
    u = random_unit(rng, dim)
    v = rng.standard_normal(dim)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    return u, math.cos(phi) * u + math.sin(phi) * v


def random_bundle(rng, dim, k, spread=0.8, equal_norms=False):
    """Directions scattered in a cap around a random centre (angles to the
    centre mostly well under 90 degrees), log-normal norms, Dirichlet weights."""
    c = random_unit(rng, dim)
    U = c + spread * rng.standard_normal((k, dim)) / math.sqrt(dim)
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    r = np.ones(k) if equal_norms else np.exp(0.3 * rng.standard_normal(k))
    w = rng.dirichlet(np.ones(k))
    return ExpertBundle(r[:, None] * U, w / w.sum())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
