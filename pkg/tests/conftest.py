import numpy as np
import pytest

from seqret.sequences import EventSequence


def fd_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of a flat array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rel=1e-4, abs_floor=1e-7):
    """Per-coordinate check: relative error below ``rel`` once the
    magnitude clears ``abs_floor`` (tiny entries compare absolutely)."""
    analytic = np.asarray(analytic).ravel()
    numeric = np.asarray(numeric).ravel()
    assert analytic.shape == numeric.shape
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(numeric), np.abs(analytic))
    bad = diff > np.maximum(rel * scale, abs_floor)
    assert not bad.any(), (
        f"{bad.sum()} of {bad.size} coordinates off; worst "
        f"abs={diff.max():.3e} at rel={(diff / np.maximum(scale, 1e-300)).max():.3e}"
    )


def random_sequence(rng, n=None, mark_count=3, seq_id="s", mean_gap=0.7):
    n = n if n is not None else int(rng.integers(2, 8))
    gaps = rng.lognormal(np.log(mean_gap), 0.5, size=n)
    times = np.cumsum(gaps)
    marks = rng.integers(0, mark_count, size=n)
    horizon = float(times[-1] + rng.lognormal(np.log(mean_gap), 0.5))
    return EventSequence(seq_id, times, marks, horizon)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
