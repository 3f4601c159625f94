"""Tests for the synthetic domain generators."""

import numpy as np
import pytest

from textseries.data import window
from textseries.toyworlds import ToySpec, generate_toy, nearest_centroid_accuracy


def test_pure_sine_is_exact():
    spec = ToySpec("sine", "sine", count=1, length=48, seed=1,
                   period_range=(24.0, 24.0), amplitude_range=(1.0, 1.0))
    rec = generate_toy(spec)[0]
    t = np.arange(48)
    np.testing.assert_allclose(rec.values, np.sin(2 * np.pi * t / 24), atol=1e-12)


def test_count_and_ids():
    recs = generate_toy(ToySpec("d", "sine", count=100, length=50, seed=0))
    assert len(recs) == 100
    assert recs[0].series_id == "d-0000"
    assert all(r.domain_id == "d" for r in recs)


def test_deterministic_per_seed():
    spec = ToySpec("d", "ar1", count=3, length=64, seed=7, noise_sigma=0.5)
    a = generate_toy(spec)
    b = generate_toy(spec)
    for ra, rb in zip(a, b):
        assert ra.values.tobytes() == rb.values.tobytes()


def test_ar1_lag1_autocorrelation():
    spec = ToySpec("d", "ar1", count=1, length=10_000, seed=3,
                   noise_sigma=0.1, ar_coeff=0.9)
    x = generate_toy(spec)[0].values
    xc = x - x.mean()
    rho = float(np.dot(xc[:-1], xc[1:]) / np.dot(xc, xc))
    assert abs(rho - 0.9) < 0.03


def test_sawtooth_ramps_within_period():
    spec = ToySpec("d", "sawtooth", count=1, length=64, seed=5,
                   period_range=(32.0, 32.0))
    x = generate_toy(spec)[0].values
    diffs = np.diff(x)
    # one wrap per period; everything else increases linearly
    assert (diffs > 0).sum() >= 60
    assert x.min() >= -1.0 - 1e-9 and x.max() <= 1.0 + 1e-9


def test_trend_plus_season_has_trend():
    spec = ToySpec("d", "trend_plus_season", count=1, length=200, seed=2,
                   slope_range=(0.05, 0.05), period_range=(24.0, 24.0))
    x = generate_toy(spec)[0].values
    slope = np.polyfit(np.arange(200), x, 1)[0]
    assert slope == pytest.approx(0.05, abs=0.01)


def test_domain_separability_sine_vs_sawtooth():
    # one window per series so windows within a domain stay phase-aligned
    sine = generate_toy(ToySpec("sine", "sine", count=120, length=168, seed=11,
                                period_range=(24.0, 24.0),
                                amplitude_range=(0.8, 1.2), noise_sigma=0.05))
    saw = generate_toy(ToySpec("saw", "sawtooth", count=120, length=168, seed=12,
                               period_range=(32.0, 32.0),
                               amplitude_range=(0.8, 1.2), noise_sigma=0.05))
    sw = window(sine, length=168)
    ww = window(saw, length=168)
    half = len(sw) // 2
    train = {
        "sine": np.stack([w.values for w in sw[:half]]),
        "saw": np.stack([w.values for w in ww[:half]]),
    }
    acc_sine = nearest_centroid_accuracy(train, np.stack([w.values for w in sw[half:]]), "sine")
    acc_saw = nearest_centroid_accuracy(train, np.stack([w.values for w in ww[half:]]), "saw")
    assert acc_sine >= 0.99
    assert acc_saw >= 0.99
