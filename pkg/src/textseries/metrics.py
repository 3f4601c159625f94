"""Generative-evaluation metrics.

Histogram distances (MDD, KL) over shared equal-width bins, the forecast
error block (MSE/MAE/SMAPE/MAPE/MASE and OWA against a seasonal-naive
baseline), a Frechet distance between Gaussians fit to joint (series, text)
embeddings, and the train-synthetic-test-real harness with an internal
ridge-regularized linear forecaster.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .textencode import HashingTextEncoder
from . import numerics as nx

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    """Named scalar results plus the settings that produced them.  Only
    metrics actually computed appear in ``values``."""

    values: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"values": dict(self.values), "metadata": dict(self.metadata)}


# ---------------------------------------------------------------------------
# histogram distances
# ---------------------------------------------------------------------------

def histogram_pair(real: np.ndarray, synth: np.ndarray,
                   bins: int = 50) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Probability masses over shared equal-width bins spanning the union
    range.  Returns (edges, P, Q)."""
    real = np.asarray(real, dtype=np.float64).ravel()
    synth = np.asarray(synth, dtype=np.float64).ravel()
    if real.size == 0 or synth.size == 0:
        raise MetricError("histogram distance needs non-empty samples")
    lo = min(real.min(), synth.min())
    hi = max(real.max(), synth.max())
    if hi == lo:
        hi = lo + 1.0  # all mass lands in one shared bin
    edges = np.linspace(lo, hi, bins + 1)
    p, _ = np.histogram(real, bins=edges)
    q, _ = np.histogram(synth, bins=edges)
    return edges, p / real.size, q / synth.size


def mdd_from_masses(p: np.ndarray, q: np.ndarray) -> float:
    """Sum of absolute mass differences; 0 for identical, at most 2."""
    return float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def mdd(real: np.ndarray, synth: np.ndarray, bins: int = 50) -> float:
    _, p, q = histogram_pair(real, synth, bins)
    return mdd_from_masses(p, q)


def kl_from_masses(p: np.ndarray, q: np.ndarray, smooth: float = 1e-8) -> float:
    """Sum P log(P/Q) in nats; additive smoothing is renormalized.  With
    smoothing off, mass in P over an empty Q bin is an error."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if smooth > 0:
        p = (p + smooth) / (p + smooth).sum()
        q = (q + smooth) / (q + smooth).sum()
    elif ((p > 0) & (q == 0)).any():
        raise MetricError("zero mass under Q where P has mass; "
                          "enable smoothing to regularize")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def kl(real: np.ndarray, synth: np.ndarray, bins: int = 50,
       smooth: float = 1e-8) -> float:
    _, p, q = histogram_pair(real, synth, bins)
    return kl_from_masses(p, q, smooth)


# ---------------------------------------------------------------------------
# forecast errors
# ---------------------------------------------------------------------------

def forecast_errors(y: np.ndarray, yhat: np.ndarray,
                    season: int = 1) -> dict[str, float]:
    """MSE, MAE, SMAPE (0-200), MAPE (0-100), MASE with the seasonal
    difference denominator taken over the evaluation window itself."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1 or y.size == 0:
        raise MetricError(f"need matching 1-d series, got {y.shape} vs {yhat.shape}")
    h = y.size
    if not 1 <= season < h:
        raise MetricError(f"season {season} must satisfy 1 <= s < H={h}")
    err = y - yhat
    out = {
        "mse": float(np.mean(err ** 2)),
        "mae": float(np.mean(np.abs(err))),
    }
    denom = np.abs(y) + np.abs(yhat)
    bad = (denom == 0) & (np.abs(err) > 0)
    if bad.any():
        raise MetricError("smape: zero denominator |Y|+|Yhat| at nonzero error")
    terms = np.divide(np.abs(err), denom, out=np.zeros(h), where=denom > 0)
    out["smape"] = float(200.0 / h * terms.sum())
    if (y == 0).any():
        raise MetricError("mape: Y contains zeros")
    out["mape"] = float(100.0 / h * np.sum(np.abs(err) / np.abs(y)))
    seasonal = np.abs(y[season:] - y[:-season])
    scale = seasonal.sum() / (h - season)
    if scale == 0:
        raise MetricError("mase: degenerate seasonal differences (all zero)")
    out["mase"] = float(np.mean(np.abs(err)) / scale)
    return out


def owa(smape: float, mase: float, naive2_smape: float,
        naive2_mase: float) -> float:
    """Average of SMAPE and MASE relative to the baseline forecaster."""
    if naive2_smape <= 0 or naive2_mase <= 0:
        raise MetricError("owa: baseline scores must be positive")
    return 0.5 * (smape / naive2_smape + mase / naive2_mase)


def seasonal_naive(history: np.ndarray, horizon: int, period: int) -> np.ndarray:
    """Repeat the last observed period; the baseline continuation."""
    history = np.asarray(history, dtype=np.float64)
    if history.size == 0:
        raise MetricError("seasonal_naive: empty history")
    period = max(1, min(period, history.size))
    last = history[-period:]
    reps = int(np.ceil(horizon / period))
    return np.tile(last, reps)[:horizon]


# ---------------------------------------------------------------------------
# joint Frechet distance
# ---------------------------------------------------------------------------

class JointSeriesTextEmbedder:
    """Deterministic joint embedder: a frozen random 1-D convolution
    feature map over the series concatenated with the hashed text encoding.
    Shared across both sample sets being compared; a trained embedder can
    be swapped in behind the same ``embed`` method."""

    def __init__(self, series_dim: int = 16, text_dim: int = 32,
                 kernel: int = 9, seed: int = 0):
        gen = nx.rng_for(seed, 0xE3B)
        self.filters = (gen.standard_normal((kernel, series_dim))
                        / np.sqrt(kernel)).astype(np.float64)
        self.text_encoder = HashingTextEncoder(text_dim)
        self.dim = series_dim + text_dim

    def embed(self, series: np.ndarray, text: str) -> np.ndarray:
        x = np.asarray(series, dtype=np.float64)
        k = self.filters.shape[0]
        if x.size < k:
            raise MetricError(f"series shorter than kernel {k}")
        windows = np.lib.stride_tricks.sliding_window_view(x, k)
        feats = np.tanh(windows @ self.filters).mean(axis=0)
        return np.concatenate([feats, self.text_encoder.encode(text).vector])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian_distance(mu1: np.ndarray, cov1: np.ndarray,
                              mu2: np.ndarray, cov2: np.ndarray) -> float:
    """||mu1-mu2||^2 + Tr(cov1 + cov2 - 2 (cov1 cov2)^{1/2}) with the
    product square root taken symmetrically and eigenvalues floored at 0."""
    diff = mu1 - mu2
    a = _psd_sqrt(cov1)
    inner = a @ cov2 @ a
    vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_sqrt = float(np.sqrt(vals).sum())
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)


def _fit_gaussian(x: np.ndarray, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (x.shape[0] - 1)
    if ridge > 0:
        cov = cov + ridge * np.eye(cov.shape[0])
    else:
        smallest = float(np.linalg.eigvalsh(cov).min())
        if smallest <= 0:
            raise MetricError(
                "rank-deficient covariance; pass ridge > 0 (default 1e-6)")
    return mu, cov


def jftsd_from_embeddings(x1: np.ndarray, x2: np.ndarray,
                          ridge: float = 1e-6) -> float:
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    e = x1.shape[1]
    if x1.shape[0] < 2 * e or x2.shape[0] < 2 * e:
        raise MetricError(
            f"need at least {2 * e} samples per set for dim {e}, "
            f"got {x1.shape[0]} and {x2.shape[0]}")
    if float(x1.var(axis=0).max()) == 0.0 and float(x2.var(axis=0).max()) == 0.0:
        log.warning("jftsd: constant embeddings on both sides (degenerate)")
    mu1, c1 = _fit_gaussian(x1, ridge)
    mu2, c2 = _fit_gaussian(x2, ridge)
    return frechet_gaussian_distance(mu1, c1, mu2, c2)


def jftsd(real_pairs: list[tuple[np.ndarray, str]],
          synth_pairs: list[tuple[np.ndarray, str]],
          embedder: JointSeriesTextEmbedder | None = None,
          ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussians fit to joint (series, text)
    embeddings of real vs generated pairs."""
    embedder = embedder or JointSeriesTextEmbedder()
    x1 = np.stack([embedder.embed(s, t) for s, t in real_pairs])
    x2 = np.stack([embedder.embed(s, t) for s, t in synth_pairs])
    return jftsd_from_embeddings(x1, x2, ridge)


# ---------------------------------------------------------------------------
# train-synthetic-test-real
# ---------------------------------------------------------------------------

def _fit_linear_ar(windows: np.ndarray, context: int, horizon: int,
                   ridge: float, max_ridge: float) -> np.ndarray:
    x = windows[:, :context].astype(np.float64)
    y = windows[:, context:context + horizon].astype(np.float64)
    xb = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    gram = xb.T @ xb
    rhs = xb.T @ y
    lam = ridge
    while True:
        try:
            return np.linalg.solve(gram + lam * np.eye(gram.shape[0]), rhs)
        except np.linalg.LinAlgError:
            lam *= 10.0
            if lam > max_ridge:
                raise MetricError(
                    f"singular normal equations even at ridge {max_ridge}")


def _ar_mae(weights: np.ndarray, windows: np.ndarray, context: int,
            horizon: int) -> float:
    x = windows[:, :context].astype(np.float64)
    y = windows[:, context:context + horizon].astype(np.float64)
    xb = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    pred = xb @ weights
    return float(np.mean(np.abs(pred - y)))


def tstr(synth_train: np.ndarray, real_train: np.ndarray,
         real_test: np.ndarray, context: int = 144, horizon: int = 24,
         ridge: float = 1e-4, max_ridge: float = 1e-2) -> dict[str, float]:
    """Fit the linear forecaster once on synthetic and once on real
    training windows, evaluate both on real test windows, report the MAE
    ratio.  Windows must be at least context + horizon long."""
    need = context + horizon
    for name, arr in (("synth_train", synth_train), ("real_train", real_train),
                      ("real_test", real_test)):
        arr = np.asarray(arr)
        if arr.ndim != 2 or arr.shape[1] < need:
            raise MetricError(f"{name}: need (n, >= {need}) windows, got {arr.shape}")
        if arr.shape[0] < 2:
            raise MetricError(f"{name}: need at least 2 windows to fit")
    w_synth = _fit_linear_ar(np.asarray(synth_train), context, horizon, ridge, max_ridge)
    w_real = _fit_linear_ar(np.asarray(real_train), context, horizon, ridge, max_ridge)
    mae_synth = _ar_mae(w_synth, np.asarray(real_test), context, horizon)
    mae_real = _ar_mae(w_real, np.asarray(real_test), context, horizon)
    return {
        "mae_synth": mae_synth,
        "mae_real": mae_real,
        "gap_ratio": mae_synth / mae_real if mae_real > 0 else float("inf"),
    }
