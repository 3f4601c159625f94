"""Semantic prototype bank, assignment network, and mask transform.

A frozen bank of random-orthogonal vectors acts as a shared dictionary of
time-series structure.  A small learned network maps (window, text
embedding) to per-prototype weights; non-positive weights become hard
exclusions (-inf attention logits), positive weights pass through as
additive logit offsets.  Few-shot conditioning for an unseen domain is the
mean assignment over a handful of its windows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class PrototypeBank:
    """Frozen orthonormal rows, one per prototype."""

    matrix: np.ndarray  # (n_prototypes, dim) float32
    seed: int

    @property
    def n_prototypes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def init_bank(n_prototypes: int, dim: int, seed: int) -> PrototypeBank:
    """Orthonormalize a seeded Gaussian matrix; rows satisfy P P^T = I."""
    if not 1 <= n_prototypes <= dim:
        raise ValueError(
            f"need 1 <= n_prototypes <= dim, got {n_prototypes} > {dim}")
    gen = nx.rng_for(seed, 0xB4)
    g = gen.standard_normal((dim, n_prototypes))
    q, r = np.linalg.qr(g)
    # canonical sign so the bank is a pure function of the seed
    q = q * np.sign(np.diag(r))[None, :]
    return PrototypeBank(matrix=q.T.astype(np.float32), seed=seed)


@dataclass
class PrototypeMask:
    """Extended-real mask: finite weights pass through, non-positive
    weights are -inf (hard exclusion).  If every weight is non-positive the
    single largest is retained at 0 and the mask is flagged degenerate so
    attention never sees an all-masked row."""

    values: np.ndarray  # (n_prototypes,) float64 with -inf entries
    degenerate: bool = False

    @property
    def excluded(self) -> np.ndarray:
        return ~np.isfinite(self.values)

    @property
    def finite_values(self) -> np.ndarray:
        """The additive-logit part: masked slots contribute 0 here; the
        exclusion itself travels as the boolean channel."""
        return np.where(self.excluded, 0.0, self.values).astype(np.float32)


def mask_from_weights(weights: np.ndarray) -> PrototypeMask:
    """w_i <= 0 becomes -inf; positive weights pass through unchanged."""
    w = np.asarray(weights, dtype=np.float64)
    if not np.isfinite(w).all():
        raise ValueError("prototype weights must be finite")
    values = np.where(w > 0, w, -np.inf)
    degenerate = False
    if not np.isfinite(values).any():
        values = np.full_like(w, -np.inf)
        values[int(np.argmax(w))] = 0.0
        degenerate = True
    return PrototypeMask(values=values, degenerate=degenerate)


def mask_components(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched mask split for the attention path.

    Returns (keep_mult, exclude): multiply raw weights by ``keep_mult`` to
    get the additive logits (degenerate fallback slots contribute 0), and
    pass ``exclude`` to the masked softmax.  Shapes (B, n_prototypes).
    """
    w = np.asarray(w)
    keep = (w > 0)
    exclude = ~keep
    dead_rows = ~keep.any(axis=-1)
    if dead_rows.any():
        idx = np.argmax(w, axis=-1)
        rows = np.nonzero(dead_rows)[0]
        exclude[rows, idx[rows]] = False
        # keep_mult stays 0 there: the retained slot enters at logit 0
    return keep.astype(w.dtype), exclude


class AssignmentNet:
    """The feature extractor mapping (window, text embedding) to prototype
    weights: a two-layer 1-D convolution stack over the window, mean-pooled,
    concatenated with the text embedding, then one hidden layer."""

    def __init__(self, window_len: int, text_dim: int, n_prototypes: int,
                 seed: int, conv_channels: tuple[int, int] = (16, 32),
                 kernel_sizes: tuple[int, int] = (9, 5), hidden: int = 64,
                 dtype=None):
        self.window_len = window_len
        self.text_dim = text_dim
        self.n_prototypes = n_prototypes
        self.conv_channels = conv_channels
        self.kernel_sizes = kernel_sizes
        self.hidden = hidden
        c1, c2 = conv_channels
        k1, k2 = kernel_sizes
        gen = nx.rng_for(seed, 0xA51)
        dt = dtype if dtype is not None else nx.default_dtype()

        def init(shape, scale):
            return (gen.standard_normal(shape) * scale).astype(dt)

        self.params: dict[str, Tensor] = {
            "assign.conv1.w": nx.parameter(init((k1, c1), k1 ** -0.5), "assign.conv1.w", dtype=dt),
            "assign.conv1.b": nx.parameter(np.zeros(c1, dtype=dt), "assign.conv1.b", dtype=dt),
            "assign.conv2.w": nx.parameter(init((k2 * c1, c2), (k2 * c1) ** -0.5), "assign.conv2.w", dtype=dt),
            "assign.conv2.b": nx.parameter(np.zeros(c2, dtype=dt), "assign.conv2.b", dtype=dt),
            "assign.hidden.w": nx.parameter(init((c2 + text_dim, hidden), (c2 + text_dim) ** -0.5), "assign.hidden.w", dtype=dt),
            "assign.hidden.b": nx.parameter(np.zeros(hidden, dtype=dt), "assign.hidden.b", dtype=dt),
            "assign.out.w": nx.parameter(init((hidden, n_prototypes), hidden ** -0.5), "assign.out.w", dtype=dt),
            "assign.out.b": nx.parameter(np.zeros(n_prototypes, dtype=dt), "assign.out.b", dtype=dt),
        }

    def assign(self, windows: Tensor, text_embs: Tensor) -> Tensor:
        """(B, L) x (B, text_dim) -> (B, n_prototypes)."""
        if windows.shape[-1] != self.window_len:
            raise nx.ShapeError(
                f"assign: window length {windows.shape[-1]} != {self.window_len}")
        if text_embs.shape[-1] != self.text_dim:
            raise nx.ShapeError(
                f"assign: text dim {text_embs.shape[-1]} != {self.text_dim}")
        p = self.params
        c1 = self.conv_channels[0]
        k2 = self.kernel_sizes[1]
        h = nx.unfold(windows, self.kernel_sizes[0])            # (B, T1, k1)
        h = nx.silu(nx.add(nx.matmul(h, p["assign.conv1.w"]), p["assign.conv1.b"]))
        t1 = h.shape[-2]
        flat = nx.reshape(h, (*h.shape[:-2], t1 * c1))
        h = nx.unfold(flat, k2 * c1, stride=c1)                 # (B, T2, k2*c1)
        h = nx.silu(nx.add(nx.matmul(h, p["assign.conv2.w"]), p["assign.conv2.b"]))
        pooled = nx.mean_axis(h, axis=-2)                       # (B, c2)
        joint = nx.concat_last(pooled, text_embs)
        h = nx.silu(nx.add(nx.matmul(joint, p["assign.hidden.w"]), p["assign.hidden.b"]))
        return nx.add(nx.matmul(h, p["assign.out.w"]), p["assign.out.b"])


def assign(window_values: np.ndarray, text_emb: np.ndarray,
           net: AssignmentNet) -> np.ndarray:
    """Single-sample weight vector, outside any tape."""
    w = net.assign(Tensor(window_values[None, :], dtype=net.params["assign.out.w"].data.dtype),
                   Tensor(text_emb[None, :], dtype=net.params["assign.out.w"].data.dtype))
    return w.data[0]


def few_shot_extract(sample_windows: np.ndarray, text_embs: np.ndarray,
                     net: AssignmentNet) -> np.ndarray:
    """Elementwise mean assignment over a handful of unseen-domain windows."""
    samples = np.asarray(sample_windows)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ValueError("need at least one sample window (S, L)")
    dt = net.params["assign.out.w"].data.dtype
    w = net.assign(Tensor(samples, dtype=dt), Tensor(np.asarray(text_embs), dtype=dt))
    return w.data.mean(axis=0)


def export_weight_heatmap(weights: np.ndarray, path: str | Path,
                          sample_ids: list[str] | None = None) -> None:
    """CSV with one row per sample and one column per prototype index."""
    weights = np.atleast_2d(np.asarray(weights))
    n = weights.shape[1]
    if sample_ids is None:
        sample_ids = [f"sample-{i}" for i in range(weights.shape[0])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + [str(j) for j in range(n)])
        for sid, row in zip(sample_ids, weights):
            writer.writerow([sid] + [f"{v:.6f}" for v in row])
