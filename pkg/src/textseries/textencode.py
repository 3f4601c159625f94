"""Text to condition embedding.

The default encoder is deterministic and offline: a signed feature-hashing
bag of tokens plus a structured channel carrying the parsed numeric fields
(mean, std, min, max, peaks, dips, prediction length, trend sign).  It
preserves exactly the controllable content of a description.  An external
embedding service can be swapped in behind the same interface; failures
fall back to the deterministic encoder.
"""

from __future__ import annotations

import json
import logging
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from . import numerics as nx
from .textsynth import parse_slot_values

log = logging.getLogger(__name__)

STRUCTURED_DIM = 16
_MASK64 = (1 << 64) - 1
_SEED_BUCKET = 0x9E3779B97F4A7C15
_SEED_SIGN = 0xC2B2AE3D27D4EB4F

_TOKEN_RE = re.compile(r"\d+\.\d+|\d+|[a-z]+")


@dataclass
class TextEmbedding:
    """Encoded description; ``vector`` has the encoder's fixed dimension."""

    vector: np.ndarray
    encoder_id: str


@dataclass
class ConditionVector:
    """Fused condition with provenance tags for inspection/export."""

    vector: np.ndarray
    parts: tuple[str, ...] = ("text", "prototype-context")


@runtime_checkable
class TextEncoder(Protocol):
    encoder_id: str
    dim: int

    def encode(self, text: str) -> TextEmbedding: ...


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics; numerals stay whole tokens."""
    return _TOKEN_RE.findall(text.lower())


def _fnv_mix(token: str, seed: int) -> int:
    h = seed
    for b in token.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (h ^ (h >> 31)) & _MASK64


def token_bucket(token: str, n_buckets: int) -> tuple[int, float]:
    """(bucket index, sign) under the fixed mixing hashes."""
    idx = _fnv_mix(token, _SEED_BUCKET) % n_buckets
    sign = 1.0 if _fnv_mix(token, _SEED_SIGN) & 1 else -1.0
    return idx, sign


def parse_structured_channel(text: str) -> np.ndarray:
    """The 16-slot numeric channel; absent fields stay zero.

    Layout: mean, std, min, max, peak1..3, dip1..3, prediction length,
    trend sign, then reserved zeros.
    """
    out = np.zeros(STRUCTURED_DIM, dtype=np.float32)
    parsed = parse_slot_values(text)

    def grab(slot: str, pos: int) -> None:
        if slot in parsed:
            out[pos] = float(parsed[slot])

    grab("mean_value", 0)
    grab("std_value", 1)
    grab("min_value", 2)
    grab("max_value", 3)
    for name, base in (("peak_steps", 4), ("dip_steps", 7)):
        if name in parsed:
            steps = [float(s) for s in parsed[name].split(",")]
            for j, v in enumerate(steps[:3]):
                out[base + j] = v
    grab("prediction_length", 10)
    low = text.lower()
    inc = low.find("increasing")
    dec = low.find("decreasing")
    if inc >= 0 and (dec < 0 or inc < dec):
        out[11] = 1.0
    elif dec >= 0:
        out[11] = -1.0
    return out


class HashingTextEncoder:
    """Deterministic offline encoder: hashed token counts (L2-normalized
    when nonzero) concatenated with the structured numeric channel."""

    def __init__(self, dim: int = 256):
        if dim <= STRUCTURED_DIM:
            raise ValueError(f"dim must exceed {STRUCTURED_DIM}, got {dim}")
        self.dim = dim
        self.n_buckets = dim - STRUCTURED_DIM
        self.encoder_id = f"hashing-{dim}"

    def encode(self, text: str) -> TextEmbedding:
        hashed = np.zeros(self.n_buckets, dtype=np.float32)
        for token in tokenize(text):
            idx, sign = token_bucket(token, self.n_buckets)
            hashed[idx] += sign
        norm = float(np.linalg.norm(hashed))
        if norm > 0:
            hashed /= norm
        vec = np.concatenate([hashed, parse_structured_channel(text)])
        return TextEmbedding(vector=vec, encoder_id=self.encoder_id)


class ExternalTextEncoder:
    """Client for an external embedding service.

    Contract: POST ``{"text": ...}`` returns ``{"vector": [...]}`` of the
    configured dimension.  On repeated failure the deterministic encoder
    answers instead and a warning is logged.
    """

    def __init__(self, endpoint: str, dim: int = 256, token: str | None = None,
                 timeout: float = 10.0, retries: int = 2,
                 fallback: TextEncoder | None = None):
        self.endpoint = endpoint
        self.dim = dim
        self.token = token
        self.timeout = timeout
        self.retries = retries
        self.fallback = fallback or HashingTextEncoder(dim)
        self.encoder_id = f"external({endpoint})"

    def encode(self, text: str) -> TextEmbedding:
        payload = json.dumps({"text": text}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last_err: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                req = urllib.request.Request(self.endpoint, data=payload,
                                             headers=headers)
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    body = json.loads(resp.read().decode("utf-8"))
                vec = np.asarray(body["vector"], dtype=np.float32)
                if vec.shape != (self.dim,):
                    raise ValueError(f"service returned shape {vec.shape}, "
                                     f"expected ({self.dim},)")
                return TextEmbedding(vector=vec, encoder_id=self.encoder_id)
            except (urllib.error.URLError, OSError, ValueError, KeyError) as exc:
                last_err = exc
        log.warning("external encoder %s failed (%s); using deterministic fallback",
                    self.endpoint, last_err)
        return self.fallback.encode(text)


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def fuse_preactivation(text_vec: nx.Tensor, proto_context: nx.Tensor,
                       weight: nx.Tensor, bias: nx.Tensor) -> nx.Tensor:
    """Affine layer over the concatenated (text, prototype-context) input."""
    d_in = text_vec.shape[-1] + proto_context.shape[-1]
    if weight.shape[0] != d_in:
        raise nx.ShapeError(
            f"fuse: weight expects input dim {weight.shape[0]}, got {d_in}")
    joint = nx.concat_last(text_vec, proto_context)
    return nx.add(nx.matmul(joint, weight), bias)


def fuse(text_vec: nx.Tensor, proto_context: nx.Tensor,
         weight: nx.Tensor, bias: nx.Tensor) -> nx.Tensor:
    """Single learned affine layer followed by a smooth nonlinearity."""
    return nx.silu(fuse_preactivation(text_vec, proto_context, weight, bias))


def condition_vector(fused: np.ndarray) -> ConditionVector:
    return ConditionVector(vector=np.asarray(fused, dtype=np.float32))
