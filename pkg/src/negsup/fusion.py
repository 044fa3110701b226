"""Feature fusion: similarity scoring, quality gating, embedding mixing,
cross-attention over retrieved captions, and the prefix mapping network.

Prefix features are plain (L, d) float64 arrays. Projection matrices act
on column vectors (token_out = M @ token_in), stored row-major.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .embedding import as_vector, normalize_total
from .errors import (
    DimMismatch,
    EmptyRetrieval,
    FormatError,
    IoError,
    ZeroVector,
)

STRATEGY_CLIPSCORE_FORWARD = "clipscore-forward"
STRATEGY_CLIPSCORE_REVERSE = "clipscore-reverse"
STRATEGY_FIXED = "fixed"

FUSION_STRATEGIES = (
    STRATEGY_CLIPSCORE_FORWARD,
    STRATEGY_CLIPSCORE_REVERSE,
    STRATEGY_FIXED,
)

DEFAULT_TAU_QUALITY = 0.6

WEIGHTS_MAGIC = b"NESW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class FusionConfig:
    strategy: str = STRATEGY_CLIPSCORE_FORWARD
    alpha: float | None = None
    tau_quality: float = DEFAULT_TAU_QUALITY

    def __post_init__(self):
        if self.strategy not in FUSION_STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}")
        if self.strategy == STRATEGY_FIXED:
            if self.alpha is None:
                raise ValueError("fixed fusion strategy requires alpha")
            if not 0.0 <= self.alpha <= 1.0:
                raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        elif self.alpha is not None:
            raise ValueError("alpha is only valid with the fixed strategy")
        if not 0.0 <= self.tau_quality <= 1.0:
            raise ValueError(f"tau_quality must be in [0, 1], got {self.tau_quality}")


def clip_score(a, b) -> float:
    """Cosine similarity of two (not necessarily normalized) vectors."""
    va = as_vector(a)
    vb = as_vector(b)
    if va.shape[0] != vb.shape[0]:
        raise DimMismatch(f"dims differ: {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("clip_score is undefined for zero vectors")
    return float(np.dot(va, vb)) / (na * nb)


def quality_gate(pairs: Sequence[tuple], tau_quality: float) -> list[int]:
    """Indices of pairs whose similarity passes the gate (score >= threshold)."""
    return [
        i for i, (synth, text) in enumerate(pairs) if clip_score(synth, text) >= tau_quality
    ]


def fuse_sif(synthetic_emb, text_emb, config: FusionConfig) -> np.ndarray:
    """Mix a synthetic-image embedding with a text embedding.

    forward: w*synthetic + (1-w)*text, reverse swaps the roles; w is the
    fixed alpha or the pair's similarity clamped to [0, 1]. The mix is
    renormalized (an exactly-cancelling mix becomes the unit basis e1).
    """
    synth = as_vector(synthetic_emb)
    text = as_vector(text_emb)
    if synth.shape[0] != text.shape[0]:
        raise DimMismatch(f"dims differ: {synth.shape[0]} vs {text.shape[0]}")
    if config.strategy == STRATEGY_FIXED:
        w = float(config.alpha)
    else:
        w = min(1.0, max(0.0, clip_score(synth, text)))
    if config.strategy == STRATEGY_CLIPSCORE_REVERSE:
        mixed = (1.0 - w) * synth + w * text
    else:
        mixed = w * synth + (1.0 - w) * text
    return normalize_total(mixed)


# --- attention weights -------------------------------------------------------


class AttentionWeights:
    """Projection matrices for retrieval fusion and the prefix mapping network.

    q_proj/k_proj/v_proj are (d, d); map_proj is (out_tokens*d, in_tokens*d)
    and is applied to the flattened token sequence.
    """

    def __init__(self, q_proj, k_proj, v_proj, map_proj):
        self.q_proj = self._matrix(q_proj, "q_proj")
        self.k_proj = self._matrix(k_proj, "k_proj")
        self.v_proj = self._matrix(v_proj, "v_proj")
        self.map_proj = self._matrix(map_proj, "map_proj")
        d = self.q_proj.shape[0]
        for name in ("q_proj", "k_proj", "v_proj"):
            mat = getattr(self, name)
            if mat.shape != (d, d):
                raise DimMismatch(f"{name} must be ({d}, {d}), got {mat.shape}")
        rows, cols = self.map_proj.shape
        if rows % d or cols % d:
            raise DimMismatch(
                f"map_proj shape {self.map_proj.shape} is not a multiple of d={d}"
            )
        self.dim = d
        self.out_tokens = rows // d
        self.in_tokens = cols // d

    @staticmethod
    def _matrix(values, name) -> np.ndarray:
        mat = np.ascontiguousarray(values, dtype=np.float64)
        if mat.ndim != 2:
            raise DimMismatch(f"{name} must be 2-D, got shape {mat.shape}")
        if not np.all(np.isfinite(mat)):
            raise FormatError(f"{name} contains non-finite values")
        mat.flags.writeable = False
        return mat


def xavier_weights(dim: int, prefix_len: int, seed: int = 0) -> AttentionWeights:
    """Seeded Xavier-uniform weights with the square (L*d, L*d) mapping."""
    if dim < 1 or prefix_len < 1:
        raise ValueError("dim and prefix_len must be >= 1")
    rng = np.random.default_rng(seed)

    def draw(rows, cols):
        bound = math.sqrt(6.0 / (rows + cols))
        return rng.uniform(-bound, bound, size=(rows, cols))

    return AttentionWeights(
        q_proj=draw(dim, dim),
        k_proj=draw(dim, dim),
        v_proj=draw(dim, dim),
        map_proj=draw(prefix_len * dim, prefix_len * dim),
    )


# --- prefix features ---------------------------------------------------------


def as_prefix(values) -> np.ndarray:
    """Coerce to a finite (L, d) float64 array with L >= 1."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimMismatch(f"expected (L, d) features, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError("prefix features contain non-finite values")
    return arr


def fuse_retrieval(
    fused_input,
    retrieved_embs,
    weights: AttentionWeights,
    return_attention: bool = False,
):
    """Cross-attend input tokens (queries) over retrieved embeddings (keys and
    values) and add the attention output back onto the input tokens.

    With `return_attention` the (L, n_retrieved) softmax weight rows are
    returned alongside the features.
    """
    tokens = as_prefix(fused_input)
    retrieved = np.atleast_2d(np.asarray(retrieved_embs, dtype=np.float64))
    if retrieved.size == 0:
        raise EmptyRetrieval("fuse_retrieval needs at least one retrieved embedding")
    if tokens.shape[1] != weights.dim:
        raise DimMismatch(
            f"input token dim {tokens.shape[1]} != weights dim {weights.dim}"
        )
    if retrieved.shape[1] != weights.dim:
        raise DimMismatch(
            f"retrieved dim {retrieved.shape[1]} != weights dim {weights.dim}"
        )
    queries = np.ascontiguousarray(tokens @ weights.q_proj.T)
    keys = np.ascontiguousarray(retrieved @ weights.k_proj.T)
    values = np.ascontiguousarray(retrieved @ weights.v_proj.T)
    attn_out, attn = kernels.attention_core(queries, keys, values)
    out = tokens + attn_out
    if return_attention:
        return out, attn
    return out


def map_to_prefix(attn_out, weights: AttentionWeights) -> np.ndarray:
    """Apply the mapping network to the flattened features, producing the
    (out_tokens, d) prefix."""
    tokens = as_prefix(attn_out)
    flat = tokens.reshape(-1)
    if flat.shape[0] != weights.map_proj.shape[1]:
        raise DimMismatch(
            f"flattened features have {flat.shape[0]} values, map_proj expects "
            f"{weights.map_proj.shape[1]}"
        )
    return (weights.map_proj @ flat).reshape(weights.out_tokens, weights.dim)


# --- weights file ------------------------------------------------------------
#
# Binary layout: magic "NESW", u32 LE version=1, u32 LE d, u32 LE L, then
# q_proj, k_proj, v_proj (each d*d float32 LE row-major) and map_proj
# ((L*d)*(L*d) float32 LE row-major).


def write_weights_file(path, weights: AttentionWeights) -> None:
    if weights.in_tokens != weights.out_tokens:
        raise FormatError(
            "weights file stores square mappings only "
            f"(in_tokens={weights.in_tokens}, out_tokens={weights.out_tokens})"
        )
    header = struct.pack(
        "<4sIII", WEIGHTS_MAGIC, WEIGHTS_VERSION, weights.dim, weights.out_tokens
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            for mat in (weights.q_proj, weights.k_proj, weights.v_proj, weights.map_proj):
                fh.write(np.asarray(mat, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_weights_file(path) -> AttentionWeights:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(data) < 16:
        raise FormatError("weights file truncated before header")
    magic, version, dim, prefix_len = struct.unpack_from("<4sIII", data, 0)
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported version {version}")
    if dim < 1 or prefix_len < 1:
        raise FormatError(f"invalid header: d={dim}, L={prefix_len}")
    expected = 16 + 4 * (3 * dim * dim + (prefix_len * dim) ** 2)
    if len(data) != expected:
        raise FormatError(
            f"weights file has {len(data)} bytes, expected {expected}"
        )
    offset = 16

    def take(rows, cols):
        nonlocal offset
        count = rows * cols
        mat = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        return mat.astype(np.float64).reshape(rows, cols)

    q = take(dim, dim)
    k = take(dim, dim)
    v = take(dim, dim)
    m = take(prefix_len * dim, prefix_len * dim)
    try:
        return AttentionWeights(q, k, v, m)
    except (DimMismatch, FormatError) as exc:
        raise FormatError(str(exc)) from exc
