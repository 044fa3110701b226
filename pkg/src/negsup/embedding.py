"""Embedding sources and vector file IO.

Two interchangeable sources produce L2-normalized float64 vectors in a
shared space: HashSource (seeded feature hashing, fully deterministic and
self-contained) and FileSource (precomputed vectors loaded from disk in
either a binary or a JSON-lines format).

All downstream cosine computations assume normalized vectors, so cosine
similarity reduces to a dot product.
"""

from __future__ import annotations

import json
import re
import struct
from typing import Iterable, Mapping, Union

import numpy as np

from .errors import (
    DimMismatch,
    EmptyInput,
    FormatError,
    IoError,
    UnknownKey,
    ZeroVector,
)

NORM_TOL = 1e-6

ENTITY_TEMPLATE = "A photo of {}"

BINARY_MAGIC = b"NESE"
BINARY_VERSION = 1

FORMAT_BINARY = "binary"
FORMAT_JSONL = "jsonl"

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase `text` and split it on non-alphanumeric boundaries."""
    return _TOKEN_RE.findall(text.lower())


def as_vector(values) -> np.ndarray:
    """Coerce to a finite 1-D float64 array (raises DimMismatch otherwise)."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] < 1:
        raise DimMismatch(f"expected a 1-D vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise FormatError("vector contains non-finite values")
    return vec


def l2_normalize(values) -> np.ndarray:
    """Return `values` scaled to unit Euclidean norm; zero vectors raise."""
    vec = as_vector(values)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ZeroVector("cannot normalize a zero vector")
    return vec / norm


def normalize_total(values) -> np.ndarray:
    """Like l2_normalize, but maps the zero vector to the unit basis e1."""
    vec = as_vector(values)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        out = np.zeros(vec.shape[0])
        out[0] = 1.0
        return out
    return vec / norm


def is_normalized(vec: np.ndarray, tol: float = NORM_TOL) -> bool:
    return abs(float(np.linalg.norm(vec)) - 1.0) <= tol


# --- deterministic 64-bit token hashing -------------------------------------
#
# Pure fixed-width integer arithmetic (FNV-1a over seed bytes + token bytes,
# then a splitmix64-style finalizer), so the embedder is bit-identical across
# runs and platforms.

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def _token_hash(token: str, seed: int) -> int:
    h = _FNV_OFFSET
    for byte in (seed & _U64).to_bytes(8, "little") + token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _U64
    h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _U64
    return h ^ (h >> 31)


class HashSource:
    """Feature-hashing text embedder (signed-bucket trick, L2-normalized).

    Tokens are hashed to one of `dim` buckets with a +/-1 sign; bucket
    counts are accumulated in integers and only then projected to floats,
    so identical (seed, text) always yields an identical vector. Texts
    whose signed counts cancel exactly embed to the unit basis e1.
    """

    kind = "hash"

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = int(dim)
        self.seed = int(seed)
        self._bucket_cache: dict[str, tuple[int, int]] = {}

    def _bucket_sign(self, token: str) -> tuple[int, int]:
        hit = self._bucket_cache.get(token)
        if hit is None:
            h = _token_hash(token, self.seed)
            hit = (h % self.dim, 1 if (h >> 63) & 1 == 0 else -1)
            self._bucket_cache[token] = hit
        return hit

    def embed(self, text: str) -> np.ndarray:
        counts = np.zeros(self.dim, dtype=np.int64)
        for token in tokenize(text):
            bucket, sign = self._bucket_sign(token)
            counts[bucket] += sign
        return normalize_total(counts.astype(np.float64))

    def __repr__(self) -> str:
        return f"HashSource(dim={self.dim}, seed={self.seed})"


class FileSource:
    """Store of precomputed vectors keyed by text; vectors held normalized."""

    kind = "file"

    def __init__(self, vectors: Mapping[str, np.ndarray], dim: int | None = None):
        normalized: dict[str, np.ndarray] = {}
        for key, values in vectors.items():
            vec = l2_normalize(values)
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise DimMismatch(
                    f"key {key!r} has dim {vec.shape[0]}, expected {dim}"
                )
            vec.flags.writeable = False
            normalized[key] = vec
        if dim is None:
            dim = 0  # empty source: holds no vectors, produces no embeddings
        self.dim = int(dim)
        self._vectors = normalized

    def keys(self):
        return self._vectors.keys()

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, key: str) -> bool:
        return key in self._vectors

    def embed(self, text: str) -> np.ndarray:
        try:
            return self._vectors[text]
        except KeyError:
            raise UnknownKey(f"no stored embedding for key {text!r}") from None

    def items(self):
        return self._vectors.items()

    def __repr__(self) -> str:
        return f"FileSource(dim={self.dim}, entries={len(self._vectors)})"


EmbeddingSource = Union[HashSource, FileSource]


def embed_text(source: EmbeddingSource, text: str) -> np.ndarray:
    """Embed a text with the given source. Empty (post-trim) text raises."""
    if not text or not text.strip():
        raise EmptyInput("text is empty")
    return source.embed(text)


def embed_entity(source: EmbeddingSource, entity: str) -> np.ndarray:
    """Embed an entity via its templated description ("A photo of {entity}")."""
    if not entity or not entity.strip():
        raise EmptyInput("entity is empty")
    return embed_text(source, ENTITY_TEMPLATE.format(entity))


# --- embedding files ---------------------------------------------------------
#
# Binary layout: magic "NESE", u32 LE version=1, u32 LE record count, u32 LE
# dimension; then per record: u16 LE key byte-length, key bytes (UTF-8),
# dim float32 LE values. JSONL layout: one {"key": ..., "vector": [...]}
# object per line, UTF-8, LF line endings.


def _detect_format(path) -> str:
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return FORMAT_BINARY if head == BINARY_MAGIC else FORMAT_JSONL


def load_embedding_file(path, format: str | None = None) -> FileSource:
    """Load a vector file into a FileSource (vectors renormalized on load)."""
    if format is None:
        format = _detect_format(path)
    if format == FORMAT_BINARY:
        entries, dim = _read_binary(path)
    elif format == FORMAT_JSONL:
        entries, dim = _read_jsonl(path)
    else:
        raise ValueError(f"unknown embedding file format {format!r}")
    try:
        return FileSource(entries, dim=dim)
    except (DimMismatch, ZeroVector) as exc:
        raise FormatError(str(exc)) from exc


def write_embedding_file(
    path,
    entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
    format: str = FORMAT_BINARY,
    dim: int | None = None,
) -> None:
    """Write (key, vector) entries to `path` in the binary or JSONL layout.

    `dim` is only needed to write an empty binary file (the header carries
    the dimension); otherwise it is inferred and cross-checked.
    """
    pairs = list(entries.items() if isinstance(entries, Mapping) else entries)
    for key, values in pairs:
        vec = as_vector(values)
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise DimMismatch(f"key {key!r} has dim {vec.shape[0]}, expected {dim}")
    if format == FORMAT_BINARY:
        if dim is None:
            raise ValueError("dim is required to write an empty binary file")
        _write_binary(path, pairs, dim)
    elif format == FORMAT_JSONL:
        _write_jsonl(path, pairs)
    else:
        raise ValueError(f"unknown embedding file format {format!r}")


def _read_binary(path) -> tuple[dict[str, np.ndarray], int]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(data) < 16:
        raise FormatError("binary embedding file truncated before header")
    magic, version, count, dim = struct.unpack_from("<4sIII", data, 0)
    if magic != BINARY_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise FormatError(f"unsupported version {version}")
    offset = 16
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(data):
            raise FormatError("truncated record header")
        (key_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        end = offset + key_len
        if end > len(data):
            raise FormatError("truncated record key")
        try:
            key = data[offset:end].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"record key is not valid UTF-8: {exc}") from exc
        offset = end
        end = offset + 4 * dim
        if end > len(data):
            raise FormatError(f"truncated vector for key {key!r}")
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).astype(
            np.float64
        )
        offset = end
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"non-finite value in vector for key {key!r}")
        if key in entries:
            raise FormatError(f"duplicate key {key!r}")
        entries[key] = vec
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after records")
    return entries, int(dim)


def _write_binary(path, pairs, dim: int) -> None:
    chunks = [struct.pack("<4sIII", BINARY_MAGIC, BINARY_VERSION, len(pairs), dim)]
    for key, values in pairs:
        raw = key.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"key too long for u16 length: {key[:32]!r}...")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(np.asarray(values, dtype="<f4").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def _read_jsonl(path) -> tuple[dict[str, np.ndarray], int | None]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    entries: dict[str, np.ndarray] = {}
    dim: int | None = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict) or "key" not in obj or "vector" not in obj:
            raise FormatError(f'line {lineno}: expected {{"key", "vector"}} object')
        key = obj["key"]
        if not isinstance(key, str):
            raise FormatError(f"line {lineno}: key must be a string")
        try:
            vec = as_vector(obj["vector"])
        except (DimMismatch, FormatError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise FormatError(
                f"line {lineno}: dim {vec.shape[0]} != expected {dim}"
            )
        if key in entries:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = vec
    return entries, dim


def _write_jsonl(path, pairs) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for key, values in pairs:
                vec = [float(x) for x in np.asarray(values, dtype=np.float64)]
                fh.write(json.dumps({"key": key, "vector": vec}, ensure_ascii=False))
                fh.write("\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc
