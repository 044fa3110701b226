"""Immutable caption datastore with exact top-k cosine retrieval.

Records are held row-sorted by id so that score ties resolve to ascending
id regardless of insertion order. Retrieval is an exact full scan (scores
via the kernel backend, partial top-k selection in numpy); brute_force_topk
is the independent oracle (per-record dots, full stable sort).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .embedding import (
    FORMAT_BINARY,
    l2_normalize,
    load_embedding_file,
    write_embedding_file,
)
from .errors import (
    DimMismatch,
    DuplicateId,
    EmptyInput,
    FormatError,
    IoError,
)

DEFAULT_K = 9

EMBEDDINGS_FILENAME = "embeddings.nese"
CAPTIONS_FILENAME = "captions.tsv"


@dataclass(frozen=True)
class Hit:
    id: str
    caption: str
    score: float


@dataclass(frozen=True)
class RetrievalResult:
    """Ordered retrieval hits: scores non-increasing, ties by ascending id."""

    hits: tuple[Hit, ...]

    def ids(self) -> list[str]:
        return [h.id for h in self.hits]

    def captions(self) -> list[str]:
        return [h.caption for h in self.hits]

    def scores(self) -> list[float]:
        return [h.score for h in self.hits]

    def __len__(self) -> int:
        return len(self.hits)

    def to_json_dict(self) -> dict:
        return {
            "hits": [
                {"id": h.id, "caption": h.caption, "score": h.score}
                for h in self.hits
            ]
        }


class Datastore:
    """Immutable (id, caption, normalized embedding) collection."""

    def __init__(self, ids, captions, matrix):
        self.ids = tuple(ids)
        self.captions = tuple(captions)
        self.matrix = matrix
        self.matrix.flags.writeable = False
        self._row_of = {rid: i for i, rid in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, rid: str) -> bool:
        return rid in self._row_of

    def caption_of(self, rid: str) -> str:
        return self.captions[self._row_of[rid]]

    def vector_of(self, rid: str) -> np.ndarray:
        return self.matrix[self._row_of[rid]]

    def records(self) -> Iterable[tuple[str, str, np.ndarray]]:
        for i, rid in enumerate(self.ids):
            yield rid, self.captions[i], self.matrix[i]


def build_datastore(records: Sequence[tuple[str, str, np.ndarray]]) -> Datastore:
    """Build a retrieval-ready datastore from (id, caption, embedding) triples."""
    rows = sorted(records, key=lambda rec: rec[0])
    if not rows:
        raise EmptyInput("cannot build a datastore from zero records")
    dim = None
    seen = set()
    vectors = []
    for rid, _, values in rows:
        if rid in seen:
            raise DuplicateId(f"duplicate record id {rid!r}")
        seen.add(rid)
        vec = l2_normalize(values)
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise DimMismatch(f"record {rid!r} has dim {vec.shape[0]}, expected {dim}")
        vectors.append(vec)
    matrix = np.ascontiguousarray(np.stack(vectors))
    return Datastore([r[0] for r in rows], [r[1] for r in rows], matrix)


def _topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best scores, ordered by (score desc, index asc)."""
    n = scores.shape[0]
    if k < n:
        part = np.argpartition(-scores, k - 1)[:k]
        threshold = scores[part].min()
        cand = np.flatnonzero(scores >= threshold)
    else:
        cand = np.arange(n)
    order = cand[np.lexsort((cand, -scores[cand]))]
    return order[: min(k, n)]


def retrieve(store: Datastore, query, k: int = DEFAULT_K) -> RetrievalResult:
    """Exact top-k records by cosine similarity to `query`."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    vec = l2_normalize(query)
    if vec.shape[0] != store.dim:
        raise DimMismatch(f"query dim {vec.shape[0]} != store dim {store.dim}")
    scores = kernels.dot_scores(store.matrix, np.ascontiguousarray(vec))
    rows = _topk_rows(scores, k)
    return RetrievalResult(
        tuple(
            Hit(store.ids[i], store.captions[i], float(scores[i])) for i in rows
        )
    )


def brute_force_topk(
    records: Sequence[tuple[str, str, np.ndarray]], query, k: int
) -> RetrievalResult:
    """Test oracle: exhaustive per-record scan plus a full stable sort."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    vec = l2_normalize(query)
    scored = []
    for rid, caption, values in records:
        row = l2_normalize(values)
        if row.shape[0] != vec.shape[0]:
            raise DimMismatch(
                f"record {rid!r} has dim {row.shape[0]}, query has {vec.shape[0]}"
            )
        scored.append((rid, caption, float(np.dot(row, vec))))
    scored.sort(key=lambda item: (-item[2], item[0]))
    return RetrievalResult(tuple(Hit(*item) for item in scored[:k]))


# --- persistence -------------------------------------------------------------


def save_datastore(store: Datastore, directory) -> None:
    """Persist a datastore as an embeddings file plus an id<TAB>caption file."""
    os.makedirs(directory, exist_ok=True)
    for rid, caption in zip(store.ids, store.captions):
        if "\t" in caption or "\n" in caption or "\t" in rid or "\n" in rid:
            raise FormatError(
                f"record {rid!r}: ids and captions must not contain tabs or newlines"
            )
    write_embedding_file(
        os.path.join(directory, EMBEDDINGS_FILENAME),
        zip(store.ids, store.matrix),
        format=FORMAT_BINARY,
        dim=store.dim,
    )
    try:
        path = os.path.join(directory, CAPTIONS_FILENAME)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rid, caption in zip(store.ids, store.captions):
                fh.write(f"{rid}\t{caption}\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_caption_file(path) -> dict[str, str]:
    """Read an id<TAB>caption file into an id -> caption mapping."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    captions: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise FormatError(f"line {lineno}: expected 'id<TAB>caption'")
        rid, caption = line.split("\t", 1)
        if rid in captions:
            raise DuplicateId(f"line {lineno}: duplicate id {rid!r}")
        captions[rid] = caption
    return captions


def ingest_datastore(captions_path, embeddings_path, format=None) -> Datastore:
    """Build a datastore from a caption file and a parallel embedding file."""
    captions = read_caption_file(captions_path)
    source = load_embedding_file(embeddings_path, format=format)
    missing = sorted(set(captions) - set(source.keys()))
    extra = sorted(set(source.keys()) - set(captions))
    if missing:
        raise FormatError(f"ids with captions but no embedding: {missing[:5]}")
    if extra:
        raise FormatError(f"ids with embeddings but no caption: {extra[:5]}")
    return build_datastore(
        [(rid, captions[rid], vec) for rid, vec in source.items()]
    )


def load_datastore(directory) -> Datastore:
    """Load a datastore persisted by save_datastore."""
    return ingest_datastore(
        os.path.join(directory, CAPTIONS_FILENAME),
        os.path.join(directory, EMBEDDINGS_FILENAME),
    )
