"""Entity extraction, zero-shot entity classification, and entity filtering.

Extraction is vocabulary-driven whole-token matching: surface forms
(canonical terms plus synonyms) match contiguous token runs, longest run
first, and map to their canonical term. Filtering partitions candidate
entities into positive/negative sets, either against ground-truth key
entities (training) or by embedding similarity to the image (inference).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .embedding import EmbeddingSource, embed_entity, l2_normalize, tokenize
from .errors import DimMismatch, EmptyInput, FormatError, InvariantError, IoError


class EntityVocabulary:
    """Canonical entity terms plus a surface-form -> canonical synonym map."""

    def __init__(self, canonical: Iterable[str], synonyms: Mapping[str, str] | None = None):
        self.canonical = frozenset(t.strip().lower() for t in canonical if t.strip())
        table = {term: term for term in self.canonical}
        for surface, target in (synonyms or {}).items():
            surface = surface.strip().lower()
            target = target.strip().lower()
            if target not in self.canonical:
                raise FormatError(
                    f"synonym {surface!r} maps to unknown canonical term {target!r}"
                )
            if table.get(surface, target) != target:
                raise FormatError(f"surface form {surface!r} maps to two canonicals")
            table[surface] = target
        self.synonyms = table
        # token-run lookup used by extract_entities; longest run first
        self._runs: dict[tuple[str, ...], str] = {}
        for surface, target in table.items():
            run = tuple(tokenize(surface))
            if run:
                self._runs[run] = target
        self._max_run = max((len(r) for r in self._runs), default=0)

    def __len__(self) -> int:
        return len(self.canonical)

    def canonicalize(self, term: str) -> str:
        """Map a surface form to its canonical term (unknown terms pass through)."""
        term = term.strip().lower()
        return self.synonyms.get(term, term)

    def __repr__(self) -> str:
        return f"EntityVocabulary({len(self.canonical)} terms, {len(self.synonyms)} surface forms)"


@dataclass(frozen=True)
class EntitySets:
    """The key/candidate/filtered/positive/negative partition for one input."""

    key: frozenset[str]
    candidates: frozenset[str]
    filtered: frozenset[str]
    positive: frozenset[str]
    negative: frozenset[str]

    def check(self) -> None:
        if self.filtered != self.candidates - self.key:
            raise InvariantError("filtered != candidates \\ key")
        if not self.positive >= self.key:
            raise InvariantError("positive does not contain key")
        if self.positive & self.negative:
            raise InvariantError("positive and negative overlap")
        if not (self.positive | self.negative) >= (self.candidates | self.key):
            raise InvariantError("positive + negative do not cover candidates + key")
        if not self.negative <= self.filtered:
            raise InvariantError("negative is not a subset of filtered")

    def to_json_dict(self) -> dict:
        return {
            "key": sorted(self.key),
            "candidates": sorted(self.candidates),
            "filtered": sorted(self.filtered),
            "positive": sorted(self.positive),
            "negative": sorted(self.negative),
        }


def extract_entities(caption: str, vocab: EntityVocabulary) -> set[str]:
    """Canonical terms whose surface forms occur in `caption` as whole tokens.

    Multi-word surface forms match contiguous token runs; the scan is
    greedy longest-match-first, so "hot dog" never fires for "dog".
    """
    if not vocab.canonical:
        raise EmptyInput("vocabulary is empty")
    tokens = tokenize(caption)
    found: set[str] = set()
    i = 0
    n = len(tokens)
    while i < n:
        matched = False
        for run_len in range(min(vocab._max_run, n - i), 0, -1):
            target = vocab._runs.get(tuple(tokens[i : i + run_len]))
            if target is not None:
                found.add(target)
                i += run_len
                matched = True
                break
        if not matched:
            i += 1
    return found


def classify_image_entities(
    image_emb,
    vocab: EntityVocabulary,
    source: EmbeddingSource,
    top_m: int,
) -> list[str]:
    """Vocabulary terms ranked by cosine to the image embedding, best first.

    Each term scores via its templated description embedding; ties break
    by ascending term. Returns the top min(top_m, |vocab|) terms.
    """
    if top_m < 1:
        raise ValueError(f"top_m must be >= 1, got {top_m}")
    if not vocab.canonical:
        raise EmptyInput("vocabulary is empty")
    img = l2_normalize(image_emb)
    scored = []
    for term in sorted(vocab.canonical):
        vec = embed_entity(source, term)
        if vec.shape[0] != img.shape[0]:
            raise DimMismatch(
                f"entity dim {vec.shape[0]} != image dim {img.shape[0]}"
            )
        scored.append((-float(np.dot(vec, img)), term))
    scored.sort()
    return [term for _, term in scored[:top_m]]


def filter_training(key: Iterable[str], candidates: Iterable[str]) -> EntitySets:
    """Training-mode partition: candidates absent from the key are negative."""
    key = frozenset(key)
    candidates = frozenset(candidates)
    filtered = candidates - key
    return EntitySets(
        key=key,
        candidates=candidates,
        filtered=filtered,
        positive=key,
        negative=filtered,
    )


def filter_inference(
    key: Iterable[str],
    candidates: Iterable[str],
    image_emb,
    source: EmbeddingSource,
    tau_sim: float = 0.2,
) -> EntitySets:
    """Inference-mode partition: filtered entities whose embedding similarity
    to the image strictly exceeds tau_sim join the positive set; the rest
    are negative.
    """
    if not (-1.0 <= tau_sim <= 1.0) or math.isnan(tau_sim):
        raise ValueError(f"tau_sim must be in [-1, 1], got {tau_sim}")
    key = frozenset(key)
    candidates = frozenset(candidates)
    filtered = candidates - key
    img = l2_normalize(image_emb)
    passed = set()
    for term in filtered:
        vec = embed_entity(source, term)
        if vec.shape[0] != img.shape[0]:
            raise DimMismatch(
                f"entity dim {vec.shape[0]} != image dim {img.shape[0]}"
            )
        if float(np.dot(vec, img)) > tau_sim:
            passed.add(term)
    positive = key | passed
    return EntitySets(
        key=key,
        candidates=candidates,
        filtered=filtered,
        positive=frozenset(positive),
        negative=filtered - positive,
    )


# --- vocabulary files --------------------------------------------------------
#
# Vocabulary file: one canonical term per line. Synonym file: TSV lines
# "canonical<TAB>syn1,syn2,...". Blank lines and "#" comments are ignored
# in both.


def _content_lines(path) -> list[str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return [ln.strip() for ln in lines if ln.strip() and not ln.strip().startswith("#")]


def load_vocabulary(vocab_path, synonyms_path=None) -> EntityVocabulary:
    canonical = _content_lines(vocab_path)
    synonyms: dict[str, str] = {}
    if synonyms_path is not None:
        for line in _content_lines(synonyms_path):
            if "\t" not in line:
                raise FormatError(
                    f"synonym line {line!r}: expected 'canonical<TAB>syn1,syn2,...'"
                )
            target, rest = line.split("\t", 1)
            for surface in rest.split(","):
                if surface.strip():
                    synonyms[surface.strip()] = target.strip()
    return EntityVocabulary(canonical, synonyms)
