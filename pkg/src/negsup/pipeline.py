"""End-to-end orchestration of the two phase flows.

Training phase: embed the caption, optionally gate/fuse its synthetic-image
embedding, retrieve captions, partition entities against the caption's own
entities, fuse retrieved features, map to prefix tokens, and suppress
negative-entity-aligned tokens. Inference phase: the image embedding drives
retrieval directly, key entities come from zero-shot classification, and
the partition uses embedding similarity.

A small extractive stand-in decoder closes the loop so hallucination
metrics are computable without a neural decoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .datastore import DEFAULT_K, Datastore, RetrievalResult, retrieve
from .embedding import (
    EmbeddingSource,
    embed_entity,
    embed_text,
    l2_normalize,
    normalize_total,
    tokenize,
)
from .entities import (
    EntitySets,
    EntityVocabulary,
    classify_image_entities,
    extract_entities,
    filter_inference,
    filter_training,
)
from .errors import DimMismatch, EmptyRetrieval, FormatError, InvariantError, IoError
from .fusion import (
    AttentionWeights,
    FusionConfig,
    as_prefix,
    clip_score,
    fuse_retrieval,
    fuse_sif,
    map_to_prefix,
    xavier_weights,
)
from .suppression import (
    DEFAULT_LAMBDA,
    STRATEGY_FIXED_THRESHOLD,
    SuppressionConfig,
    SuppressionReport,
    score_negative_attention,
    select_tokens,
    suppress,
)

MODE_TRAINING = "training"
MODE_INFERENCE = "inference"

QUERY_AUTO = "auto"
QUERY_SYNTHETIC = "synthetic"
QUERY_FUSED = "fused"
QUERY_TEXT = "text"

DEFAULT_TOP_M = 5
DEFAULT_PREFIX_LENGTH = 4

EMPTY_PROMPT = "There is something in the image."


class SourceBundle:
    """Embedding sources for the pipeline: one for texts, one for entities.

    They may be the same object; a separate entity source models a distinct
    encoder for entity descriptions.
    """

    def __init__(self, text: EmbeddingSource, entity: EmbeddingSource | None = None):
        self.text = text
        self.entity = entity if entity is not None else text


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = MODE_INFERENCE
    retrieval_k: int = DEFAULT_K
    tau_sim: float = 0.2
    top_m: int = DEFAULT_TOP_M
    prefix_length: int = DEFAULT_PREFIX_LENGTH
    seed: int = 0
    enable_sir: bool = True
    enable_sif: bool = True
    enable_nef: bool = True
    enable_as: bool = True
    fusion: FusionConfig = field(default_factory=FusionConfig)
    suppression: SuppressionConfig | None = None
    training_query: str = QUERY_AUTO

    def __post_init__(self):
        if self.mode not in (MODE_TRAINING, MODE_INFERENCE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.retrieval_k < 1:
            raise ValueError(f"retrieval_k must be >= 1, got {self.retrieval_k}")
        if not -1.0 <= self.tau_sim <= 1.0:
            raise ValueError(f"tau_sim must be in [-1, 1], got {self.tau_sim}")
        if self.top_m < 1:
            raise ValueError(f"top_m must be >= 1, got {self.top_m}")
        if self.prefix_length < 1:
            raise ValueError(f"prefix_length must be >= 1, got {self.prefix_length}")
        if self.training_query not in (QUERY_AUTO, QUERY_SYNTHETIC, QUERY_FUSED, QUERY_TEXT):
            raise ValueError(f"unknown training_query {self.training_query!r}")
        if self.enable_as and self.suppression is None:
            raise ValueError("enable_as requires a suppression config")

    def to_json_dict(self) -> dict:
        data = {
            "mode": self.mode,
            "retrieval_k": self.retrieval_k,
            "tau_sim": self.tau_sim,
            "top_m": self.top_m,
            "prefix_length": self.prefix_length,
            "seed": self.seed,
            "enable_sir": self.enable_sir,
            "enable_sif": self.enable_sif,
            "enable_nef": self.enable_nef,
            "enable_as": self.enable_as,
            "training_query": self.training_query,
            "fusion": {
                "strategy": self.fusion.strategy,
                "alpha": self.fusion.alpha,
                "tau_quality": self.fusion.tau_quality,
            },
        }
        if self.suppression is not None:
            data["suppression"] = {
                "strategy": self.suppression.strategy,
                "tau_neg": self.suppression.tau_neg,
                "lambda": self.suppression.lam,
                "proportion": self.suppression.proportion,
            }
        else:
            data["suppression"] = None
        return data

    @classmethod
    def from_json_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        kwargs = {}
        fusion_data = data.pop("fusion", None)
        if fusion_data is not None:
            kwargs["fusion"] = FusionConfig(
                strategy=fusion_data.get("strategy", FusionConfig().strategy),
                alpha=fusion_data.get("alpha"),
                tau_quality=fusion_data.get("tau_quality", FusionConfig().tau_quality),
            )
        suppression_data = data.pop("suppression", None)
        if suppression_data is not None:
            kwargs["suppression"] = SuppressionConfig(
                strategy=suppression_data.get("strategy", STRATEGY_FIXED_THRESHOLD),
                tau_neg=suppression_data.get("tau_neg"),
                lam=suppression_data.get("lambda", DEFAULT_LAMBDA),
                proportion=suppression_data.get("proportion"),
            )
        for name in (
            "mode",
            "retrieval_k",
            "tau_sim",
            "top_m",
            "prefix_length",
            "seed",
            "enable_sir",
            "enable_sif",
            "enable_nef",
            "enable_as",
            "training_query",
        ):
            if name in data:
                kwargs[name] = data.pop(name)
        if data:
            raise FormatError(f"unknown config keys: {sorted(data)}")
        return cls(**kwargs)


@dataclass(frozen=True)
class GenerationContext:
    """Per-instance handoff record: what a downstream decoder would consume."""

    suppressed_prefix: np.ndarray
    positive_prompt: str
    entity_sets: EntitySets
    retrieval: RetrievalResult
    suppression_report: SuppressionReport

    def check(self) -> None:
        self.entity_sets.check()
        self.suppression_report.check()
        if self.positive_prompt != build_prompt(self.entity_sets.positive):
            raise InvariantError("prompt does not match the positive entity set")
        if len(self.suppression_report.scores) != self.suppressed_prefix.shape[0]:
            raise InvariantError("suppression scores do not cover the prefix")

    def to_json_dict(self) -> dict:
        return {
            "prefix": [[float(x) for x in row] for row in self.suppressed_prefix],
            "prompt": self.positive_prompt,
            "entities": self.entity_sets.to_json_dict(),
            "retrieval": self.retrieval.to_json_dict(),
            "suppression": self.suppression_report.to_json_dict(),
        }


def build_prompt(positive: Iterable[str]) -> str:
    """Hard prompt naming the positive entities, sorted for determinism."""
    terms = sorted(positive)
    if not terms:
        return EMPTY_PROMPT
    return f"There are {', '.join(terms)} in the image."


def default_weights(store: Datastore, config: PipelineConfig) -> AttentionWeights:
    return xavier_weights(store.dim, config.prefix_length, config.seed)


def _candidate_entities(retrieval: RetrievalResult, vocab: EntityVocabulary) -> frozenset[str]:
    found: set[str] = set()
    for hit in retrieval.hits:
        found |= extract_entities(hit.caption, vocab)
    return frozenset(found)


def _nef_bypass(key: frozenset[str], candidates: frozenset[str]) -> EntitySets:
    # filtering disabled: every retrieved entity passes through as positive
    filtered = candidates - key
    return EntitySets(
        key=key,
        candidates=candidates,
        filtered=filtered,
        positive=key | candidates,
        negative=frozenset(),
    )


def _grow_prefix(tokens: np.ndarray, target_len: int) -> np.ndarray:
    """Zero-pad the token sequence up to the mapping network's input length."""
    if tokens.shape[0] > target_len:
        raise DimMismatch(
            f"{tokens.shape[0]} tokens exceed the mapping input length {target_len}"
        )
    if tokens.shape[0] == target_len:
        return tokens
    padded = np.zeros((target_len, tokens.shape[1]))
    padded[: tokens.shape[0]] = tokens
    return padded


def _finish_instance(
    features: np.ndarray,
    retrieval: RetrievalResult,
    entity_sets: EntitySets,
    store: Datastore,
    sources: SourceBundle,
    config: PipelineConfig,
    weights: AttentionWeights,
) -> GenerationContext:
    retrieved_embs = np.stack([store.vector_of(hit.id) for hit in retrieval.hits])
    attn_out = fuse_retrieval(features, retrieved_embs, weights)
    prefix = map_to_prefix(_grow_prefix(attn_out, weights.in_tokens), weights)

    negative_terms = sorted(entity_sets.negative)
    if negative_terms:
        negative_embs = np.stack(
            [embed_entity(sources.entity, term) for term in negative_terms]
        )
    else:
        negative_embs = np.zeros((0, prefix.shape[1]))
    scores = score_negative_attention(prefix, negative_embs)

    if config.enable_as:
        selected = select_tokens(scores, len(negative_terms), config.suppression)
        lam = config.suppression.lam
        suppressed = suppress(prefix, selected, lam)
    else:
        selected = set()
        lam = 1.0
        suppressed = prefix

    report = SuppressionReport(
        scores=tuple(float(s) for s in scores),
        selected=frozenset(selected),
        lambda_applied=lam,
    )
    context = GenerationContext(
        suppressed_prefix=suppressed,
        positive_prompt=build_prompt(entity_sets.positive),
        entity_sets=entity_sets,
        retrieval=retrieval,
        suppression_report=report,
    )
    context.check()
    return context


def _training_query(
    text_emb: np.ndarray,
    synthetic_emb: np.ndarray,
    fused: np.ndarray,
    config: PipelineConfig,
) -> np.ndarray:
    choice = config.training_query
    if choice == QUERY_AUTO:
        if not config.enable_sir:
            return text_emb
        return fused if config.enable_sif else synthetic_emb
    if choice == QUERY_TEXT:
        return text_emb
    if choice == QUERY_SYNTHETIC:
        return synthetic_emb
    return fused


def run_training_instance(
    caption: str,
    synthetic_emb,
    store: Datastore,
    vocab: EntityVocabulary,
    sources: SourceBundle,
    config: PipelineConfig,
    weights: AttentionWeights | None = None,
) -> GenerationContext:
    """Training-phase flow for one caption with its synthetic-image embedding.

    The caller is responsible for quality-gating the synthetic embedding
    (gated instances are skipped upstream, see run_batch).
    """
    if weights is None:
        weights = default_weights(store, config)
    text_emb = embed_text(sources.text, caption)
    synthetic = l2_normalize(synthetic_emb)
    fused = fuse_sif(synthetic, text_emb, config.fusion) if config.enable_sif else text_emb

    query = _training_query(text_emb, synthetic, fused, config)
    retrieval = retrieve(store, query, config.retrieval_k)

    key = frozenset(extract_entities(caption, vocab))
    candidates = _candidate_entities(retrieval, vocab)
    if config.enable_nef:
        entity_sets = filter_training(key, candidates)
    else:
        entity_sets = _nef_bypass(key, candidates)

    return _finish_instance(
        as_prefix(fused), retrieval, entity_sets, store, sources, config, weights
    )


def run_inference_instance(
    image_emb,
    store: Datastore,
    vocab: EntityVocabulary,
    sources: SourceBundle,
    config: PipelineConfig,
    weights: AttentionWeights | None = None,
) -> GenerationContext:
    """Inference-phase flow: the image embedding is the retrieval query, key
    entities come from zero-shot classification, and the entity partition
    uses embedding similarity against tau_sim."""
    if weights is None:
        weights = default_weights(store, config)
    image = l2_normalize(image_emb)
    retrieval = retrieve(store, image, config.retrieval_k)

    key = frozenset(
        classify_image_entities(image, vocab, sources.entity, config.top_m)
    )
    candidates = _candidate_entities(retrieval, vocab)
    if config.enable_nef:
        entity_sets = filter_inference(
            key, candidates, image, sources.entity, config.tau_sim
        )
    else:
        entity_sets = _nef_bypass(key, candidates)

    return _finish_instance(
        as_prefix(image), retrieval, entity_sets, store, sources, config, weights
    )


# --- stand-in decoder ---------------------------------------------------------


def _negative_runs(negative: frozenset[str], vocab: EntityVocabulary | None) -> set[tuple[str, ...]]:
    surfaces = set(negative)
    if vocab is not None:
        surfaces |= {
            surface for surface, target in vocab.synonyms.items() if target in negative
        }
    return {tuple(tokenize(surface)) for surface in surfaces if surface.strip()}


def _mentions_negative(caption: str, runs: set[tuple[str, ...]]) -> bool:
    tokens = tokenize(caption)
    for run in runs:
        span = len(run)
        if any(tuple(tokens[i : i + span]) == run for i in range(len(tokens) - span + 1)):
            return True
    return False


def _delete_negative_tokens(caption: str, runs: set[tuple[str, ...]]) -> str:
    tokens = tokenize(caption)
    lengths = sorted({len(run) for run in runs}, reverse=True)
    kept: list[str] = []
    i = 0
    while i < len(tokens):
        matched = False
        for span in lengths:
            if tuple(tokens[i : i + span]) in runs:
                i += span
                matched = True
                break
        if not matched:
            kept.append(tokens[i])
            i += 1
    return " ".join(kept)


def standin_decode(
    context: GenerationContext,
    store: Datastore,
    vocab: EntityVocabulary | None = None,
) -> str:
    """Extractive stand-in for a neural decoder.

    Prefers the retrieved caption most aligned (by cosine) with the mean
    suppressed prefix token among captions that mention no negative entity;
    if every candidate mentions one, the best candidate is returned with
    the negative surface forms deleted token-wise. Not a language model:
    exists so the evaluation loop closes deterministically.
    """
    if not context.retrieval.hits:
        raise EmptyRetrieval("stand-in decoding needs at least one retrieved caption")
    probe = normalize_total(context.suppressed_prefix.mean(axis=0))
    runs = _negative_runs(context.entity_sets.negative, vocab)

    scored = []
    for hit in context.retrieval.hits:
        score = float(np.dot(probe, store.vector_of(hit.id)))
        scored.append((-score, hit.id, hit.caption))
    scored.sort()

    clean = [item for item in scored if not _mentions_negative(item[2], runs)]
    if clean:
        return clean[0][2]
    return _delete_negative_tokens(scored[0][2], runs)


# --- batch runner ---------------------------------------------------------------


@dataclass(frozen=True)
class BatchResult:
    outputs: list[dict]
    skipped: list[dict]


def _instance_embedding(
    obj: dict,
    key_field: str,
    keys: EmbeddingSource | None,
    sources: SourceBundle,
) -> np.ndarray | None:
    key = obj.get(key_field)
    if key is None:
        return None
    if keys is not None:
        return embed_text(keys, key)
    # no key store supplied: hash the key string as a stand-in vector
    return embed_text(sources.text, key)


def run_batch(
    instances: Sequence[dict],
    store: Datastore,
    vocab: EntityVocabulary,
    sources: SourceBundle,
    config: PipelineConfig,
    weights: AttentionWeights | None = None,
    keys: EmbeddingSource | None = None,
) -> BatchResult:
    """Process parsed JSON instances ({"id", "caption"?, "image_key"?,
    "synthetic_key"?}); training instances whose synthetic embedding fails
    the quality gate are skipped and reported."""
    if weights is None:
        weights = default_weights(store, config)
    outputs: list[dict] = []
    skipped: list[dict] = []
    for obj in instances:
        if "id" not in obj:
            raise FormatError('instance object needs an "id"')
        if config.mode == MODE_TRAINING:
            caption = obj.get("caption")
            if not caption:
                raise FormatError(f'training instance {obj["id"]!r} needs a "caption"')
            text_emb = embed_text(sources.text, caption)
            synthetic = _instance_embedding(obj, "synthetic_key", keys, sources)
            if synthetic is None:
                synthetic = text_emb
            if config.enable_sir or config.enable_sif:
                score = clip_score(synthetic, text_emb)
                if score < config.fusion.tau_quality:
                    skipped.append({"id": obj["id"], "clip_score": score})
                    continue
            context = run_training_instance(
                caption, synthetic, store, vocab, sources, config, weights
            )
        else:
            image = _instance_embedding(obj, "image_key", keys, sources)
            if image is None:
                raise FormatError(f'inference instance {obj["id"]!r} needs an "image_key"')
            context = run_inference_instance(
                image, store, vocab, sources, config, weights
            )
        out = {
            "id": obj["id"],
            "generated": standin_decode(context, store, vocab),
            "retrieved": context.retrieval.captions(),
            "context": context.to_json_dict(),
        }
        if "references" in obj:
            out["references"] = obj["references"]
        elif config.mode == MODE_TRAINING:
            out["references"] = [obj["caption"]]
        outputs.append(out)
    return BatchResult(outputs=outputs, skipped=skipped)


def write_jsonl(path, objects: Iterable[dict]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for obj in objects:
                fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True))
                fh.write("\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_jsonl(path) -> list[dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    objects = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            objects.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {lineno}: invalid JSON: {exc}") from exc
    return objects
