"""Chunking, embedding-based relevance scoring, top-k selection, and masking.

Embeddings are unit-norm float64 numpy vectors. The built-in embedder is a
seeded hashed bag-of-tokens (order-invariant by design); an external encoder
can be plugged in through a small HTTP JSON endpoint. Exact scoring is used
throughout: chunk counts are small enough that nearest-neighbor indexes are
not worth their complexity.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import requests

from .text_corpus import (
    MASK_TOKEN,
    Document,
    QASample,
    sentence_split,
    split_words,
)

logger = logging.getLogger(__name__)

QueryMode = str  # "question" | "answer" | "gold_evidence"
QUERY_MODES = ("question", "answer", "gold_evidence")


class EncoderTransportError(RuntimeError):
    """The external encoder endpoint failed; never silently fall back."""


@dataclass
class Chunk:
    """A contiguous token span of one context document."""

    chunk_id: int
    doc_id: str
    token_span: tuple[int, int]  # half-open word offsets within the document
    text: str

    def __post_init__(self):
        start, end = self.token_span
        if start >= end:
            raise ValueError(f"chunk {self.chunk_id} has empty span {self.token_span}")


@dataclass
class AugmentedSample:
    """A sample whose context was replaced by its selected chunks.

    ``selected_chunk_ids`` keep the original chunk order; the augmented
    context is never longer than the original one.
    """

    original_id: str
    selected_chunk_ids: list[int]
    augmented_context: str
    question: str
    answers: list[str]


def chunk_fixed(tokens: Sequence[str], size: int = 500, overlap: int = 50,
                doc_id: str = "doc", first_chunk_id: int = 0) -> list[Chunk]:
    """Cut a document's word-token sequence into fixed-size overlapping chunks.

    Consecutive chunks start ``size - overlap`` tokens apart; the last chunk
    may be shorter. Every token index is covered by at least one chunk.
    """
    if not 0 <= overlap < size:
        raise ValueError(f"need 0 <= overlap < size, got size={size} overlap={overlap}")
    chunks: list[Chunk] = []
    stride = size - overlap
    start = 0
    n = len(tokens)
    while start < n:
        end = min(start + size, n)
        chunks.append(Chunk(
            chunk_id=first_chunk_id + len(chunks),
            doc_id=doc_id,
            token_span=(start, end),
            text=" ".join(tokens[start:end]),
        ))
        if end == n:
            break
        start += stride
    return chunks


def chunk_sentences(doc: str, doc_id: str = "doc", first_chunk_id: int = 0) -> list[Chunk]:
    """One chunk per sentence, in document order."""
    chunks: list[Chunk] = []
    offset = 0
    for sent in sentence_split(doc):
        n_words = len(split_words(sent))
        if n_words == 0:
            continue
        chunks.append(Chunk(
            chunk_id=first_chunk_id + len(chunks),
            doc_id=doc_id,
            token_span=(offset, offset + n_words),
            text=sent,
        ))
        offset += n_words
    return chunks


class HashEmbedder:
    """Deterministic hashed bag-of-tokens embedder.

    Word counts are hashed into ``dim`` buckets with a fixed-seed blake2b
    hash and the result is L2-normalized. Token order does not matter.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim < 1:
            raise ValueError("embedding dim must be >= 1")
        self.dim = dim
        self._key = seed.to_bytes(8, "little", signed=True)

    def _bucket(self, word: str) -> int:
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8, key=self._key).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        words = split_words(text)
        if not words:
            # Degenerate input: a fixed unit vector keeps the norm invariant total.
            vec[0] = 1.0
            return vec
        for word in words:
            vec[self._bucket(word)] += 1.0
        return vec / np.linalg.norm(vec)

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed(t) for t in texts]


class HttpEncoderClient:
    """Client for an external encoder serving POST /embed.

    Request body ``{"texts": [str]}``, response ``{"vectors": [[float]]}``.
    Any transport or protocol failure raises EncoderTransportError.
    """

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        try:
            resp = requests.post(f"{self.base_url}/embed", json={"texts": list(texts)},
                                 timeout=self.timeout)
            resp.raise_for_status()
            payload = resp.json()
        except requests.RequestException as exc:
            raise EncoderTransportError(f"encoder endpoint {self.base_url} failed: {exc}") from exc
        try:
            vectors = payload["vectors"]
        except (TypeError, KeyError) as exc:
            raise EncoderTransportError(
                f"encoder endpoint {self.base_url} returned malformed payload") from exc
        if len(vectors) != len(texts):
            raise EncoderTransportError(
                f"encoder returned {len(vectors)} vectors for {len(texts)} texts")
        return [np.asarray(v, dtype=np.float64) for v in vectors]

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]


Embedder = Union[HashEmbedder, HttpEncoderClient]

_default_embedder = HashEmbedder()


def embed(text: str, embedder: Optional[Embedder] = None) -> np.ndarray:
    """Encode text with the configured embedder (built-in by default)."""
    return (embedder or _default_embedder).embed(text)


def score(chunk_vec: np.ndarray, query_vec: np.ndarray) -> float:
    """Cosine similarity between two embeddings, in [-1, 1]."""
    a = np.asarray(chunk_vec, dtype=np.float64)
    b = np.asarray(query_vec, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding dims differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cannot score a zero-norm embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def select_top_k(scores: Sequence[float], k: int) -> list[int]:
    """Indices of the k largest scores, ascending, ties broken by lower index."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(scores) == 0:
        raise ValueError("cannot select from empty scores")
    by_score = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(by_score[:min(k, len(scores))])


def mask_augment(chunks: Sequence[Chunk], selected: Iterable[int],
                 mask_token: str = MASK_TOKEN,
                 original: Optional[QASample] = None) -> AugmentedSample:
    """Keep the selected chunks verbatim, collapsing each maximal run of
    unselected chunks to a single mask token."""
    selected_set = set(selected)
    if not selected_set.issubset(range(len(chunks))):
        bad = sorted(selected_set - set(range(len(chunks))))
        raise ValueError(f"selected indices {bad} out of range for {len(chunks)} chunks")
    if not selected_set:
        logger.warning("mask_augment called with empty selection; context is a lone mask token")

    parts: list[str] = []
    in_gap = False
    for i, chunk in enumerate(chunks):
        if i in selected_set:
            parts.append(chunk.text)
            in_gap = False
        elif not in_gap:
            parts.append(mask_token)
            in_gap = True
    if not parts:
        parts = [mask_token]

    return AugmentedSample(
        original_id=original.id if original is not None else "",
        selected_chunk_ids=[chunks[i].chunk_id for i in sorted(selected_set)],
        augmented_context=" ".join(parts),
        question=original.question if original is not None else "",
        answers=list(original.answers) if original is not None else [],
    )


def rerank_documents(sample: QASample, query: str,
                     embedder: Optional[Embedder] = None) -> QASample:
    """Reorder documents from least to most relevant to the query (stable)."""
    if not sample.documents:
        raise ValueError(f"sample {sample.id!r} has no documents")
    emb = embedder or _default_embedder
    query_vec = emb.embed(query)
    doc_vecs = emb.embed_batch([d.text for d in sample.documents])
    scores = [score(v, query_vec) for v in doc_vecs]
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    reordered = QASample(
        id=sample.id,
        question=sample.question,
        answers=list(sample.answers),
        documents=[sample.documents[i] for i in order],
        evidence=list(sample.evidence) if sample.evidence is not None else None,
        options=list(sample.options) if sample.options is not None else None,
    )
    return reordered


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def chunk_sample(sample: QASample, chunker: str = "sentence",
                 size: int = 500, overlap: int = 50) -> list[Chunk]:
    """Chunk every document of a sample, with globally consecutive chunk ids."""
    if chunker not in ("fixed", "sentence"):
        raise ValueError(f"unknown chunker {chunker!r}")
    chunks: list[Chunk] = []
    for doc in sample.documents:
        if chunker == "fixed":
            words = split_words(doc.text)
            if not words:
                continue
            chunks.extend(chunk_fixed(words, size=size, overlap=overlap,
                                      doc_id=doc.doc_id, first_chunk_id=len(chunks)))
        else:
            chunks.extend(chunk_sentences(doc.text, doc_id=doc.doc_id,
                                          first_chunk_id=len(chunks)))
    return chunks


def _gold_evidence_selection(sample: QASample, chunks: Sequence[Chunk]) -> list[int]:
    if not sample.evidence:
        raise ValueError(f"sample {sample.id!r} has no evidence for gold_evidence augmentation")
    needles = [_normalize_ws(e) for e in sample.evidence]
    return [i for i, c in enumerate(chunks)
            if any(needle in _normalize_ws(c.text) for needle in needles)]


def augment_sample(sample: QASample, chunker: str = "sentence",
                   query_mode: QueryMode = "question", k: Optional[int] = None,
                   embedder: Optional[Embedder] = None, size: int = 500,
                   overlap: int = 50, mask_token: str = MASK_TOKEN,
                   masked: bool = True) -> AugmentedSample:
    """Build the retrieval-augmented twin of one sample.

    With ``masked`` off (the masking ablation) the selected chunks are
    concatenated without mask tokens in between.
    """
    if query_mode not in QUERY_MODES:
        raise ValueError(f"unknown query_mode {query_mode!r}")
    if k is None:
        k = 3 if chunker == "fixed" else 20

    chunks = chunk_sample(sample, chunker=chunker, size=size, overlap=overlap)
    if not chunks:
        raise ValueError(f"sample {sample.id!r} produced no chunks")

    if query_mode == "gold_evidence":
        selected = _gold_evidence_selection(sample, chunks)
    else:
        query = sample.question if query_mode == "question" else sample.answers[0]
        emb = embedder or _default_embedder
        query_vec = emb.embed(query)
        chunk_vecs = emb.embed_batch([c.text for c in chunks])
        scores = [score(v, query_vec) for v in chunk_vecs]
        selected = select_top_k(scores, k)

    if masked:
        return mask_augment(chunks, selected, mask_token=mask_token, original=sample)
    context = " ".join(chunks[i].text for i in sorted(set(selected)))
    return AugmentedSample(
        original_id=sample.id,
        selected_chunk_ids=[chunks[i].chunk_id for i in sorted(set(selected))],
        augmented_context=context,
        question=sample.question,
        answers=list(sample.answers),
    )


def augment_dataset(samples: Sequence[QASample], chunker: str = "sentence",
                    query_mode: QueryMode = "question", k: Optional[int] = None,
                    embedder: Optional[Embedder] = None, size: int = 500,
                    overlap: int = 50, mask_token: str = MASK_TOKEN,
                    masked: bool = True) -> list[tuple[QASample, AugmentedSample]]:
    """Pair every sample with its augmented twin, in input order."""
    return [
        (s, augment_sample(s, chunker=chunker, query_mode=query_mode, k=k,
                           embedder=embedder, size=size, overlap=overlap,
                           mask_token=mask_token, masked=masked))
        for s in samples
    ]


def augmented_to_sample(aug: AugmentedSample) -> QASample:
    """View an augmented twin as a single-document QASample for prompting."""
    return QASample(
        id=f"{aug.original_id}/augmented",
        question=aug.question,
        answers=list(aug.answers),
        documents=[Document(doc_id="augmented", text=aug.augmented_context, is_gold=True)],
    )


def write_augmented_jsonl(pairs: Sequence[tuple[QASample, AugmentedSample]],
                          path, query_mode: QueryMode) -> None:
    """Original JSONL schema plus the augmentation fields, one pair per line."""
    import json

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sample, aug in pairs:
            obj = sample.to_dict()
            obj["augmented_context"] = aug.augmented_context
            obj["selected_chunk_ids"] = list(aug.selected_chunk_ids)
            obj["query_mode"] = query_mode
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def read_augmented_jsonl(path) -> list[tuple[QASample, AugmentedSample]]:
    import json

    pairs: list[tuple[QASample, AugmentedSample]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            try:
                sample = QASample.from_dict(obj)
                aug = AugmentedSample(
                    original_id=sample.id,
                    selected_chunk_ids=list(obj["selected_chunk_ids"]),
                    augmented_context=obj["augmented_context"],
                    question=sample.question,
                    answers=list(sample.answers),
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{line_no}: missing augmentation field {exc}") from exc
            pairs.append((sample, aug))
    return pairs
