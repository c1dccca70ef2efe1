"""BM25 retrieval, knowledge base variants, and grounded answer generation.

All retrieval is local and lexical. The index stores documents plus derived
postings; scoring is standard BM25 (k1=1.2, b=0.75) with ties broken by
doc_id so rankings are reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Ticket, ticket_full_text
from .discovery import Category
from .fsutil import atomic_write_text, read_json
from .gateway import ChatRequest, Gateway, GatewayError
from .prompts import ParseError, render
from .synthesis import (
    KnowledgeArticle,
    SynthesisConfig,
    SynthesisError,
    SynthesisFailure,
    synthesize_batched,
    synthesize_standard,
)

logger = logging.getLogger(__name__)

_TOKEN_SPLIT_RE = re.compile(r"[^0-9a-z]+")

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_TOP_K = 10
MULTI_LEVEL_K_EACH = 5


class RagError(Exception):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics, drop tokens under 2 chars."""
    return [t for t in _TOKEN_SPLIT_RE.split(text.lower()) if len(t) >= 2]


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str


@dataclass(frozen=True)
class RetrievedDoc:
    doc_id: str
    score: float
    kb: str | None = None


@dataclass
class SearchIndex:
    documents: dict[str, Document]
    postings: dict[str, dict[str, int]]
    doc_lengths: dict[str, int]
    average_doc_length: float
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B


@dataclass(frozen=True)
class Answer:
    query: str
    retrieved: tuple[RetrievedDoc, ...]
    answer_text: str
    kb_label: str


def _doc_tokens(doc: Document) -> list[str]:
    return tokenize(doc.title) + tokenize(doc.body)


def build_index(documents: list[Document], k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> SearchIndex:
    if k1 < 0 or not 0 <= b <= 1:
        raise RagError(f"BM25 parameters out of range: k1={k1}, b={b}")
    docs: dict[str, Document] = {}
    postings: dict[str, dict[str, int]] = {}
    doc_lengths: dict[str, int] = {}
    for doc in documents:
        if doc.doc_id in docs:
            raise RagError(f"duplicate doc_id: {doc.doc_id!r}")
        docs[doc.doc_id] = doc
        tokens = _doc_tokens(doc)
        doc_lengths[doc.doc_id] = len(tokens)
        for token in tokens:
            postings.setdefault(token, {})
            postings[token][doc.doc_id] = postings[token].get(doc.doc_id, 0) + 1
    average = (sum(doc_lengths.values()) / len(doc_lengths)) if doc_lengths else 0.0
    return SearchIndex(
        documents=docs,
        postings=postings,
        doc_lengths=doc_lengths,
        average_doc_length=average,
        k1=k1,
        b=b,
    )


def retrieve(index: SearchIndex, query: str, k: int = DEFAULT_TOP_K) -> list[RetrievedDoc]:
    """Top-k documents by BM25 score; zero-score documents are excluded."""
    if k < 1:
        raise RagError(f"k must be at least 1, got {k}")
    n = len(index.documents)
    if n == 0:
        return []
    scores: dict[str, float] = {}
    for term in sorted(set(tokenize(query))):
        doc_freqs = index.postings.get(term)
        if not doc_freqs:
            continue
        idf = math.log(1 + (n - len(doc_freqs) + 0.5) / (len(doc_freqs) + 0.5))
        for doc_id, freq in doc_freqs.items():
            length_norm = 1 - index.b + index.b * index.doc_lengths[doc_id] / index.average_doc_length
            tf = freq * (index.k1 + 1) / (freq + index.k1 * length_norm)
            scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf
    ranked = sorted(
        ((doc_id, score) for doc_id, score in scores.items() if score > 0.0),
        key=lambda pair: (-pair[1], pair[0]),
    )
    return [RetrievedDoc(doc_id=doc_id, score=score) for doc_id, score in ranked[:k]]


def save_index(index: SearchIndex, path: str | Path) -> None:
    """Persist documents and parameters; postings are rebuilt on load."""
    payload = {
        "documents": [
            {"doc_id": d.doc_id, "title": d.title, "body": d.body}
            for d in sorted(index.documents.values(), key=lambda d: d.doc_id)
        ],
        "k1": index.k1,
        "b": index.b,
    }
    atomic_write_text(Path(path), json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_index(path: str | Path) -> SearchIndex:
    payload = read_json(path)
    docs = [Document(doc_id=d["doc_id"], title=d["title"], body=d["body"]) for d in payload["documents"]]
    return build_index(docs, k1=payload.get("k1", DEFAULT_K1), b=payload.get("b", DEFAULT_B))


def _articles_block(docs: list[tuple[Document, float, str | None]]) -> str:
    parts = []
    for doc, _score, _kb in docs:
        parts.append(f"## {doc.title}\n{doc.body}")
    return "\n\n".join(parts)


def generate_answer(
    gateway: Gateway,
    query: str,
    docs: list[tuple[Document, float, str | None]],
    model_id: str,
    kb_label: str,
) -> Answer:
    """One grounded generation call over already-retrieved documents.

    Works with an empty document list; the model is then instructed by the
    template itself to say the articles do not cover the question.
    """
    prompt = render("answer_generation", {"articles": _articles_block(docs), "question": query})
    response = gateway.complete(ChatRequest(model_id=model_id, user_text=prompt))
    retrieved = tuple(
        RetrievedDoc(doc_id=doc.doc_id, score=score, kb=kb) for doc, score, kb in docs
    )
    return Answer(query=query, retrieved=retrieved, answer_text=response.text, kb_label=kb_label)


def answer_query(
    gateway: Gateway,
    index: SearchIndex,
    query: str,
    model_id: str,
    kb_label: str,
    k: int = DEFAULT_TOP_K,
) -> Answer:
    hits = retrieve(index, query, k)
    docs = [(index.documents[h.doc_id], h.score, kb_label) for h in hits]
    return generate_answer(gateway, query, docs, model_id, kb_label)


def multi_level_answer(
    gateway: Gateway,
    query: str,
    index_a: SearchIndex,
    index_b: SearchIndex,
    label_a: str,
    label_b: str,
    model_id: str,
    k_each: int = MULTI_LEVEL_K_EACH,
) -> Answer:
    """Answer from two KBs at once: top-k from each, A's block before B's.

    No deduplication happens across the two blocks; the KBs have disjoint
    document id spaces and an overlap in content is fine to show the model
    twice.
    """
    hits_a = retrieve(index_a, query, k_each)
    hits_b = retrieve(index_b, query, k_each)
    docs = [(index_a.documents[h.doc_id], h.score, label_a) for h in hits_a]
    docs += [(index_b.documents[h.doc_id], h.score, label_b) for h in hits_b]
    return generate_answer(gateway, query, docs, model_id, f"{label_a}+{label_b}")


def documents_from_articles(articles: list[KnowledgeArticle]) -> list[Document]:
    return [Document(doc_id=a.id, title=a.title, body=a.body) for a in articles]


def build_raw_kb(tickets: list[Ticket]) -> list[Document]:
    """Baseline KB: every cleaned ticket verbatim, comments included."""
    return [
        Document(doc_id=t.id, title=t.title, body=ticket_full_text(t)) for t in tickets
    ]


def build_per_ticket_kb(
    gateway: Gateway,
    tickets: list[Ticket],
    config: SynthesisConfig,
) -> tuple[list[Document], list[SynthesisFailure]]:
    """Summarize each ticket into its own article-document."""
    ordered = sorted(tickets, key=lambda t: t.id)
    results: dict[str, Document] = {}
    failures: list[SynthesisFailure] = []

    def work(ticket: Ticket) -> Document:
        pseudo = Category(
            id=f"ticket-{ticket.id}",
            name=ticket.title,
            description=ticket.description[:200],
        )
        article = synthesize_standard(gateway, pseudo, [ticket], config)
        return Document(doc_id=f"pt-{ticket.id}", title=article.title, body=article.body)

    with ThreadPoolExecutor(max_workers=config.max_parallel) as pool:
        futures = {pool.submit(work, t): t for t in ordered}
        for future, ticket in futures.items():
            try:
                doc = future.result()
                results[ticket.id] = doc
            except (GatewayError, ParseError, SynthesisError) as exc:
                logger.warning("per-ticket synthesis failed for %s: %s", ticket.id, exc)
                failures.append(SynthesisFailure(category_id=f"ticket-{ticket.id}", error=str(exc)))
    return [results[t.id] for t in ordered if t.id in results], failures


class HashedTfEmbedder:
    """Hashed term-frequency embedding, L2-normalized, no fitting step."""

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim

    def _slot(self, token: str) -> int:
        digest = hashlib.sha1(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "big") % self.dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in tokenize(text):
            vec[self._slot(token)] += 1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


class GreedyCosineClusterer:
    """Seeded agglomeration: densest unassigned point absorbs its neighbors.

    Repeatedly seeds a cluster from the unassigned vector with the most
    unassigned neighbors at or above the cosine threshold, then absorbs all
    of them. Points that never gain a neighbor are labeled -1 (noise).
    """

    def __init__(self, threshold: float = 0.5):
        if not 0 <= threshold <= 1:
            raise ValueError("threshold must be in [0, 1]")
        self.threshold = threshold

    def cluster(self, vectors: np.ndarray) -> list[int]:
        n = len(vectors)
        if n == 0:
            return []
        sims = np.asarray(vectors) @ np.asarray(vectors).T
        labels = [-1] * n
        unassigned = set(range(n))
        next_label = 0
        while unassigned:
            best_seed, best_count = -1, 0
            for i in sorted(unassigned):
                count = sum(
                    1 for j in unassigned if j != i and sims[i, j] >= self.threshold
                )
                if count > best_count:
                    best_seed, best_count = i, count
            if best_count == 0:
                break
            members = {best_seed} | {
                j for j in unassigned if j != best_seed and sims[best_seed, j] >= self.threshold
            }
            for j in members:
                labels[j] = next_label
            next_label += 1
            unassigned -= members
        return labels


def build_cluster_kb(
    gateway: Gateway,
    tickets: list[Ticket],
    config: SynthesisConfig,
    embedder=None,
    clusterer=None,
) -> tuple[list[Document], dict, list[SynthesisFailure]]:
    """Cluster tickets by embedding similarity and synthesize per cluster.

    Noise tickets are excluded from the KB; the stats dict records how much
    of the corpus actually clustered. An entirely unclusterable corpus yields
    an empty KB with a warning rather than an error.
    """
    embedder = embedder if embedder is not None else HashedTfEmbedder()
    clusterer = clusterer if clusterer is not None else GreedyCosineClusterer()
    ordered = sorted(tickets, key=lambda t: t.id)
    vectors = np.stack([embedder.embed(ticket_full_text(t)) for t in ordered])
    labels = clusterer.cluster(vectors)

    clusters: dict[int, list[Ticket]] = {}
    for ticket, label in zip(ordered, labels):
        if label >= 0:
            clusters.setdefault(label, []).append(ticket)
    noise_count = sum(1 for label in labels if label < 0)
    stats = {
        "cluster_count": len(clusters),
        "noise_count": noise_count,
        "clustered_fraction": (len(ordered) - noise_count) / len(ordered) if ordered else 0.0,
    }
    if not clusters:
        logger.warning("no ticket pair cleared the similarity threshold; cluster KB is empty")
        return [], stats, []

    documents: list[Document] = []
    failures: list[SynthesisFailure] = []
    for label in sorted(clusters):
        members = clusters[label]
        pseudo = Category(
            id=f"cluster-{label}",
            name=f"Ticket Cluster {label}",
            description=f"{len(members)} tickets grouped by content similarity",
        )
        try:
            if len(members) < config.thresholds.standard_max:
                article = synthesize_standard(gateway, pseudo, members, config)
            else:
                article = synthesize_batched(gateway, pseudo, members, config)
            documents.append(
                Document(doc_id=f"cluster-{label}", title=article.title, body=article.body)
            )
        except (GatewayError, ParseError, SynthesisError) as exc:
            logger.warning("cluster %d synthesis failed: %s", label, exc)
            failures.append(SynthesisFailure(category_id=pseudo.id, error=str(exc)))
    return documents, stats, failures
