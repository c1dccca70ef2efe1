"""BM25 retrieval, grounded answering, and the KB builders."""

import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbforge.corpus import Ticket, ticket_full_text
from kbforge.gateway import Gateway, GatewayConfig, MockBackend
from kbforge.rag import (
    Document,
    GreedyCosineClusterer,
    HashedTfEmbedder,
    RagError,
    answer_query,
    build_cluster_kb,
    build_index,
    build_per_ticket_kb,
    build_raw_kb,
    documents_from_articles,
    generate_answer,
    load_index,
    multi_level_answer,
    retrieve,
    save_index,
    tokenize,
)
from kbforge.synthesis import KnowledgeArticle, SynthesisConfig

UTC = timezone.utc


def make_gateway(rules, retries=0):
    backend = MockBackend()
    for pattern, response, *rest in rules:
        backend.register_rule(pattern, response, *(rest or [0]))
    return Gateway(backend, GatewayConfig(requests_per_minute=100000, max_retries=retries))


# ---------------------------------------------------------------------------
# tokenizer


def test_tokenize_lowercases_splits_and_drops_short():
    assert tokenize("Dock-Gate 4: re-SYNC a printer!") == [
        "dock", "gate", "re", "sync", "printer",
    ]
    assert tokenize("") == []
    assert tokenize("a b c") == []


# ---------------------------------------------------------------------------
# index construction


def test_build_index_counts_and_lengths():
    docs = [
        Document(doc_id="a", title="dock gate", body="dock dock"),
        Document(doc_id="b", title="", body="printer"),
    ]
    index = build_index(docs)
    assert index.postings["dock"] == {"a": 3}
    assert index.postings["gate"] == {"a": 1}
    assert index.doc_lengths == {"a": 4, "b": 1}
    assert index.average_doc_length == 2.5


def test_build_index_rejects_duplicate_ids():
    doc = Document(doc_id="a", title="t", body="b1")
    with pytest.raises(RagError, match="duplicate doc_id"):
        build_index([doc, Document(doc_id="a", title="t", body="b2")])


@pytest.mark.parametrize("kw", [dict(k1=-0.1), dict(b=-0.1), dict(b=1.1)])
def test_build_index_validates_parameters(kw):
    with pytest.raises(RagError, match="out of range"):
        build_index([], **kw)


# ---------------------------------------------------------------------------
# retrieval


def test_retrieve_two_doc_fixture_matches_hand_computation():
    docs = [
        Document(doc_id="a", title="", body="shipment delayed carrier"),
        Document(doc_id="b", title="", body="inventory count mismatch shipment"),
    ]
    hits = retrieve(build_index(docs), "shipment delayed", k=10)
    assert [h.doc_id for h in hits] == ["a", "b"]
    assert hits[0].score == pytest.approx(0.929808176224142, abs=1e-9)
    assert hits[1].score == pytest.approx(0.17225472236974856, abs=1e-9)


def test_retrieve_k_validated():
    with pytest.raises(RagError, match="k must be"):
        retrieve(build_index([]), "q", k=0)


def test_retrieve_empty_index():
    assert retrieve(build_index([]), "anything") == []


def test_retrieve_excludes_zero_scores():
    docs = [Document(doc_id="a", title="dock", body="gate")]
    assert retrieve(build_index(docs), "printer toner") == []


def test_retrieve_ties_break_by_doc_id():
    docs = [
        Document(doc_id="b", title="dock", body=""),
        Document(doc_id="a", title="dock", body=""),
        Document(doc_id="c", title="dock", body=""),
    ]
    hits = retrieve(build_index(docs), "dock", k=3)
    assert [h.doc_id for h in hits] == ["a", "b", "c"]
    assert len({h.score for h in hits}) == 1


def test_retrieve_caps_at_k():
    docs = [Document(doc_id=f"d{i}", title="dock", body="x" * i) for i in range(8)]
    assert len(retrieve(build_index(docs), "dock", k=3)) == 3


def brute_force_bm25(docs, query, k1=1.2, b=0.75):
    """Direct per-document scoring, no inverted index."""
    token_lists = [tokenize(d.title) + tokenize(d.body) for d in docs]
    n = len(docs)
    avg = sum(len(t) for t in token_lists) / n
    results = []
    for doc, tokens in zip(docs, token_lists):
        score = 0.0
        for term in sorted(set(tokenize(query))):
            freq = tokens.count(term)
            if freq == 0:
                continue
            df = sum(1 for other in token_lists if term in other)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            length_norm = 1 - b + b * len(tokens) / avg
            tf = freq * (k1 + 1) / (freq + k1 * length_norm)
            score += idf * tf
        if score > 0.0:
            results.append((doc.doc_id, score))
    results.sort(key=lambda pair: (-pair[1], pair[0]))
    return results


WORDS = ("dock", "gate", "carrier", "label", "invoice", "sync", "printer", "slot")


@settings(max_examples=80, deadline=None)
@given(
    doc_words=st.lists(
        st.lists(st.sampled_from(WORDS), min_size=1, max_size=30),
        min_size=1,
        max_size=20,
    ),
    query_words=st.lists(st.sampled_from(WORDS), min_size=1, max_size=5),
)
def test_retrieve_matches_brute_force_exactly(doc_words, query_words):
    docs = [
        Document(doc_id=f"d{i:02d}", title="", body=" ".join(words))
        for i, words in enumerate(doc_words)
    ]
    query = " ".join(query_words)
    hits = retrieve(build_index(docs), query, k=len(docs))
    assert [(h.doc_id, h.score) for h in hits] == brute_force_bm25(docs, query)


@settings(max_examples=40, deadline=None)
@given(freqs=st.lists(st.integers(min_value=0, max_value=12), min_size=2, max_size=8, unique=True))
def test_single_term_score_monotone_in_frequency_at_equal_length(freqs):
    length = max(freqs) + 1
    docs = [
        Document(
            doc_id=f"d{i}",
            title="",
            body=" ".join(["dock"] * f + [f"filler{i}word"] * (length - f)),
        )
        for i, f in enumerate(freqs)
    ]
    hits = retrieve(build_index(docs), "dock", k=len(docs))
    got = [h.doc_id for h in hits]
    expected = [
        f"d{i}" for i, _ in sorted(enumerate(freqs), key=lambda p: (-p[1], p[0])) if freqs[i] > 0
    ]
    assert got == expected


def test_save_load_round_trip(tmp_path):
    docs = [
        Document(doc_id="a", title="dock gate", body="slot booking fails"),
        Document(doc_id="b", title="printer", body="label jam on zebra"),
    ]
    index = build_index(docs, k1=1.5, b=0.6)
    path = tmp_path / "index.json"
    save_index(index, path)
    loaded = load_index(path)
    assert loaded.k1 == 1.5
    assert loaded.b == 0.6
    assert retrieve(loaded, "label printer", k=2) == retrieve(index, "label printer", k=2)


# ---------------------------------------------------------------------------
# answering


DOCS = [
    Document(doc_id="a", title="Dock guide", body="Reset the scheduler nightly."),
    Document(doc_id="b", title="Printer guide", body="Reseat the label roll."),
]


def test_generate_answer_blocks_and_labels():
    gw = make_gateway([("reset the dock", "Follow the dock guide.")])
    docs = [(DOCS[0], 1.5, "kb1"), (DOCS[1], 0.5, "kb1")]
    answer = generate_answer(gw, "How do I reset the dock?", docs, "m", "kb1")
    assert answer.answer_text == "Follow the dock guide."
    assert answer.kb_label == "kb1"
    assert [(r.doc_id, r.score, r.kb) for r in answer.retrieved] == [
        ("a", 1.5, "kb1"),
        ("b", 0.5, "kb1"),
    ]
    prompt = gw.requests[0].user_text
    assert "## Dock guide\nReset the scheduler nightly." in prompt
    assert prompt.index("## Dock guide") < prompt.index("## Printer guide")


def test_generate_answer_with_no_documents():
    gw = make_gateway([("unanswerable", "Not covered by the articles.")])
    answer = generate_answer(gw, "Something unanswerable?", [], "m", "kb1")
    assert answer.retrieved == ()
    assert answer.answer_text == "Not covered by the articles."


def test_answer_query_retrieves_then_generates():
    gw = make_gateway([("scheduler", "Nightly reset.")])
    index = build_index(DOCS)
    answer = answer_query(gw, index, "scheduler reset steps", "m", "dock-kb", k=1)
    assert answer.kb_label == "dock-kb"
    assert [r.doc_id for r in answer.retrieved] == ["a"]
    assert answer.retrieved[0].kb == "dock-kb"


def test_multi_level_answer_orders_first_kb_before_second():
    index_a = build_index([DOCS[0]])
    index_b = build_index([DOCS[1]])
    gw = make_gateway([("guide", "Combined answer.")])
    answer = multi_level_answer(
        gw, "guide for printer and dock", index_a, index_b, "pt", "ma", "m", k_each=5
    )
    assert answer.kb_label == "pt+ma"
    assert [r.kb for r in answer.retrieved] == ["pt", "ma"]
    prompt = gw.requests[0].user_text
    assert prompt.index("## Dock guide") < prompt.index("## Printer guide")


# ---------------------------------------------------------------------------
# kb builders


def make_tickets(n):
    base = datetime(2025, 2, 1, tzinfo=UTC)
    return [
        Ticket(
            id=f"TKT-{i:04d}",
            title=f"Scanner offline at station {i}",
            created_at=base + timedelta(hours=i),
            description=f"Unit {i} dropped off the network.",
        )
        for i in range(n)
    ]


def test_documents_from_articles():
    article = KnowledgeArticle(
        id="art-x",
        category_id="x",
        title="Guide",
        body="Body.",
        source_ticket_ids=("T1",),
        strategy="standard",
        word_count=1,
    )
    assert documents_from_articles([article]) == [
        Document(doc_id="art-x", title="Guide", body="Body.")
    ]


def test_build_raw_kb_is_verbatim():
    tickets = make_tickets(3)
    docs = build_raw_kb(tickets)
    assert [d.doc_id for d in docs] == ["TKT-0000", "TKT-0001", "TKT-0002"]
    assert docs[0].body == ticket_full_text(tickets[0])


def test_build_per_ticket_kb_one_doc_per_ticket():
    gw = make_gateway([("### Ticket ", "# Digest\ncondensed")])
    docs, failures = build_per_ticket_kb(gw, make_tickets(3), SynthesisConfig())
    assert [d.doc_id for d in docs] == ["pt-TKT-0000", "pt-TKT-0001", "pt-TKT-0002"]
    assert all(d.title == "Digest" for d in docs)
    assert failures == []
    assert gw.backend_calls == 3


def test_build_per_ticket_kb_collects_failures():
    gw = make_gateway(
        [
            ("Unit 1 dropped", "never", 999),
            ("### Ticket ", "# Digest\ncondensed"),
        ]
    )
    docs, failures = build_per_ticket_kb(gw, make_tickets(3), SynthesisConfig())
    assert [d.doc_id for d in docs] == ["pt-TKT-0000", "pt-TKT-0002"]
    assert [f.category_id for f in failures] == ["ticket-TKT-0001"]


# ---------------------------------------------------------------------------
# embedding and clustering


def test_embedder_unit_norm_and_determinism():
    embedder = HashedTfEmbedder(dim=64)
    v1 = embedder.embed("dock gate dock")
    v2 = embedder.embed("dock gate dock")
    assert np.allclose(v1, v2)
    assert np.linalg.norm(v1) == pytest.approx(1.0)
    assert np.count_nonzero(v1) == 2


def test_embedder_empty_text_is_zero_vector():
    assert np.linalg.norm(HashedTfEmbedder(dim=16).embed("")) == 0.0


def test_embedder_dim_validated():
    with pytest.raises(ValueError):
        HashedTfEmbedder(dim=0)


def test_clusterer_threshold_validated():
    with pytest.raises(ValueError):
        GreedyCosineClusterer(threshold=1.5)


def test_clusterer_groups_identical_and_leaves_noise():
    embedder = HashedTfEmbedder(dim=64)
    vectors = np.stack(
        [
            embedder.embed("dock gate slot"),
            embedder.embed("dock gate slot"),
            embedder.embed("totally unrelated printer toner"),
        ]
    )
    labels = GreedyCosineClusterer(threshold=0.5).cluster(vectors)
    assert labels[0] == labels[1] == 0
    assert labels[2] == -1


def test_clusterer_empty_input():
    assert GreedyCosineClusterer().cluster(np.zeros((0, 4))) == []


def test_build_cluster_kb_synthesizes_per_cluster():
    tickets = [
        Ticket(
            id=f"T{i}",
            title="Dock gate stuck",
            created_at=datetime(2025, 2, 1, tzinfo=UTC),
            description="The dock gate will not open for the morning slot.",
        )
        for i in range(2)
    ] + [
        Ticket(
            id=f"T{i + 2}",
            title="Printer toner smear",
            created_at=datetime(2025, 2, 1, tzinfo=UTC),
            description="Labels come out smeared after the toner swap.",
        )
        for i in range(2)
    ] + [
        Ticket(
            id="T9",
            title="Quarterly audit request",
            created_at=datetime(2025, 2, 1, tzinfo=UTC),
            description="Finance wants the carrier invoices for March.",
        )
    ]
    gw = make_gateway([("### Ticket ", "# Cluster digest\nshared fix")])
    docs, stats, failures = build_cluster_kb(gw, tickets, SynthesisConfig())
    assert stats == {"cluster_count": 2, "noise_count": 1, "clustered_fraction": 0.8}
    assert [d.doc_id for d in docs] == ["cluster-0", "cluster-1"]
    assert failures == []
    assert gw.backend_calls == 2


def test_build_cluster_kb_all_noise_is_empty_not_error():
    texts = [
        "alpha one unique words",
        "beta pair completely different",
        "gamma third nothing shared",
    ]
    tickets = [
        Ticket(id=f"T{i}", title=t, created_at=datetime(2025, 2, 1, tzinfo=UTC))
        for i, t in enumerate(texts)
    ]
    gw = make_gateway([])  # a synthesis call would raise
    docs, stats, failures = build_cluster_kb(gw, tickets, SynthesisConfig())
    assert docs == []
    assert failures == []
    assert stats["cluster_count"] == 0
    assert stats["noise_count"] == 3
    assert stats["clustered_fraction"] == 0.0
    assert gw.backend_calls == 0


def test_build_cluster_kb_records_synthesis_failures():
    tickets = [
        Ticket(
            id=f"T{i}",
            title="Dock gate stuck",
            created_at=datetime(2025, 2, 1, tzinfo=UTC),
            description="The dock gate will not open.",
        )
        for i in range(2)
    ]
    gw = make_gateway([("### Ticket ", "never", 999)])
    docs, stats, failures = build_cluster_kb(gw, tickets, SynthesisConfig())
    assert docs == []
    assert stats["cluster_count"] == 1
    assert [f.category_id for f in failures] == ["cluster-0"]
