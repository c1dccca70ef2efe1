"""Ticket-to-category assignment and its exactly-one-bucket accounting."""

import json
from datetime import datetime, timedelta, timezone

import pytest

from kbforge.categorize import (
    Assignment,
    CategorizeConfig,
    CategorizeError,
    CategorizedCorpus,
    FailedTicket,
    categorize_all,
    categorize_into_subcategories,
    categorize_ticket,
    corpus_from_json,
    corpus_to_json,
    format_category_list,
    resolve_category_name,
)
from kbforge.corpus import Ticket
from kbforge.discovery import Category, CategorySet
from kbforge.gateway import Gateway, GatewayConfig, MockBackend

UTC = timezone.utc

ALPHA = Category(id="alpha-problems", name="Alpha Problems", description="alpha trouble")
BETA = Category(id="beta-faults", name="Beta Faults", identifying_patterns=("crash", "hang"))
TAXONOMY = CategorySet(categories=(ALPHA, BETA))


def ticket(i):
    return Ticket(
        id=f"T{i}",
        title=f"Scanner offline at station {i}",
        created_at=datetime(2025, 2, 1, tzinfo=UTC) + timedelta(hours=i),
        description=f"Unit {i} dropped off the network.",
    )


def assignments_json(*names):
    return json.dumps({"assignments": [{"category": n, "reasoning": f"matches {n}"} for n in names]})


def make_gateway(rules, retries=0):
    backend = MockBackend()
    for pattern, response, *rest in rules:
        backend.register_rule(pattern, response, *(rest or [0]))
    return Gateway(backend, GatewayConfig(requests_per_minute=100000, max_retries=retries))


CFG = CategorizeConfig()


# ---------------------------------------------------------------------------
# name resolution


class TestResolveCategoryName:
    def test_exact_normalized_match_wins(self):
        short = Category(id="alpha", name="Alpha")
        assert resolve_category_name("  ALPHA  Problems!", [ALPHA, short]) is ALPHA

    def test_unique_containment_either_direction(self):
        assert resolve_category_name("Alpha", [ALPHA, BETA]) is ALPHA
        assert resolve_category_name("Beta Faults (hardware)", [ALPHA, BETA]) is BETA

    def test_ambiguous_containment_drops(self):
        cats = [
            Category(id="dock-sched", name="Dock Scheduling Issues"),
            Category(id="dock-bill", name="Dock Billing Issues"),
        ]
        assert resolve_category_name("Dock", cats) is None

    def test_no_match(self):
        assert resolve_category_name("Gamma Rays", [ALPHA, BETA]) is None
        assert resolve_category_name("!!!", [ALPHA, BETA]) is None


def test_format_category_list():
    text = format_category_list([ALPHA, BETA])
    assert text == (
        "- Alpha Problems: alpha trouble\n"
        "- Beta Faults (patterns: crash, hang)"
    )


# ---------------------------------------------------------------------------
# single ticket


def test_categorize_ticket_resolves_and_threads_reasoning():
    gw = make_gateway([("station 0", assignments_json("Alpha Problems"))])
    result = categorize_ticket(gw, ticket(0), [ALPHA, BETA], CFG)
    assert result == [
        Assignment(
            ticket_id="T0",
            category_id="alpha-problems",
            reasoning="matches Alpha Problems",
            level="category",
        )
    ]


def test_categorize_ticket_two_categories():
    gw = make_gateway([("station 0", assignments_json("Alpha", "Beta Faults"))])
    result = categorize_ticket(gw, ticket(0), [ALPHA, BETA], CFG)
    assert [a.category_id for a in result] == ["alpha-problems", "beta-faults"]


def test_categorize_ticket_dedupes_repeated_category():
    gw = make_gateway([("station 0", assignments_json("Alpha", "ALPHA PROBLEMS"))])
    result = categorize_ticket(gw, ticket(0), [ALPHA, BETA], CFG)
    assert len(result) == 1


def test_categorize_ticket_empty_taxonomy():
    with pytest.raises(CategorizeError, match="empty"):
        categorize_ticket(make_gateway([]), ticket(0), [], CFG)


# ---------------------------------------------------------------------------
# whole corpus accounting


def test_categorize_all_every_ticket_in_exactly_one_bucket():
    tickets = [ticket(i) for i in range(6)]
    gw = make_gateway(
        [
            ("station 0", assignments_json("Alpha Problems")),
            ("station 1", assignments_json("Alpha", "Beta")),
            ("station 2", '{"assignments": []}'),
            ("station 3", assignments_json("Gamma Rays")),  # unresolvable name
            ("station 4", "no JSON here at all"),  # parse failure, twice
            ("station 5", "transient", 999),  # gateway failure
        ]
    )
    corpus = categorize_all(gw, tickets, TAXONOMY, CFG)

    assert corpus.assigned_ids() == {"T0", "T1"}
    assert corpus.uncategorized == ["T2", "T3"]
    assert [f.ticket_id for f in corpus.failed] == ["T4", "T5"]
    assert len(corpus.assigned_ids()) + len(corpus.uncategorized) + len(corpus.failed) == 6
    # two-way assignment contributes two rows for one ticket
    assert len(corpus.assignments) == 3
    assert corpus.pool("alpha-problems") == ["T0", "T1"]
    assert corpus.pool("beta-faults") == ["T1"]


def test_categorize_all_result_independent_of_scheduling():
    tickets = [ticket(i) for i in range(4)]
    rules = [(f"station {i}", assignments_json("Alpha Problems")) for i in range(4)]
    wide = categorize_all(make_gateway(rules), tickets, TAXONOMY, CategorizeConfig(max_parallel=8))
    narrow = categorize_all(
        make_gateway(rules), list(reversed(tickets)), TAXONOMY, CategorizeConfig(max_parallel=1)
    )
    assert corpus_to_json(wide) == corpus_to_json(narrow)


def test_categorize_all_ignores_subcategories():
    sub = Category(id="alpha-problems/late", name="Late", parent="alpha-problems")
    taxonomy = CategorySet(categories=(ALPHA, sub))
    gw = make_gateway([("station 0", assignments_json("Alpha Problems"))])
    corpus = categorize_all(gw, [ticket(0)], taxonomy, CFG)
    assert corpus.assignments[0].category_id == "alpha-problems"
    assert "Late" not in gw.requests[0].user_text


def test_categorize_all_requires_top_level():
    only_subs = CategorySet(
        categories=(Category(id="a/b", name="B", parent="a"),)
    )
    with pytest.raises(CategorizeError, match="top-level"):
        categorize_all(make_gateway([]), [ticket(0)], only_subs, CFG)


# ---------------------------------------------------------------------------
# subcategory routing


SUBS = CategorySet(
    categories=(
        Category(id="alpha-problems/late", name="Late Arrival", parent="alpha-problems"),
        Category(id="alpha-problems/lost", name="Lost Slot", parent="alpha-problems"),
    )
)


def test_subcategory_routing_takes_first_resolvable():
    gw = make_gateway([("station 0", assignments_json("Nonsense", "Late Arrival"))])
    corpus = categorize_into_subcategories(gw, [ticket(0)], ALPHA, SUBS, CFG)
    assert corpus.assignments == [
        Assignment(
            ticket_id="T0",
            category_id="alpha-problems/late",
            reasoning="matches Late Arrival",
            level="subcategory",
        )
    ]


def test_subcategory_routing_residual_pool():
    gw = make_gateway(
        [
            ("station 0", assignments_json("Late Arrival")),
            ("station 1", '{"assignments": []}'),
        ]
    )
    corpus = categorize_into_subcategories(gw, [ticket(0), ticket(1)], ALPHA, SUBS, CFG)
    assert corpus.assigned_ids() == {"T0"}
    assert corpus.uncategorized == ["T1"]  # residual stays with the parent


def test_subcategory_routing_requires_subcategories():
    with pytest.raises(CategorizeError, match="no subcategories"):
        categorize_into_subcategories(make_gateway([]), [ticket(0)], ALPHA, CategorySet(), CFG)


# ---------------------------------------------------------------------------
# serialization


def test_corpus_json_round_trip():
    corpus = CategorizedCorpus(
        assignments=[Assignment(ticket_id="T1", category_id="a", reasoning="r")],
        uncategorized=["T2"],
        failed=[FailedTicket(ticket_id="T3", error="boom")],
    )
    payload = corpus_to_json(corpus)
    restored = corpus_from_json(json.loads(json.dumps(payload)))
    assert restored.assignments == corpus.assignments
    assert restored.uncategorized == corpus.uncategorized
    assert restored.failed == corpus.failed
