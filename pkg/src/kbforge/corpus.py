"""Ticket corpus loading, cleaning, and chronological splitting."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)

COMMENT_ROLES = ("requester", "resolver", "unknown")
STATUSES = ("open", "resolved", "unknown")
CSV_COLUMNS = ("id", "title", "created_at", "description", "comments", "status")
CSV_COMMENT_SEP = "|||"

_TAG_RE = re.compile(r"<[^>]*>")
_WS_RE = re.compile(r"\s+")


class CorpusError(Exception):
    pass


class DuplicateTicketIdError(CorpusError):
    def __init__(self, ids: list[str]):
        super().__init__(f"duplicate ticket ids: {', '.join(sorted(ids))}")
        self.ids = sorted(ids)


@dataclass(frozen=True)
class Comment:
    body: str
    author_role: str = "unknown"
    created_at: datetime | None = None


@dataclass(frozen=True)
class Ticket:
    id: str
    title: str
    created_at: datetime
    description: str = ""
    comments: tuple[Comment, ...] = ()
    status: str = "unknown"


@dataclass(frozen=True)
class CleaningLimits:
    max_field_chars: int = 8000
    max_comments: int = 20


@dataclass(frozen=True)
class Rejection:
    record: int
    reason: str
    field: str | None = None
    ticket_id: str | None = None


@dataclass
class LoadResult:
    tickets: list[Ticket]
    rejections: list[Rejection]


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[Ticket, ...]
    val: tuple[Ticket, ...]
    test: tuple[Ticket, ...]
    fractions: tuple[float, float, float]


def parse_timestamp(value: str) -> datetime:
    """Parse an RFC 3339 timestamp; naive values are taken as UTC."""
    if not isinstance(value, str) or not value.strip():
        raise ValueError("empty timestamp")
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_timestamp(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def _normalize_role(value: object) -> str:
    role = str(value).strip().lower() if value is not None else "unknown"
    return role if role in COMMENT_ROLES else "unknown"


def _normalize_status(value: object) -> str:
    status = str(value).strip().lower() if value is not None else "unknown"
    return status if status in STATUSES else "unknown"


def _parse_comments(raw: object) -> tuple[Comment, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise ValueError("comments must be a list")
    out = []
    for entry in raw:
        if not isinstance(entry, dict):
            raise ValueError("comment entries must be objects")
        body = entry.get("body")
        if not isinstance(body, str) or not body.strip():
            continue
        created = entry.get("created_at")
        out.append(
            Comment(
                body=body,
                author_role=_normalize_role(entry.get("author_role")),
                created_at=parse_timestamp(created) if created else None,
            )
        )
    return tuple(out)


def _record_to_ticket(record: dict) -> Ticket:
    ticket_id = record.get("id")
    if not isinstance(ticket_id, str) or not ticket_id.strip():
        raise ValueError("field id: missing or empty")
    try:
        created = parse_timestamp(record.get("created_at", ""))
    except (ValueError, TypeError) as exc:
        raise ValueError(f"field created_at: {exc}") from exc
    title = record.get("title") or ""
    description = record.get("description") or ""
    if not isinstance(title, str) or not isinstance(description, str):
        raise ValueError("field title/description: must be strings")
    if not _clean_text(title) and not _clean_text(description):
        raise ValueError("field title: title and description both empty")
    try:
        comments = _parse_comments(record.get("comments"))
    except ValueError as exc:
        raise ValueError(f"field comments: {exc}") from exc
    return Ticket(
        id=ticket_id.strip(),
        title=title,
        created_at=created,
        description=description,
        comments=comments,
        status=_normalize_status(record.get("status")),
    )


def _iter_jsonl(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            yield lineno, line


def _csv_record(row: dict) -> dict:
    comments_raw = row.get("comments") or ""
    comments = [
        {"body": part, "author_role": "unknown"}
        for part in comments_raw.split(CSV_COMMENT_SEP)
        if part.strip()
    ]
    return {
        "id": row.get("id"),
        "title": row.get("title") or "",
        "created_at": row.get("created_at") or "",
        "description": row.get("description") or "",
        "comments": comments,
        "status": row.get("status") or "unknown",
    }


def load_tickets(path: str | Path, format: str = "jsonl") -> LoadResult:
    """Load tickets from a JSONL or CSV file.

    Malformed records are collected into the rejection report instead of
    aborting the load. Duplicate ids among the valid records are an error.
    """
    path = Path(path)
    if format not in ("jsonl", "csv"):
        raise CorpusError(f"unknown corpus format: {format!r}")
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")

    tickets: list[Ticket] = []
    rejections: list[Rejection] = []

    def consume(record_no: int, record: object, raw_id: object) -> None:
        if not isinstance(record, dict):
            rejections.append(Rejection(record_no, "record is not an object"))
            return
        try:
            tickets.append(_record_to_ticket(record))
        except ValueError as exc:
            message = str(exc)
            field = None
            if message.startswith("field "):
                field = message.split(":", 1)[0][len("field "):].strip()
            rejections.append(
                Rejection(
                    record_no,
                    message,
                    field=field,
                    ticket_id=str(raw_id) if raw_id else None,
                )
            )

    if format == "jsonl":
        for lineno, line in _iter_jsonl(path):
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                rejections.append(Rejection(lineno, f"invalid JSON: {exc.msg}"))
                continue
            raw_id = record.get("id") if isinstance(record, dict) else None
            consume(lineno, record, raw_id)
    else:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise CorpusError(f"csv missing columns: {', '.join(missing)}")
            for record_no, row in enumerate(reader, start=2):
                consume(record_no, _csv_record(row), row.get("id"))

    seen: dict[str, int] = {}
    for t in tickets:
        seen[t.id] = seen.get(t.id, 0) + 1
    dupes = [tid for tid, n in seen.items() if n > 1]
    if dupes:
        raise DuplicateTicketIdError(dupes)

    for r in rejections:
        logger.warning("rejected record %d: %s", r.record, r.reason)
    return LoadResult(tickets=tickets, rejections=rejections)


def _strip_markup(text: str) -> str:
    while True:
        stripped = _TAG_RE.sub(" ", text)
        if stripped == text:
            return stripped
        text = stripped


def _clean_text(text: str) -> str:
    return _WS_RE.sub(" ", _strip_markup(text)).strip()


def _truncate(text: str, limit: int) -> str:
    if len(text) <= limit:
        return text
    cut = text[:limit]
    if text[limit] != " ":
        boundary = cut.rfind(" ")
        if boundary > 0:
            cut = cut[:boundary]
    return cut.rstrip()


def clean_ticket(ticket: Ticket, limits: CleaningLimits = CleaningLimits()) -> Ticket:
    """Normalize a ticket's text fields.

    Markup is stripped, runs of whitespace collapse to single spaces, long
    fields are truncated at a whitespace boundary, empty comments are dropped,
    and only the oldest ``max_comments`` comments are kept. Applying the
    operation twice yields the same ticket as applying it once.
    """
    clean = lambda s: _truncate(_clean_text(s), limits.max_field_chars)
    comments = []
    for c in ticket.comments:
        body = clean(c.body)
        if body:
            comments.append(replace(c, body=body))
    comments = comments[: limits.max_comments]
    return replace(
        ticket,
        title=clean(ticket.title),
        description=clean(ticket.description),
        comments=tuple(comments),
    )


def _sort_key(ticket: Ticket):
    return (ticket.created_at, ticket.id)


def chronological_split(
    tickets: list[Ticket],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> CorpusSplit:
    """Split tickets by age: oldest into train, most recent into val/test.

    Sizes follow n_val = floor(f_val * n) and n_test = floor(f_test * n),
    with the remainder going to train, so every ticket lands in exactly one
    slice.
    """
    if not tickets:
        raise CorpusError("cannot split an empty corpus")
    f_train, f_val, f_test = fractions
    if min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError(f"fractions must be non-negative and sum to 1: {fractions}")
    ordered = sorted(tickets, key=_sort_key)
    n = len(ordered)
    n_val = math.floor(f_val * n)
    n_test = math.floor(f_test * n)
    n_train = n - n_val - n_test
    return CorpusSplit(
        train=tuple(ordered[:n_train]),
        val=tuple(ordered[n_train : n_train + n_val]),
        test=tuple(ordered[n_train + n_val :]),
        fractions=(f_train, f_val, f_test),
    )


def split_manifest(split: CorpusSplit) -> dict:
    return {
        "train": [t.id for t in split.train],
        "val": [t.id for t in split.val],
        "test": [t.id for t in split.test],
        "fractions": list(split.fractions),
    }


def ticket_full_text(ticket: Ticket) -> str:
    """Title, description, and every comment body, newline-joined."""
    parts = [ticket.title, ticket.description]
    parts.extend(c.body for c in ticket.comments)
    return "\n".join(p for p in parts if p)


def ticket_to_record(ticket: Ticket) -> dict:
    return {
        "id": ticket.id,
        "title": ticket.title,
        "created_at": format_timestamp(ticket.created_at),
        "description": ticket.description,
        "comments": [
            {
                "author_role": c.author_role,
                "created_at": format_timestamp(c.created_at) if c.created_at else None,
                "body": c.body,
            }
            for c in ticket.comments
        ],
        "status": ticket.status,
    }


def ticket_from_record(record: dict) -> Ticket:
    return _record_to_ticket(record)
