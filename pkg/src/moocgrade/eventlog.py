"""Click-stream event log: schema, parsing, ingestion and sessionization.

One event per line, UTF-8 JSON. Required keys are ``s`` (student id),
``t`` (integer epoch seconds) and ``k`` (event kind). Kind-specific keys:

=====================  =====================================
kind                   keys
=====================  =====================================
video_*                ``v`` video id, ``pos`` playhead seconds
quiz_attempt           ``q`` quiz id, ``att`` attempt index >= 1, ``g`` grade
problem_save           ``h`` homework id
homework_submit        ``h`` homework id, ``g`` grade
=====================  =====================================

Grades are fractions in [0, 1].
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .exceptions import CatalogError, IngestionError, LogParseError, SchemaError

logger = logging.getLogger(__name__)

SESSION_TIMEOUT = 3600


class EventKind(str, Enum):
    VIDEO_LOAD = "video_load"
    VIDEO_PLAY = "video_play"
    VIDEO_PAUSE = "video_pause"
    VIDEO_SEEK = "video_seek"
    VIDEO_STOP = "video_stop"
    QUIZ_ATTEMPT = "quiz_attempt"
    PROBLEM_SAVE = "problem_save"
    HOMEWORK_SUBMIT = "homework_submit"

    @property
    def is_video(self) -> bool:
        return self.value.startswith("video_")

    @property
    def is_homework(self) -> bool:
        return self in (EventKind.PROBLEM_SAVE, EventKind.HOMEWORK_SUBMIT)


_KINDS = {k.value: k for k in EventKind}

# target key per kind, and the payload keys that must accompany it
_TARGET_KEY = {kind: ("v" if kind.is_video else "q" if kind is EventKind.QUIZ_ATTEMPT else "h")
               for kind in EventKind}
_PAYLOAD_KEYS = {
    EventKind.QUIZ_ATTEMPT: ("att", "g"),
    EventKind.PROBLEM_SAVE: (),
    EventKind.HOMEWORK_SUBMIT: ("g",),
}
for _k in EventKind:
    if _k.is_video:
        _PAYLOAD_KEYS[_k] = ("pos",)


@dataclass(frozen=True)
class EventRecord:
    student: str
    timestamp: int
    kind: EventKind
    target: str | None = None
    payload: Mapping[str, float | int] = field(default_factory=dict)

    @property
    def grade(self) -> float | None:
        return self.payload.get("g")

    @property
    def position(self) -> float | None:
        return self.payload.get("pos")


@dataclass(frozen=True)
class SessionRecord:
    student: str
    start: int
    end: int
    events: tuple[EventRecord, ...]

    @property
    def duration(self) -> int:
        return self.end - self.start


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_number(x) -> bool:
    return (isinstance(x, (int, float)) and not isinstance(x, bool)
            and math.isfinite(x))


def _require(obj, key, lineno):
    if key not in obj:
        raise SchemaError(f"missing required key {key!r}", lineno)
    return obj[key]


def _nonempty_str(value, key, lineno):
    if not isinstance(value, str) or not value:
        raise LogParseError(f"{key!r} must be a non-empty string, got {value!r}", lineno)
    return value


def parse_event_line(line: str, lineno: int | None = None) -> EventRecord:
    """Parse and validate one JSON-lines record.

    Raises
    ------
    LogParseError
        Malformed JSON or a field of the wrong type.
    SchemaError
        Unknown event kind, missing key or out-of-range value.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise LogParseError(f"invalid JSON: {exc.msg}", lineno) from None
    if not isinstance(obj, dict):
        raise LogParseError("record is not a JSON object", lineno)

    student = _nonempty_str(_require(obj, "s", lineno), "s", lineno)
    t = _require(obj, "t", lineno)
    if not _is_int(t):
        raise LogParseError(f"'t' must be integer epoch seconds, got {t!r}", lineno)
    if t < 0:
        raise SchemaError(f"timestamp {t} precedes the epoch", lineno)
    k = _require(obj, "k", lineno)
    if k not in _KINDS:
        raise SchemaError(f"unknown event kind {k!r}", lineno)
    kind = _KINDS[k]

    tkey = _TARGET_KEY[kind]
    target = _nonempty_str(_require(obj, tkey, lineno), tkey, lineno)

    payload: dict[str, float | int] = {}
    for key in _PAYLOAD_KEYS[kind]:
        value = _require(obj, key, lineno)
        if key == "att":
            if not _is_int(value):
                raise LogParseError(f"'att' must be an integer, got {value!r}", lineno)
            if value < 1:
                raise SchemaError(f"'att' must be >= 1, got {value}", lineno)
        else:
            if not _is_number(value):
                raise LogParseError(f"{key!r} must be a finite number, got {value!r}", lineno)
            value = float(value)
            if key == "g" and not 0.0 <= value <= 1.0:
                raise SchemaError(f"grade {value} outside [0, 1]", lineno)
            if key == "pos" and value < 0:
                raise SchemaError(f"negative video position {value}", lineno)
        payload[key] = value
    return EventRecord(student, t, kind, target, payload)


def serialize_event(event: EventRecord) -> str:
    """Inverse of :func:`parse_event_line` (compact, fixed key order)."""
    obj: dict = {"s": event.student, "t": event.timestamp, "k": event.kind.value}
    obj[_TARGET_KEY[event.kind]] = event.target
    for key in _PAYLOAD_KEYS[event.kind]:
        obj[key] = event.payload[key]
    return json.dumps(obj, separators=(",", ":"))


@dataclass(frozen=True)
class CourseCatalog:
    """Course structure: homework order, quiz/video mapping, video lengths."""

    homeworks: tuple[str, ...]
    quizzes: Mapping[str, str]          # quiz id -> homework id
    videos: Mapping[str, str]           # video id -> quiz id
    video_lengths: Mapping[str, float]  # video id -> seconds
    grading: str = "continuous"
    homework_kinds: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if len(set(self.homeworks)) != len(self.homeworks):
            raise CatalogError("duplicate homework ids")
        if self.grading not in ("continuous", "binary"):
            raise CatalogError(f"grading must be 'continuous' or 'binary', got {self.grading!r}")
        hw = set(self.homeworks)
        for q, h in self.quizzes.items():
            if h not in hw:
                raise CatalogError(f"quiz {q!r} maps to unknown homework {h!r}")
        for v, q in self.videos.items():
            if q not in self.quizzes:
                raise CatalogError(f"video {v!r} maps to unknown quiz {q!r}")
            length = self.video_lengths.get(v)
            if length is None or not length > 0:
                raise CatalogError(f"video {v!r} needs a positive length, got {length!r}")
        for h, kind in self.homework_kinds.items():
            if kind not in ("homework", "exam"):
                raise CatalogError(f"assessment {h!r} has unsupported kind {kind!r}")

    @property
    def n_homeworks(self) -> int:
        return len(self.homeworks)

    def ordinal(self, homework: str) -> int:
        """1-based position of ``homework`` in the course order."""
        try:
            return self.homeworks.index(homework) + 1
        except ValueError:
            raise CatalogError(f"unknown homework {homework!r}") from None

    def homework_at(self, ordinal: int) -> str:
        if not 1 <= ordinal <= len(self.homeworks):
            raise CatalogError(f"homework ordinal {ordinal} outside 1..{len(self.homeworks)}")
        return self.homeworks[ordinal - 1]

    def quizzes_of(self, homework: str) -> list[str]:
        return [q for q, h in self.quizzes.items() if h == homework]

    def knows(self, event: EventRecord) -> bool:
        if event.kind.is_video:
            return event.target in self.video_lengths
        if event.kind is EventKind.QUIZ_ATTEMPT:
            return event.target in self.quizzes
        return event.target in self.homeworks

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CourseCatalog":
        try:
            homeworks, kinds = [], {}
            for item in doc["homeworks"]:
                if isinstance(item, str):
                    homeworks.append(item)
                else:
                    homeworks.append(item["id"])
                    if "kind" in item:
                        kinds[item["id"]] = item["kind"]
            quizzes = {q["id"]: q["homework"] for q in doc["quizzes"]}
            videos = {v["id"]: v["quiz"] for v in doc["videos"]}
            lengths = {v["id"]: float(v["length_sec"]) for v in doc["videos"]}
            grading = doc.get("grading", "continuous")
        except (KeyError, TypeError, ValueError) as exc:
            raise CatalogError(f"malformed catalog: {exc!r}") from None
        return cls(tuple(homeworks), quizzes, videos, lengths, grading, kinds)

    def to_dict(self) -> dict:
        homeworks = [h if h not in self.homework_kinds else {"id": h, "kind": self.homework_kinds[h]}
                     for h in self.homeworks]
        return {
            "homeworks": homeworks,
            "quizzes": [{"id": q, "homework": h} for q, h in self.quizzes.items()],
            "videos": [{"id": v, "quiz": q, "length_sec": self.video_lengths[v]}
                       for v, q in self.videos.items()],
            "grading": self.grading,
        }

    @classmethod
    def load(cls, path) -> "CourseCatalog":
        try:
            with open(path, encoding="utf-8") as f:
                doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise CatalogError(f"{path}: invalid JSON: {exc.msg}") from None
        return cls.from_dict(doc)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass
class IngestResult:
    events: dict[str, list[EventRecord]]
    n_lines: int
    n_dropped: int
    problems: list[str] = field(default_factory=list)

    @property
    def n_students(self) -> int:
        return len(self.events)


def group_events(events: Iterable[EventRecord]) -> dict[str, list[EventRecord]]:
    """Group by student (ids in sorted order), stable-sort each run by time."""
    grouped: dict[str, list[EventRecord]] = {}
    for e in events:
        grouped.setdefault(e.student, []).append(e)
    return {s: sorted(grouped[s], key=lambda e: e.timestamp) for s in sorted(grouped)}


def ingest_log(path, catalog: CourseCatalog, max_drop_fraction: float = 0.05) -> IngestResult:
    """Read a JSON-lines log, validate it against ``catalog`` and group by student.

    Malformed lines and events naming ids absent from the catalog are dropped
    and reported. If more than ``max_drop_fraction`` of the non-blank lines are
    dropped an :class:`IngestionError` is raised instead.
    """
    kept: list[EventRecord] = []
    problems: list[str] = []
    n_lines = 0
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            n_lines += 1
            try:
                event = parse_event_line(line, lineno)
            except LogParseError as exc:
                problems.append(str(exc))
                continue
            if not catalog.knows(event):
                problems.append(f"line {lineno}: {event.kind.value} references unknown id "
                                f"{event.target!r}")
                continue
            kept.append(event)

    n_dropped = len(problems)
    if n_dropped:
        logger.warning("dropped %d of %d lines from %s", n_dropped, n_lines, path)
        for p in problems[:10]:
            logger.warning("  %s", p)
    if n_lines and n_dropped / n_lines > max_drop_fraction:
        raise IngestionError(f"{path}: dropped {n_dropped} of {n_lines} lines, above the "
                             f"{max_drop_fraction:.0%} tolerance; first problem: {problems[0]}")
    return IngestResult(group_events(kept), n_lines, n_dropped, problems)


def write_log(events: Iterable[EventRecord], path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for e in events:
            f.write(serialize_event(e))
            f.write("\n")


def sessionize(events: list[EventRecord], timeout: int = SESSION_TIMEOUT) -> list[SessionRecord]:
    """Split one student's time-sorted events into sessions.

    A gap strictly longer than ``timeout`` seconds starts a new session; a
    gap of exactly ``timeout`` does not.
    """
    sessions: list[SessionRecord] = []
    if not events:
        return sessions
    run = [events[0]]
    for prev, cur in zip(events, events[1:]):
        if cur.timestamp < prev.timestamp:
            raise ValueError("events must be sorted by timestamp")
        if cur.timestamp - prev.timestamp > timeout:
            sessions.append(SessionRecord(run[0].student, run[0].timestamp, run[-1].timestamp,
                                          tuple(run)))
            run = []
        run.append(cur)
    sessions.append(SessionRecord(run[0].student, run[0].timestamp, run[-1].timestamp, tuple(run)))
    return sessions


def sessionize_all(events: Mapping[str, list[EventRecord]],
                   timeout: int = SESSION_TIMEOUT) -> dict[str, list[SessionRecord]]:
    return {s: sessionize(events[s], timeout) for s in sorted(events)}
