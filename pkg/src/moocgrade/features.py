"""Study-behaviour features for (student, homework) observations.

Every feature for a target homework is computed from the student's events
strictly before the *attempt instant*, the time of the first
``problem_save`` or ``homework_submit`` on that homework. Durations are in
minutes; calendar days are UTC.
"""
from __future__ import annotations

import bisect
import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .eventlog import (SESSION_TIMEOUT, CourseCatalog, EventKind, EventRecord, SessionRecord,
                       sessionize)
from .exceptions import DataError, ExtractionError

logger = logging.getLogger(__name__)

DAY = 86400


class FeatureGroup(str, Enum):
    SESSION = "session"
    QUIZ = "quiz"
    VIDEO = "video"
    HOMEWORK = "homework"
    TIME = "time"
    INTERVAL = "interval"
    MEANSCORE = "meanscore"


FEATURE_LAYOUT: tuple[tuple[FeatureGroup, tuple[str, ...]], ...] = (
    (FeatureGroup.SESSION, ("NumSession", "AvgSessionLen", "AvgNumLogin")),
    (FeatureGroup.QUIZ, ("NumQuiz", "AvgQuiz")),
    (FeatureGroup.VIDEO, ("VideoNum", "VideoNumPause", "VideoViewTime", "VideoPctWatch")),
    (FeatureGroup.HOMEWORK, ("HWProblemSave",)),
    (FeatureGroup.TIME, ("TimeHwQuiz", "TimeHwVideo", "TimePlayVideo", "HwSessions")),
    (FeatureGroup.INTERVAL, ("IntervalNumQuiz", "IntervalQuizAttempt", "IntervalVideo",
                             "IntervalDailySession", "IntervalLogin", "IntervalMissing")),
    (FeatureGroup.MEANSCORE, ("Meanscore", "MeanscoreMissing")),
)
FEATURE_NAMES: tuple[str, ...] = tuple(n for _, names in FEATURE_LAYOUT for n in names)
FEATURE_GROUPS: dict[str, FeatureGroup] = {n: g for g, names in FEATURE_LAYOUT for n in names}
RATE_FEATURES = ("AvgNumLogin", "TimePlayVideo", "VideoPctWatch", "IntervalLogin")


@dataclass(frozen=True)
class ObservationWindow:
    """Activity window preceding a student's first attempt on ``target``.

    ``start`` is inclusive, ``end`` (the attempt instant) exclusive.
    ``interval_start`` opens the interval window one second after the
    student submitted the preceding homework; ``None`` when there is none.
    """

    student: str
    target: str
    start: int
    end: int
    interval_start: int | None = None

    @property
    def minutes(self) -> float:
        return max(0, self.end - self.start) / 60.0


def _days(start: int, end: int) -> int:
    return max(1, end // DAY - start // DAY + 1)


def _events(sessions: Sequence[SessionRecord]) -> Iterable[EventRecord]:
    for s in sessions:
        yield from s.events


def window_sessions(events: Sequence[EventRecord], start: int, end: int,
                    timeout: int = SESSION_TIMEOUT) -> list[SessionRecord]:
    """Sessionize the events with ``start <= t < end`` (``events`` time-sorted)."""
    times = [e.timestamp for e in events]
    lo = bisect.bisect_left(times, start)
    hi = bisect.bisect_left(times, end)
    return sessionize(list(events[lo:hi]), timeout)


def session_features(sessions: Sequence[SessionRecord], start: int, end: int) -> dict[str, float]:
    if not sessions:
        return {"NumSession": 0.0, "AvgSessionLen": 0.0, "AvgNumLogin": 0.0}
    days = _days(start, end)
    total_minutes = sum(s.duration for s in sessions) / 60.0
    work_days = {e.timestamp // DAY for e in _events(sessions)}
    return {
        "NumSession": len(sessions) / days,
        "AvgSessionLen": total_minutes / len(sessions),
        "AvgNumLogin": len(work_days) / days,
    }


def quiz_features(sessions: Sequence[SessionRecord]) -> dict[str, float]:
    attempts: dict[str, int] = {}
    for e in _events(sessions):
        if e.kind is EventKind.QUIZ_ATTEMPT:
            attempts[e.target] = attempts.get(e.target, 0) + 1
    if not attempts:
        return {"NumQuiz": 0.0, "AvgQuiz": 0.0}
    return {"NumQuiz": float(len(attempts)), "AvgQuiz": sum(attempts.values()) / len(attempts)}


def watched_seconds(sessions: Sequence[SessionRecord], catalog: CourseCatalog) -> dict[str, float]:
    """Seconds watched per engaged video, clamped to the video length.

    A ``video_play`` opens a play interval that the student's next event in
    the same session closes. If that event carries a playhead position for
    the same video the interval counts the position delta, otherwise the
    elapsed wall-clock time. Negative deltas count as zero and a play that is
    the last event of its session contributes nothing.
    """
    watched: dict[str, float] = {}
    for session in sessions:
        events = session.events
        for i, e in enumerate(events):
            if not e.kind.is_video:
                continue
            if e.target not in catalog.video_lengths:
                raise ExtractionError(f"video {e.target!r} has no length in the catalog")
            watched.setdefault(e.target, 0.0)
            if e.kind is not EventKind.VIDEO_PLAY or i + 1 == len(events):
                continue
            nxt = events[i + 1]
            if nxt.kind.is_video and nxt.target == e.target:
                delta = nxt.position - e.position
            else:
                delta = float(nxt.timestamp - e.timestamp)
            watched[e.target] += max(0.0, delta)
    return {v: min(w, catalog.video_lengths[v]) for v, w in watched.items()}


def video_features(sessions: Sequence[SessionRecord], catalog: CourseCatalog) -> dict[str, float]:
    watched = watched_seconds(sessions, catalog)
    if not watched:
        return {"VideoNum": 0.0, "VideoNumPause": 0.0, "VideoViewTime": 0.0, "VideoPctWatch": 0.0}
    pauses = sum(1 for e in _events(sessions) if e.kind is EventKind.VIDEO_PAUSE)
    n = len(watched)
    pct = [watched[v] / catalog.video_lengths[v] for v in sorted(watched)]
    return {
        "VideoNum": float(n),
        "VideoNumPause": pauses / n,
        "VideoViewTime": sum(watched[v] for v in sorted(watched)) / 60.0,
        "VideoPctWatch": float(np.mean(pct)),
    }


def homework_features(sessions: Sequence[SessionRecord]) -> dict[str, float]:
    saves: dict[str, int] = {}
    for e in _events(sessions):
        if e.kind is EventKind.PROBLEM_SAVE:
            saves[e.target] = saves.get(e.target, 0) + 1
    if not saves:
        return {"HWProblemSave": 0.0}
    return {"HWProblemSave": sum(saves.values()) / len(saves)}


def time_features(sessions: Sequence[SessionRecord], start: int, end: int) -> dict[str, float]:
    span = max(0, end - start) / 60.0
    last_quiz = last_video = None
    for e in _events(sessions):
        if e.kind is EventKind.QUIZ_ATTEMPT:
            last_quiz = e.timestamp
        elif e.kind.is_video:
            last_video = e.timestamp

    def since(t):
        return span if t is None else min(span, (end - t) / 60.0)

    n = len(sessions)
    with_play = sum(1 for s in sessions if any(e.kind is EventKind.VIDEO_PLAY for e in s.events))
    hw = sum(1 for s in sessions if any(e.kind.is_homework for e in s.events))
    return {
        "TimeHwQuiz": since(last_quiz),
        "TimeHwVideo": since(last_video),
        "TimePlayVideo": with_play / n if n else 0.0,
        "HwSessions": float(hw),
    }


def interval_features(sessions: Sequence[SessionRecord] | None, start: int | None,
                      end: int) -> dict[str, float]:
    """Activity between the previous submission and the attempt instant.

    ``sessions=None`` marks a target with no preceding submission; every
    value is then 0 and ``IntervalMissing`` is 1.
    """
    if sessions is None:
        return {"IntervalNumQuiz": 0.0, "IntervalQuizAttempt": 0.0, "IntervalVideo": 0.0,
                "IntervalDailySession": 0.0, "IntervalLogin": 0.0, "IntervalMissing": 1.0}
    quiz = quiz_features(sessions)
    sess = session_features(sessions, start, end)
    videos = {e.target for e in _events(sessions) if e.kind.is_video}
    return {
        "IntervalNumQuiz": quiz["NumQuiz"],
        "IntervalQuizAttempt": quiz["AvgQuiz"],
        "IntervalVideo": float(len(videos)),
        "IntervalDailySession": sess["NumSession"],
        "IntervalLogin": sess["AvgNumLogin"],
        "IntervalMissing": 0.0,
    }


def meanscore_feature(events: Sequence[EventRecord], end: int) -> dict[str, float]:
    """Mean quiz and homework grade recorded before ``end``."""
    grades = [e.grade for e in events if e.timestamp < end and e.grade is not None]
    if not grades:
        return {"Meanscore": 0.0, "MeanscoreMissing": 1.0}
    return {"Meanscore": float(np.mean(grades)), "MeanscoreMissing": 0.0}


def extract_features(events: Sequence[EventRecord], catalog: CourseCatalog,
                     window: ObservationWindow, timeout: int = SESSION_TIMEOUT) -> np.ndarray:
    """Feature vector for one observation, ordered as :data:`FEATURE_NAMES`."""
    sessions = window_sessions(events, window.start, window.end, timeout)
    values: dict[str, float] = {}
    values.update(session_features(sessions, window.start, window.end))
    values.update(quiz_features(sessions))
    values.update(video_features(sessions, catalog))
    values.update(homework_features(sessions))
    values.update(time_features(sessions, window.start, window.end))
    if window.interval_start is None or window.interval_start >= window.end:
        values.update(interval_features(None, None, window.end))
    else:
        isess = window_sessions(events, window.interval_start, window.end, timeout)
        values.update(interval_features(isess, window.interval_start, window.end))
    values.update(meanscore_feature(events, window.end))
    return np.array([values[n] for n in FEATURE_NAMES], dtype=float)


def attempt_instants(events: Sequence[EventRecord]) -> dict[str, int]:
    """First save/submit time per homework."""
    first: dict[str, int] = {}
    for e in events:
        if e.kind.is_homework and e.target not in first:
            first[e.target] = e.timestamp
    return first


def submissions(events: Sequence[EventRecord]) -> dict[str, EventRecord]:
    """First ``homework_submit`` per homework."""
    out: dict[str, EventRecord] = {}
    for e in events:
        if e.kind is EventKind.HOMEWORK_SUBMIT and e.target not in out:
            out[e.target] = e
    return out


def observation_windows(events_by_student: Mapping[str, Sequence[EventRecord]],
                        catalog: CourseCatalog) -> list[ObservationWindow]:
    """One window per (student, homework) pair with any attempt, in
    student-then-course order."""
    windows = []
    for student in sorted(events_by_student):
        events = events_by_student[student]
        if not events:
            continue
        attempts = attempt_instants(events)
        subs = submissions(events)
        for ordinal, hw in enumerate(catalog.homeworks, start=1):
            if hw not in attempts:
                continue
            interval_start = None
            if ordinal > 1:
                prev = subs.get(catalog.homeworks[ordinal - 2])
                if prev is not None and prev.timestamp < attempts[hw]:
                    interval_start = prev.timestamp + 1
            windows.append(ObservationWindow(student, hw, events[0].timestamp, attempts[hw],
                                             interval_start))
    return windows


@dataclass
class FeatureTable:
    """Feature matrix with per-row keys and the target grade column."""

    students: list[str]
    targets: list[str]
    ordinals: np.ndarray
    X: np.ndarray
    y: np.ndarray
    names: tuple[str, ...] = FEATURE_NAMES
    excluded: list[ObservationWindow] = field(default_factory=list)

    def __len__(self):
        return len(self.students)

    @property
    def groups(self) -> dict[str, FeatureGroup]:
        return {n: FEATURE_GROUPS[n] for n in self.names}

    def subset(self, mask) -> "FeatureTable":
        idx = np.flatnonzero(np.asarray(mask))
        return FeatureTable([self.students[i] for i in idx], [self.targets[i] for i in idx],
                            self.ordinals[idx], self.X[idx], self.y[idx], self.names)

    def drop_groups(self, groups: Iterable) -> "FeatureTable":
        drop = {FeatureGroup(g) for g in groups}
        keep = [i for i, n in enumerate(self.names) if FEATURE_GROUPS[n] not in drop]
        return FeatureTable(list(self.students), list(self.targets), self.ordinals.copy(),
                            self.X[:, keep], self.y.copy(), tuple(self.names[i] for i in keep))

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["student", "target", *self.names, "grade"])
            for i in range(len(self)):
                w.writerow([self.students[i], self.targets[i],
                            *(repr(float(v)) for v in self.X[i]), repr(float(self.y[i]))])

    @classmethod
    def from_csv(cls, path, catalog: CourseCatalog) -> "FeatureTable":
        with open(path, encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
        header, body = rows[0], rows[1:]
        if header[:2] != ["student", "target"] or header[-1] != "grade":
            raise DataError(f"{path}: unexpected feature CSV header")
        names = tuple(header[2:-1])
        unknown = [n for n in names if n not in FEATURE_GROUPS]
        if unknown:
            raise DataError(f"{path}: unknown feature columns {unknown}")
        X = np.array([[float(v) for v in r[2:-1]] for r in body], dtype=float).reshape(-1, len(names))
        return cls([r[0] for r in body], [r[1] for r in body],
                   np.array([catalog.ordinal(r[1]) for r in body], dtype=int), X,
                   np.array([float(r[-1]) for r in body]), names)


def build_feature_matrix(events_by_student: Mapping[str, Sequence[EventRecord]],
                         catalog: CourseCatalog,
                         windows: Sequence[ObservationWindow] | None = None,
                         timeout: int = SESSION_TIMEOUT) -> FeatureTable:
    """Featurize every window; rows keep input order.

    Windows whose target was never submitted are left out and listed in
    ``FeatureTable.excluded``.
    """
    if windows is None:
        windows = observation_windows(events_by_student, catalog)
    rows, students, targets, grades, excluded = [], [], [], [], []
    sub_cache: dict[str, dict[str, EventRecord]] = {}
    for w in windows:
        events = events_by_student[w.student]
        if w.student not in sub_cache:
            sub_cache[w.student] = submissions(events)
        submit = sub_cache[w.student].get(w.target)
        if submit is None:
            excluded.append(w)
            continue
        rows.append(extract_features(events, catalog, w, timeout))
        students.append(w.student)
        targets.append(w.target)
        grades.append(submit.grade)
    if excluded:
        logger.info("excluded %d observations without a submission", len(excluded))
    X = np.array(rows, dtype=float).reshape(len(rows), len(FEATURE_NAMES))
    ordinals = np.array([catalog.ordinal(t) for t in targets], dtype=int)
    return FeatureTable(students, targets, ordinals, X, np.array(grades, dtype=float),
                        FEATURE_NAMES, excluded)


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.mean.shape[0]:
            raise DataError(f"expected {self.mean.shape[0]} feature columns, got {X.shape[-1]}")
        safe = np.where(self.std > 0, self.std, 1.0)
        return np.where(self.std > 0, (X - self.mean) / safe, 0.0)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc) -> "StandardizationStats":
        return cls(np.asarray(doc["mean"], dtype=float), np.asarray(doc["std"], dtype=float))


def standardize(X, stats: StandardizationStats | None = None):
    """Z-score columns, fitting population mean/std unless ``stats`` is given.

    Zero-variance columns map to 0. Returns ``(Z, stats)``.
    """
    X = np.asarray(X, dtype=float)
    if stats is None:
        if X.shape[0] == 0:
            raise DataError("cannot fit standardization on zero rows")
        stats = StandardizationStats(X.mean(axis=0), X.std(axis=0))
    return stats.apply(X), stats


class Standardizer(TransformerMixin, BaseEstimator):
    """sklearn transformer wrapper around :func:`standardize`."""

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=1)
        _, self.stats_ = standardize(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return self.stats_.apply(check_array(X, ensure_min_samples=0))
