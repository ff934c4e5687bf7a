import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moocgrade.eventlog import (CourseCatalog, EventKind, EventRecord, ingest_log,
                                parse_event_line, serialize_event, sessionize, write_log)
from moocgrade.exceptions import CatalogError, IngestionError, LogParseError, SchemaError

from conftest import T0, event


class TestParse:
    def test_video_play(self):
        e = parse_event_line('{"s":"u1","t":1000,"k":"video_play","v":"vid1","pos":0}')
        assert (e.student, e.timestamp, e.kind, e.target) == ("u1", 1000, EventKind.VIDEO_PLAY, "vid1")
        assert e.position == 0.0

    def test_unknown_kind_is_schema_error(self):
        with pytest.raises(SchemaError):
            parse_event_line('{"s":"u1","t":1000,"k":"dance"}')

    def test_bad_timestamp_type_is_parse_error(self):
        with pytest.raises(LogParseError) as info:
            parse_event_line('{"s":"u1","t":"abc","k":"video_play","v":"x","pos":0}', lineno=7)
        assert not isinstance(info.value, SchemaError)
        assert info.value.lineno == 7 and "line 7" in str(info.value)

    @pytest.mark.parametrize("line", [
        '{"s":"u1","t":5,"k":"quiz_attempt","q":"q1","g":0.5}',
        '{"s":"u1","t":5,"k":"homework_submit","h":"h1"}',
        '{"s":"u1","t":5,"k":"video_pause","v":"v1"}',
        '{"t":5,"k":"problem_save","h":"h1"}',
    ])
    def test_missing_key_is_schema_error(self, line):
        with pytest.raises(SchemaError):
            parse_event_line(line)

    @pytest.mark.parametrize("line", [
        "not json", "[1, 2]", '{"s":"","t":5,"k":"problem_save","h":"h1"}',
        '{"s":"u1","t":5.5,"k":"problem_save","h":"h1"}',
        '{"s":"u1","t":5,"k":"quiz_attempt","q":"q1","att":1.0,"g":1}',
        '{"s":"u1","t":5,"k":"homework_submit","h":"h1","g":true}',
    ])
    def test_malformed(self, line):
        with pytest.raises(LogParseError):
            parse_event_line(line)

    @pytest.mark.parametrize("line", [
        '{"s":"u1","t":5,"k":"homework_submit","h":"h1","g":1.5}',
        '{"s":"u1","t":5,"k":"quiz_attempt","q":"q1","att":0,"g":1}',
        '{"s":"u1","t":-1,"k":"problem_save","h":"h1"}',
        '{"s":"u1","t":5,"k":"video_seek","v":"v1","pos":-3}',
    ])
    def test_out_of_range_is_schema_error(self, line):
        with pytest.raises(SchemaError):
            parse_event_line(line)


_kinds = st.sampled_from(list(EventKind))


@st.composite
def records(draw):
    kind = draw(_kinds)
    payload = {}
    if kind.is_video:
        payload["pos"] = draw(st.floats(0, 1e5, allow_nan=False))
    if kind is EventKind.QUIZ_ATTEMPT:
        payload["att"] = draw(st.integers(1, 50))
    if kind in (EventKind.QUIZ_ATTEMPT, EventKind.HOMEWORK_SUBMIT):
        payload["g"] = draw(st.floats(0, 1))
    return EventRecord(draw(st.text(min_size=1, max_size=8)), draw(st.integers(0, 2**40)), kind,
                       draw(st.text(min_size=1, max_size=8)), payload)


@given(records())
def test_parse_serialize_round_trip(rec):
    once = parse_event_line(serialize_event(rec))
    assert once == rec
    assert parse_event_line(serialize_event(once)) == once


class TestCatalog:
    def test_round_trip(self, catalog, tmp_path):
        catalog.save(tmp_path / "c.json")
        assert CourseCatalog.load(tmp_path / "c.json") == catalog

    def test_document_layout(self, catalog):
        doc = catalog.to_dict()
        assert doc["quizzes"][0] == {"id": "qA", "homework": "h1"}
        assert doc["videos"][2] == {"id": "v3", "quiz": "qC", "length_sec": 300.0}
        assert doc["grading"] == "continuous"

    def test_exam_kind(self):
        doc = {"homeworks": ["h1", {"id": "mid", "kind": "exam"}], "quizzes": [], "videos": []}
        cat = CourseCatalog.from_dict(doc)
        assert cat.ordinal("mid") == 2 and cat.homework_kinds == {"mid": "exam"}
        assert CourseCatalog.from_dict(cat.to_dict()) == cat

    @pytest.mark.parametrize("doc", [
        {"homeworks": ["h1"], "quizzes": [{"id": "q", "homework": "h9"}], "videos": []},
        {"homeworks": ["h1"], "quizzes": [{"id": "q", "homework": "h1"}],
         "videos": [{"id": "v", "quiz": "q", "length_sec": 0}]},
        {"homeworks": ["h1", "h1"], "quizzes": [], "videos": []},
        {"homeworks": ["h1"], "quizzes": [], "videos": [], "grading": "letter"},
        {"quizzes": [], "videos": []},
    ])
    def test_invalid(self, doc):
        with pytest.raises(CatalogError):
            CourseCatalog.from_dict(doc)

    def test_ordinal_lookup(self, catalog):
        assert catalog.ordinal("h3") == 3 and catalog.homework_at(1) == "h1"
        with pytest.raises(CatalogError):
            catalog.homework_at(4)


class TestIngest:
    def write(self, tmp_path, lines):
        path = tmp_path / "log.jsonl"
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        return path

    def test_sorted_per_student(self, tmp_path, catalog):
        lines = [serialize_event(event(t, "problem_save", "h1")) for t in (30, 10, 20)]
        res = ingest_log(self.write(tmp_path, lines), catalog)
        assert [e.timestamp for e in res.events["u1"]] == [10, 20, 30]

    def test_stable_ties(self, tmp_path, catalog):
        evs = [event(5, "problem_save", "h2"), event(5, "problem_save", "h1"),
               event(1, "problem_save", "h3")]
        res = ingest_log(self.write(tmp_path, map(serialize_event, evs)), catalog)
        assert [e.target for e in res.events["u1"]] == ["h3", "h2", "h1"]

    def test_unknown_id_dropped_and_counted(self, tmp_path, catalog, caplog):
        good = [serialize_event(event(t, "problem_save", "h1")) for t in range(40)]
        bad = serialize_event(event(99, "quiz_attempt", "qZZ"))
        res = ingest_log(self.write(tmp_path, good + [bad]), catalog)
        assert res.n_dropped == 1 and res.n_lines == 41
        assert len(res.events["u1"]) == 40
        assert "qZZ" in res.problems[0]
        assert any("dropped 1 of 41" in r.message for r in caplog.records)

    def test_empty_file(self, tmp_path, catalog):
        res = ingest_log(self.write(tmp_path, []), catalog)
        assert res.events == {} and res.n_students == 0

    def test_drop_threshold(self, tmp_path, catalog):
        good = [serialize_event(event(t, "problem_save", "h1")) for t in range(10)]
        path = self.write(tmp_path, good + ["garbage"])
        with pytest.raises(IngestionError):
            ingest_log(path, catalog)
        assert ingest_log(path, catalog, max_drop_fraction=0.2).n_dropped == 1

    def test_unreadable(self, tmp_path, catalog):
        with pytest.raises(IngestionError):
            ingest_log(tmp_path / "missing.jsonl", catalog)

    def test_deterministic(self, tmp_path, catalog, small_sim):
        _, res = small_sim
        path = tmp_path / "log.jsonl"
        write_log(res.events, path)
        a = ingest_log(path, res.catalog)
        b = ingest_log(path, res.catalog)
        assert a == b and a.n_dropped == 0


def times(*gaps, start=T0):
    out = [start]
    for g in gaps:
        out.append(out[-1] + g)
    return [event(t, "problem_save", "h1") for t in out]


class TestSessionize:
    def test_gap_equal_to_timeout_stays(self):
        assert len(sessionize(times(100, 3600))) == 1

    def test_gap_over_timeout_splits(self):
        sessions = sessionize(times(100, 3601))
        assert [len(s.events) for s in sessions] == [2, 1]
        assert sessions[0].start == T0 and sessions[0].end == T0 + 100
        assert sessions[1].start == sessions[1].end == T0 + 3701

    def test_singleton(self):
        (s,) = sessionize(times())
        assert s.start == s.end == T0 and s.duration == 0

    def test_empty(self):
        assert sessionize([]) == []

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            sessionize(times(-5))


@st.composite
def event_runs(draw):
    gaps = draw(st.lists(st.one_of(st.integers(0, 7200), st.sampled_from([3599, 3600, 3601])),
                         max_size=40))
    timeout = draw(st.sampled_from([3600, 1800, 60]))
    return times(*gaps), timeout


@settings(max_examples=1000, deadline=None)
@given(event_runs())
def test_sessionize_properties(run):
    events, timeout = run
    sessions = sessionize(events, timeout)
    # partition: concatenation reproduces the input exactly, nothing shared
    flat = [e for s in sessions for e in s.events]
    assert flat == events
    assert sum(len(s.events) for s in sessions) == len(events)
    for s in sessions:
        assert s.events and s.start == s.events[0].timestamp and s.end == s.events[-1].timestamp
        assert s.end >= s.start
        gaps = [b.timestamp - a.timestamp for a, b in zip(s.events, s.events[1:])]
        assert all(0 <= g <= timeout for g in gaps)
    for a, b in zip(sessions, sessions[1:]):
        assert b.start - a.end > timeout
