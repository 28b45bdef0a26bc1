"""Session measures: exact identities, interval merging, report formatting."""

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treeline import errors
from treeline.metrics import (
    MetricsReport,
    SessionEvent,
    SessionLog,
    compute_report,
    merge_intervals,
)

MIN = 60_000  # ms


def ev(ts_ms, kind, **payload):
    return SessionEvent(ts_ms=ts_ms, kind=kind, payload=payload)


def synthetic_session(t5_min, wait_min, assemble_min, scenes=(10.0, 20.0, 30.0)):
    """A session whose anchor values are exactly the given minutes."""
    events = [ev(0, "SessionStarted")]
    # one generation pair covering the full wait, placed early in the session
    wait_ms = int(wait_min * MIN)
    events.append(ev(1 * MIN, "RequestIssued", node_id="n1"))
    events.append(ev(1 * MIN + wait_ms, "ResultPreviewable", node_id="n1"))
    events.append(ev(1 * MIN + wait_ms, "GenerationCall", node_id="n1", count=3))
    for i, s in enumerate(scenes):
        events.append(ev(int(s * MIN), "SceneCompleted", scene_index=i + 1))
    t5_ms = int(t5_min * MIN)
    events.append(ev(t5_ms - int(assemble_min * MIN), "AssemblyEntered"))
    events.append(ev(t5_ms, "ExportCompleted"))
    events.sort(key=lambda e: e.ts_ms)
    return events


class TestPublishedAverages:
    """The two reference sessions reproduce the published averages exactly."""

    def test_baseline_condition_identities(self):
        report = compute_report(synthetic_session(68.2, 30.4, 10.5))
        assert report.t5_min == Fraction(682, 10)
        assert report.t_wait_min == Fraction(304, 10)
        assert report.t_active_min == Fraction(378, 10)
        assert report.t_assemble_min == Fraction(105, 10)
        assert report.t_author_min == Fraction(577, 10)

    def test_tree_condition_identities(self):
        report = compute_report(synthetic_session(52.6, 27.5, 1.8))
        assert report.t_active_min == Fraction(251, 10)
        assert report.t_author_min == Fraction(508, 10)

    def test_one_decimal_formatting(self):
        report = compute_report(synthetic_session(68.2, 30.4, 10.5))
        assert MetricsReport.format_minutes(report.t_active_min) == "37.8"
        assert MetricsReport.format_minutes(report.t_author_min) == "57.7"
        assert MetricsReport.format_minutes(report.t5_min) == "68.2"
        table = report.to_text_table()
        assert "37.8" in table and "Active time" in table


class TestAnchors:
    def test_t3_needs_three_scenes(self):
        events = [ev(0, "SessionStarted"), ev(5 * MIN, "SceneCompleted")]
        report = compute_report(events)
        assert report.t3_min is None

    def test_t3_uses_third_scene(self):
        events = [ev(0, "SessionStarted")] + [
            ev(t * MIN, "SceneCompleted") for t in (10, 20, 31, 44)
        ]
        assert compute_report(events).t3_min == Fraction(31)

    def test_missing_session_start(self):
        with pytest.raises(errors.MissingAnchor):
            compute_report([ev(0, "ExportCompleted")])

    def test_missing_export_leaves_t5_fields_none(self):
        report = compute_report([ev(0, "SessionStarted")])
        assert report.t5_min is None and report.t_active_min is None
        assert report.t_author_min is None

    def test_unmatched_previewable_flagged_not_fatal(self):
        events = [ev(0, "SessionStarted"), ev(10, "ResultPreviewable", node_id="nx")]
        report = compute_report(events)
        assert report.unmatched_previewables == 1


class TestOverlapRules:
    def test_union_caps_at_wall_clock(self):
        events = [
            ev(0, "SessionStarted"),
            ev(0, "RequestIssued", node_id="a"),
            ev(0, "RequestIssued", node_id="b"),
            ev(10 * MIN, "ResultPreviewable", node_id="a"),
            ev(10 * MIN, "ResultPreviewable", node_id="b"),
            ev(20 * MIN, "ExportCompleted"),
        ]
        assert compute_report(events, overlap="union").t_wait_min == Fraction(10)
        assert compute_report(events, overlap="sum").t_wait_min == Fraction(20)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 10_000), st.integers(1, 5_000)), max_size=12))
    def test_union_matches_bruteforce_point_scan(self, raw):
        intervals = [(s, s + d) for s, d in raw]
        merged = merge_intervals(intervals)
        union_len = sum(e - s for s, e in merged)
        covered = set()
        for s, e in intervals:
            covered.update(range(s, e))
        assert union_len == len(covered)
        # merged intervals are disjoint and sorted
        for (s1, e1), (s2, e2) in zip(merged, merged[1:]):
            assert e1 < s2


class TestIdentitiesProperty:
    @settings(max_examples=100, deadline=None)
    @given(
        t5=st.integers(10 * MIN, 200 * MIN),
        waits=st.lists(st.tuples(st.integers(0, 9 * MIN), st.integers(1, MIN)), max_size=5),
        assemble=st.integers(0, 9 * MIN),
    )
    def test_active_plus_wait_and_author_plus_assemble(self, t5, waits, assemble):
        events = [ev(0, "SessionStarted")]
        for i, (start, dur) in enumerate(waits):
            events.append(ev(start, "RequestIssued", node_id=f"n{i}"))
            events.append(ev(start + dur, "ResultPreviewable", node_id=f"n{i}"))
        events.append(ev(t5 - assemble, "AssemblyEntered"))
        events.append(ev(t5, "ExportCompleted"))
        events.sort(key=lambda e: e.ts_ms)
        report = compute_report(events)
        assert report.t_active_min + report.t_wait_min == report.t5_min
        assert report.t_author_min + report.t_assemble_min == report.t5_min

    def test_counters_monotone_as_log_grows(self):
        rng = random.Random(7)
        events = [ev(0, "SessionStarted")]
        last_calls = last_variants = 0
        t = 0
        for _ in range(60):
            t += rng.randint(1, 1000)
            if rng.random() < 0.5:
                events.append(ev(t, "GenerationCall", node_id="n", count=rng.randint(1, 4)))
            else:
                events.append(ev(t, "VariantRetained", node_id="n"))
            report = compute_report(events)
            assert report.n_calls >= last_calls
            assert report.n_variants >= last_variants
            last_calls, last_variants = report.n_calls, report.n_variants


class TestSessionLog:
    def test_seq_starts_at_one(self, tmp_path):
        log = SessionLog(tmp_path / "s.ndjson", fsync=False)
        assert log.record("SessionStarted", ts_ms=10) == 1

    def test_timestamp_regression_rejected(self, tmp_path):
        log = SessionLog(tmp_path / "s.ndjson", fsync=False)
        log.record("SessionStarted", ts_ms=100)
        with pytest.raises(errors.TimestampRegression):
            log.record("SceneCompleted", ts_ms=50)

    def test_closed_session_rejects_events(self, tmp_path):
        log = SessionLog(tmp_path / "s.ndjson", fsync=False)
        log.record("SessionStarted", ts_ms=1)
        log.close()
        with pytest.raises(errors.ClosedSession):
            log.record("SceneCompleted", ts_ms=2)

    def test_reopen_preserves_monotonicity(self, tmp_path):
        path = tmp_path / "s.ndjson"
        log = SessionLog(path, fsync=False)
        log.record("SessionStarted", ts_ms=500)
        log2 = SessionLog(path, fsync=False)
        with pytest.raises(errors.TimestampRegression):
            log2.record("SceneCompleted", ts_ms=400)
        assert log2.record("SceneCompleted", ts_ms=600) == 2
