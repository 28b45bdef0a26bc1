"""Session telemetry: event recording and the authoring-efficiency report.

Events are appended to a newline-delimited JSON log with millisecond
timestamps. The report works in exact rational arithmetic (``Fraction`` over
milliseconds) so the derived identities hold with zero drift:

    active time    = time to final export - accumulated generation wait
    authoring time = time to final export - assembly/export duration

Overlapping wait intervals from parallel jobs are union-merged by default so
accumulated wait never exceeds wall clock; a plain summation rule is available
for comparison (``overlap="sum"``).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional

from . import errors
from .model import canonical_json

EVENT_KINDS = (
    "SessionStarted",
    "RequestIssued",
    "ResultPreviewable",
    "GenerationCall",
    "VariantRetained",
    "SceneCompleted",
    "AssemblyEntered",
    "ExportCompleted",
)

MS_PER_MINUTE = 60_000


def now_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass
class SessionEvent:
    ts_ms: int
    kind: str
    payload: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ts_ms": self.ts_ms, "kind": self.kind, "payload": dict(self.payload)}


class SessionLog:
    """Append-only per-session event log with monotone timestamps."""

    def __init__(self, path: str | Path, *, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self.closed = False
        self._last_ts = -1
        self._seq = 0
        if self.path.exists():
            for ev in self.read_events():
                self._last_ts = ev.ts_ms
                self._seq += 1
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, kind: str, payload: dict | None = None, ts_ms: Optional[int] = None) -> int:
        if self.closed:
            raise errors.ClosedSession(f"session log {self.path.name} is closed")
        if kind not in EVENT_KINDS:
            raise errors.StorageFailure(f"unknown session event kind {kind!r}")
        ts = now_ms() if ts_ms is None else ts_ms
        if ts < self._last_ts:
            raise errors.TimestampRegression(f"timestamp {ts} < last recorded {self._last_ts}")
        record = {"seq": self._seq + 1, "ts_ms": ts, "kind": kind, "payload": dict(payload or {})}
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(canonical_json(record) + "\n")
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        self._last_ts = ts
        self._seq += 1
        return self._seq

    def close(self) -> None:
        self.closed = True

    def read_events(self) -> list[SessionEvent]:
        out = []
        if not self.path.exists():
            return out
        for line in self.path.read_text("utf-8").splitlines():
            if not line.strip():
                continue
            data = json.loads(line)
            out.append(SessionEvent(ts_ms=data["ts_ms"], kind=data["kind"], payload=data.get("payload", {})))
        return out

    def has_kind(self, kind: str) -> bool:
        return any(ev.kind == kind for ev in self.read_events())


@dataclass
class MetricsReport:
    """Session measures in minutes (exact rationals) plus activity counts."""

    t3_min: Optional[Fraction]
    t5_min: Optional[Fraction]
    t_wait_min: Fraction
    t_active_min: Optional[Fraction]
    t_assemble_min: Optional[Fraction]
    t_author_min: Optional[Fraction]
    n_calls: int
    n_variants: int
    unmatched_previewables: int
    unmatched_requests: int
    overlap_rule: str

    ROW_LABELS = (
        ("t3_min", "Time to 3 scenes (min)"),
        ("t5_min", "Time to final export (min)"),
        ("t_assemble_min", "Assembly and export time (min)"),
        ("t_wait_min", "Total waiting time (min)"),
        ("t_active_min", "Active time (min)"),
        ("t_author_min", "Iterative authoring time (min)"),
        ("n_calls", "Generation calls (counts)"),
        ("n_variants", "Retained variants (counts)"),
    )

    @staticmethod
    def format_minutes(value: Optional[Fraction]) -> str:
        if value is None:
            return "n/a"
        # one decimal place, exact half-up in rational arithmetic
        tenths = value * 10
        rounded = (tenths.numerator * 2 + tenths.denominator) // (tenths.denominator * 2)
        return f"{rounded // 10}.{rounded % 10}"

    def to_json_dict(self) -> dict:
        def minutes(v: Optional[Fraction]):
            return None if v is None else self.format_minutes(v)

        def ms(v: Optional[Fraction]):
            if v is None:
                return None
            r = v * MS_PER_MINUTE
            return int(r) if r.denominator == 1 else float(r)

        return {
            "t3": {"min": minutes(self.t3_min), "ms": ms(self.t3_min)},
            "t5": {"min": minutes(self.t5_min), "ms": ms(self.t5_min)},
            "t_wait": {"min": minutes(self.t_wait_min), "ms": ms(self.t_wait_min)},
            "t_active": {"min": minutes(self.t_active_min), "ms": ms(self.t_active_min)},
            "t_assemble": {"min": minutes(self.t_assemble_min), "ms": ms(self.t_assemble_min)},
            "t_author": {"min": minutes(self.t_author_min), "ms": ms(self.t_author_min)},
            "n_calls": self.n_calls,
            "n_variants": self.n_variants,
            "unmatched_previewables": self.unmatched_previewables,
            "unmatched_requests": self.unmatched_requests,
            "overlap_rule": self.overlap_rule,
        }

    def to_text_table(self) -> str:
        rows = []
        values = {
            "t3_min": self.format_minutes(self.t3_min),
            "t5_min": self.format_minutes(self.t5_min),
            "t_assemble_min": self.format_minutes(self.t_assemble_min),
            "t_wait_min": self.format_minutes(self.t_wait_min),
            "t_active_min": self.format_minutes(self.t_active_min),
            "t_author_min": self.format_minutes(self.t_author_min),
            "n_calls": str(self.n_calls),
            "n_variants": str(self.n_variants),
        }
        width = max(len(label) for _, label in self.ROW_LABELS)
        for key, label in self.ROW_LABELS:
            rows.append(f"{label:<{width}}  {values[key]:>8}")
        if self.unmatched_previewables or self.unmatched_requests:
            rows.append(
                f"{'Unmatched wait events':<{width}}  "
                f"{self.unmatched_requests}+{self.unmatched_previewables:>1} flagged"
            )
        return "\n".join(rows)


def merge_intervals(intervals: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Union of half-open [start, end) intervals."""
    merged: list[tuple[int, int]] = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def _match_wait_pairs(events: list[SessionEvent]) -> tuple[list[tuple[int, int]], int, int]:
    """FIFO-match RequestIssued to ResultPreviewable per node."""
    pending: dict[str, list[int]] = {}
    pairs: list[tuple[int, int]] = []
    unmatched_previewables = 0
    for ev in events:
        node_id = ev.payload.get("node_id", "")
        if ev.kind == "RequestIssued":
            pending.setdefault(node_id, []).append(ev.ts_ms)
        elif ev.kind == "ResultPreviewable":
            queue = pending.get(node_id) or []
            if queue:
                pairs.append((queue.pop(0), ev.ts_ms))
            else:
                unmatched_previewables += 1
    unmatched_requests = sum(len(q) for q in pending.values())
    return pairs, unmatched_previewables, unmatched_requests


def compute_report(events: list[SessionEvent], *, overlap: str = "union") -> MetricsReport:
    """Derive the session measures from an ordered event list.

    Requires a SessionStarted anchor. Export-dependent fields are None when
    the session has no ExportCompleted yet.
    """
    if overlap not in ("union", "sum"):
        raise ValueError("overlap must be 'union' or 'sum'")
    started = [ev.ts_ms for ev in events if ev.kind == "SessionStarted"]
    if not started:
        raise errors.MissingAnchor("SessionStarted")
    t0 = started[0]

    scene_times = [ev.ts_ms for ev in events if ev.kind == "SceneCompleted"]
    t3_min = Fraction(scene_times[2] - t0, MS_PER_MINUTE) if len(scene_times) >= 3 else None

    exports = [ev.ts_ms for ev in events if ev.kind == "ExportCompleted"]
    t5_min = Fraction(exports[-1] - t0, MS_PER_MINUTE) if exports else None

    pairs, unmatched_prev, unmatched_req = _match_wait_pairs(events)
    if overlap == "union":
        wait_ms = sum(end - start for start, end in merge_intervals(pairs))
    else:
        wait_ms = sum(end - start for start, end in pairs)
    t_wait_min = Fraction(wait_ms, MS_PER_MINUTE)

    assemblies = [ev.ts_ms for ev in events if ev.kind == "AssemblyEntered"]
    t_assemble_min = None
    if exports and assemblies:
        t_assemble_min = Fraction(exports[-1] - assemblies[0], MS_PER_MINUTE)

    t_active_min = (t5_min - t_wait_min) if t5_min is not None else None
    t_author_min = (t5_min - t_assemble_min) if (t5_min is not None and t_assemble_min is not None) else None

    n_calls = sum(int(ev.payload.get("count", 1)) for ev in events if ev.kind == "GenerationCall")
    n_variants = sum(1 for ev in events if ev.kind == "VariantRetained")

    return MetricsReport(
        t3_min=t3_min,
        t5_min=t5_min,
        t_wait_min=t_wait_min,
        t_active_min=t_active_min,
        t_assemble_min=t_assemble_min,
        t_author_min=t_author_min,
        n_calls=n_calls,
        n_variants=n_variants,
        unmatched_previewables=unmatched_prev,
        unmatched_requests=unmatched_req,
        overlap_rule=overlap,
    )
