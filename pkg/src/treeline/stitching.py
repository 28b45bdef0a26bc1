"""Convergence workspace: candidate collection, two-track timeline, export.

Track 0 carries visuals (images get a configured still duration), track 1
carries audio. Segments stay back-linked to the node that produced their
asset; prune's live-reference guard means ``trace_origin`` can never dangle.

Export writes a plain-text concat list for an external encoder plus a
provenance manifest. Both are pure functions of the timeline state, byte for
byte, so repeated exports of an unchanged timeline are identical.
"""

from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import errors
from .model import (
    AUDIO_TRACK,
    VIDEO_TRACK,
    Event,
    Modality,
    NodeStatus,
    ProjectState,
    canonical_json,
    mint_id,
)

DEFAULT_STILL_DURATION_MS = 3000


def asset_duration_ms(state: ProjectState, asset_id: str,
                      still_duration_ms: int = DEFAULT_STILL_DURATION_MS) -> int:
    info = state.assets[asset_id]
    if info.modality is Modality.IMAGE:
        return still_duration_ms
    return int(info.metadata.get("duration_ms", still_duration_ms))


def cmd_collect(state: ProjectState, node_id: str, batch_index: int,
                candidate_index: int) -> list[Event]:
    node = state.nodes.get(node_id)
    if node is None or node.status is not NodeStatus.SUCCEEDED:
        raise errors.UnknownCandidate(f"node {node_id} has no succeeded candidates")
    try:
        asset_id = node.candidates[batch_index].asset_ids[candidate_index]
    except IndexError:
        raise errors.UnknownCandidate(
            f"candidate ({batch_index},{candidate_index}) does not exist on node {node_id}")
    entry_id = mint_id(state.project_id, "entry", state.tick)
    return [("timeline_collected", {
        "entry_id": entry_id, "asset_id": asset_id, "source_node_id": node_id,
    })]


def _entry(state: ProjectState, entry_id: str):
    for entry in state.timeline.collection:
        if entry.entry_id == entry_id:
            return entry
    raise errors.UnknownEntry(f"no collection entry {entry_id}")


def cmd_place_segment(state: ProjectState, entry_id: str, track: int,
                      order_index: Optional[int] = None,
                      trim_in_ms: Optional[int] = None,
                      trim_out_ms: Optional[int] = None,
                      still_duration_ms: int = DEFAULT_STILL_DURATION_MS) -> list[Event]:
    entry = _entry(state, entry_id)
    info = state.assets.get(entry.asset_id)
    if info is None:
        raise errors.UnknownAsset(f"collection entry {entry_id} points at missing asset")
    if track == VIDEO_TRACK:
        if info.modality not in (Modality.IMAGE, Modality.VIDEO):
            raise errors.ModalityMismatch(f"{info.modality.value} asset cannot sit on the video track")
    elif track == AUDIO_TRACK:
        if info.modality is not Modality.AUDIO:
            raise errors.ModalityMismatch(f"{info.modality.value} asset cannot sit on the audio track")
    else:
        raise errors.ModalityMismatch(f"unknown track {track}")

    duration = asset_duration_ms(state, entry.asset_id, still_duration_ms)
    t_in = 0 if trim_in_ms is None else int(trim_in_ms)
    t_out = duration if trim_out_ms is None else int(trim_out_ms)
    if t_in < 0 or t_out <= t_in or t_out > duration:
        raise errors.BadTrim(f"trim [{t_in},{t_out}) invalid for asset duration {duration}ms")

    existing = state.timeline.track_segments(track)
    insert_at = len(existing) if order_index is None else max(0, min(int(order_index), len(existing)))
    segment_id = mint_id(state.project_id, "segment", state.tick)
    return [("segment_placed", {
        "segment_id": segment_id,
        "entry_id": entry_id,
        "asset_id": entry.asset_id,
        "source_node_id": entry.source_node_id,
        "track": track,
        "order_index": insert_at,
        "trim_in_ms": t_in,
        "trim_out_ms": t_out,
    })]


def _segment(state: ProjectState, segment_id: str):
    for seg in state.timeline.segments:
        if seg.segment_id == segment_id:
            return seg
    raise errors.UnknownSegment(f"no segment {segment_id}")


def cmd_reorder(state: ProjectState, segment_id: str, new_index: int) -> list[Event]:
    seg = _segment(state, segment_id)
    track_len = len(state.timeline.track_segments(seg.track))
    new_index = max(0, min(int(new_index), track_len - 1))
    return [("segment_reordered", {"segment_id": segment_id, "new_index": new_index})]


def cmd_remove(state: ProjectState, segment_id: str) -> list[Event]:
    _segment(state, segment_id)
    return [("segment_removed", {"segment_id": segment_id})]


def trace_origin(state: ProjectState, segment_id: str) -> str:
    """The node that produced the segment's asset. Total for live timelines."""
    seg = _segment(state, segment_id)
    info = state.assets.get(seg.asset_id)
    if info is None:
        raise errors.UnknownAsset(f"segment {segment_id} references missing asset {seg.asset_id}")
    return info.producer_node_id


@dataclass
class ExportResult:
    manifest_path: Path
    concat_path: Path
    output_path: Path
    encoder_ran: bool
    manifest_bytes: bytes


def build_manifest(state: ProjectState) -> bytes:
    """Provenance manifest: every segment mapped to asset, origin, and trims."""
    segments = []
    for track in (VIDEO_TRACK, AUDIO_TRACK):
        for seg in state.timeline.track_segments(track):
            info = state.assets[seg.asset_id]
            segments.append({
                "segment_id": seg.segment_id,
                "track": seg.track,
                "order_index": seg.order_index,
                "asset_id": seg.asset_id,
                "source_node_id": seg.source_node_id,
                "trim_in_ms": seg.trim_in_ms,
                "trim_out_ms": seg.trim_out_ms,
                "modality": info.modality.value,
                "media_path": f"assets/{seg.asset_id}",
            })
    manifest = {
        "project_id": state.project_id,
        "segments": segments,
        "video_segment_count": sum(1 for s in segments if s["track"] == VIDEO_TRACK),
        "audio_segment_count": sum(1 for s in segments if s["track"] == AUDIO_TRACK),
    }
    return (canonical_json(manifest) + "\n").encode("utf-8")


def build_concat_list(state: ProjectState,
                      still_duration_ms: int = DEFAULT_STILL_DURATION_MS) -> bytes:
    """ffmpeg-style concat list over the video track, paths relative to the
    project directory; in/out points appear only when a segment is trimmed."""
    lines = []
    for seg in state.timeline.track_segments(VIDEO_TRACK):
        duration = asset_duration_ms(state, seg.asset_id, still_duration_ms)
        lines.append(f"file 'assets/{seg.asset_id}'")
        if seg.trim_in_ms > 0 or seg.trim_out_ms < duration:
            lines.append(f"inpoint {seg.trim_in_ms / 1000:.3f}")
            lines.append(f"outpoint {seg.trim_out_ms / 1000:.3f}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def export_timeline(state: ProjectState, project_dir: Path, output_name: str = "final.mp4",
                    *, encoder_cmd: str = "",
                    still_duration_ms: int = DEFAULT_STILL_DURATION_MS) -> ExportResult:
    """Write the concat list and manifest; invoke the encoder when configured.

    Read-only over the project state. Raises EmptyTimeline when the video
    track has no segments and EncoderFailed when a configured encoder exits
    non-zero.
    """
    if not state.timeline.track_segments(VIDEO_TRACK):
        raise errors.EmptyTimeline("video track is empty; nothing to export")

    exports_dir = project_dir / "exports"
    exports_dir.mkdir(exist_ok=True)
    stem = Path(output_name).stem
    manifest_path = exports_dir / f"{stem}.manifest.json"
    concat_path = exports_dir / f"{stem}.concat.txt"
    output_path = exports_dir / output_name

    manifest_bytes = build_manifest(state)
    manifest_path.write_bytes(manifest_bytes)
    concat_path.write_bytes(build_concat_list(state, still_duration_ms))

    encoder_ran = False
    if encoder_cmd:
        command = [
            part.format(concat_list=str(concat_path), manifest=str(manifest_path),
                        output=str(output_path))
            for part in shlex.split(encoder_cmd)
        ]
        proc = subprocess.run(command, cwd=project_dir, capture_output=True, text=True)
        if proc.returncode != 0:
            raise errors.EncoderFailed(
                f"encoder exited {proc.returncode}",
                returncode=proc.returncode, stderr=proc.stderr[-2000:])
        encoder_ran = True

    return ExportResult(
        manifest_path=manifest_path,
        concat_path=concat_path,
        output_path=output_path,
        encoder_ran=encoder_ran,
        manifest_bytes=manifest_bytes,
    )
