"""Stitching: collection, track typing, trims, provenance, export determinism."""

import json

import pytest

from treeline import errors
from treeline.model import AUDIO_TRACK, VIDEO_TRACK, NodeKind
from treeline.stitching import build_concat_list
from tests.conftest import make_audio_node, make_image_node, make_video_node


@pytest.fixture
def stitched(project):
    """Project with one image, one video, one audio node, nothing placed yet."""
    engine, pid = project
    root = engine.state(pid).root_id
    image = make_image_node(engine, pid, root)
    video = make_video_node(engine, pid, root, [image.candidates[0].asset_ids[0]])
    audio = make_audio_node(engine, pid, root)
    return engine, pid, image, video, audio


class TestCollect:
    def test_collection_grows(self, stitched):
        engine, pid, image, video, audio = stitched
        engine.collect(pid, video.node_id, 0, 0)
        assert len(engine.state(pid).timeline.collection) == 1

    def test_duplicates_allowed(self, stitched):
        engine, pid, image, video, audio = stitched
        engine.collect(pid, video.node_id, 0, 0)
        engine.collect(pid, video.node_id, 0, 0)
        assert len(engine.state(pid).timeline.collection) == 2

    def test_draft_node_candidate_unknown(self, stitched):
        engine, pid, image, video, audio = stitched
        draft = engine.add_child(pid, image.node_id, NodeKind.PLANNING)
        with pytest.raises(errors.UnknownCandidate):
            engine.collect(pid, draft.node_id, 0, 0)

    def test_bad_index_unknown(self, stitched):
        engine, pid, image, video, audio = stitched
        with pytest.raises(errors.UnknownCandidate):
            engine.collect(pid, video.node_id, 0, 9)


class TestPlacement:
    def test_audio_on_video_track_rejected(self, stitched):
        engine, pid, image, video, audio = stitched
        entry = engine.collect(pid, audio.node_id, 0, 0)
        with pytest.raises(errors.ModalityMismatch):
            engine.place_segment(pid, entry["entry_id"], VIDEO_TRACK)

    def test_image_allowed_on_video_track_with_still_duration(self, stitched):
        engine, pid, image, video, audio = stitched
        entry = engine.collect(pid, image.node_id, 0, 0)
        seg = engine.place_segment(pid, entry["entry_id"], VIDEO_TRACK)
        assert seg["trim_out_ms"] == engine.config.still_duration_ms

    def test_video_on_audio_track_rejected(self, stitched):
        engine, pid, image, video, audio = stitched
        entry = engine.collect(pid, video.node_id, 0, 0)
        with pytest.raises(errors.ModalityMismatch):
            engine.place_segment(pid, entry["entry_id"], AUDIO_TRACK)

    def test_bad_trim(self, stitched):
        engine, pid, image, video, audio = stitched
        entry = engine.collect(pid, video.node_id, 0, 0)
        with pytest.raises(errors.BadTrim):
            engine.place_segment(pid, entry["entry_id"], VIDEO_TRACK,
                                 trim_in_ms=2000, trim_out_ms=1000)
        with pytest.raises(errors.BadTrim):
            engine.place_segment(pid, entry["entry_id"], VIDEO_TRACK,
                                 trim_in_ms=0, trim_out_ms=10_000_000)

    def test_reorder_moves_last_to_front(self, stitched):
        engine, pid, image, video, audio = stitched
        ids = []
        for _ in range(3):
            entry = engine.collect(pid, video.node_id, 0, 0)
            seg = engine.place_segment(pid, entry["entry_id"], VIDEO_TRACK)
            ids.append(seg["segment_id"])
        engine.reorder_segment(pid, ids[2], 0)
        track = engine.state(pid).timeline.track_segments(VIDEO_TRACK)
        assert [s.segment_id for s in track] == [ids[2], ids[0], ids[1]]
        assert [s.order_index for s in track] == [0, 1, 2]

    def test_remove_reindexes_and_touches_nothing_else(self, stitched):
        engine, pid, image, video, audio = stitched
        ids = []
        for _ in range(3):
            entry = engine.collect(pid, video.node_id, 0, 0)
            seg = engine.place_segment(pid, entry["entry_id"], VIDEO_TRACK)
            ids.append(seg["segment_id"])
        def nodes_and_assets():
            from treeline.model import canonical_bytes
            state = engine.state(pid)
            return canonical_bytes({
                "nodes": {nid: n.to_dict() for nid, n in sorted(state.nodes.items())},
                "assets": {aid: a.to_dict() for aid, a in sorted(state.assets.items())},
            })

        before = nodes_and_assets()
        engine.remove_segment(pid, ids[1])
        track = engine.state(pid).timeline.track_segments(VIDEO_TRACK)
        assert [s.segment_id for s in track] == [ids[0], ids[2]]
        assert [s.order_index for s in track] == [0, 1]
        assert nodes_and_assets() == before

    def test_insert_at_index(self, stitched):
        engine, pid, image, video, audio = stitched
        e1 = engine.collect(pid, video.node_id, 0, 0)
        s1 = engine.place_segment(pid, e1["entry_id"], VIDEO_TRACK)
        e2 = engine.collect(pid, image.node_id, 0, 0)
        s2 = engine.place_segment(pid, e2["entry_id"], VIDEO_TRACK, order_index=0)
        track = engine.state(pid).timeline.track_segments(VIDEO_TRACK)
        assert [s.segment_id for s in track] == [s2["segment_id"], s1["segment_id"]]


class TestTraceOrigin:
    def test_origin_equals_store_provenance(self, stitched):
        engine, pid, image, video, audio = stitched
        entry = engine.collect(pid, video.node_id, 0, 0)
        seg = engine.place_segment(pid, entry["entry_id"], VIDEO_TRACK)
        origin = engine.trace_origin(pid, seg["segment_id"])
        assert origin == video.node_id
        sidecar = engine.store.get_asset(pid, seg["asset_id"])
        assert sidecar.producer_node_id == origin

    def test_origin_survives_upstream_rerun(self, stitched):
        engine, pid, image, video, audio = stitched
        entry = engine.collect(pid, video.node_id, 0, 0)
        seg = engine.place_segment(pid, entry["entry_id"], VIDEO_TRACK)
        engine.execute_node(pid, video.node_id, wait=True)  # appends a new batch
        assert engine.trace_origin(pid, seg["segment_id"]) == video.node_id

    def test_unknown_segment(self, stitched):
        engine, pid, *_ = stitched
        with pytest.raises(errors.UnknownSegment):
            engine.trace_origin(pid, "missing")


class TestExport:
    def _place_basic(self, engine, pid, video, audio, image=None):
        e1 = engine.collect(pid, video.node_id, 0, 0)
        engine.place_segment(pid, e1["entry_id"], VIDEO_TRACK)
        if image is not None:
            e2 = engine.collect(pid, image.node_id, 0, 0)
            engine.place_segment(pid, e2["entry_id"], VIDEO_TRACK)
        e3 = engine.collect(pid, audio.node_id, 0, 0)
        engine.place_segment(pid, e3["entry_id"], AUDIO_TRACK)

    def test_manifest_structure_and_determinism(self, stitched):
        engine, pid, image, video, audio = stitched
        self._place_basic(engine, pid, video, audio, image)
        r1 = engine.export(pid, "cut.mp4")
        r2 = engine.export(pid, "cut.mp4")
        assert r1.manifest_bytes == r2.manifest_bytes
        manifest = json.loads(r1.manifest_bytes)
        assert len(manifest["segments"]) == 3
        assert all(s["source_node_id"] for s in manifest["segments"])
        assert manifest["video_segment_count"] == 2
        assert manifest["audio_segment_count"] == 1

    def test_concat_list_trim_lines_only_when_trimmed(self, stitched):
        engine, pid, image, video, audio = stitched
        e1 = engine.collect(pid, video.node_id, 0, 0)
        engine.place_segment(pid, e1["entry_id"], VIDEO_TRACK)  # untrimmed
        e2 = engine.collect(pid, video.node_id, 0, 0)
        engine.place_segment(pid, e2["entry_id"], VIDEO_TRACK,
                             trim_in_ms=500, trim_out_ms=1500)
        concat = build_concat_list(engine.state(pid)).decode()
        lines = concat.splitlines()
        assert lines[0].startswith("file 'assets/")
        assert "inpoint" not in lines[0:1][0]
        assert lines[1].startswith("file 'assets/")
        assert lines[2] == "inpoint 0.500"
        assert lines[3] == "outpoint 1.500"

    def test_empty_video_track(self, stitched):
        engine, pid, image, video, audio = stitched
        with pytest.raises(errors.EmptyTimeline):
            engine.export(pid)

    def test_encoder_invocation_success_and_failure(self, stitched, tmp_path):
        engine, pid, image, video, audio = stitched
        self._place_basic(engine, pid, video, audio)
        engine.config.encoder_cmd = "cp {concat_list} {output}"
        result = engine.export(pid, "enc.mp4")
        assert result.encoder_ran and result.output_path.exists()
        engine.config.encoder_cmd = "false"
        with pytest.raises(errors.EncoderFailed):
            engine.export(pid, "enc2.mp4")

    def test_export_completed_recorded_for_metrics(self, stitched):
        engine, pid, image, video, audio = stitched
        self._place_basic(engine, pid, video, audio)
        engine.export(pid)
        report = engine.metrics_report(pid)
        assert report.t5_min is not None
        assert report.t_assemble_min is not None  # first collect marked assembly entry


class TestPruneExclusion:
    def test_segment_blocks_prune_and_removal_unblocks(self, stitched):
        engine, pid, image, video, audio = stitched
        entry = engine.collect(pid, video.node_id, 0, 0)
        seg = engine.place_segment(pid, entry["entry_id"], VIDEO_TRACK)
        with pytest.raises(errors.PruneConflict):
            engine.prune(pid, video.node_id)
        engine.remove_segment(pid, seg["segment_id"])
        # the collection entry still references the asset, so prune stays blocked
        with pytest.raises(errors.PruneConflict):
            engine.prune(pid, video.node_id)
