"""Execution engine: mock generators, job queue, lifecycle, crash safety."""

import json

import pytest

from treeline import errors
from treeline.engine import Engine, EngineConfig
from treeline.executors import ExecRequest, MockImageExecutor, make_pgm, make_wav
from treeline.model import NodeKind, NodeStatus
from treeline.registry import load_baseline_registry
from tests.conftest import make_image_node, make_video_node


@pytest.fixture(scope="module")
def registry():
    return load_baseline_registry()


class TestMockMedia:
    def test_pgm_shape(self):
        data = make_pgm(b"\x01" * 32, 16, 16)
        assert data.startswith(b"P5\n16 16\n255\n")
        assert len(data) == len(b"P5\n16 16\n255\n") + 256

    def test_wav_header(self):
        data = make_wav(b"\x02" * 32, 500)
        assert data[:4] == b"RIFF" and data[8:12] == b"WAVE"
        assert len(data) == 44 + 4000  # 8 kHz, 8-bit mono, 500 ms

    def test_executor_determinism(self, registry):
        wf = registry.get("wf-t2i")
        request = ExecRequest(node_id="n1", workflow=wf, prompt_text="p",
                              parameters={"num_candidates": 2, "factor": 1},
                              inputs=[], batch_ordinal=0)
        a = MockImageExecutor().execute(request)
        b = MockImageExecutor().execute(request)
        assert [x.data for x in a.assets] == [x.data for x in b.assets]

    def test_node_salt_changes_bytes(self, registry):
        wf = registry.get("wf-t2i")
        def run(node_id):
            request = ExecRequest(node_id=node_id, workflow=wf, prompt_text="p",
                                  parameters={"num_candidates": 1}, inputs=[], batch_ordinal=0)
            return MockImageExecutor().execute(request).assets[0].data
        assert run("node-a") != run("node-b")

    def test_batch_ordinal_changes_bytes(self, registry):
        wf = registry.get("wf-t2i")
        def run(ordinal):
            request = ExecRequest(node_id="n", workflow=wf, prompt_text="p",
                                  parameters={"num_candidates": 1}, inputs=[],
                                  batch_ordinal=ordinal)
            return MockImageExecutor().execute(request).assets[0].data
        assert run(0) != run(1)


class TestExecuteNode:
    def test_four_candidates_by_default_schema(self, project):
        engine, pid = project
        root = engine.state(pid).root_id
        node = engine.add_child(pid, root, NodeKind.PLANNING)
        engine.plan_manual(pid, node.node_id, "wf-t2i", "an anchor")
        engine.materialize(pid, node.node_id)
        engine.execute_node(pid, node.node_id, wait=True)
        batch = engine.state(pid).node(node.node_id).candidates[0]
        assert len(batch.asset_ids) == 4
        assert batch.generation_call_count == 4

    def test_start_end_clip_names_both_anchors(self, project):
        engine, pid = project
        root = engine.state(pid).root_id
        img_a = make_image_node(engine, pid, root)
        img_b = make_image_node(engine, pid, root)
        ref_a = img_a.candidates[0].asset_ids[0]
        ref_b = img_b.candidates[0].asset_ids[0]
        video = make_video_node(engine, pid, root, [ref_a, ref_b], workflow="wf-startend-i2v")
        clip_asset = video.candidates[0].asset_ids[0]
        descriptor = json.loads(engine.store.read_asset_bytes(pid, clip_asset))
        assert descriptor["first_frame_asset"] == ref_a
        assert descriptor["last_frame_asset"] == ref_b
        assert len(video.candidates[0].asset_ids) == 1

    def test_canny_batch_has_control_plus_candidates_and_extra_call(self, project):
        engine, pid = project
        root = engine.state(pid).root_id
        source = make_image_node(engine, pid, root)
        ref = source.candidates[0].asset_ids[0]
        node = engine.add_child(pid, source.node_id, NodeKind.PLANNING)
        engine.plan_manual(pid, node.node_id, "wf-canny-guided", "keep the structure",
                           {"num_candidates": 2})
        engine.materialize(pid, node.node_id, edits={"reference_asset_ids": [ref]})
        engine.execute_node(pid, node.node_id, wait=True)
        batch = engine.state(pid).node(node.node_id).candidates[0]
        assert len(batch.asset_ids) == 3  # control map + 2 guided results
        assert batch.generation_call_count == 3
        control = engine.store.get_asset(pid, batch.asset_ids[0])
        assert control.metadata.get("role") == "structural-control"

    def test_interp_doubles_fps(self, project):
        engine, pid = project
        root = engine.state(pid).root_id
        img = make_image_node(engine, pid, root)
        vid = make_video_node(engine, pid, root, [img.candidates[0].asset_ids[0]])
        clip_ref = vid.candidates[0].asset_ids[0]
        interp = make_video_node(engine, pid, vid.node_id, [clip_ref], workflow="wf-interp")
        descriptor = json.loads(
            engine.store.read_asset_bytes(pid, interp.candidates[0].asset_ids[0]))
        source = json.loads(engine.store.read_asset_bytes(pid, clip_ref))
        assert descriptor["fps"] == source["fps"] * 2
        assert descriptor["duration_ms"] == source["duration_ms"]

    def test_unmaterialized_node_rejected(self, project):
        engine, pid = project
        root = engine.state(pid).root_id
        node = engine.add_child(pid, root, NodeKind.PLANNING)
        engine.plan_manual(pid, node.node_id, "wf-t2i", "x")
        with pytest.raises(errors.NodeNotPlanned):
            engine.execute_node(pid, node.node_id)

    def test_missing_required_input_fails_validation(self, project):
        engine, pid = project
        root = engine.state(pid).root_id
        node = engine.add_child(pid, root, NodeKind.PLANNING)
        engine.plan_manual(pid, node.node_id, "wf-i2v", "animate nothing")
        engine.materialize(pid, node.node_id)
        with pytest.raises(errors.ValidationFailed):
            engine.execute_node(pid, node.node_id)

    def test_rerun_appends_not_overwrites(self, project):
        engine, pid = project
        root = engine.state(pid).root_id
        node = make_image_node(engine, pid, root, candidates=2)
        engine.execute_node(pid, node.node_id, wait=True)
        after = engine.state(pid).node(node.node_id)
        assert len(after.candidates) == 2
        assert after.candidates[0].asset_ids != after.candidates[1].asset_ids


class TestJobs:
    def test_terminal_job_polls_stably(self, project):
        engine, pid = project
        root = engine.state(pid).root_id
        node = make_image_node(engine, pid, root)
        job = engine.execute_node(pid, node.node_id, wait=True)
        first = engine.poll_job(job.job_id).to_dict()
        second = engine.poll_job(job.job_id).to_dict()
        assert first == second and first["state"] == "done"

    def test_unknown_job(self, engine):
        with pytest.raises(errors.UnknownJob):
            engine.poll_job("nope")

    def test_cancel_queued_job_returns_node_to_planned(self, tmp_path):
        # hold the single worker busy so the second job stays queued
        import threading
        release = threading.Event()

        class SlowExecutor:
            def execute(self, request):
                release.wait(10)
                from treeline.executors import MockImageExecutor
                return MockImageExecutor().execute(request)

        with Engine(EngineConfig(data_dir=tmp_path / "d", fsync=False)) as eng:
            eng.executors.register("mock-image", SlowExecutor())
            s = eng.create_project("Cancel")
            pid, root = s.project_id, s.root_id
            n1 = eng.add_child(pid, root, NodeKind.PLANNING)
            eng.plan_manual(pid, n1.node_id, "wf-t2i", "a", {"num_candidates": 1})
            eng.materialize(pid, n1.node_id)
            n2 = eng.add_child(pid, root, NodeKind.PLANNING)
            eng.plan_manual(pid, n2.node_id, "wf-t2i", "b", {"num_candidates": 1})
            eng.materialize(pid, n2.node_id)

            j1 = eng.execute_node(pid, n1.node_id)
            j2 = eng.execute_node(pid, n2.node_id)
            cancelled = eng.cancel_job(j2.job_id)
            assert cancelled.state == "cancelled"
            assert eng.state(pid).node(n2.node_id).status is NodeStatus.PLANNED
            release.set()
            eng.jobs.wait(j1.job_id, 30)
            assert eng.state(pid).node(n1.node_id).status is NodeStatus.SUCCEEDED
            # terminal cancelled record is stable
            assert eng.poll_job(j2.job_id).state == "cancelled"

    def test_running_job_not_cancellable(self, tmp_path):
        import threading
        started = threading.Event()
        release = threading.Event()

        class GateExecutor:
            def execute(self, request):
                started.set()
                release.wait(10)
                from treeline.executors import MockImageExecutor
                return MockImageExecutor().execute(request)

        with Engine(EngineConfig(data_dir=tmp_path / "d", fsync=False)) as eng:
            eng.executors.register("mock-image", GateExecutor())
            s = eng.create_project("NoCancel")
            pid, root = s.project_id, s.root_id
            node = eng.add_child(pid, root, NodeKind.PLANNING)
            eng.plan_manual(pid, node.node_id, "wf-t2i", "a", {"num_candidates": 1})
            eng.materialize(pid, node.node_id)
            job = eng.execute_node(pid, node.node_id)
            started.wait(10)
            with pytest.raises(errors.JobNotCancellable):
                eng.cancel_job(job.job_id)
            release.set()
            eng.jobs.wait(job.job_id, 30)


class TestCrashSafety:
    def test_interrupted_job_leaves_no_partial_batch(self, tmp_path):
        """Drop the log mid-exec: replay must show a consistent pre-batch state."""
        cfg = EngineConfig(data_dir=tmp_path / "d", fsync=False)
        with Engine(cfg) as eng:
            s = eng.create_project("Crashy")
            pid, root = s.project_id, s.root_id
            node = make_image_node(eng, pid, root, candidates=2)
            events_path = eng.store.project_dir(pid) / "events.ndjson"
            lines = events_path.read_text("utf-8").splitlines(keepends=True)
        # simulate a crash after node_running but before node_succeeded
        cut = [l for l in lines if '"node_succeeded"' not in l]
        assert len(cut) == len(lines) - 1
        events_path.write_text("".join(cut), "utf-8")
        with Engine(cfg) as eng2:
            state = eng2.state(pid)
            recovered = state.node(node.node_id)
            assert recovered.candidates == []  # no partial batch anywhere
            assert recovered.status is NodeStatus.RUNNING


class TestExecutorFailure:
    def test_failure_marks_node_failed_and_rerun_possible(self, tmp_path):
        class Flaky:
            def __init__(self):
                self.calls = 0
            def execute(self, request):
                self.calls += 1
                if self.calls == 1:
                    raise errors.ExecutorUnavailable("backend hiccup")
                from treeline.executors import MockImageExecutor
                return MockImageExecutor().execute(request)

        with Engine(EngineConfig(data_dir=tmp_path / "d", fsync=False)) as eng:
            eng.executors.register("mock-image", Flaky())
            s = eng.create_project("Retry")
            pid, root = s.project_id, s.root_id
            node = eng.add_child(pid, root, NodeKind.PLANNING)
            eng.plan_manual(pid, node.node_id, "wf-t2i", "a", {"num_candidates": 1})
            eng.materialize(pid, node.node_id)
            job = eng.execute_node(pid, node.node_id)
            done = eng.jobs.wait(job.job_id, 30)
            assert done.state == "failed"
            assert eng.state(pid).node(node.node_id).status is NodeStatus.FAILED
            # failed -> queued -> succeeded on the second run
            eng.execute_node(pid, node.node_id, wait=True)
            final = eng.state(pid).node(node.node_id)
            assert final.status is NodeStatus.SUCCEEDED
            assert len(final.candidates) == 1
