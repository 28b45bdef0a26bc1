"""HTTP facade: endpoint behaviors, error envelope, GET purity, conflicts."""

import time

import pytest
from fastapi.testclient import TestClient

from treeline.api import create_app
from treeline.engine import Engine, EngineConfig


@pytest.fixture
def service(tmp_path):
    engine = Engine(EngineConfig(data_dir=tmp_path / "data", fsync=False))
    app = create_app(engine)
    with TestClient(app) as client:
        yield client, engine
    engine.close()


def wait_job(client, job_id, timeout=30.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        job = client.get(f"/jobs/{job_id}").json()
        if job["state"] in ("done", "failed", "cancelled"):
            return job
        time.sleep(0.01)
    raise TimeoutError(job_id)


def make_project(client, name="Api Project"):
    out = client.post("/projects", json={"name": name}).json()
    return out["project_id"], out["root_id"]


def run_image_node(client, pid, parent_id, intent="draw an anchor scene"):
    node = client.post(f"/projects/{pid}/nodes",
                       json={"parent_id": parent_id, "kind": "planning"}).json()
    job = client.post(f"/nodes/{node['node_id']}/plan",
                      json={"intent_text": intent}).json()
    assert wait_job(client, job["job_id"])["state"] == "done"
    client.post(f"/nodes/{node['node_id']}/materialize", json={})
    job = client.post(f"/nodes/{node['node_id']}/execute", json={}).json()
    assert wait_job(client, job["job_id"])["state"] == "done"
    return client.get(f"/nodes/{node['node_id']}").json()


class TestProjects:
    def test_fresh_tree_has_single_positioned_init(self, service):
        client, _ = service
        pid, root = make_project(client)
        tree = client.get(f"/projects/{pid}/tree").json()
        assert len(tree["nodes"]) == 1
        assert tree["nodes"][0]["kind"] == "init"
        assert root in tree["layout"]["positions"]

    def test_error_envelope_shape(self, service):
        client, _ = service
        response = client.get("/projects/ghost/tree")
        assert response.status_code == 404
        envelope = response.json()["error"]
        assert envelope["code"] == "UnknownProject"
        assert envelope["message"]
        assert "details" in envelope

    def test_duplicate_project_conflict(self, service):
        client, _ = service
        make_project(client, "Dup")
        assert client.post("/projects", json={"name": "Dup"}).status_code == 409

    def test_delete(self, service):
        client, _ = service
        pid, _ = make_project(client, "Gone")
        assert client.delete(f"/projects/{pid}").status_code == 200
        assert client.get(f"/projects/{pid}/tree").status_code == 404


class TestNodeFlow:
    def test_execute_then_poll_until_succeeded(self, service):
        client, engine = service
        pid, root = make_project(client)
        node = run_image_node(client, pid, root)
        assert node["status"] == "succeeded"
        assert len(node["candidates"][0]["asset_ids"]) == 4
        # wait pair was recorded for metrics
        events = engine._handle(pid).session.read_events()
        kinds = [e.kind for e in events]
        assert "RequestIssued" in kinds and "ResultPreviewable" in kinds

    def test_asset_bytes_served_with_modality_content_type(self, service):
        client, _ = service
        pid, root = make_project(client)
        node = run_image_node(client, pid, root)
        asset_id = node["candidates"][0]["asset_ids"][0]
        response = client.get(f"/assets/{asset_id}", params={"project_id": pid})
        assert response.status_code == 200
        assert response.headers["content-type"].startswith("image/")
        assert response.content.startswith(b"P5\n")

    def test_concurrent_spec_patches_one_wins(self, service):
        client, _ = service
        pid, root = make_project(client)
        node = client.post(f"/projects/{pid}/nodes",
                           json={"parent_id": root, "kind": "intent_draft"}).json()
        version = node["version"]
        r1 = client.patch(f"/nodes/{node['node_id']}/spec", json={
            "patch": {"intent_text": "first"}, "expected_version": version})
        r2 = client.patch(f"/nodes/{node['node_id']}/spec", json={
            "patch": {"intent_text": "second"}, "expected_version": version})
        assert {r1.status_code, r2.status_code} == {200, 409}
        final = client.get(f"/nodes/{node['node_id']}").json()
        assert final["spec"]["intent_text"] == "first"
        assert r2.json()["error"]["code"] == "VersionConflict"

    def test_get_endpoints_never_touch_the_event_log(self, service):
        client, engine = service
        pid, root = make_project(client)
        run_image_node(client, pid, root)
        log_path = engine.store.project_dir(pid) / "events.ndjson"
        before = log_path.read_bytes()
        client.get(f"/projects/{pid}/tree")
        client.get(f"/projects/{pid}/timeline")
        client.get(f"/projects/{pid}/metrics")
        client.get(f"/nodes/{root}")
        assert log_path.read_bytes() == before

    def test_prune_endpoint(self, service):
        client, _ = service
        pid, root = make_project(client)
        node = client.post(f"/projects/{pid}/nodes",
                           json={"parent_id": root, "kind": "planning"}).json()
        out = client.delete(f"/nodes/{node['node_id']}", params={"project_id": pid})
        assert out.json()["removed_node_ids"] == [node["node_id"]]


class TestTimelineAndMetrics:
    def test_collect_place_origin_export(self, service):
        client, _ = service
        pid, root = make_project(client)
        image = run_image_node(client, pid, root)
        video_node = client.post(f"/projects/{pid}/nodes",
                                 json={"parent_id": image["node_id"], "kind": "planning"}).json()
        ref = image["candidates"][0]["asset_ids"][0]
        client.post(f"/nodes/{video_node['node_id']}/plan-manual", json={
            "workflow_id": "wf-i2v", "prompt_text": "animate"})
        client.post(f"/nodes/{video_node['node_id']}/materialize", json={
            "edits": {"reference_asset_ids": [ref]}})
        job = client.post(f"/nodes/{video_node['node_id']}/execute", json={}).json()
        wait_job(client, job["job_id"])

        entry = client.post(f"/projects/{pid}/timeline/collect", json={
            "node_id": video_node["node_id"], "batch_index": 0, "candidate_index": 0}).json()
        segment = client.post(f"/projects/{pid}/timeline/place", json={
            "entry_id": entry["entry_id"], "track": 0}).json()
        origin = client.get(
            f"/projects/{pid}/timeline/segments/{segment['segment_id']}/origin").json()
        assert origin["node_id"] == video_node["node_id"]

        job = client.post(f"/projects/{pid}/export", json={"output_name": "out.mp4"}).json()
        done = wait_job(client, job["job_id"])
        assert done["result"]["encoder_ran"] is False

        metrics = client.get(f"/projects/{pid}/metrics").json()
        assert metrics["t5"]["min"] is not None
        assert metrics["n_calls"] >= 5

    def test_modality_mismatch_status(self, service):
        client, _ = service
        pid, root = make_project(client)
        image = run_image_node(client, pid, root)
        entry = client.post(f"/projects/{pid}/timeline/collect", json={
            "node_id": image["node_id"], "batch_index": 0, "candidate_index": 0}).json()
        response = client.post(f"/projects/{pid}/timeline/place", json={
            "entry_id": entry["entry_id"], "track": 1})
        assert response.status_code == 400
        assert response.json()["error"]["code"] == "ModalityMismatch"

    def test_scene_events_feed_report(self, service):
        client, _ = service
        pid, _ = make_project(client)
        for i in (1, 2, 3):
            client.post(f"/projects/{pid}/events", json={
                "kind": "SceneCompleted", "payload": {"scene_index": i}})
        metrics = client.get(f"/projects/{pid}/metrics").json()
        assert metrics["t3"]["min"] is not None
