"""HTTP/JSON facade over the engine.

Every mutating endpoint maps 1:1 onto an engine operation and the engine
appends its events before the response is sent. Errors use a uniform
envelope {code, message, details} where the code is the engine error class
name. Long operations (plan, execute, export) return a job id immediately;
clients poll GET /jobs/{id}.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

from fastapi import Body, FastAPI, Request, Response
from fastapi.responses import JSONResponse

from . import errors
from .engine import Engine
from .model import Modality

_STATUS_BY_CODE = {
    "UnknownProject": 404, "UnknownNode": 404, "UnknownParent": 404,
    "UnknownWorkflow": 404, "UnknownJob": 404, "UnknownAsset": 404,
    "UnknownSegment": 404, "UnknownEntry": 404, "UnknownCandidate": 404,
    "UnknownSession": 404,
    "ProjectExists": 409, "RootAlreadyExists": 409, "AlreadyLocked": 409,
    "VersionConflict": 409, "PruneConflict": 409, "ProvenanceConflict": 409,
    "StaleWriter": 409, "LeaseHeld": 409, "JobNotCancellable": 409,
    "TimestampRegression": 409, "ClosedSession": 409,
    "ProviderUnavailable": 502, "ExecutorUnavailable": 502, "EncoderFailed": 502,
    "UnparseableResponse": 502,
    "StorageFailure": 500,
}

_CONTENT_TYPES = {
    Modality.IMAGE: "image/x-portable-graymap",
    Modality.VIDEO: "application/json",  # mock clip descriptor
    Modality.AUDIO: "audio/wav",
}


def _error_response(exc: errors.TreelineError) -> JSONResponse:
    status = _STATUS_BY_CODE.get(exc.code, 400)
    return JSONResponse(status_code=status, content={"error": exc.to_envelope()})


def create_app(engine: Engine, static_dir: str | Path = "",
               cors_allow: list[str] | None = None) -> FastAPI:
    app = FastAPI(title="treeline", docs_url=None, redoc_url=None)

    if cors_allow:
        from fastapi.middleware.cors import CORSMiddleware
        app.add_middleware(CORSMiddleware, allow_origins=cors_allow,
                           allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(errors.TreelineError)
    async def _treeline_error(request: Request, exc: errors.TreelineError):
        return _error_response(exc)

    # -- projects --------------------------------------------------------------

    @app.post("/projects")
    def create_project(body: dict = Body(...)):
        state = engine.create_project(
            body["name"], body.get("project_id"),
            global_context=body.get("global_context"),
            layout_config=body.get("layout_config"),
            modality_colors=body.get("modality_colors"))
        return {"project_id": state.project_id, "name": state.name,
                "root_id": state.root_id}

    @app.get("/projects")
    def list_projects():
        return {"projects": engine.list_projects()}

    @app.delete("/projects/{project_id}")
    def delete_project(project_id: str):
        return {"removed": engine.delete_project(project_id)}

    @app.get("/projects/{project_id}/tree")
    def get_tree(project_id: str):
        return engine.tree_snapshot(project_id)

    @app.patch("/projects/{project_id}/context")
    def patch_context(project_id: str, body: dict = Body(...)):
        engine.update_context(
            project_id,
            global_context=body.get("global_context"),
            layout_config=body.get("layout_config"),
            modality_colors=body.get("modality_colors"))
        return {"ok": True}

    @app.post("/projects/{project_id}/nodes")
    def add_node(project_id: str, body: dict = Body(...)):
        node = engine.add_child(project_id, body["parent_id"], body["kind"])
        return node.to_dict()

    # -- node operations ----------------------------------------------------------

    def _project_of_node(node_id: str) -> str:
        return engine.find_project_of_node(node_id)

    @app.get("/nodes/{node_id}")
    def get_node(node_id: str, project_id: Optional[str] = None):
        pid = project_id or _project_of_node(node_id)
        return engine.state(pid).node(node_id).to_dict()

    @app.patch("/nodes/{node_id}/spec")
    def patch_spec(node_id: str, body: dict = Body(...)):
        pid = body.get("project_id") or _project_of_node(node_id)
        node = engine.patch_spec(pid, node_id, body["patch"],
                                 body.get("expected_version"))
        return node.to_dict()

    @app.post("/nodes/{node_id}/lock")
    def lock_intent(node_id: str, body: dict = Body(default={})):
        pid = body.get("project_id") or _project_of_node(node_id)
        return engine.lock_intent(pid, node_id).to_dict()

    @app.post("/nodes/{node_id}/plan")
    def plan(node_id: str, body: dict = Body(...)):
        pid = body.get("project_id") or _project_of_node(node_id)
        job = engine.plan_node_async(pid, node_id, body["intent_text"],
                                     body.get("reference_asset_ids") or [])
        return {"job_id": job.job_id}

    @app.post("/nodes/{node_id}/materialize")
    def materialize(node_id: str, body: dict = Body(default={})):
        pid = body.get("project_id") or _project_of_node(node_id)
        node = engine.materialize(pid, node_id, edits=body.get("edits"),
                                  plan=body.get("plan"))
        return node.to_dict()

    @app.post("/nodes/{node_id}/plan-manual")
    def plan_manual(node_id: str, body: dict = Body(...)):
        pid = body.get("project_id") or _project_of_node(node_id)
        node = engine.plan_manual(pid, node_id, body["workflow_id"],
                                  body.get("prompt_text", ""),
                                  body.get("parameters"))
        return node.to_dict()

    @app.post("/nodes/{node_id}/execute")
    def execute(node_id: str, body: dict = Body(default={})):
        pid = body.get("project_id") or _project_of_node(node_id)
        job = engine.execute_node(pid, node_id)
        return {"job_id": job.job_id}

    @app.post("/nodes/{node_id}/select")
    def select(node_id: str, body: dict = Body(...)):
        pid = body.get("project_id") or _project_of_node(node_id)
        node = engine.select_candidate(pid, node_id, body["batch_index"],
                                       body["candidate_index"])
        return node.to_dict()

    @app.post("/nodes/{node_id}/retain")
    def retain(node_id: str, body: dict = Body(...)):
        pid = body.get("project_id") or _project_of_node(node_id)
        node = engine.retain_variant(pid, node_id, body["batch_index"],
                                     body["candidate_index"], body.get("flag", True))
        return node.to_dict()

    @app.post("/nodes/{node_id}/collapse")
    def collapse(node_id: str, body: dict = Body(default={})):
        pid = body.get("project_id") or _project_of_node(node_id)
        node = engine.collapse(pid, node_id, body.get("collapsed", True))
        return node.to_dict()

    @app.delete("/nodes/{node_id}")
    def prune(node_id: str, project_id: Optional[str] = None):
        pid = project_id or _project_of_node(node_id)
        removed = engine.prune(pid, node_id)
        return {"removed_node_ids": removed}

    @app.get("/nodes/{node_id}/context")
    def node_context(node_id: str, project_id: Optional[str] = None):
        pid = project_id or _project_of_node(node_id)
        return engine.derive_context(pid, node_id).to_dict()

    # -- jobs -----------------------------------------------------------------------

    @app.get("/jobs/{job_id}")
    def poll_job(job_id: str):
        return engine.poll_job(job_id).to_dict()

    @app.post("/jobs/{job_id}/cancel")
    def cancel_job(job_id: str):
        return engine.cancel_job(job_id).to_dict()

    # -- assets -----------------------------------------------------------------------

    @app.get("/assets/{asset_id}")
    def get_asset(asset_id: str, project_id: str):
        asset, data = engine.read_asset(project_id, asset_id)
        return Response(content=data, media_type=_CONTENT_TYPES[asset.modality],
                        headers={"x-producer-node": asset.producer_node_id})

    @app.get("/assets/{asset_id}/meta")
    def get_asset_meta(asset_id: str, project_id: str):
        asset, _ = engine.read_asset(project_id, asset_id)
        return asset.to_dict()

    # -- timeline ---------------------------------------------------------------------

    @app.get("/projects/{project_id}/timeline")
    def get_timeline(project_id: str):
        return engine.timeline_view(project_id)

    @app.post("/projects/{project_id}/timeline/collect")
    def collect(project_id: str, body: dict = Body(...)):
        return engine.collect(project_id, body["node_id"], body["batch_index"],
                              body["candidate_index"])

    @app.post("/projects/{project_id}/timeline/place")
    def place(project_id: str, body: dict = Body(...)):
        return engine.place_segment(
            project_id, body["entry_id"], body["track"],
            body.get("order_index"), body.get("trim_in_ms"), body.get("trim_out_ms"))

    @app.post("/projects/{project_id}/timeline/reorder")
    def reorder(project_id: str, body: dict = Body(...)):
        engine.reorder_segment(project_id, body["segment_id"], body["new_index"])
        return {"ok": True}

    @app.post("/projects/{project_id}/timeline/remove")
    def remove(project_id: str, body: dict = Body(...)):
        engine.remove_segment(project_id, body["segment_id"])
        return {"ok": True}

    @app.get("/projects/{project_id}/timeline/segments/{segment_id}/origin")
    def origin(project_id: str, segment_id: str):
        return {"node_id": engine.trace_origin(project_id, segment_id)}

    @app.post("/projects/{project_id}/export")
    def export(project_id: str, body: dict = Body(default={})):
        job = engine.export_async(project_id, body.get("output_name", "final.mp4"))
        return {"job_id": job.job_id}

    # -- metrics ------------------------------------------------------------------------

    @app.get("/projects/{project_id}/metrics")
    def metrics(project_id: str, overlap: str = "union"):
        report = engine.metrics_report(project_id, overlap=overlap)
        return report.to_json_dict()

    @app.post("/projects/{project_id}/events")
    def record_event(project_id: str, body: dict = Body(...)):
        seq = engine.record_session_event(project_id, body["kind"],
                                          body.get("payload"), body.get("ts_ms"))
        return {"seq": seq}

    # -- static frontend ---------------------------------------------------------------

    static_path = Path(static_dir) if static_dir else None
    if static_path and static_path.is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=static_path, html=True), name="ui")

    return app


def serve(engine: Engine, host: str = "127.0.0.1", port: int = 8765,
          static_dir: str = "", cors_allow: list[str] | None = None) -> None:
    import uvicorn

    app = create_app(engine, static_dir=static_dir, cors_allow=cors_allow)
    uvicorn.run(app, host=host, port=port, log_level="warning")
