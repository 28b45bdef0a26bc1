"""Engine facade: one object that owns storage, planning, execution, and
assembly for all projects under a data directory.

Writes are serialized per project: every mutating call validates against the
in-memory state, appends its events to the durable log, then folds them with
the same ``apply_event`` used at replay time. The in-memory snapshot is
therefore always exactly ``fold(log)``.

Long-running work (planning, generation, export) can run synchronously or be
submitted to the background queue; either path appends the same events in the
same order, which is what keeps scripted CLI runs and HTTP clients
byte-equivalent.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import errors, model
from .executors import ExecRequest, ExecutorPool, GraphBackendExecutor, InputAsset, MOCK_EXECUTORS
from .jobs import Job, JobQueue
from .layout import compute_layout
from .metrics import MetricsReport, SessionLog, compute_report
from .model import (
    MODAL_KINDS,
    Node,
    NodeKind,
    NodeStatus,
    Plan,
    ProjectState,
    derive_context,
)
from .planning import plan_step
from .provider import make_provider
from .registry import (
    WorkflowRegistry,
    load_baseline_registry,
    load_registry,
    normalize_parameters,
    validate_spec,
)
from .store import Asset, EventLog, ProjectStore, WriterLease, slugify
from . import stitching


@dataclass
class EngineConfig:
    data_dir: Path
    provider: str = "mock"
    provider_url: str = ""
    provider_api_key_env: str = "TREELINE_PROVIDER_KEY"
    registry_path: Optional[Path] = None
    encoder_cmd: str = ""  # export.encoder_cmd
    backend_url: str = ""  # backend.url
    backend_api_key_env: str = ""  # backend.api_key_env
    workers: int = 1
    still_duration_ms: int = stitching.DEFAULT_STILL_DURATION_MS
    session_id: str = "main"
    fsync: bool = True

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)


@dataclass
class ProjectHandle:
    state: ProjectState
    lease: WriterLease
    log: EventLog
    session: SessionLog
    lock: threading.RLock = field(default_factory=threading.RLock)
    assembly_entered: bool = False


class Engine:
    def __init__(self, config: EngineConfig):
        self.config = config
        self.store = ProjectStore(config.data_dir, fsync=config.fsync)
        if config.registry_path:
            self.registry: WorkflowRegistry = load_registry(config.registry_path)
        else:
            self.registry = load_baseline_registry()
        self.provider = make_provider(
            config.provider, endpoint_url=config.provider_url,
            api_key_env=config.provider_api_key_env)
        self.executors = ExecutorPool(MOCK_EXECUTORS)
        if config.backend_url:
            self.executors.register("graph-backend", GraphBackendExecutor(
                config.backend_url, config.backend_api_key_env))
        self.jobs = JobQueue(self._run_job, on_cancel=self._job_cancelled,
                             workers=config.workers)
        self._handles: dict[str, ProjectHandle] = {}
        self._handles_lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------------

    def close(self) -> None:
        self.jobs.shutdown()
        with self._handles_lock:
            for handle in self._handles.values():
                self.store.release_writer(handle.lease)
            self._handles.clear()

    def __enter__(self) -> "Engine":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- project handles -----------------------------------------------------------

    def _handle(self, project_id: str) -> ProjectHandle:
        with self._handles_lock:
            handle = self._handles.get(project_id)
            if handle is None:
                state = self.store.load_state(project_id)
                lease = self.store.acquire_writer(project_id)
                log = self.store.open_log(project_id)
                session = self._open_session(project_id)
                handle = ProjectHandle(state=state, lease=lease, log=log, session=session)
                handle.assembly_entered = session.has_kind("AssemblyEntered")
                self._handles[project_id] = handle
            return handle

    def _open_session(self, project_id: str) -> SessionLog:
        path = self.store.sessions_dir(project_id) / f"{self.config.session_id}.ndjson"
        fresh = not path.exists()
        session = SessionLog(path, fsync=self.config.fsync)
        if fresh:
            session.record("SessionStarted", {"project_id": project_id})
        return session

    def _commit(self, handle: ProjectHandle, events: list[model.Event]) -> None:
        """Append then fold each event; on a write fault, resync from disk."""
        for kind, payload in events:
            try:
                self.store.append_event(handle.state.project_id, handle.lease, handle.log,
                                        kind, payload)
            except errors.TreelineError:
                handle.state = self.store.load_state(handle.state.project_id)
                raise
            model.apply_event(handle.state, kind, payload)

    # -- projects -------------------------------------------------------------------

    def create_project(self, name: str, project_id: Optional[str] = None, *,
                       global_context: dict | None = None,
                       layout_config: dict | None = None,
                       modality_colors: dict | None = None,
                       with_root: bool = True) -> ProjectState:
        project_id = project_id or slugify(name)
        events = model.cmd_create_project(
            project_id, name, global_context=global_context,
            layout_config=layout_config, modality_colors=modality_colors)
        self.store.create_project_dir(project_id, name)
        handle = self._handle(project_id)
        with handle.lock:
            self._commit(handle, events)
            if with_root:
                self._commit(handle, model.cmd_create_root(handle.state))
        return handle.state

    def list_projects(self) -> list[dict]:
        return self.store.list_projects()

    def state(self, project_id: str) -> ProjectState:
        return self._handle(project_id).state

    def delete_project(self, project_id: str) -> dict:
        with self._handles_lock:
            handle = self._handles.pop(project_id, None)
        if handle is not None:
            self.store.release_writer(handle.lease)
        return self.store.delete_project(project_id)

    def update_context(self, project_id: str, *, global_context: dict | None = None,
                       layout_config: dict | None = None,
                       modality_colors: dict | None = None) -> ProjectState:
        handle = self._handle(project_id)
        with handle.lock:
            self._commit(handle, model.cmd_update_context(
                handle.state, global_context=global_context,
                layout_config=layout_config, modality_colors=modality_colors))
        return handle.state

    # -- tree operations ---------------------------------------------------------------

    def create_root(self, project_id: str) -> Node:
        handle = self._handle(project_id)
        with handle.lock:
            events = model.cmd_create_root(handle.state)
            self._commit(handle, events)
            return handle.state.node(events[0][1]["node_id"])

    def add_child(self, project_id: str, parent_id: str, kind: NodeKind | str) -> Node:
        kind = NodeKind(kind)
        handle = self._handle(project_id)
        with handle.lock:
            events = model.cmd_add_child(handle.state, parent_id, kind)
            self._commit(handle, events)
            return handle.state.node(events[0][1]["node_id"])

    def patch_spec(self, project_id: str, node_id: str, patch: dict,
                   expected_version: Optional[int] = None) -> Node:
        handle = self._handle(project_id)
        with handle.lock:
            self._commit(handle, model.cmd_patch_spec(handle.state, node_id, patch,
                                                      expected_version))
            return handle.state.node(node_id)

    def lock_intent(self, project_id: str, node_id: str) -> Node:
        handle = self._handle(project_id)
        with handle.lock:
            self._commit(handle, model.cmd_lock_intent(handle.state, node_id))
            return handle.state.node(node_id)

    def select_candidate(self, project_id: str, node_id: str, batch_index: int,
                         candidate_index: int) -> Node:
        handle = self._handle(project_id)
        with handle.lock:
            self._commit(handle, model.cmd_select_candidate(
                handle.state, node_id, batch_index, candidate_index))
            return handle.state.node(node_id)

    def retain_variant(self, project_id: str, node_id: str, batch_index: int,
                       candidate_index: int, flag: bool = True) -> Node:
        handle = self._handle(project_id)
        with handle.lock:
            self._commit(handle, model.cmd_retain_variant(
                handle.state, node_id, batch_index, candidate_index, flag))
            if flag:
                handle.session.record("VariantRetained", {
                    "node_id": node_id, "batch_index": batch_index,
                    "candidate_index": candidate_index})
            return handle.state.node(node_id)

    def collapse(self, project_id: str, node_id: str, collapsed: bool = True) -> Node:
        handle = self._handle(project_id)
        with handle.lock:
            self._commit(handle, model.cmd_collapse(handle.state, node_id, collapsed))
            return handle.state.node(node_id)

    def prune(self, project_id: str, node_id: str) -> list[str]:
        handle = self._handle(project_id)
        with handle.lock:
            events = model.cmd_prune(handle.state, node_id)
            removed = list(events[0][1]["node_ids"])
            self._commit(handle, events)
            return removed

    def derive_context(self, project_id: str, node_id: str) -> model.PathContext:
        handle = self._handle(project_id)
        with handle.lock:
            return derive_context(handle.state, node_id)

    # -- planning --------------------------------------------------------------------

    def _planning_inputs(self, handle: ProjectHandle, node_id: str, intent_text: str,
                         reference_asset_ids: list[str]):
        node = handle.state.node(node_id)
        if node.kind is not NodeKind.PLANNING:
            raise errors.NotPlanningNode(f"node {node_id} is {node.kind.value}")
        if node.status is not NodeStatus.DRAFT:
            raise errors.NotPlanningNode(f"node {node_id} already has a plan")
        if not intent_text.strip():
            raise errors.IntentEmpty("intent text must be non-empty")
        model._check_references(handle.state, reference_asset_ids)
        modalities = [handle.state.assets[a].modality for a in reference_asset_ids]
        context = derive_context(handle.state, node.parent_id)
        return context, modalities

    def plan_node(self, project_id: str, node_id: str, intent_text: str,
                  reference_asset_ids: list[str] | None = None,
                  request_log: Optional[list] = None) -> Node:
        """Run the agent pipeline and record the resulting plan on the node.

        The plan is never executed here; generation happens only on an
        explicit execute call after review.
        """
        active = self.jobs.active_for_node(node_id)
        if active is not None:
            raise errors.NotPlanningNode(f"node {node_id} already has an in-flight job")
        return self._plan_node_inner(project_id, node_id, intent_text,
                                     reference_asset_ids, request_log)

    def _plan_node_inner(self, project_id: str, node_id: str, intent_text: str,
                         reference_asset_ids: list[str] | None = None,
                         request_log: Optional[list] = None) -> Node:
        refs = list(reference_asset_ids or [])
        handle = self._handle(project_id)
        with handle.lock:
            context, modalities = self._planning_inputs(handle, node_id, intent_text, refs)
            global_context = dict(handle.state.global_context)
        plan = plan_step(
            intent_text=intent_text,
            reference_modalities=modalities,
            path_context=context,
            global_context=global_context,
            registry=self.registry,
            provider=self.provider,
            attachments=refs,
            request_log=request_log,
        )
        with handle.lock:
            events = model.cmd_patch_spec(handle.state, node_id, {
                "intent_text": intent_text, "reference_asset_ids": refs})
            events += model.cmd_record_plan(handle.state, node_id, plan)
            self._commit(handle, events)
            return handle.state.node(node_id)

    def plan_node_async(self, project_id: str, node_id: str, intent_text: str,
                        reference_asset_ids: list[str] | None = None) -> Job:
        refs = list(reference_asset_ids or [])
        handle = self._handle(project_id)
        if self.jobs.active_for_node(node_id) is not None:
            raise errors.NotPlanningNode(f"node {node_id} already has an in-flight job")
        with handle.lock:
            self._planning_inputs(handle, node_id, intent_text, refs)  # fail fast
        return self.jobs.submit(project_id, "plan", node_id,
                                {"intent_text": intent_text, "reference_asset_ids": refs})

    def plan_manual(self, project_id: str, node_id: str, workflow_id: str,
                    prompt_text: str = "", parameters: dict | None = None) -> Node:
        """Direct creation path: record a plan with a pre-selected workflow,
        bypassing the agent pipeline."""
        workflow = self.registry.get(workflow_id)
        plan = Plan(
            action_category=workflow.action_category,
            workflow_id=workflow_id,
            prompt_draft=prompt_text,
            parameter_draft=normalize_parameters(parameters or {}, workflow),
        )
        handle = self._handle(project_id)
        with handle.lock:
            node = handle.state.node(node_id)
            if node.status is not NodeStatus.DRAFT:
                raise errors.NotPlanningNode(f"node {node_id} already has a plan")
            self._commit(handle, model.cmd_record_plan(handle.state, node_id, plan))
            return handle.state.node(node_id)

    def materialize(self, project_id: str, node_id: str, edits: dict | None = None,
                    plan: Plan | dict | None = None) -> Node:
        handle = self._handle(project_id)
        with handle.lock:
            node = handle.state.node(node_id)
            if plan is None:
                if node.plan is None:
                    raise errors.NotPlanningNode(f"node {node_id} has no plan to materialize")
                plan_obj = node.plan
            else:
                plan_obj = plan if isinstance(plan, Plan) else Plan.from_dict(plan)
            workflow = self.registry.get(plan_obj.workflow_id)
            new_kind = workflow.output_modality.node_kind
            self._commit(handle, model.cmd_materialize(
                handle.state, node_id, plan_obj, new_kind, edits))
            return handle.state.node(node_id)

    # -- execution --------------------------------------------------------------------

    def _validated_execution(self, state: ProjectState, node_id: str) -> dict:
        node = state.node(node_id)
        if node.kind not in MODAL_KINDS:
            raise errors.NodeNotPlanned(f"node {node_id} is {node.kind.value}; materialize first")
        if node.status not in (NodeStatus.PLANNED, NodeStatus.SUCCEEDED, NodeStatus.FAILED):
            raise errors.NodeNotPlanned(f"node {node_id} is {node.status.value}")
        if not node.spec.workflow_id:
            raise errors.NodeNotPlanned(f"node {node_id} has no workflow bound")
        workflow = self.registry.get(node.spec.workflow_id)
        try:
            modalities = {aid: info.modality for aid, info in state.assets.items()}
            params = validate_spec(node.spec, workflow, modalities)
        except errors.TreelineError as exc:
            raise errors.ValidationFailed(exc.message, cause_code=exc.code)
        self.executors.get(workflow.executor_id)  # ExecutorUnavailable when missing
        return params

    def execute_node(self, project_id: str, node_id: str, wait: bool = False,
                     timeout: float = 120.0) -> Job:
        """Queue one generation run; each run appends exactly one new batch."""
        handle = self._handle(project_id)
        if self.jobs.active_for_node(node_id) is not None:
            raise errors.NodeNotPlanned(f"node {node_id} already has an in-flight job")
        with handle.lock:
            params = self._validated_execution(handle.state, node_id)
            self._commit(handle, [("node_queued", {"node_id": node_id})])
            handle.session.record("RequestIssued", {"node_id": node_id})
            job = self.jobs.submit(project_id, "execute", node_id, {"parameters": params})
        if wait:
            job = self.jobs.wait(job.job_id, timeout)
            if job.state == "failed":
                raise errors.ValidationFailed(
                    f"execution failed: {job.error.get('message') if job.error else 'unknown'}",
                    job_error=job.error)
        return job

    def poll_job(self, job_id: str) -> Job:
        return self.jobs.poll(job_id)

    def cancel_job(self, job_id: str) -> Job:
        return self.jobs.cancel(job_id)

    def _job_cancelled(self, job: Job) -> None:
        if job.kind != "execute":
            return
        handle = self._handle(job.project_id)
        with handle.lock:
            node = handle.state.nodes.get(job.node_id)
            if node is not None and node.status is NodeStatus.QUEUED:
                self._commit(handle, [("queue_cancelled", {"node_id": job.node_id})])

    def _run_job(self, job: Job) -> dict:
        if job.kind == "execute":
            return self._run_execute(job)
        if job.kind == "plan":
            node = self._plan_node_inner(job.project_id, job.node_id,
                                         job.payload["intent_text"],
                                         job.payload["reference_asset_ids"])
            return {"plan": node.plan.to_dict() if node.plan else None}
        if job.kind == "export":
            result = self.export(job.project_id, job.payload.get("output_name", "final.mp4"))
            return {"manifest_path": str(result.manifest_path),
                    "concat_path": str(result.concat_path),
                    "output_path": str(result.output_path),
                    "encoder_ran": result.encoder_ran}
        raise errors.StorageFailure(f"unknown job kind {job.kind}")

    def _run_execute(self, job: Job) -> dict:
        handle = self._handle(job.project_id)
        node_id = job.node_id
        with handle.lock:
            self._commit(handle, [("node_running", {"node_id": node_id})])
            state = handle.state
            node = state.node(node_id)
            workflow = self.registry.get(node.spec.workflow_id)
            inputs = []
            for asset_id in node.spec.reference_asset_ids:
                info = state.assets[asset_id]
                inputs.append(InputAsset(
                    asset_id=asset_id, modality=info.modality,
                    metadata=dict(info.metadata),
                    data=self.store.read_asset_bytes(job.project_id, asset_id)))
            request = ExecRequest(
                node_id=node_id,
                workflow=workflow,
                prompt_text=node.spec.prompt_text,
                parameters=dict(job.payload["parameters"]),
                inputs=inputs,
                batch_ordinal=len(node.candidates),
            )
            executor = self.executors.get(workflow.executor_id)

        try:
            result = executor.execute(request)  # outside the project lock
        except errors.TreelineError:
            with handle.lock:
                self._commit(handle, [("node_failed", {"node_id": node_id})])
            raise

        with handle.lock:
            batch_id = model.mint_id(job.project_id, "batch", handle.state.tick)
            asset_records = []
            asset_ids = []
            for generated in result.assets:
                asset = self.store.put_asset(
                    job.project_id, generated.data, generated.modality,
                    generated.metadata, node_id, batch_id)
                asset_ids.append(asset.asset_id)
                asset_records.append({
                    "asset_id": asset.asset_id,
                    "modality": generated.modality.value,
                    "metadata": dict(generated.metadata),
                })
            batch = {
                "batch_id": batch_id,
                "asset_ids": asset_ids,
                "executed_workflow_id": workflow.workflow_id,
                "executed_parameters": dict(request.parameters),
                "generation_call_count": result.generation_calls,
            }
            self._commit(handle, [("node_succeeded", {
                "node_id": node_id, "batch": batch, "assets": asset_records})])
            handle.session.record("GenerationCall", {
                "node_id": node_id, "count": result.generation_calls})
            handle.session.record("ResultPreviewable", {"node_id": node_id})
        return {"batch_id": batch_id, "asset_ids": asset_ids}

    # -- stitching --------------------------------------------------------------------

    def collect(self, project_id: str, node_id: str, batch_index: int,
                candidate_index: int) -> dict:
        handle = self._handle(project_id)
        with handle.lock:
            events = stitching.cmd_collect(handle.state, node_id, batch_index, candidate_index)
            self._commit(handle, events)
            if not handle.assembly_entered:
                handle.session.record("AssemblyEntered", {})
                handle.assembly_entered = True
            handle.session.record("VariantRetained", {
                "node_id": node_id, "batch_index": batch_index,
                "candidate_index": candidate_index, "via": "collect"})
            return dict(events[0][1])

    def place_segment(self, project_id: str, entry_id: str, track: int,
                      order_index: Optional[int] = None,
                      trim_in_ms: Optional[int] = None,
                      trim_out_ms: Optional[int] = None) -> dict:
        handle = self._handle(project_id)
        with handle.lock:
            events = stitching.cmd_place_segment(
                handle.state, entry_id, track, order_index, trim_in_ms, trim_out_ms,
                still_duration_ms=self.config.still_duration_ms)
            self._commit(handle, events)
            return dict(events[0][1])

    def reorder_segment(self, project_id: str, segment_id: str, new_index: int) -> None:
        handle = self._handle(project_id)
        with handle.lock:
            self._commit(handle, stitching.cmd_reorder(handle.state, segment_id, new_index))

    def remove_segment(self, project_id: str, segment_id: str) -> None:
        handle = self._handle(project_id)
        with handle.lock:
            self._commit(handle, stitching.cmd_remove(handle.state, segment_id))

    def trace_origin(self, project_id: str, segment_id: str) -> str:
        handle = self._handle(project_id)
        with handle.lock:
            return stitching.trace_origin(handle.state, segment_id)

    def timeline_view(self, project_id: str) -> dict:
        handle = self._handle(project_id)
        with handle.lock:
            state = handle.state
            view = state.timeline.to_dict()
            used = {e.asset_id for e in state.timeline.collection}
            used |= {s.asset_id for s in state.timeline.segments}
            view["assets"] = {aid: state.assets[aid].to_dict() for aid in sorted(used)
                              if aid in state.assets}
            view["still_duration_ms"] = self.config.still_duration_ms
            return view

    def export(self, project_id: str, output_name: str = "final.mp4") -> stitching.ExportResult:
        handle = self._handle(project_id)
        with handle.lock:
            result = stitching.export_timeline(
                handle.state, self.store.project_dir(project_id), output_name,
                encoder_cmd=self.config.encoder_cmd,
                still_duration_ms=self.config.still_duration_ms)
            handle.session.record("ExportCompleted", {"output": output_name})
            return result

    def export_async(self, project_id: str, output_name: str = "final.mp4") -> Job:
        self._handle(project_id)
        return self.jobs.submit(project_id, "export", None, {"output_name": output_name})

    # -- telemetry / misc -----------------------------------------------------------------

    def record_session_event(self, project_id: str, kind: str,
                             payload: dict | None = None,
                             ts_ms: Optional[int] = None) -> int:
        handle = self._handle(project_id)
        with handle.lock:
            seq = handle.session.record(kind, payload, ts_ms)
            if kind == "AssemblyEntered":
                handle.assembly_entered = True
            return seq

    def metrics_report(self, project_id: str, overlap: str = "union") -> MetricsReport:
        handle = self._handle(project_id)
        return compute_report(handle.session.read_events(), overlap=overlap)

    def tree_snapshot(self, project_id: str) -> dict:
        handle = self._handle(project_id)
        with handle.lock:
            state = handle.state
            layout = compute_layout(state)
            nodes = sorted(state.nodes.values(), key=lambda n: (n.created_at, n.node_id))
            return {
                "project": {
                    "project_id": state.project_id,
                    "name": state.name,
                    "global_context": dict(state.global_context),
                    "layout_config": dict(state.layout_config),
                    "modality_colors": dict(state.modality_colors),
                },
                "root_id": state.root_id,
                "nodes": [n.to_dict() for n in nodes],
                "assets": {aid: a.to_dict() for aid, a in sorted(state.assets.items())},
                "layout": layout.to_dict(),
                "seq": handle.log.next_seq - 1,
            }

    def read_asset(self, project_id: str, asset_id: str) -> tuple[Asset, bytes]:
        asset = self.store.get_asset(project_id, asset_id)
        return asset, self.store.read_asset_bytes(project_id, asset_id)

    def find_project_of_node(self, node_id: str) -> str:
        """Route a bare node id to its project. Open handles are checked first;
        other projects are folded read-only (no writer lease is taken)."""
        with self._handles_lock:
            for project_id, handle in self._handles.items():
                if node_id in handle.state.nodes:
                    return project_id
            open_ids = set(self._handles)
        for header in self.store.list_projects():
            project_id = header["project_id"]
            if project_id in open_ids:
                continue
            if node_id in self.store.load_state(project_id).nodes:
                return project_id
        raise errors.UnknownNode(f"no node {node_id} in any project")

    def gc_assets(self, project_id: str) -> list[str]:
        handle = self._handle(project_id)
        with handle.lock:
            state = handle.state
            referenced: set[str] = set()
            for node in state.nodes.values():
                referenced.update(node.spec.reference_asset_ids)
                for batch in node.candidates:
                    referenced.update(batch.asset_ids)
            referenced.update(e.asset_id for e in state.timeline.collection)
            referenced.update(s.asset_id for s in state.timeline.segments)
            return self.store.gc_assets(project_id, referenced)

    def verify_replay(self, project_id: str) -> bool:
        """fold(events) == live snapshot; the event-sourcing soundness check."""
        handle = self._handle(project_id)
        with handle.lock:
            replayed = self.store.load_state(project_id)
            return replayed.snapshot_bytes() == handle.state.snapshot_bytes()
