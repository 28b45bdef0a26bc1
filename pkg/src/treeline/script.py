"""Scripted replay of authoring traces.

Script format: UTF-8 text, one command per line, ``#`` comments, shell-style
quoting. Node and collection labels are symbolic and must be defined before
use; that rule plus argument shapes are checked in a full parse pass before
anything executes, so a bad script fails without touching the data directory.

    project "Tricolor Camel"
    context style="ink wash" mood="serene" reference="..."
    new-scene s1 "Scene 1: the camel in a market street"
    plan p1 under=s1 intent="establish an anchor image of the camel"
    edit p1 set.num_candidates=4
    materialize p1
    execute p1
    select p1 0.2
    retain p1 0.1
    branch-from p2 from=s1 intent="remove the crowd" refs=p1
    collapse p1
    prune p2
    collect c1 from=p1 at=0.2
    place c1 track=video in=0 out=2500
    scene-done 1
    export name=final.mp4
    report

Reference lists (``refs=``) name prior nodes: a bare label takes that node's
selected candidate (falling back to the newest batch, candidate 0);
``label:B.C`` addresses a batch/candidate pair explicitly.

The same command stream can run against the in-process engine or a live HTTP
service; both paths append identical events, which the equivalence suite
checks byte for byte.
"""

from __future__ import annotations

import shlex
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Protocol

from . import errors
from .engine import Engine

COMMANDS = {
    "project", "context", "spacing", "new-scene", "plan", "edit", "materialize",
    "execute", "select", "retain", "branch-from", "collapse", "prune", "collect",
    "place", "scene-done", "export", "report",
}

CONTEXT_KEYS = {"model": "model_id", "style": "style", "mood": "mood",
                "palette": "palette", "reference": "reference_material"}


@dataclass
class Command:
    line_no: int
    name: str
    positional: list[str]
    options: dict[str, str]

    def arg(self, index: int, what: str) -> str:
        if index >= len(self.positional):
            raise errors.ScriptParseError(self.line_no, f"{self.name} needs {what}")
        return self.positional[index]


def _parse_pair(value: str, line_no: int) -> tuple[int, int]:
    try:
        batch, candidate = value.split(".")
        return int(batch), int(candidate)
    except ValueError:
        raise errors.ScriptParseError(line_no, f"expected BATCH.CANDIDATE, got {value!r}")


def parse_script(text: str) -> list[Command]:
    """Tokenize, validate command names, arity, and label discipline."""
    commands: list[Command] = []
    node_labels: set[str] = set()
    entry_labels: set[str] = set()
    saw_project = False

    def need_node(label: str, line_no: int) -> None:
        if label not in node_labels:
            raise errors.ScriptParseError(line_no, f"undefined node label {label!r}")

    def define_node(label: str, line_no: int) -> None:
        if label in node_labels or label in entry_labels:
            raise errors.ScriptParseError(line_no, f"duplicate label {label!r}")
        node_labels.add(label)

    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            tokens = shlex.split(stripped, comments=True)
        except ValueError as exc:
            raise errors.ScriptParseError(line_no, f"bad quoting: {exc}")
        if not tokens:
            continue
        name, rest = tokens[0], tokens[1:]
        if name not in COMMANDS:
            raise errors.ScriptParseError(line_no, f"unknown command {name!r}")
        positional = []
        options: dict[str, str] = {}
        for token in rest:
            if "=" in token:
                key, value = token.split("=", 1)
                options[key] = value
            else:
                positional.append(token)
        cmd = Command(line_no, name, positional, options)

        if name == "project":
            if saw_project:
                raise errors.ScriptParseError(line_no, "project declared twice")
            cmd.arg(0, "a project name")
            saw_project = True
        elif not saw_project:
            raise errors.ScriptParseError(line_no, "the first command must be 'project'")
        elif name == "new-scene":
            define_node(cmd.arg(0, "a label"), line_no)
            cmd.arg(1, "an intent text")
        elif name in ("plan", "branch-from"):
            label = cmd.arg(0, "a label")
            parent_key = "under" if name == "plan" else "from"
            parent = options.get(parent_key)
            if not parent:
                raise errors.ScriptParseError(line_no, f"{name} needs {parent_key}=<label>")
            need_node(parent, line_no)
            if "intent" not in options:
                raise errors.ScriptParseError(line_no, f"{name} needs intent=\"...\"")
            for ref in _split_refs(options.get("refs", "")):
                need_node(ref.split(":")[0], line_no)
            define_node(label, line_no)
        elif name in ("edit", "materialize", "execute", "collapse", "prune"):
            need_node(cmd.arg(0, "a node label"), line_no)
            for ref in _split_refs(options.get("refs", "")):
                need_node(ref.split(":")[0], line_no)
        elif name in ("select", "retain"):
            need_node(cmd.arg(0, "a node label"), line_no)
            _parse_pair(cmd.arg(1, "BATCH.CANDIDATE"), line_no)
        elif name == "collect":
            label = cmd.arg(0, "a label")
            source = options.get("from")
            if not source:
                raise errors.ScriptParseError(line_no, "collect needs from=<node label>")
            need_node(source, line_no)
            if "at" in options:
                _parse_pair(options["at"], line_no)
            if label in entry_labels or label in node_labels:
                raise errors.ScriptParseError(line_no, f"duplicate label {label!r}")
            entry_labels.add(label)
        elif name == "place":
            label = cmd.arg(0, "a collection label")
            if label not in entry_labels:
                raise errors.ScriptParseError(line_no, f"undefined collection label {label!r}")
            if options.get("track") not in ("video", "audio"):
                raise errors.ScriptParseError(line_no, "place needs track=video|audio")
        elif name == "spacing":
            for key in options:
                if key not in ("h", "v"):
                    raise errors.ScriptParseError(line_no, f"spacing takes h= and v=, not {key}")
        elif name == "context":
            for key in options:
                if key not in CONTEXT_KEYS:
                    raise errors.ScriptParseError(line_no, f"unknown context key {key!r}")
        commands.append(cmd)

    if not saw_project:
        raise errors.ScriptParseError(0, "script has no project command")
    return commands


def _split_refs(raw: str) -> list[str]:
    return [part for part in raw.split(",") if part.strip()]


class Client(Protocol):
    """Transport-agnostic surface the runner drives."""

    def create_project(self, name: str) -> dict: ...
    def update_context(self, project_id: str, global_context: dict | None,
                       layout_config: dict | None) -> None: ...
    def add_child(self, project_id: str, parent_id: str, kind: str) -> dict: ...
    def get_node(self, project_id: str, node_id: str) -> dict: ...
    def patch_spec(self, project_id: str, node_id: str, patch: dict) -> dict: ...
    def lock_intent(self, project_id: str, node_id: str) -> dict: ...
    def plan(self, project_id: str, node_id: str, intent: str, refs: list[str]) -> dict: ...
    def materialize(self, project_id: str, node_id: str, edits: dict) -> dict: ...
    def execute(self, project_id: str, node_id: str) -> dict: ...
    def select(self, project_id: str, node_id: str, batch: int, candidate: int) -> dict: ...
    def retain(self, project_id: str, node_id: str, batch: int, candidate: int,
               flag: bool) -> dict: ...
    def collapse(self, project_id: str, node_id: str, collapsed: bool) -> dict: ...
    def prune(self, project_id: str, node_id: str) -> list[str]: ...
    def collect(self, project_id: str, node_id: str, batch: int, candidate: int) -> dict: ...
    def place(self, project_id: str, entry_id: str, track: int,
              order_index: Optional[int], trim_in: Optional[int],
              trim_out: Optional[int]) -> dict: ...
    def scene_done(self, project_id: str, index: int) -> None: ...
    def export(self, project_id: str, name: str) -> dict: ...
    def report(self, project_id: str) -> dict: ...
    def tree(self, project_id: str) -> dict: ...


class EngineClient:
    """Direct in-process binding."""

    def __init__(self, engine: Engine):
        self.engine = engine

    def create_project(self, name):
        state = self.engine.create_project(name)
        return {"project_id": state.project_id, "root_id": state.root_id}

    def update_context(self, project_id, global_context, layout_config):
        self.engine.update_context(project_id, global_context=global_context,
                                   layout_config=layout_config)

    def add_child(self, project_id, parent_id, kind):
        return self.engine.add_child(project_id, parent_id, kind).to_dict()

    def get_node(self, project_id, node_id):
        return self.engine.state(project_id).node(node_id).to_dict()

    def patch_spec(self, project_id, node_id, patch):
        return self.engine.patch_spec(project_id, node_id, patch).to_dict()

    def lock_intent(self, project_id, node_id):
        return self.engine.lock_intent(project_id, node_id).to_dict()

    def plan(self, project_id, node_id, intent, refs):
        return self.engine.plan_node(project_id, node_id, intent, refs).to_dict()

    def materialize(self, project_id, node_id, edits):
        return self.engine.materialize(project_id, node_id, edits=edits).to_dict()

    def execute(self, project_id, node_id):
        self.engine.execute_node(project_id, node_id, wait=True)
        return self.get_node(project_id, node_id)

    def select(self, project_id, node_id, batch, candidate):
        return self.engine.select_candidate(project_id, node_id, batch, candidate).to_dict()

    def retain(self, project_id, node_id, batch, candidate, flag):
        return self.engine.retain_variant(project_id, node_id, batch, candidate, flag).to_dict()

    def collapse(self, project_id, node_id, collapsed):
        return self.engine.collapse(project_id, node_id, collapsed).to_dict()

    def prune(self, project_id, node_id):
        return self.engine.prune(project_id, node_id)

    def collect(self, project_id, node_id, batch, candidate):
        return self.engine.collect(project_id, node_id, batch, candidate)

    def place(self, project_id, entry_id, track, order_index, trim_in, trim_out):
        return self.engine.place_segment(project_id, entry_id, track, order_index,
                                         trim_in, trim_out)

    def scene_done(self, project_id, index):
        self.engine.record_session_event(project_id, "SceneCompleted",
                                         {"scene_index": index})

    def export(self, project_id, name):
        result = self.engine.export(project_id, name)
        return {"manifest_path": str(result.manifest_path),
                "concat_path": str(result.concat_path),
                "manifest_bytes": result.manifest_bytes.decode("utf-8")}

    def report(self, project_id):
        return self.engine.metrics_report(project_id).to_json_dict()

    def tree(self, project_id):
        return self.engine.tree_snapshot(project_id)


class HttpClient:
    """Binding over the HTTP endpoint table; long operations are polled."""

    def __init__(self, base_url: str, http=None, poll_interval: float = 0.02):
        import httpx

        self.http = http or httpx.Client(base_url=base_url, timeout=60.0)
        self.poll_interval = poll_interval

    def _ok(self, response) -> dict:
        if response.status_code >= 400:
            try:
                envelope = response.json()["error"]
            except Exception:
                raise errors.StorageFailure(f"http {response.status_code}: {response.text}")
            raise errors.TreelineError(envelope["message"], **{
                "code_from_api": envelope["code"], **envelope.get("details", {})})
        return response.json() if response.content else {}

    def _wait_job(self, job_id: str) -> dict:
        while True:
            job = self._ok(self.http.get(f"/jobs/{job_id}"))
            if job["state"] in ("done", "failed", "cancelled"):
                if job["state"] != "done":
                    err = job.get("error") or {}
                    raise errors.StorageFailure(
                        f"job {job_id} {job['state']}: {err.get('message', '')}")
                return job
            time.sleep(self.poll_interval)

    def create_project(self, name):
        return self._ok(self.http.post("/projects", json={"name": name}))

    def update_context(self, project_id, global_context, layout_config):
        body = {}
        if global_context:
            body["global_context"] = global_context
        if layout_config:
            body["layout_config"] = layout_config
        self._ok(self.http.patch(f"/projects/{project_id}/context", json=body))

    def add_child(self, project_id, parent_id, kind):
        return self._ok(self.http.post(f"/projects/{project_id}/nodes",
                                       json={"parent_id": parent_id, "kind": kind}))

    def get_node(self, project_id, node_id):
        return self._ok(self.http.get(f"/nodes/{node_id}",
                                      params={"project_id": project_id}))

    def patch_spec(self, project_id, node_id, patch):
        return self._ok(self.http.patch(f"/nodes/{node_id}/spec",
                                        json={"project_id": project_id, "patch": patch}))

    def lock_intent(self, project_id, node_id):
        return self._ok(self.http.post(f"/nodes/{node_id}/lock",
                                       json={"project_id": project_id}))

    def plan(self, project_id, node_id, intent, refs):
        out = self._ok(self.http.post(f"/nodes/{node_id}/plan", json={
            "project_id": project_id, "intent_text": intent,
            "reference_asset_ids": refs}))
        self._wait_job(out["job_id"])
        return self.get_node(project_id, node_id)

    def materialize(self, project_id, node_id, edits):
        return self._ok(self.http.post(f"/nodes/{node_id}/materialize",
                                       json={"project_id": project_id, "edits": edits}))

    def execute(self, project_id, node_id):
        out = self._ok(self.http.post(f"/nodes/{node_id}/execute",
                                      json={"project_id": project_id}))
        self._wait_job(out["job_id"])
        return self.get_node(project_id, node_id)

    def select(self, project_id, node_id, batch, candidate):
        return self._ok(self.http.post(f"/nodes/{node_id}/select", json={
            "project_id": project_id, "batch_index": batch, "candidate_index": candidate}))

    def retain(self, project_id, node_id, batch, candidate, flag):
        return self._ok(self.http.post(f"/nodes/{node_id}/retain", json={
            "project_id": project_id, "batch_index": batch,
            "candidate_index": candidate, "flag": flag}))

    def collapse(self, project_id, node_id, collapsed):
        return self._ok(self.http.post(f"/nodes/{node_id}/collapse", json={
            "project_id": project_id, "collapsed": collapsed}))

    def prune(self, project_id, node_id):
        out = self._ok(self.http.delete(f"/nodes/{node_id}",
                                        params={"project_id": project_id}))
        return out["removed_node_ids"]

    def collect(self, project_id, node_id, batch, candidate):
        return self._ok(self.http.post(f"/projects/{project_id}/timeline/collect", json={
            "node_id": node_id, "batch_index": batch, "candidate_index": candidate}))

    def place(self, project_id, entry_id, track, order_index, trim_in, trim_out):
        return self._ok(self.http.post(f"/projects/{project_id}/timeline/place", json={
            "entry_id": entry_id, "track": track, "order_index": order_index,
            "trim_in_ms": trim_in, "trim_out_ms": trim_out}))

    def scene_done(self, project_id, index):
        self._ok(self.http.post(f"/projects/{project_id}/events", json={
            "kind": "SceneCompleted", "payload": {"scene_index": index}}))

    def export(self, project_id, name):
        out = self._ok(self.http.post(f"/projects/{project_id}/export",
                                      json={"output_name": name}))
        job = self._wait_job(out["job_id"])
        return job["result"]

    def report(self, project_id):
        return self._ok(self.http.get(f"/projects/{project_id}/metrics"))

    def tree(self, project_id):
        return self._ok(self.http.get(f"/projects/{project_id}/tree"))


@dataclass
class RunResult:
    project_id: str
    summary: dict
    report: Optional[dict] = None
    outputs: list[str] = field(default_factory=list)


class ScriptRunner:
    def __init__(self, client: Client, echo=None):
        self.client = client
        self.echo = echo or (lambda *_: None)
        self.project_id: Optional[str] = None
        self.root_id: Optional[str] = None
        self.nodes: dict[str, str] = {}
        self.entries: dict[str, str] = {}
        self.scene_counter = 0
        self.last_report: Optional[dict] = None
        self.outputs: list[str] = []

    # -- reference resolution ----------------------------------------------------

    def _resolve_refs(self, raw: str, line_no: int) -> list[str]:
        asset_ids = []
        for part in _split_refs(raw):
            if ":" in part:
                label, pair = part.split(":", 1)
                batch, candidate = _parse_pair(pair, line_no)
            else:
                label, batch, candidate = part, None, None
            node = self.client.get_node(self.project_id, self.nodes[label])
            if batch is None:
                if node.get("selected"):
                    batch, candidate = node["selected"]
                else:
                    batch, candidate = len(node["candidates"]) - 1, 0
            try:
                asset_ids.append(node["candidates"][batch]["asset_ids"][candidate])
            except (IndexError, TypeError):
                raise errors.ScriptParseError(
                    line_no, f"{part!r} does not address an existing candidate")
        return asset_ids

    def _edits_from(self, cmd: Command) -> dict:
        edits: dict[str, Any] = {}
        if "prompt" in cmd.options:
            edits["prompt_text"] = cmd.options["prompt"]
        if "intent" in cmd.options and cmd.name == "edit":
            edits["intent_text"] = cmd.options["intent"]
        params = {key[4:]: value for key, value in cmd.options.items()
                  if key.startswith("set.")}
        if params:
            edits["parameters"] = params
        if "refs" in cmd.options:
            edits["reference_asset_ids"] = self._resolve_refs(cmd.options["refs"], cmd.line_no)
        return edits

    # -- execution ------------------------------------------------------------------

    def run(self, text: str) -> RunResult:
        commands = parse_script(text)
        for cmd in commands:
            try:
                self._execute(cmd)
            except errors.ScriptParseError:
                raise
            except Exception as exc:
                raise errors.CommandFailed(cmd.line_no, cmd.name, exc)
        summary = self.summarize()
        self.echo(render_summary(summary))
        return RunResult(project_id=self.project_id, summary=summary,
                         report=self.last_report, outputs=self.outputs)

    def _execute(self, cmd: Command) -> None:
        name = cmd.name
        if name == "project":
            out = self.client.create_project(cmd.positional[0])
            self.project_id = out["project_id"]
            self.root_id = out["root_id"]
            self.echo(f"project {self.project_id}")
        elif name == "context":
            ctx = {CONTEXT_KEYS[k]: v for k, v in cmd.options.items()}
            self.client.update_context(self.project_id, ctx, None)
        elif name == "spacing":
            layout = {}
            if "h" in cmd.options:
                layout["h_spacing"] = int(cmd.options["h"])
            if "v" in cmd.options:
                layout["v_spacing"] = int(cmd.options["v"])
            self.client.update_context(self.project_id, None, layout)
        elif name == "new-scene":
            label, intent = cmd.positional[0], cmd.positional[1]
            node = self.client.add_child(self.project_id, self.root_id, "intent_draft")
            self.nodes[label] = node["node_id"]
            self.client.patch_spec(self.project_id, node["node_id"],
                                   {"intent_text": intent})
            self.client.lock_intent(self.project_id, node["node_id"])
        elif name in ("plan", "branch-from"):
            label = cmd.positional[0]
            parent_label = cmd.options["under" if name == "plan" else "from"]
            refs = self._resolve_refs(cmd.options.get("refs", ""), cmd.line_no)
            node = self.client.add_child(self.project_id, self.nodes[parent_label],
                                         "planning")
            self.nodes[label] = node["node_id"]
            planned = self.client.plan(self.project_id, node["node_id"],
                                       cmd.options["intent"], refs)
            plan = planned.get("plan") or {}
            self.echo(f"{label}: {plan.get('action_category')} -> {plan.get('workflow_id')}")
        elif name == "edit":
            self.client.patch_spec(self.project_id, self.nodes[cmd.positional[0]],
                                   self._edits_from(cmd))
        elif name == "materialize":
            node = self.client.materialize(self.project_id,
                                           self.nodes[cmd.positional[0]],
                                           self._edits_from(cmd))
            self.echo(f"{cmd.positional[0]}: kind={node['kind']}")
        elif name == "execute":
            node = self.client.execute(self.project_id, self.nodes[cmd.positional[0]])
            batch = node["candidates"][-1]
            self.echo(f"{cmd.positional[0]}: {len(batch['asset_ids'])} candidate(s)")
        elif name == "select":
            batch, candidate = _parse_pair(cmd.positional[1], cmd.line_no)
            self.client.select(self.project_id, self.nodes[cmd.positional[0]],
                               batch, candidate)
        elif name == "retain":
            batch, candidate = _parse_pair(cmd.positional[1], cmd.line_no)
            flag = "off" not in cmd.positional[2:]
            self.client.retain(self.project_id, self.nodes[cmd.positional[0]],
                               batch, candidate, flag)
        elif name == "collapse":
            flag = "off" not in cmd.positional[1:]
            self.client.collapse(self.project_id, self.nodes[cmd.positional[0]], flag)
        elif name == "prune":
            removed = self.client.prune(self.project_id, self.nodes[cmd.positional[0]])
            self.echo(f"pruned {len(removed)} node(s)")
        elif name == "collect":
            label = cmd.positional[0]
            node_id = self.nodes[cmd.options["from"]]
            if "at" in cmd.options:
                batch, candidate = _parse_pair(cmd.options["at"], cmd.line_no)
            else:
                node = self.client.get_node(self.project_id, node_id)
                if node.get("selected"):
                    batch, candidate = node["selected"]
                else:
                    batch, candidate = len(node["candidates"]) - 1, 0
            entry = self.client.collect(self.project_id, node_id, batch, candidate)
            self.entries[label] = entry["entry_id"]
        elif name == "place":
            track = 0 if cmd.options["track"] == "video" else 1
            self.client.place(
                self.project_id, self.entries[cmd.positional[0]], track,
                int(cmd.options["at"]) if "at" in cmd.options else None,
                int(cmd.options["in"]) if "in" in cmd.options else None,
                int(cmd.options["out"]) if "out" in cmd.options else None)
        elif name == "scene-done":
            self.scene_counter += 1
            index = int(cmd.positional[0]) if cmd.positional else self.scene_counter
            self.client.scene_done(self.project_id, index)
        elif name == "export":
            out = self.client.export(self.project_id, cmd.options.get("name", "final.mp4"))
            self.outputs.append(out.get("manifest_path", ""))
            self.echo(f"exported manifest {out.get('manifest_path', '')}")
        elif name == "report":
            self.last_report = self.client.report(self.project_id)

    def summarize(self) -> dict:
        tree = self.client.tree(self.project_id)
        nodes = tree["nodes"]
        by_kind: dict[str, int] = {}
        for node in nodes:
            by_kind[node["kind"]] = by_kind.get(node["kind"], 0) + 1
        depth: dict[str, int] = {}
        for node in nodes:  # nodes arrive in creation order, parents first
            parent = node["parent_id"]
            depth[node["node_id"]] = 0 if parent is None else depth[parent] + 1
        branches = sum(1 for n in nodes if n["parent_id"] == tree["root_id"])
        return {
            "project_id": tree["project"]["project_id"],
            "node_count": len(nodes),
            "nodes_by_kind": dict(sorted(by_kind.items())),
            "max_depth": max(depth.values(), default=0),
            "top_level_branches": branches,
            "visible_nodes": len(tree["layout"]["positions"]),
        }


def run_script(path: str | Path, client: Client, echo=None) -> RunResult:
    text = Path(path).read_text("utf-8")
    return ScriptRunner(client, echo=echo).run(text)


def render_summary(summary: dict) -> str:
    kinds = ", ".join(f"{k}={v}" for k, v in summary["nodes_by_kind"].items())
    return (f"{summary['project_id']}: {summary['node_count']} nodes "
            f"({kinds}); depth {summary['max_depth']}; "
            f"{summary['top_level_branches']} top-level branch(es)")
