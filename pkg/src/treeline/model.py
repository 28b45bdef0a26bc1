"""Authoring-state tree: node kinds, lifecycle, branching semantics.

State is event-sourced. Mutations are expressed as *commands* that validate
against the current ``ProjectState`` and return event (kind, payload) pairs;
``apply_event`` is the single code path that folds an event into state, used
both for live mutation and for replay from the on-disk log. Anything not
reconstructible by folding events must not live on the state.

Identifiers are 128-bit lowercase hex. They are derived from the project id
and the state's logical clock so that replaying the same operation sequence
(from a CLI script or the HTTP API) mints identical ids; see ``mint_id``.
"Timestamps" on nodes are logical ticks for the same reason; wall-clock time
lives only in log metadata and the session telemetry log.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional

from . import errors


class NodeKind(str, Enum):
    INIT = "init"
    INTENT_DRAFT = "intent_draft"
    PLANNING = "planning"
    IMAGE = "image"
    VIDEO = "video"
    AUDIO = "audio"


MODAL_KINDS = (NodeKind.IMAGE, NodeKind.VIDEO, NodeKind.AUDIO)


class Modality(str, Enum):
    IMAGE = "image"
    VIDEO = "video"
    AUDIO = "audio"

    @property
    def node_kind(self) -> NodeKind:
        return NodeKind(self.value)


class NodeStatus(str, Enum):
    DRAFT = "draft"
    PLANNED = "planned"
    QUEUED = "queued"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"


class ActionCategory(str, Enum):
    ESTABLISH_ANCHOR = "establish_anchor"
    REFINE_VISUAL = "refine_visual"
    GENERATE_MOTION = "generate_motion"
    PRODUCE_AUDIO = "produce_audio"
    ASSEMBLE = "assemble"


# Fields materialize/spec-patch may touch on a modal node.
EDITABLE_SPEC_FIELDS = ("prompt_text", "parameters", "reference_asset_ids")


def canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def canonical_bytes(value: Any) -> bytes:
    return canonical_json(value).encode("utf-8")


def mint_id(project_id: str, purpose: str, tick: int, ordinal: int = 0) -> str:
    """Deterministic 128-bit hex id, unique per (project, tick, ordinal)."""
    digest = hashlib.sha256(f"{project_id}|{purpose}|{tick}|{ordinal}".encode("utf-8"))
    return digest.hexdigest()[:32]


@dataclass
class Plan:
    """Agent-produced next-step decision, editable before execution."""

    action_category: ActionCategory
    workflow_id: str
    prompt_draft: str
    parameter_draft: dict[str, Any]
    knowledge_notes: Optional[str] = None
    token_usage: dict[str, int] = field(default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0})

    def to_dict(self) -> dict:
        return {
            "action_category": self.action_category.value,
            "workflow_id": self.workflow_id,
            "prompt_draft": self.prompt_draft,
            "parameter_draft": dict(self.parameter_draft),
            "knowledge_notes": self.knowledge_notes,
            "token_usage": dict(self.token_usage),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Plan":
        return cls(
            action_category=ActionCategory(data["action_category"]),
            workflow_id=data["workflow_id"],
            prompt_draft=data["prompt_draft"],
            parameter_draft=dict(data.get("parameter_draft", {})),
            knowledge_notes=data.get("knowledge_notes"),
            token_usage=dict(data.get("token_usage", {"prompt_tokens": 0, "completion_tokens": 0})),
        )


@dataclass
class StepSpec:
    intent_text: str = ""
    reference_asset_ids: list[str] = field(default_factory=list)
    prompt_text: str = ""
    parameters: dict[str, Any] = field(default_factory=dict)
    workflow_id: Optional[str] = None
    action_category: Optional[ActionCategory] = None
    locked: bool = False

    def to_dict(self) -> dict:
        return {
            "intent_text": self.intent_text,
            "reference_asset_ids": list(self.reference_asset_ids),
            "prompt_text": self.prompt_text,
            "parameters": dict(self.parameters),
            "workflow_id": self.workflow_id,
            "action_category": self.action_category.value if self.action_category else None,
            "locked": self.locked,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StepSpec":
        return cls(
            intent_text=data.get("intent_text", ""),
            reference_asset_ids=list(data.get("reference_asset_ids", [])),
            prompt_text=data.get("prompt_text", ""),
            parameters=dict(data.get("parameters", {})),
            workflow_id=data.get("workflow_id"),
            action_category=ActionCategory(data["action_category"]) if data.get("action_category") else None,
            locked=bool(data.get("locked", False)),
        )


@dataclass
class CandidateBatch:
    """Immutable outputs of one node execution. Appended, never rewritten."""

    batch_id: str
    asset_ids: list[str]
    executed_workflow_id: str
    executed_parameters: dict[str, Any]
    generation_call_count: int

    def to_dict(self) -> dict:
        return {
            "batch_id": self.batch_id,
            "asset_ids": list(self.asset_ids),
            "executed_workflow_id": self.executed_workflow_id,
            "executed_parameters": dict(self.executed_parameters),
            "generation_call_count": self.generation_call_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CandidateBatch":
        return cls(
            batch_id=data["batch_id"],
            asset_ids=list(data["asset_ids"]),
            executed_workflow_id=data["executed_workflow_id"],
            executed_parameters=dict(data["executed_parameters"]),
            generation_call_count=int(data["generation_call_count"]),
        )


@dataclass
class Node:
    node_id: str
    project_id: str
    parent_id: Optional[str]
    kind: NodeKind
    status: NodeStatus
    spec: StepSpec
    plan: Optional[Plan] = None
    candidates: list[CandidateBatch] = field(default_factory=list)
    selected: Optional[tuple[int, int]] = None
    retained_flags: set[tuple[int, int]] = field(default_factory=set)
    collapsed: bool = False
    created_at: int = 0  # logical tick
    order_key: int = 0
    version: int = 0  # optimistic-concurrency counter, bumped on any mutation

    def candidate_asset_id(self, batch_index: int, candidate_index: int) -> str:
        try:
            return self.candidates[batch_index].asset_ids[candidate_index]
        except IndexError:
            raise errors.IndexOutOfRange(
                f"candidate ({batch_index},{candidate_index}) does not exist on node {self.node_id}"
            )

    def selected_asset_id(self) -> Optional[str]:
        if self.selected is None:
            return None
        b, c = self.selected
        return self.candidates[b].asset_ids[c]

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "project_id": self.project_id,
            "parent_id": self.parent_id,
            "kind": self.kind.value,
            "status": self.status.value,
            "spec": self.spec.to_dict(),
            "plan": self.plan.to_dict() if self.plan else None,
            "candidates": [b.to_dict() for b in self.candidates],
            "selected": list(self.selected) if self.selected else None,
            "retained_flags": sorted([list(p) for p in self.retained_flags]),
            "collapsed": self.collapsed,
            "created_at": self.created_at,
            "order_key": self.order_key,
            "version": self.version,
        }


@dataclass
class AssetInfo:
    """Asset facts folded from events; byte-level truth lives in the store."""

    asset_id: str
    modality: Modality
    metadata: dict[str, Any]
    producer_node_id: str
    producer_batch_id: str

    def to_dict(self) -> dict:
        return {
            "asset_id": self.asset_id,
            "modality": self.modality.value,
            "metadata": dict(self.metadata),
            "producer_node_id": self.producer_node_id,
            "producer_batch_id": self.producer_batch_id,
        }


@dataclass
class CollectionEntry:
    entry_id: str
    asset_id: str
    source_node_id: str

    def to_dict(self) -> dict:
        return {"entry_id": self.entry_id, "asset_id": self.asset_id, "source_node_id": self.source_node_id}


VIDEO_TRACK = 0
AUDIO_TRACK = 1


@dataclass
class Segment:
    segment_id: str
    asset_id: str
    source_node_id: str
    track: int
    order_index: int
    trim_in_ms: int
    trim_out_ms: int

    def to_dict(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "asset_id": self.asset_id,
            "source_node_id": self.source_node_id,
            "track": self.track,
            "order_index": self.order_index,
            "trim_in_ms": self.trim_in_ms,
            "trim_out_ms": self.trim_out_ms,
        }


@dataclass
class Timeline:
    collection: list[CollectionEntry] = field(default_factory=list)
    segments: list[Segment] = field(default_factory=list)

    def track_segments(self, track: int) -> list[Segment]:
        return sorted((s for s in self.segments if s.track == track), key=lambda s: s.order_index)

    def to_dict(self) -> dict:
        return {
            "collection": [e.to_dict() for e in self.collection],
            "segments": [s.to_dict() for s in sorted(self.segments, key=lambda s: (s.track, s.order_index))],
        }


DEFAULT_MODALITY_COLORS = {
    NodeKind.IMAGE.value: "#3b82f6",
    NodeKind.VIDEO.value: "#22c55e",
    NodeKind.AUDIO.value: "#ef4444",
}

DEFAULT_GLOBAL_CONTEXT = {
    "model_id": "",
    "style": "",
    "mood": "",
    "palette": "",
    "reference_material": "",
}

DEFAULT_LAYOUT_SPACING = {"h_spacing": 60, "v_spacing": 90}


@dataclass
class ProjectState:
    """Full folded state of one project. Serializable and hashable."""

    project_id: str
    name: str = ""
    global_context: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_GLOBAL_CONTEXT))
    layout_config: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_LAYOUT_SPACING))
    modality_colors: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_MODALITY_COLORS))
    nodes: dict[str, Node] = field(default_factory=dict)
    root_id: Optional[str] = None
    assets: dict[str, AssetInfo] = field(default_factory=dict)
    timeline: Timeline = field(default_factory=Timeline)
    tick: int = 0

    # -- views ---------------------------------------------------------------

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise errors.UnknownNode(f"no node {node_id} in project {self.project_id}")

    def children_of(self, node_id: Optional[str]) -> list[Node]:
        kids = [n for n in self.nodes.values() if n.parent_id == node_id]
        kids.sort(key=lambda n: n.order_key)
        return kids

    def subtree_ids(self, node_id: str) -> list[str]:
        """Ids of node and all descendants, preorder, sibling order preserved."""
        out: list[str] = []
        stack = [self.node(node_id)]
        while stack:
            n = stack.pop()
            out.append(n.node_id)
            stack.extend(reversed(self.children_of(n.node_id)))
        return out

    def path_to_root(self, node_id: str) -> list[Node]:
        """Nodes from Init root down to node_id inclusive."""
        chain: list[Node] = []
        cur: Optional[str] = node_id
        seen = set()
        while cur is not None:
            if cur in seen:
                raise errors.CorruptTree(f"parent cycle at {cur}")
            seen.add(cur)
            n = self.node(cur)
            chain.append(n)
            cur = n.parent_id
        chain.reverse()
        return chain

    def depth_of(self, node_id: str) -> int:
        return len(self.path_to_root(node_id)) - 1

    def visible_nodes(self) -> list[Node]:
        """Nodes not hidden inside a collapsed subtree (collapsed roots stay visible)."""
        if self.root_id is None:
            return []
        out: list[Node] = []
        stack = [self.nodes[self.root_id]]
        while stack:
            n = stack.pop()
            out.append(n)
            if not n.collapsed:
                stack.extend(reversed(self.children_of(n.node_id)))
        return out

    def assets_in_subtree(self, node_id: str) -> set[str]:
        produced: set[str] = set()
        for nid in self.subtree_ids(node_id):
            for batch in self.nodes[nid].candidates:
                produced.update(batch.asset_ids)
        return produced

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "project_id": self.project_id,
            "name": self.name,
            "global_context": dict(self.global_context),
            "layout_config": dict(self.layout_config),
            "modality_colors": dict(self.modality_colors),
            "root_id": self.root_id,
            "nodes": {nid: n.to_dict() for nid, n in sorted(self.nodes.items())},
            "assets": {aid: a.to_dict() for aid, a in sorted(self.assets.items())},
            "timeline": self.timeline.to_dict(),
            "tick": self.tick,
        }

    def snapshot_bytes(self) -> bytes:
        """Full serialization including fold bookkeeping (tick, versions);
        the replay-determinism comparison uses this."""
        return canonical_bytes(self.to_dict())

    def snapshot_hash(self) -> str:
        return hashlib.sha256(self.snapshot_bytes()).hexdigest()

    def content_dict(self, *, mask_versions: bool = False) -> dict:
        """Project content without log bookkeeping: the tick counter is
        excluded, and node version counters optionally masked. Collapse
        round-trip and prune-isolation checks compare this form."""
        data = self.to_dict()
        data.pop("tick")
        if mask_versions:
            for node in data["nodes"].values():
                node["version"] = 0
        return data

    def content_bytes(self, *, mask_versions: bool = False) -> bytes:
        return canonical_bytes(self.content_dict(mask_versions=mask_versions))

    def restricted_snapshot_bytes(self, node_ids: Iterable[str]) -> bytes:
        """Content snapshot limited to the given nodes, for prune isolation."""
        keep = set(node_ids)
        data = self.content_dict()
        data["nodes"] = {nid: d for nid, d in data["nodes"].items() if nid in keep}
        return canonical_bytes(data)


@dataclass
class PathContext:
    """Planning context: nearest locked scene intent plus the root-to-node path."""

    scene_intent: str
    path: list[dict]

    def to_dict(self) -> dict:
        return {"scene_intent": self.scene_intent, "path": [dict(p) for p in self.path]}

    def context_hash(self) -> str:
        return hashlib.sha256(canonical_bytes(self.to_dict())).hexdigest()


# ---------------------------------------------------------------------------
# Commands: validate against state, return [(event_kind, payload), ...].
# They never mutate state; the caller appends the events and folds them.
# ---------------------------------------------------------------------------

Event = tuple[str, dict]


def cmd_create_project(project_id: str, name: str, *, global_context: dict | None = None,
                       layout_config: dict | None = None, modality_colors: dict | None = None) -> list[Event]:
    payload = {
        "project_id": project_id,
        "name": name,
        "global_context": {**DEFAULT_GLOBAL_CONTEXT, **(global_context or {})},
        "layout_config": {**DEFAULT_LAYOUT_SPACING, **(layout_config or {})},
        "modality_colors": {**DEFAULT_MODALITY_COLORS, **(modality_colors or {})},
    }
    for key in ("h_spacing", "v_spacing"):
        if payload["layout_config"][key] <= 0:
            raise errors.InvalidConfig(f"{key} must be > 0")
    for kind in (NodeKind.IMAGE, NodeKind.VIDEO, NodeKind.AUDIO):
        if kind.value not in payload["modality_colors"]:
            raise errors.InvalidConfig(f"modality_colors must cover {kind.value}")
    return [("project_created", payload)]


def cmd_update_context(state: ProjectState, *, global_context: dict | None = None,
                       layout_config: dict | None = None, modality_colors: dict | None = None) -> list[Event]:
    payload: dict[str, Any] = {}
    if global_context:
        unknown = set(global_context) - set(DEFAULT_GLOBAL_CONTEXT)
        if unknown:
            raise errors.EditOutOfBounds(f"unknown context fields: {sorted(unknown)}")
        payload["global_context"] = dict(global_context)
    if layout_config:
        unknown = set(layout_config) - set(DEFAULT_LAYOUT_SPACING)
        if unknown:
            raise errors.InvalidConfig(f"unknown layout fields: {sorted(unknown)}")
        for key, value in layout_config.items():
            if value <= 0:
                raise errors.InvalidConfig(f"{key} must be > 0")
        payload["layout_config"] = dict(layout_config)
    if modality_colors:
        payload["modality_colors"] = dict(modality_colors)
    if not payload:
        raise errors.EditOutOfBounds("empty context update")
    return [("context_updated", payload)]


def cmd_create_root(state: ProjectState) -> list[Event]:
    if state.root_id is not None:
        raise errors.RootAlreadyExists(f"project {state.project_id} already has an init root")
    node_id = mint_id(state.project_id, "node", state.tick)
    # The root is a pure start state: no generation step, so born succeeded.
    return [("node_added", {
        "node_id": node_id,
        "parent_id": None,
        "kind": NodeKind.INIT.value,
        "status": NodeStatus.SUCCEEDED.value,
        "order_key": 0,
    })]


def cmd_add_child(state: ProjectState, parent_id: str, kind: NodeKind) -> list[Event]:
    if kind not in (NodeKind.INTENT_DRAFT, NodeKind.PLANNING):
        raise errors.InvalidKind(f"children are created as intent_draft or planning, not {kind.value}")
    if parent_id not in state.nodes:
        raise errors.UnknownParent(f"no node {parent_id}")
    parent = state.nodes[parent_id]
    # Only materialized states accept children; an un-materialized planning
    # placeholder must be resolved or pruned first.
    if parent.kind is NodeKind.PLANNING:
        raise errors.ParentNotExtendable(f"planning node {parent_id} must be materialized before extension")
    siblings = state.children_of(parent_id)
    order_key = (siblings[-1].order_key + 1) if siblings else 0
    node_id = mint_id(state.project_id, "node", state.tick)
    return [("node_added", {
        "node_id": node_id,
        "parent_id": parent_id,
        "kind": kind.value,
        "status": NodeStatus.DRAFT.value,
        "order_key": order_key,
    })]


def cmd_patch_spec(state: ProjectState, node_id: str, patch: dict,
                   expected_version: Optional[int] = None) -> list[Event]:
    node = state.node(node_id)
    if expected_version is not None and node.version != expected_version:
        raise errors.VersionConflict(
            f"node {node_id} is at version {node.version}, caller expected {expected_version}"
        )
    allowed = {"intent_text", "prompt_text", "parameters", "reference_asset_ids"}
    unknown = set(patch) - allowed
    if unknown:
        raise errors.EditOutOfBounds(f"spec fields not editable: {sorted(unknown)}")
    if "intent_text" in patch and node.spec.locked:
        raise errors.IntentLockedError(f"intent of {node_id} is locked")
    if node.status in (NodeStatus.QUEUED, NodeStatus.RUNNING):
        raise errors.EditOutOfBounds(f"node {node_id} is {node.status.value}; spec is frozen during execution")
    if "reference_asset_ids" in patch:
        _check_references(state, patch["reference_asset_ids"])
    return [("spec_patched", {"node_id": node_id, "patch": dict(patch)})]


def _check_references(state: ProjectState, asset_ids: list[str]) -> None:
    """Every reference must resolve to an asset produced by a succeeded node here."""
    for asset_id in asset_ids:
        info = state.assets.get(asset_id)
        if info is None:
            raise errors.UnknownAsset(f"referenced asset {asset_id} does not exist in this project")
        producer = state.nodes.get(info.producer_node_id)
        if producer is None or producer.status is not NodeStatus.SUCCEEDED:
            raise errors.UnknownAsset(f"referenced asset {asset_id} has no succeeded producer node")


def cmd_lock_intent(state: ProjectState, node_id: str) -> list[Event]:
    node = state.node(node_id)
    if node.kind is not NodeKind.INTENT_DRAFT:
        raise errors.NotIntentDraft(f"node {node_id} is {node.kind.value}")
    if node.spec.locked:
        raise errors.AlreadyLocked(f"intent of {node_id} is already locked")
    if not node.spec.intent_text.strip():
        raise errors.EmptyIntent("cannot lock an empty intent")
    return [("intent_locked", {"node_id": node_id})]


def cmd_record_plan(state: ProjectState, node_id: str, plan: Plan) -> list[Event]:
    node = state.node(node_id)
    if node.kind is not NodeKind.PLANNING:
        raise errors.NotPlanningNode(f"node {node_id} is {node.kind.value}")
    return [("node_planned", {"node_id": node_id, "plan": plan.to_dict()})]


def cmd_materialize(state: ProjectState, node_id: str, plan: Plan, new_kind: NodeKind,
                    edits: dict | None = None) -> list[Event]:
    node = state.node(node_id)
    if node.kind is not NodeKind.PLANNING:
        raise errors.NotPlanningNode(f"node {node_id} is {node.kind.value}")
    if node.status is not NodeStatus.PLANNED:
        raise errors.NotPlanningNode(f"node {node_id} has no reviewed plan (status {node.status.value})")
    if new_kind not in MODAL_KINDS:
        raise errors.InvalidKind(f"materialization target must be modal, not {new_kind.value}")
    edits = dict(edits or {})
    out_of_bounds = set(edits) - set(EDITABLE_SPEC_FIELDS)
    if out_of_bounds:
        raise errors.EditOutOfBounds(f"materialize edits limited to {EDITABLE_SPEC_FIELDS}; got {sorted(out_of_bounds)}")
    if "reference_asset_ids" in edits:
        _check_references(state, edits["reference_asset_ids"])
    return [("node_materialized", {
        "node_id": node_id,
        "prior_kind": node.kind.value,
        "new_kind": new_kind.value,
        "plan": plan.to_dict(),
        "edits": edits,
    })]


def cmd_select_candidate(state: ProjectState, node_id: str, batch_index: int, candidate_index: int) -> list[Event]:
    node = state.node(node_id)
    if node.status is not NodeStatus.SUCCEEDED:
        raise errors.NodeNotSucceeded(f"node {node_id} is {node.status.value}")
    node.candidate_asset_id(batch_index, candidate_index)  # bounds check
    return [("candidate_selected", {"node_id": node_id, "batch_index": batch_index,
                                    "candidate_index": candidate_index})]


def cmd_retain_variant(state: ProjectState, node_id: str, batch_index: int, candidate_index: int,
                       flag: bool) -> list[Event]:
    node = state.node(node_id)
    if node.status is not NodeStatus.SUCCEEDED:
        raise errors.NodeNotSucceeded(f"node {node_id} is {node.status.value}")
    node.candidate_asset_id(batch_index, candidate_index)
    return [("variant_retained", {"node_id": node_id, "batch_index": batch_index,
                                  "candidate_index": candidate_index, "flag": flag})]


def cmd_collapse(state: ProjectState, node_id: str, collapsed: bool) -> list[Event]:
    node = state.node(node_id)
    if node.kind is NodeKind.INIT:
        raise errors.CannotCollapseRoot("the init root is never collapsed")
    return [("node_collapsed", {"node_id": node_id, "collapsed": collapsed})]


def scan_prune_blockers(state: ProjectState, node_id: str) -> list[dict]:
    """References outside subtree(node_id) to assets produced inside it.

    Kept independent of prune itself so tests can use it as an oracle against
    randomized interleavings.
    """
    subtree = set(state.subtree_ids(node_id))
    produced = state.assets_in_subtree(node_id)
    blockers: list[dict] = []
    for entry in state.timeline.collection:
        if entry.asset_id in produced:
            blockers.append({"kind": "collection_entry", "id": entry.entry_id, "asset_id": entry.asset_id})
    for seg in state.timeline.segments:
        if seg.asset_id in produced:
            blockers.append({"kind": "segment", "id": seg.segment_id, "asset_id": seg.asset_id})
    for other in state.nodes.values():
        if other.node_id in subtree:
            continue
        for asset_id in other.spec.reference_asset_ids:
            if asset_id in produced:
                blockers.append({"kind": "node_spec", "id": other.node_id, "asset_id": asset_id})
    return blockers


def cmd_prune(state: ProjectState, node_id: str) -> list[Event]:
    node = state.node(node_id)
    if node.kind is NodeKind.INIT:
        raise errors.CannotPruneRoot("the init root cannot be pruned")
    blockers = scan_prune_blockers(state, node_id)
    if blockers:
        raise errors.PruneConflict(f"subtree of {node_id} has {len(blockers)} live reference(s)", blockers)
    removed = state.subtree_ids(node_id)
    return [("nodes_pruned", {"node_ids": removed})]


def derive_context(state: ProjectState, node_id: str) -> PathContext:
    """Scene intent (nearest locked ancestor draft) plus the root-to-node path."""
    chain = state.path_to_root(node_id)
    scene_intent = ""
    for node in reversed(chain):
        if node.kind is NodeKind.INTENT_DRAFT and node.spec.locked:
            scene_intent = node.spec.intent_text
            break
    path = []
    for node in chain:
        prompt = node.spec.prompt_text or node.spec.intent_text
        selected = node.selected_asset_id()
        path.append({
            "node_id": node.node_id,
            "kind": node.kind.value,
            "action_category": node.spec.action_category.value if node.spec.action_category else None,
            "prompt_summary": prompt[:120],
            "selected_asset_ids": [selected] if selected else [],
        })
    return PathContext(scene_intent=scene_intent, path=path)


# ---------------------------------------------------------------------------
# Event fold
# ---------------------------------------------------------------------------

def apply_event(state: ProjectState, kind: str, payload: dict) -> None:
    handler = _APPLIERS.get(kind)
    if handler is None:
        raise errors.StorageFailure(f"unknown event kind {kind!r}")
    handler(state, payload)
    state.tick += 1


def _bump(state: ProjectState, node_id: str) -> Node:
    node = state.nodes[node_id]
    node.version += 1
    return node


def _apply_project_created(state: ProjectState, p: dict) -> None:
    state.name = p["name"]
    state.global_context = dict(p["global_context"])
    state.layout_config = dict(p["layout_config"])
    state.modality_colors = dict(p["modality_colors"])


def _apply_context_updated(state: ProjectState, p: dict) -> None:
    if "global_context" in p:
        state.global_context.update(p["global_context"])
    if "layout_config" in p:
        state.layout_config.update(p["layout_config"])
    if "modality_colors" in p:
        state.modality_colors.update(p["modality_colors"])


def _apply_node_added(state: ProjectState, p: dict) -> None:
    node = Node(
        node_id=p["node_id"],
        project_id=state.project_id,
        parent_id=p["parent_id"],
        kind=NodeKind(p["kind"]),
        status=NodeStatus(p["status"]),
        spec=StepSpec(),
        created_at=state.tick,
        order_key=p["order_key"],
    )
    state.nodes[node.node_id] = node
    if node.parent_id is None:
        state.root_id = node.node_id


def _apply_spec_patched(state: ProjectState, p: dict) -> None:
    node = _bump(state, p["node_id"])
    patch = p["patch"]
    if "intent_text" in patch:
        node.spec.intent_text = patch["intent_text"]
    if "prompt_text" in patch:
        node.spec.prompt_text = patch["prompt_text"]
    if "parameters" in patch:
        node.spec.parameters.update(patch["parameters"])
    if "reference_asset_ids" in patch:
        node.spec.reference_asset_ids = list(patch["reference_asset_ids"])


def _apply_intent_locked(state: ProjectState, p: dict) -> None:
    node = _bump(state, p["node_id"])
    node.spec.locked = True


def _apply_node_planned(state: ProjectState, p: dict) -> None:
    node = _bump(state, p["node_id"])
    node.plan = Plan.from_dict(p["plan"])
    node.status = NodeStatus.PLANNED


def _apply_node_materialized(state: ProjectState, p: dict) -> None:
    node = _bump(state, p["node_id"])
    plan = Plan.from_dict(p["plan"])
    node.kind = NodeKind(p["new_kind"])
    node.plan = plan
    node.spec.workflow_id = plan.workflow_id
    node.spec.action_category = plan.action_category
    # the agent draft is a baseline; anything the creator already typed on the
    # node wins, and materialize-time edits win over both
    node.spec.prompt_text = node.spec.prompt_text or plan.prompt_draft
    node.spec.parameters = {**plan.parameter_draft, **node.spec.parameters}
    edits = p.get("edits", {})
    if "prompt_text" in edits:
        node.spec.prompt_text = edits["prompt_text"]
    if "parameters" in edits:
        node.spec.parameters.update(edits["parameters"])
    if "reference_asset_ids" in edits:
        node.spec.reference_asset_ids = list(edits["reference_asset_ids"])
    # status stays planned until queued


def _apply_node_queued(state: ProjectState, p: dict) -> None:
    node = _bump(state, p["node_id"])
    node.status = NodeStatus.QUEUED


def _apply_node_running(state: ProjectState, p: dict) -> None:
    node = _bump(state, p["node_id"])
    node.status = NodeStatus.RUNNING


def _apply_queue_cancelled(state: ProjectState, p: dict) -> None:
    node = _bump(state, p["node_id"])
    node.status = NodeStatus.PLANNED


def _apply_node_succeeded(state: ProjectState, p: dict) -> None:
    node = _bump(state, p["node_id"])
    batch = CandidateBatch.from_dict(p["batch"])
    node.candidates.append(batch)
    node.status = NodeStatus.SUCCEEDED
    for asset in p.get("assets", []):
        info = AssetInfo(
            asset_id=asset["asset_id"],
            modality=Modality(asset["modality"]),
            metadata=dict(asset["metadata"]),
            producer_node_id=node.node_id,
            producer_batch_id=batch.batch_id,
        )
        state.assets[info.asset_id] = info


def _apply_node_failed(state: ProjectState, p: dict) -> None:
    node = _bump(state, p["node_id"])
    node.status = NodeStatus.FAILED


def _apply_candidate_selected(state: ProjectState, p: dict) -> None:
    node = _bump(state, p["node_id"])
    node.selected = (p["batch_index"], p["candidate_index"])


def _apply_variant_retained(state: ProjectState, p: dict) -> None:
    node = _bump(state, p["node_id"])
    pair = (p["batch_index"], p["candidate_index"])
    if p["flag"]:
        node.retained_flags.add(pair)
    else:
        node.retained_flags.discard(pair)


def _apply_node_collapsed(state: ProjectState, p: dict) -> None:
    node = _bump(state, p["node_id"])
    node.collapsed = p["collapsed"]


def _apply_nodes_pruned(state: ProjectState, p: dict) -> None:
    for node_id in p["node_ids"]:
        state.nodes.pop(node_id, None)


def _apply_timeline_collected(state: ProjectState, p: dict) -> None:
    state.timeline.collection.append(
        CollectionEntry(entry_id=p["entry_id"], asset_id=p["asset_id"], source_node_id=p["source_node_id"])
    )


def _apply_segment_placed(state: ProjectState, p: dict) -> None:
    track = p["track"]
    insert_at = p["order_index"]
    existing = state.timeline.track_segments(track)
    seg = Segment(
        segment_id=p["segment_id"],
        asset_id=p["asset_id"],
        source_node_id=p["source_node_id"],
        track=track,
        order_index=insert_at,
        trim_in_ms=p["trim_in_ms"],
        trim_out_ms=p["trim_out_ms"],
    )
    existing.insert(insert_at, seg)
    for i, s in enumerate(existing):
        s.order_index = i
    state.timeline.segments.append(seg)


def _apply_segment_reordered(state: ProjectState, p: dict) -> None:
    target = next(s for s in state.timeline.segments if s.segment_id == p["segment_id"])
    track = state.timeline.track_segments(target.track)
    track.remove(target)
    track.insert(p["new_index"], target)
    for i, s in enumerate(track):
        s.order_index = i


def _apply_segment_removed(state: ProjectState, p: dict) -> None:
    target = next(s for s in state.timeline.segments if s.segment_id == p["segment_id"])
    state.timeline.segments.remove(target)
    for i, s in enumerate(state.timeline.track_segments(target.track)):
        s.order_index = i


_APPLIERS = {
    "project_created": _apply_project_created,
    "context_updated": _apply_context_updated,
    "node_added": _apply_node_added,
    "spec_patched": _apply_spec_patched,
    "intent_locked": _apply_intent_locked,
    "node_planned": _apply_node_planned,
    "node_materialized": _apply_node_materialized,
    "node_queued": _apply_node_queued,
    "node_running": _apply_node_running,
    "queue_cancelled": _apply_queue_cancelled,
    "node_succeeded": _apply_node_succeeded,
    "node_failed": _apply_node_failed,
    "candidate_selected": _apply_candidate_selected,
    "variant_retained": _apply_variant_retained,
    "node_collapsed": _apply_node_collapsed,
    "nodes_pruned": _apply_nodes_pruned,
    "timeline_collected": _apply_timeline_collected,
    "segment_placed": _apply_segment_placed,
    "segment_reordered": _apply_segment_reordered,
    "segment_removed": _apply_segment_removed,
}


def replay(project_id: str, events: Iterable[tuple[str, dict]]) -> ProjectState:
    """Fold an event stream from empty state; the replay-determinism oracle."""
    state = ProjectState(project_id=project_id)
    for kind, payload in events:
        apply_event(state, kind, payload)
    return state
