"""Four-agent planning pipeline: coordinator, clarifier, selector, drafter.

``plan_step`` runs the roles strictly in order and returns an editable Plan.
It never executes anything and never touches node status beyond what the
engine records afterwards; execution is a separate, reviewed step.

Each role's reply must be a single fenced ```json block. A malformed reply is
retried once for that role, then surfaces as UnparseableResponse with the raw
text attached. There are no cross-role retries, so the recorded trace stays
an honest account of what the provider produced.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol, Sequence

from . import errors
from .model import ActionCategory, Modality, PathContext, Plan
from .provider import ProviderRequest, ProviderResponse, TEMPLATE_IDS, unfamiliar_terms
from .registry import WorkflowRegistry, compatible, normalize_parameters, select_workflow

_FENCE_RE = re.compile(r"```json\s*(\{.*?\})\s*```", re.DOTALL)


class Provider(Protocol):
    def complete(self, request: ProviderRequest) -> ProviderResponse: ...


def parse_fenced_json(role: str, text: str) -> dict:
    """Extract the single fenced structured block a role must return."""
    import json

    matches = _FENCE_RE.findall(text)
    if len(matches) != 1:
        raise errors.UnparseableResponse(role, text)
    try:
        data = json.loads(matches[0])
    except json.JSONDecodeError:
        raise errors.UnparseableResponse(role, text)
    if not isinstance(data, dict):
        raise errors.UnparseableResponse(role, text)
    return data


@dataclass
class PlanningOutcome:
    plan: Plan
    requests: list[ProviderRequest] = field(default_factory=list)


def _call_role(provider: Provider, request: ProviderRequest,
               usage_sink: dict[str, int]) -> dict:
    """One role invocation with a single retry on a malformed reply."""
    last_error: Optional[errors.UnparseableResponse] = None
    for _ in range(2):
        response = provider.complete(request)
        usage_sink["prompt_tokens"] += response.token_usage.get("prompt_tokens", 0)
        usage_sink["completion_tokens"] += response.token_usage.get("completion_tokens", 0)
        try:
            return parse_fenced_json(request.role, response.text)
        except errors.UnparseableResponse as exc:
            last_error = exc
    assert last_error is not None
    raise last_error


def plan_step(*, intent_text: str,
              reference_modalities: Sequence[Modality],
              path_context: PathContext,
              global_context: dict[str, str],
              registry: WorkflowRegistry,
              provider: Provider,
              attachments: Sequence[str] = (),
              request_log: Optional[list[ProviderRequest]] = None) -> Plan:
    """Translate creator intent plus tree context into an editable Plan.

    Pipeline order is fixed: the coordinator proposes the action category,
    the clarifier optionally adds notes for unfamiliar terms, the selector
    picks a compatible workflow id, and the drafter materializes the prompt
    and parameter draft. The returned plan always validates against the
    selected workflow's schema.
    """
    if not intent_text.strip():
        raise errors.IntentEmpty("intent text must be non-empty")

    usage = {"prompt_tokens": 0, "completion_tokens": 0}
    base_context: dict[str, Any] = {
        "scene_intent": path_context.scene_intent,
        "path": path_context.path,
        "global_context": dict(global_context),
        "reference_modalities": [m.value for m in reference_modalities],
    }

    def make_request(role: str, extra: dict | None = None) -> ProviderRequest:
        request = ProviderRequest(
            role=role,
            system_template_id=TEMPLATE_IDS[role],
            context={**base_context, **(extra or {})},
            user_intent=intent_text,
            attachments=list(attachments),
        )
        if request_log is not None:
            request_log.append(request)
        return request

    # 1. coordinator: action category
    master_reply = _call_role(provider, make_request("master"), usage)
    try:
        category = ActionCategory(master_reply["action_category"])
    except (KeyError, ValueError):
        raise errors.UnparseableResponse("master", str(master_reply))

    # 2. clarifier, only when the intent carries unfamiliar terms
    knowledge_notes: Optional[str] = None
    if unfamiliar_terms(intent_text):
        knowledge_reply = _call_role(provider, make_request("knowledge"), usage)
        notes = knowledge_reply.get("notes", "")
        knowledge_notes = notes or None

    # 3. selector: compatible workflow id
    compatible_ids = [
        m.workflow_id for m in registry.by_category(category)
        if compatible(m, reference_modalities)
    ]
    workflow_reply = _call_role(
        provider, make_request("workflow", {
            "action_category": category.value,
            "compatible_workflows": compatible_ids,
        }), usage)
    workflow_id = workflow_reply.get("workflow_id", "")
    if workflow_id not in compatible_ids:
        # Fall back to the deterministic selection rule before giving up.
        workflow_id = select_workflow(registry, category, list(reference_modalities))
    workflow = registry.get(workflow_id)

    # 4. drafter: prompt and parameter draft
    prompt_reply = _call_role(
        provider, make_request("prompt", {
            "action_category": category.value,
            "workflow_id": workflow_id,
            "parameter_schema": [p.to_dict() for p in workflow.parameters],
            "knowledge_notes": knowledge_notes,
        }), usage)
    prompt_draft = prompt_reply.get("prompt", "")
    if not isinstance(prompt_draft, str) or not prompt_draft.strip():
        raise errors.UnparseableResponse("prompt", str(prompt_reply))
    raw_params = prompt_reply.get("parameters", {})
    if not isinstance(raw_params, dict):
        raise errors.UnparseableResponse("prompt", str(prompt_reply))

    # The draft must satisfy the workflow schema; fill defaults for the rest.
    normalized = normalize_parameters(raw_params, workflow)

    return Plan(
        action_category=category,
        workflow_id=workflow_id,
        prompt_draft=prompt_draft,
        parameter_draft=normalized,
        knowledge_notes=knowledge_notes,
        token_usage=usage,
    )
