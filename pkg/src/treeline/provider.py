"""Text-model provider contract, curated templates, and the deterministic mock.

The adapter surface is a single text-completion call: (system text, user
text) in, (text, token counts) out. The real adapter posts to a configured
endpoint with a key taken from an environment variable; the mock is a pure
function of the request and is the default for tests and replay fixtures.

The mock's behavior is driven by a published keyword table (KEYWORD_TABLE and
WORKFLOW_HINTS below): intent tokens choose the action category, and
category-specific hint words refine the workflow choice. Tests enumerate
these tables, so extending them extends the covered intent space.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Optional

from . import errors
from .model import ActionCategory, canonical_json

ROLES = ("master", "knowledge", "workflow", "prompt")

TEMPLATE_IDS = {
    "master": "master-v1",
    "knowledge": "knowledge-v1",
    "workflow": "workflow-v1",
    "prompt": "prompt-v1",
}


def load_templates() -> dict[str, str]:
    """Versioned system templates, each with the content-rule preamble baked in."""
    base = resources.files("treeline.data").joinpath("templates")
    rules = base.joinpath("content-rules.txt").read_text("utf-8")
    out = {}
    for role, template_id in TEMPLATE_IDS.items():
        text = base.joinpath(f"{template_id}.txt").read_text("utf-8")
        out[template_id] = text.replace("{content_rules}", rules.rstrip())
    return out


@dataclass
class ProviderRequest:
    role: str
    system_template_id: str
    context: dict[str, Any]
    user_intent: str
    attachments: list[str] = field(default_factory=list)

    def context_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.context).encode("utf-8")).hexdigest()


@dataclass
class ProviderResponse:
    text: str
    token_usage: dict[str, int]


# Category trigger words, scanned left to right over the intent; the first
# token that hits any set decides. Published so tests can enumerate coverage.
KEYWORD_TABLE: dict[ActionCategory, frozenset[str]] = {
    ActionCategory.ESTABLISH_ANCHOR: frozenset({
        "anchor", "establish", "create", "draw", "illustrate", "depict",
        "portrait", "image", "picture", "photo", "scene", "generate",
    }),
    ActionCategory.REFINE_VISUAL: frozenset({
        "refine", "remove", "erase", "edit", "enrich", "enhance", "upscale",
        "clean", "fix", "adjust", "restyle", "variant", "variants", "overlay",
        "compose", "structure", "sharpen",
    }),
    ActionCategory.GENERATE_MOTION: frozenset({
        "animate", "video", "motion", "move", "camera", "zoom", "pan",
        "rotate", "orbit", "interpolate", "smooth", "transition", "bridge",
        "clip",
    }),
    ActionCategory.PRODUCE_AUDIO: frozenset({
        "audio", "music", "narration", "narrate", "voice", "voiceover",
        "sound", "soundtrack", "speak", "melody", "tts",
    }),
    ActionCategory.ASSEMBLE: frozenset({
        "assemble", "stitch", "combine", "concat", "timeline", "final",
    }),
}

# Within a category, hint rows are tried in order and the first token match
# picks the workflow; the generic compatibility rule is the fallback. Specific
# operations come before the broad default of each category.
WORKFLOW_HINTS: dict[ActionCategory, tuple[tuple[frozenset[str], str], ...]] = {
    ActionCategory.ESTABLISH_ANCHOR: (
        (frozenset({"variant", "variants", "styles", "stylistic"}), "wf-style-variants"),
        (frozenset({"anchor", "establish", "create", "draw", "illustrate", "depict",
                    "portrait", "image", "picture", "photo", "scene", "generate"}), "wf-t2i"),
    ),
    ActionCategory.REFINE_VISUAL: (
        (frozenset({"upscale", "sharpen", "resolution"}), "wf-upscale"),
        (frozenset({"structure", "canny", "geometry", "control"}), "wf-canny-guided"),
        (frozenset({"remove", "erase", "edit", "enrich", "overlay", "compose", "clean",
                    "refine", "enhance", "adjust", "fix", "restyle"}), "wf-edit-region"),
    ),
    ActionCategory.GENERATE_MOTION: (
        (frozenset({"transition", "bridge", "start-end", "startend"}), "wf-startend-i2v"),
        (frozenset({"interpolate", "interpolation", "smooth", "smoother"}), "wf-interp"),
        (frozenset({"camera", "zoom", "zoom-in", "zoom-out", "rotate", "orbit", "pan"}), "wf-camera-move"),
        (frozenset({"animate", "video", "motion", "move", "clip"}), "wf-i2v"),
    ),
    ActionCategory.PRODUCE_AUDIO: (
        (frozenset({"music", "soundtrack", "melody", "tempo"}), "wf-music"),
        (frozenset({"narration", "narrate", "voice", "voiceover", "speak", "tts"}), "wf-tts"),
    ),
    ActionCategory.ASSEMBLE: (),
}

# Common words that never count as "unfamiliar" for the knowledge agent.
STOP_WORDS = frozenset(
    "a an and are as at be but by for from has have in into is it its of on "
    "or our so that the their then this to was we will with while after "
    "before under over please very more less new old one two three it's "
    "don't into onto across against".split()
)

_TOKEN_RE = re.compile(r"[a-z0-9][a-z0-9'\-]*")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def classify_intent(intent: str) -> ActionCategory:
    """First matching token decides; unmatched intents default to anchoring."""
    for token in tokenize(intent):
        for category, words in KEYWORD_TABLE.items():
            if token in words:
                return category
    return ActionCategory.ESTABLISH_ANCHOR


def workflow_hint(category: ActionCategory, intent: str) -> Optional[str]:
    tokens = set(tokenize(intent))
    for words, workflow_id in WORKFLOW_HINTS.get(category, ()):
        if tokens & words:
            return workflow_id
    return None


def unfamiliar_terms(intent: str) -> list[str]:
    """Tokens outside the built-in vocabulary; these trigger the clarifier."""
    vocabulary = set(STOP_WORDS)
    for words in KEYWORD_TABLE.values():
        vocabulary |= words
    for hints in WORKFLOW_HINTS.values():
        for words, _ in hints:
            vocabulary |= words
    out = []
    for token in tokenize(intent):
        if token not in vocabulary and not token.isdigit() and len(token) > 2:
            if token not in out:
                out.append(token)
    return out


def _stable_int(seed: str, lo: int, hi: int) -> int:
    digest = hashlib.sha256(seed.encode("utf-8")).digest()
    span = hi - lo + 1
    return lo + int.from_bytes(digest[:8], "big") % span


class MockProvider:
    """Deterministic provider double. Response text is a pure function of
    (role, template id, intent keywords, context hash); per-plan token usage
    lands inside the 2k-4k envelope the planner budgets for."""

    name = "mock"

    def __init__(self, *, fail_roles: dict[str, int] | None = None):
        # fail_roles maps role -> number of responses to garble before recovering
        self._fail_budget = dict(fail_roles or {})

    def complete(self, request: ProviderRequest) -> ProviderResponse:
        role = request.role
        if self._fail_budget.get(role, 0) > 0:
            self._fail_budget[role] -= 1
            return ProviderResponse(
                text="(the model rambled and returned no structured block)",
                token_usage={"prompt_tokens": 128, "completion_tokens": 64},
            )
        body = self._role_body(request)
        text = "```json\n" + json.dumps(body, sort_keys=True, ensure_ascii=False) + "\n```"
        seed = f"{role}|{request.system_template_id}|{request.user_intent}|{request.context_hash()}"
        usage = _ROLE_BUDGETS[role]
        prompt_tokens = _stable_int(seed + "|p", usage[0], usage[1])
        completion_tokens = _stable_int(seed + "|c", usage[2], usage[3])
        return ProviderResponse(text=text, token_usage={
            "prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens,
        })

    def _role_body(self, request: ProviderRequest) -> dict:
        intent = request.user_intent
        if request.role == "master":
            category = classify_intent(intent)
            return {"action_category": category.value,
                    "rationale": f"intent tokens map to {category.value}"}
        if request.role == "knowledge":
            terms = unfamiliar_terms(intent)
            notes = "; ".join(
                f"{t}: treat as a culturally specific element, keep its look consistent"
                for t in terms
            )
            return {"notes": notes}
        if request.role == "workflow":
            category = ActionCategory(request.context["action_category"])
            hinted = workflow_hint(category, intent)
            candidates = request.context.get("compatible_workflows", [])
            if hinted and hinted in candidates:
                return {"workflow_id": hinted}
            if candidates:
                return {"workflow_id": min(candidates)}
            return {"workflow_id": ""}
        if request.role == "prompt":
            style = request.context.get("global_context", {}).get("style", "")
            mood = request.context.get("global_context", {}).get("mood", "")
            scene = request.context.get("scene_intent", "")
            notes = request.context.get("knowledge_notes") or ""
            parts = [intent.strip()]
            if scene:
                parts.append(f"scene: {scene}")
            if style:
                parts.append(f"style: {style}")
            if mood:
                parts.append(f"mood: {mood}")
            if notes:
                parts.append(f"notes: {notes}")
            return {"prompt": " | ".join(parts), "parameters": {}}
        raise errors.ProviderUnavailable(f"mock has no role {request.role!r}")


# (prompt_lo, prompt_hi, completion_lo, completion_hi) per role; totals stay
# inside [2000, 4000] whether or not the clarifier runs.
_ROLE_BUDGETS = {
    "master": (520, 640, 180, 260),
    "knowledge": (260, 360, 90, 140),
    "workflow": (440, 560, 120, 200),
    "prompt": (560, 720, 240, 380),
}


class HttpProvider:
    """Minimal adapter for a real text-completion endpoint."""

    name = "http"

    def __init__(self, endpoint_url: str, api_key_env: str = "TREELINE_PROVIDER_KEY",
                 *, timeout: float = 60.0):
        self.endpoint_url = endpoint_url
        self.api_key_env = api_key_env
        self.timeout = timeout
        self._templates = load_templates()

    def complete(self, request: ProviderRequest) -> ProviderResponse:
        import httpx

        api_key = os.environ.get(self.api_key_env, "")
        system_text = self._templates.get(request.system_template_id, "")
        payload = {
            "system": system_text + "\n\nCONTEXT:\n" + canonical_json(request.context),
            "user": request.user_intent,
        }
        try:
            response = httpx.post(
                self.endpoint_url,
                json=payload,
                headers={"authorization": f"Bearer {api_key}"} if api_key else {},
                timeout=self.timeout,
            )
            response.raise_for_status()
            data = response.json()
        except Exception as exc:
            raise errors.ProviderUnavailable(f"provider endpoint failed: {exc}")
        return ProviderResponse(
            text=data.get("text", ""),
            token_usage={
                "prompt_tokens": int(data.get("prompt_tokens", 0)),
                "completion_tokens": int(data.get("completion_tokens", 0)),
            },
        )


def make_provider(kind: str, *, endpoint_url: str = "", api_key_env: str = "TREELINE_PROVIDER_KEY"):
    if kind == "mock":
        return MockProvider()
    if kind == "http":
        if not endpoint_url:
            raise errors.ProviderUnavailable("http provider requires an endpoint url")
        return HttpProvider(endpoint_url, api_key_env)
    raise errors.ProviderUnavailable(f"unknown provider kind {kind!r}")
