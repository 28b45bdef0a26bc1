"""Declarative registry of executable workflow modules.

Each module names one authoring action category, typed input slots, an output
modality, and a parameter schema with in-range defaults. The shipped baseline
(``data/registry.json``) covers every category; loading a file replaces the
registry atomically: any validation error rejects the whole file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from . import errors
from .model import ActionCategory, Modality, StepSpec

PARAM_TYPES = ("int", "float", "text", "enum", "bool")


@dataclass(frozen=True)
class ParamSchema:
    name: str
    type: str
    default: Any
    minimum: Optional[float] = None
    maximum: Optional[float] = None
    choices: Optional[tuple[str, ...]] = None

    def coerce(self, value: Any) -> Any:
        try:
            if self.type == "int":
                if isinstance(value, bool):
                    raise ValueError("bool is not an int")
                return int(value)
            if self.type == "float":
                if isinstance(value, bool):
                    raise ValueError("bool is not a float")
                return float(value)
            if self.type == "bool":
                if isinstance(value, bool):
                    return value
                if isinstance(value, str) and value.lower() in ("true", "false"):
                    return value.lower() == "true"
                raise ValueError(f"not a bool: {value!r}")
            if self.type in ("text", "enum"):
                if not isinstance(value, str):
                    value = str(value)
                return value
        except (TypeError, ValueError) as exc:
            raise errors.ParamOutOfRange(f"parameter {self.name}: {exc}")
        raise errors.SchemaError(f"parameter {self.name} has unknown type {self.type}")

    def check_range(self, value: Any) -> None:
        if self.type in ("int", "float"):
            if self.minimum is not None and value < self.minimum:
                raise errors.ParamOutOfRange(f"parameter {self.name}={value} below minimum {self.minimum}")
            if self.maximum is not None and value > self.maximum:
                raise errors.ParamOutOfRange(f"parameter {self.name}={value} above maximum {self.maximum}")
        elif self.type == "enum":
            if self.choices and value not in self.choices:
                raise errors.ParamOutOfRange(
                    f"parameter {self.name}={value!r} not one of {sorted(self.choices)}")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "type": self.type, "default": self.default}
        if self.minimum is not None:
            out["min"] = self.minimum
        if self.maximum is not None:
            out["max"] = self.maximum
        if self.choices is not None:
            out["choices"] = list(self.choices)
        return out


@dataclass(frozen=True)
class InputSlot:
    modality: Modality
    required: bool = True

    def to_dict(self) -> dict:
        return {"modality": self.modality.value, "required": self.required}


@dataclass(frozen=True)
class WorkflowModule:
    workflow_id: str
    action_category: ActionCategory
    input_slots: tuple[InputSlot, ...]
    output_modality: Modality
    parameters: tuple[ParamSchema, ...]
    executor_id: str

    def required_modalities(self) -> list[Modality]:
        return [slot.modality for slot in self.input_slots if slot.required]

    def param(self, name: str) -> Optional[ParamSchema]:
        for p in self.parameters:
            if p.name == name:
                return p
        return None

    def default_parameters(self) -> dict[str, Any]:
        return {p.name: p.default for p in self.parameters}

    def to_dict(self) -> dict:
        return {
            "workflow_id": self.workflow_id,
            "action_category": self.action_category.value,
            "input_slots": [s.to_dict() for s in self.input_slots],
            "output_modality": self.output_modality.value,
            "parameters": [p.to_dict() for p in self.parameters],
            "executor_id": self.executor_id,
        }


class WorkflowRegistry:
    def __init__(self, modules: Sequence[WorkflowModule]):
        self._modules = {m.workflow_id: m for m in modules}

    def __len__(self) -> int:
        return len(self._modules)

    def __contains__(self, workflow_id: str) -> bool:
        return workflow_id in self._modules

    def get(self, workflow_id: str) -> WorkflowModule:
        try:
            return self._modules[workflow_id]
        except KeyError:
            raise errors.UnknownWorkflow(f"no workflow {workflow_id} in registry")

    def all(self) -> list[WorkflowModule]:
        return sorted(self._modules.values(), key=lambda m: m.workflow_id)

    def by_category(self, category: ActionCategory) -> list[WorkflowModule]:
        return [m for m in self.all() if m.action_category is category]


def _parse_param(raw: Mapping, wf_id: str) -> ParamSchema:
    try:
        schema = ParamSchema(
            name=raw["name"],
            type=raw["type"],
            default=raw["default"],
            minimum=raw.get("min"),
            maximum=raw.get("max"),
            choices=tuple(raw["choices"]) if "choices" in raw else None,
        )
    except KeyError as exc:
        raise errors.SchemaError(f"workflow {wf_id}: parameter missing field {exc}")
    if schema.type not in PARAM_TYPES:
        raise errors.SchemaError(f"workflow {wf_id}: parameter {schema.name} has bad type {schema.type!r}")
    if schema.type == "enum" and not schema.choices:
        raise errors.SchemaError(f"workflow {wf_id}: enum parameter {schema.name} needs choices")
    # default must itself be coercible and in range
    try:
        value = schema.coerce(schema.default)
        schema.check_range(value)
    except errors.ParamOutOfRange as exc:
        raise errors.SchemaError(f"workflow {wf_id}: default out of range: {exc.message}")
    return schema


def parse_registry(raw: Any, source: str = "<registry>") -> WorkflowRegistry:
    if not isinstance(raw, list):
        raise errors.ParseError(f"{source}: registry root must be a list")
    modules: list[WorkflowModule] = []
    seen: set[str] = set()
    for i, item in enumerate(raw):
        try:
            wf_id = item["workflow_id"]
            if wf_id in seen:
                raise errors.DuplicateWorkflowId(f"{source}: duplicate workflow id {wf_id!r}")
            seen.add(wf_id)
            module = WorkflowModule(
                workflow_id=wf_id,
                action_category=ActionCategory(item["action_category"]),
                input_slots=tuple(
                    InputSlot(modality=Modality(s["modality"]), required=bool(s.get("required", True)))
                    for s in item.get("input_slots", [])
                ),
                output_modality=Modality(item["output_modality"]),
                parameters=tuple(_parse_param(p, wf_id) for p in item.get("parameters", [])),
                executor_id=item["executor_id"],
            )
        except errors.TreelineError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise errors.SchemaError(f"{source}: entry {i}: {exc}")
        modules.append(module)
    return WorkflowRegistry(modules)


def load_registry(path: str | Path) -> WorkflowRegistry:
    path = Path(path)
    try:
        raw = json.loads(path.read_text("utf-8"))
    except OSError as exc:
        raise errors.ParseError(f"cannot read registry {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise errors.ParseError(f"registry {path} is not valid JSON: {exc}")
    return parse_registry(raw, source=str(path))


def load_baseline_registry() -> WorkflowRegistry:
    data = resources.files("treeline.data").joinpath("registry.json").read_text("utf-8")
    return parse_registry(json.loads(data), source="baseline")


def normalize_parameters(parameters: Mapping[str, Any], workflow: WorkflowModule) -> dict[str, Any]:
    """Fill defaults, coerce types, check ranges. Pure function."""
    normalized: dict[str, Any] = {}
    for schema in workflow.parameters:
        if schema.name in parameters:
            value = schema.coerce(parameters[schema.name])
            schema.check_range(value)
            normalized[schema.name] = value
        else:
            normalized[schema.name] = schema.coerce(schema.default)
    unknown = set(parameters) - {p.name for p in workflow.parameters}
    if unknown:
        raise errors.UnknownParam(f"workflow {workflow.workflow_id} has no parameter(s) {sorted(unknown)}")
    return normalized


def validate_spec(spec: StepSpec, workflow: WorkflowModule,
                  asset_modalities: Mapping[str, Modality] | None = None) -> dict[str, Any]:
    """Normalize a step spec against a workflow: fill defaults, coerce types,
    check ranges, and check input slots against the references' modalities.
    Pure function; returns the normalized parameter map."""
    if asset_modalities is None:
        asset_modalities = {}
    normalized = normalize_parameters(spec.parameters, workflow)

    available = []
    for asset_id in spec.reference_asset_ids:
        modality = asset_modalities.get(asset_id)
        if modality is None:
            raise errors.MissingRequiredInput(f"referenced asset {asset_id} has unknown modality")
        available.append(modality)
    pool = list(available)
    for slot in workflow.input_slots:
        if not slot.required:
            continue
        if slot.modality in pool:
            pool.remove(slot.modality)
        else:
            raise errors.MissingRequiredInput(
                f"workflow {workflow.workflow_id} requires a {slot.modality.value} input")
    return normalized


def compatible(workflow: WorkflowModule, available: Sequence[Modality]) -> bool:
    """Required slots must be a sub-multiset of the available modalities."""
    pool = list(available)
    for slot in workflow.input_slots:
        if not slot.required:
            continue
        if slot.modality in pool:
            pool.remove(slot.modality)
        else:
            return False
    return True


def select_workflow(registry: WorkflowRegistry, action: ActionCategory,
                    available_inputs: Sequence[Modality]) -> str:
    """Deterministic choice: category match, slot-compatible, smallest id wins."""
    candidates = [m.workflow_id for m in registry.by_category(action) if compatible(m, available_inputs)]
    if not candidates:
        raise errors.NoCompatibleWorkflow(
            f"no {action.value} workflow accepts inputs {[m.value for m in available_inputs]}")
    return min(candidates)
