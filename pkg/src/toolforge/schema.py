"""Tool specifications, tool calls and assistant-output parsing.

A tool is a named function with a parameter schema; a call is a
``(function, arguments)`` pair that must conform to that schema. Only a
closed subset of JSON Schema is supported (seven kinds, no composition
keywords) so that validation stays decidable and reports stay precise.
"""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

KINDS = ("string", "number", "integer", "boolean", "array", "object", "enum")

# Spellings seen in scraped API catalogues; anything else is rejected.
_KIND_ALIASES = {
    "str": "string",
    "text": "string",
    "float": "number",
    "double": "number",
    "int": "integer",
    "long": "integer",
    "bool": "boolean",
    "list": "array",
    "dict": "object",
}

_COMPOSITION_KEYS = ("anyOf", "oneOf", "allOf", "not", "$ref")

ORIGIN_KINDS = ("raw", "merged", "refined")


class SchemaError(ValueError):
    """Base class for ingestion failures."""


class MalformedSpec(SchemaError):
    pass


class UnsupportedKind(SchemaError):
    pass


class UnbalancedTags(ValueError):
    pass


class InvalidCallJson(ValueError):
    pass


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSchema:
    kind: str
    description: str = ""
    enum_values: tuple = ()
    items: ParamSchema | None = None
    properties: Mapping[str, ParamSchema] = field(default_factory=dict)
    required: frozenset[str] = frozenset()

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        if self.kind == "enum":
            out["type"] = "enum"
            out["enum"] = list(self.enum_values)
        else:
            out["type"] = self.kind
        if self.description:
            out["description"] = self.description
        if self.kind == "array" and self.items is not None:
            out["items"] = self.items.to_json()
        if self.kind == "object":
            out["properties"] = {k: v.to_json() for k, v in self.properties.items()}
            out["required"] = sorted(self.required)
        return out


@dataclass(frozen=True)
class Origin:
    kind: str = "raw"
    sources: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind, "sources": list(self.sources)}


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str = ""
    parameters: Mapping[str, ParamSchema] = field(default_factory=dict)
    required: frozenset[str] = frozenset()
    origin: Origin = Origin()
    extra: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        out = dict(self.extra)
        out.update(
            {
                "name": self.name,
                "description": self.description,
                "parameters": {k: v.to_json() for k, v in self.parameters.items()},
                "required": sorted(self.required),
                "origin": self.origin.to_json(),
            }
        )
        return out

    @property
    def embedding_text(self) -> str:
        return f"{self.name}\n{self.description}"


@dataclass(frozen=True)
class ToolCall:
    function: str
    arguments: Mapping[str, Any] = field(default_factory=dict)
    id: str = field(default="", compare=False)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"name": self.function, "arguments": dict(self.arguments)}
        if self.id:
            out["id"] = self.id
        return out

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> ToolCall:
        return _call_from_obj(obj)


@dataclass(frozen=True)
class AssistantTurn:
    think: str | None = None
    content: str | None = None
    tool_calls: tuple[ToolCall, ...] = ()


@dataclass
class ParseReport:
    tags_balanced: bool = True
    think_count: int = 0
    call_blocks: int = 0
    invalid_call_json: int = 0
    errors: list[str] = field(default_factory=list)

    @property
    def json_valid(self) -> bool:
        return self.invalid_call_json == 0

    @property
    def ok(self) -> bool:
        return self.tags_balanced and self.json_valid

    def to_json(self) -> dict[str, Any]:
        return {
            "tags_balanced": self.tags_balanced,
            "think_count": self.think_count,
            "call_blocks": self.call_blocks,
            "invalid_call_json": self.invalid_call_json,
            "errors": list(self.errors),
        }


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def parse_param_schema(raw: Any, path: str = "") -> ParamSchema:
    if not isinstance(raw, Mapping):
        raise MalformedSpec(f"parameter schema at {path or '<root>'} is not an object")
    for key in _COMPOSITION_KEYS:
        if key in raw:
            raise UnsupportedKind(f"{key} at {path or '<root>'} is not supported")

    kind = raw.get("type")
    if isinstance(kind, list):
        raise UnsupportedKind(f"union type {kind!r} at {path}")
    if kind is None:
        if "enum" in raw:
            kind = "enum"
        elif "properties" in raw:
            kind = "object"
        elif "items" in raw:
            kind = "array"
        else:
            kind = "string"
    if not isinstance(kind, str):
        raise MalformedSpec(f"type at {path} must be a string")
    kind = _KIND_ALIASES.get(kind.lower(), kind.lower())
    if "enum" in raw:
        kind = "enum"
    if kind not in KINDS:
        raise UnsupportedKind(f"kind {kind!r} at {path}")

    description = raw.get("description") or ""
    if not isinstance(description, str):
        description = str(description)

    if kind == "enum":
        values = raw.get("enum")
        if not isinstance(values, list) or not values:
            raise MalformedSpec(f"enum at {path} needs at least one value")
        return ParamSchema("enum", description, enum_values=tuple(values))
    if "items" in raw and kind != "array":
        raise MalformedSpec(f"items given for non-array kind at {path}")
    if kind == "array":
        if "items" not in raw:
            raise MalformedSpec(f"array at {path} has no items schema")
        return ParamSchema("array", description, items=parse_param_schema(raw["items"], f"{path}[]"))
    if kind == "object":
        props_raw = raw.get("properties") or {}
        if not isinstance(props_raw, Mapping):
            raise MalformedSpec(f"properties at {path} must be an object")
        props = {k: parse_param_schema(v, f"{path}.{k}" if path else k) for k, v in props_raw.items()}
        req = _parse_required(raw.get("required", []), props, path)
        return ParamSchema("object", description, properties=props, required=req)
    return ParamSchema(kind, description)


def _parse_required(raw: Any, props: Mapping[str, Any], path: str) -> frozenset[str]:
    if raw is None:
        return frozenset()
    if not isinstance(raw, list) or not all(isinstance(r, str) for r in raw):
        raise MalformedSpec(f"required at {path or '<root>'} must be a list of names")
    missing = [r for r in raw if r not in props]
    if missing:
        raise MalformedSpec(f"required names {missing} at {path or '<root>'} are not parameters")
    return frozenset(raw)


def parse_tool_spec(raw: Any) -> ToolSpec:
    """Build a ToolSpec from a decoded JSON document.

    Accepts the flat corpus form (``parameters`` maps names to schemas) as
    well as the OpenAI-style ``{"type": "object", "properties": ...}``
    wrapper and a ``{"type": "function", "function": {...}}`` envelope.
    Unrecognised top-level fields are kept in ``extra``.
    """
    if isinstance(raw, (str, bytes)):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise MalformedSpec(f"not valid JSON: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise MalformedSpec("tool spec must be a JSON object")
    if raw.get("type") == "function" and isinstance(raw.get("function"), Mapping):
        raw = raw["function"]

    name = raw.get("name")
    if not isinstance(name, str) or not name.strip():
        raise MalformedSpec("missing name")
    if "parameters" not in raw:
        raise MalformedSpec(f"{name}: missing parameters")
    params_raw = raw["parameters"]
    required_raw = raw.get("required")
    if isinstance(params_raw, Mapping) and params_raw.get("type") == "object" and isinstance(
        params_raw.get("properties"), Mapping
    ):
        if required_raw is None:
            required_raw = params_raw.get("required", [])
        params_raw = params_raw["properties"]
    if not isinstance(params_raw, Mapping):
        raise MalformedSpec(f"{name}: parameters must be an object")

    params = {k: parse_param_schema(v, k) for k, v in params_raw.items()}
    required = _parse_required(required_raw if required_raw is not None else [], params, "")

    origin = _parse_origin(raw.get("origin"), name)
    description = raw.get("description") or ""
    extra = {
        k: v
        for k, v in raw.items()
        if k not in ("name", "description", "parameters", "required", "origin")
    }
    return ToolSpec(
        name=name.strip(),
        description=str(description),
        parameters=params,
        required=required,
        origin=origin,
        extra=extra,
    )


def _parse_origin(raw: Any, name: str) -> Origin:
    if raw is None:
        return Origin()
    if isinstance(raw, str):
        raw = {"kind": raw}
    if not isinstance(raw, Mapping):
        raise MalformedSpec(f"{name}: origin must be an object")
    kind = raw.get("kind", "raw")
    if kind not in ORIGIN_KINDS:
        raise MalformedSpec(f"{name}: unknown origin kind {kind!r}")
    sources = tuple(str(s) for s in raw.get("sources", ()))
    if kind == "merged" and len(sources) < 2:
        raise MalformedSpec(f"{name}: merged spec must record at least two sources")
    return Origin(kind, sources)


def load_corpus(text: str) -> list[Any]:
    """Decode a corpus file: a JSON array or line-delimited JSON objects."""
    stripped = text.lstrip()
    if not stripped:
        return []
    if stripped.startswith("["):
        data = json.loads(stripped)
        if not isinstance(data, list):
            raise MalformedSpec("corpus array expected")
        return data
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def parse_corpus(text: str) -> list[ToolSpec]:
    specs = [parse_tool_spec(obj) for obj in load_corpus(text)]
    seen: set[str] = set()
    for spec in specs:
        if spec.name in seen:
            raise MalformedSpec(f"duplicate tool name {spec.name!r}")
        seen.add(spec.name)
    return specs


def dump_corpus(specs: Iterable[ToolSpec]) -> str:
    return json.dumps([s.to_json() for s in specs], indent=2, sort_keys=True, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

VIOLATION_KINDS = (
    "unknown_function",
    "missing_required",
    "unknown_param",
    "type_mismatch",
    "enum_violation",
)


@dataclass(frozen=True)
class Violation:
    kind: str
    path: tuple[Any, ...] = ()
    message: str = ""

    @property
    def tag(self) -> str:
        if len(self.path) <= 1:
            return self.kind
        return f"nested({format_path(self.path)}, {self.kind})"

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind, "path": format_path(self.path), "tag": self.tag, "message": self.message}


def format_path(path: tuple[Any, ...]) -> str:
    out = ""
    for part in path:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += f".{part}" if out else str(part)
    return out


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        # truthy when there is something to report
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    @property
    def tags(self) -> list[str]:
        return [v.tag for v in self.violations]

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def to_json(self) -> dict[str, Any]:
        return {"ok": self.ok, "violations": [v.to_json() for v in self.violations]}


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _json_type(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, int):
        return "integer"
    if isinstance(value, float):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, list):
        return "array"
    if isinstance(value, Mapping):
        return "object"
    return type(value).__name__


def _enum_member(value: Any, allowed: tuple) -> bool:
    for candidate in allowed:
        if _is_number(value) and _is_number(candidate):
            if value == candidate:
                return True
        elif type(value) is type(candidate) and value == candidate:
            return True
    return False


def _check_value(value: Any, schema: ParamSchema, path: tuple[Any, ...], out: list[Violation]) -> None:
    kind = schema.kind
    if kind == "string":
        ok = isinstance(value, str)
    elif kind == "number":
        ok = _is_number(value) and not (isinstance(value, float) and not math.isfinite(value))
    elif kind == "integer":
        ok = isinstance(value, int) and not isinstance(value, bool)
        if isinstance(value, float) and math.isfinite(value) and value.is_integer():
            ok = True
    elif kind == "boolean":
        ok = isinstance(value, bool)
    elif kind == "enum":
        if not _enum_member(value, schema.enum_values):
            out.append(Violation("enum_violation", path, f"{value!r} not in {list(schema.enum_values)!r}"))
        return
    elif kind == "array":
        if not isinstance(value, list):
            out.append(Violation("type_mismatch", path, f"expected array, got {_json_type(value)}"))
            return
        if schema.items is not None:
            for i, item in enumerate(value):
                _check_value(item, schema.items, path + (i,), out)
        return
    elif kind == "object":
        if not isinstance(value, Mapping):
            out.append(Violation("type_mismatch", path, f"expected object, got {_json_type(value)}"))
            return
        _check_object(value, schema.properties, schema.required, path, out, free_form=not schema.properties)
        return
    else:  # unreachable for specs built by parse_param_schema
        out.append(Violation("type_mismatch", path, f"unsupported kind {kind!r}"))
        return
    if not ok:
        out.append(Violation("type_mismatch", path, f"expected {kind}, got {_json_type(value)}"))


def _check_object(
    value: Mapping[str, Any],
    props: Mapping[str, ParamSchema],
    required: frozenset[str],
    path: tuple[Any, ...],
    out: list[Violation],
    free_form: bool = False,
) -> None:
    for name in sorted(required):
        if name not in value:
            out.append(Violation("missing_required", path + (name,), f"missing required parameter {name!r}"))
    for key in value:
        sub = props.get(key)
        if sub is None:
            if not free_form:
                out.append(Violation("unknown_param", path + (key,), f"unknown parameter {key!r}"))
            continue
        _check_value(value[key], sub, path + (key,), out)


def validate_call(call: ToolCall, spec: ToolSpec) -> ValidationReport:
    """Check ``call`` against ``spec``. Never raises; problems become report entries."""
    out: list[Violation] = []
    try:
        if call.function != spec.name:
            out.append(Violation("unknown_function", (), f"{call.function!r} is not {spec.name!r}"))
            return ValidationReport(tuple(out))
        args = call.arguments
        if not isinstance(args, Mapping):
            out.append(Violation("type_mismatch", (), f"arguments must be an object, got {_json_type(args)}"))
            return ValidationReport(tuple(out))
        _check_object(args, spec.parameters, spec.required, (), out)
    except RecursionError:
        out.append(Violation("type_mismatch", (), "argument nesting too deep"))
    return ValidationReport(tuple(out))


def validate_against(call: ToolCall, tools: Mapping[str, ToolSpec]) -> ValidationReport:
    spec = tools.get(call.function)
    if spec is None:
        return ValidationReport((Violation("unknown_function", (), f"no tool named {call.function!r}"),))
    return validate_call(call, spec)


# ---------------------------------------------------------------------------
# Assistant output
# ---------------------------------------------------------------------------

_TAG_RE = re.compile(r"<(/?)(think|tool_call)>")


def _call_from_obj(obj: Any) -> ToolCall:
    if not isinstance(obj, Mapping):
        raise InvalidCallJson("tool call must be a JSON object")
    name = obj.get("name", obj.get("function"))
    if isinstance(name, Mapping):  # OpenAI {"function": {"name", "arguments"}}
        obj = name
        name = obj.get("name")
    if not isinstance(name, str) or not name:
        raise InvalidCallJson("tool call has no name")
    args = obj.get("arguments", obj.get("parameters", {}))
    if isinstance(args, str):
        try:
            args = json.loads(args) if args.strip() else {}
        except json.JSONDecodeError as exc:
            raise InvalidCallJson(f"arguments string is not JSON: {exc}") from exc
    if args is None:
        args = {}
    if not isinstance(args, Mapping):
        raise InvalidCallJson("arguments must be an object")
    call_id = obj.get("id") or ""
    return ToolCall(name, dict(args), id=str(call_id))


def parse_assistant_output(text: str, strict: bool = False) -> tuple[AssistantTurn, ParseReport]:
    """Split raw model output into think / tool calls / content.

    Structural problems are recorded on the report. With ``strict=True``
    the first problem is raised instead (UnbalancedTags or InvalidCallJson).
    """
    report = ParseReport()
    think: str | None = None
    calls: list[ToolCall] = []
    content_parts: list[str] = []

    open_tag: str | None = None
    open_end = 0
    cursor = 0
    for match in _TAG_RE.finditer(text):
        closing, tag = match.group(1) == "/", match.group(2)
        if open_tag is None:
            if closing:
                report.tags_balanced = False
                report.errors.append(f"stray </{tag}> at {match.start()}")
                content_parts.append(text[cursor : match.start()])
                cursor = match.end()
                continue
            content_parts.append(text[cursor : match.start()])
            open_tag, open_end = tag, match.end()
            continue
        if not closing or tag != open_tag:
            report.tags_balanced = False
            report.errors.append(f"<{match.group(1)}{tag}> inside <{open_tag}> at {match.start()}")
            continue
        body = text[open_end : match.start()]
        if tag == "think":
            report.think_count += 1
            if report.think_count > 1:
                report.tags_balanced = False
                report.errors.append("more than one <think> block")
            else:
                think = body.strip()
        else:
            report.call_blocks += 1
            try:
                calls.append(_call_from_obj(json.loads(body)))
            except (json.JSONDecodeError, InvalidCallJson) as exc:
                report.invalid_call_json += 1
                report.errors.append(f"tool_call block {report.call_blocks}: {exc}")
        open_tag = None
        cursor = match.end()
    if open_tag is not None:
        report.tags_balanced = False
        report.errors.append(f"unclosed <{open_tag}>")
        cursor = open_end
    content_parts.append(text[cursor:])
    content = "".join(content_parts).strip() or None

    if strict:
        if not report.tags_balanced:
            raise UnbalancedTags("; ".join(report.errors))
        if report.invalid_call_json:
            raise InvalidCallJson("; ".join(report.errors))
    return AssistantTurn(think=think, content=content, tool_calls=tuple(calls)), report


def render_call(call: ToolCall) -> str:
    body = {"name": call.function, "arguments": dict(call.arguments)}
    return json.dumps(body, sort_keys=True, ensure_ascii=False)


def render_assistant_output(turn: AssistantTurn) -> str:
    parts = []
    if turn.think is not None:
        parts.append(f"<think>{turn.think}</think>")
    for call in turn.tool_calls:
        parts.append(f"<tool_call>{render_call(call)}</tool_call>")
    if turn.content:
        parts.append(turn.content)
    return "\n".join(parts)


def render_toolset_prompt(tools: Iterable[ToolSpec]) -> str:
    """Canonical, byte-stable rendering of a toolset for prompts.

    One compact JSON object per line inside a ``<tools>`` block, tools
    ordered by name, keys sorted. Provenance and auxiliary fields are not
    part of the rendering.
    """
    lines = ["<tools>"]
    for spec in sorted(tools, key=lambda s: s.name):
        body = {
            "name": spec.name,
            "description": spec.description,
            "parameters": {
                "type": "object",
                "properties": {k: v.to_json() for k, v in spec.parameters.items()},
                "required": sorted(spec.required),
            },
        }
        lines.append(json.dumps(body, sort_keys=True, ensure_ascii=False, separators=(",", ":")))
    lines.append("</tools>")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Value synthesis (shared by the server simulator and the offline agents)
# ---------------------------------------------------------------------------

_CITIES = ("Shanghai", "Rotterdam", "Chicago", "Lagos", "Lima", "Osaka", "Berlin", "Toronto")
_WORDS = ("alpha", "delta", "harbor", "summit", "orbit", "maple", "cobalt", "ember")


def example_value(schema: ParamSchema, rng: random.Random, name: str = "") -> Any:
    """Draw a value that satisfies ``schema``; the name only flavours strings."""
    kind = schema.kind
    lname = name.lower()
    if kind == "enum":
        return rng.choice(list(schema.enum_values))
    if kind == "boolean":
        return rng.random() < 0.5
    if kind == "integer":
        return rng.randint(1, 500)
    if kind == "number":
        return round(rng.uniform(1, 1000), 2)
    if kind == "array":
        assert schema.items is not None
        return [example_value(schema.items, rng, name) for _ in range(rng.randint(1, 2))]
    if kind == "object":
        keys = sorted(schema.required) or sorted(schema.properties)[:1]
        return {k: example_value(schema.properties[k], rng, k) for k in keys}
    if any(t in lname for t in ("city", "source", "destination", "origin", "location")):
        return rng.choice(_CITIES)
    if "date" in lname:
        return f"2025-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}"
    return f"{name or 'value'}-{rng.choice(_WORDS)}-{rng.randint(10, 99)}"
