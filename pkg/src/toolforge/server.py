"""Tool-server simulator and its JSON-RPC 2.0 front end.

Every call is validated against its schema before anything is produced.
Valid calls get a payload either from a seeded template generator
(deterministic, offline) or from a generative agent asked for a plausible
JSON response; unusable generative output degrades to the template.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Iterable, Mapping, Sequence, TextIO

from .backend import Backend, ChatRequest, Message
from .schema import (
    SchemaError,
    ToolCall,
    ToolSpec,
    example_value,
    parse_param_schema,
    render_call,
    validate_against,
    validate_call,
)
from .trajectory import ToolResult

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = "2025-06-18"
SERVER_INFO = {"name": "toolforge-simulator", "version": "0.1.0"}

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
INTERNAL_ERROR = -32603

_NUMERIC_HINTS = ("cost", "price", "amount", "estimate", "total", "rate", "fee", "temperature", "score", "count")

SERVER_PROMPT = """You simulate the backend of the tool `{name}`.
Tool definition: {spec}
Return ONLY a JSON object that a real implementation would plausibly return
for the call below. {hint}"""


def _seed(*parts: Any) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()[:8], "big")


def _hint_value(field: str, rng: random.Random) -> Any:
    # the last word decides: "freight_cost_estimate" is numeric, "stock_price_ref" is not
    last = field.lower().rsplit("_", 1)[-1]
    if last in _NUMERIC_HINTS:
        return round(rng.uniform(50, 5000), 2)
    return f"{field.upper().replace('_', '-')}-{rng.randint(1000, 9999)}"


def template_payload(
    call: ToolCall, spec: ToolSpec, seed: int = 0, provides: Sequence[str] = ()
) -> dict[str, Any]:
    """Deterministic payload for a valid call.

    Uses the tool's optional ``returns`` object schema when present; fields
    named in ``provides`` are always filled in.
    """
    rng = random.Random(_seed(seed, render_call(call)))
    result: dict[str, Any] = {}
    returns = spec.extra.get("returns")
    if isinstance(returns, Mapping):
        try:
            schema = parse_param_schema(returns)
        except SchemaError:
            schema = None
        if schema is not None and schema.kind == "object":
            for name in sorted(schema.properties):
                result[name] = example_value(schema.properties[name], rng, name)
        elif schema is not None:
            result["value"] = example_value(schema, rng, "value")
    for name in provides:
        if name not in result:
            result[name] = _hint_value(name, rng)
    if not result:
        result["reference"] = f"{spec.name}-{rng.randint(10000, 99999)}"
        result["value"] = round(rng.uniform(1, 1000), 2)
    return {"tool": spec.name, "status": "success", "result": result}


def serve_tool_call(
    call: ToolCall,
    spec: ToolSpec,
    mode: str = "template",
    seed: int = 0,
    backend: Backend | None = None,
    provides: Sequence[str] = (),
    max_attempts: int = 2,
) -> ToolResult:
    report = validate_call(call, spec)
    if not report.ok:
        first = report.violations[0]
        return ToolResult(
            call.id,
            "error",
            {"error": {"kind": first.kind, "message": first.message, "report": report.to_json()}},
        )
    if mode == "generative" and backend is not None:
        hint = f"Include the fields {list(provides)}." if provides else ""
        messages = (
            Message("system", SERVER_PROMPT.format(name=spec.name, spec=json.dumps(spec.to_json(), sort_keys=True), hint=hint)),
            Message("user", render_call(call)),
        )
        for attempt in range(max_attempts):
            req = ChatRequest(
                messages,
                temperature=0.0,
                agent="server",
                metadata={
                    "step": attempt,
                    "fixture_key": spec.name,
                    "call": call.to_json(),
                    "spec": spec.to_json(),
                    "provides": list(provides),
                    "seed": seed,
                },
            )
            text = backend.chat(req).text
            try:
                payload = json.loads(_strip_fence(text))
            except json.JSONDecodeError:
                logger.info("server payload for %s not JSON (attempt %d)", spec.name, attempt + 1)
                continue
            return ToolResult(call.id, "ok", payload)
        logger.info("generative payload for %s unusable; falling back to template", spec.name)
    elif mode not in ("template", "generative"):
        raise ValueError(f"unknown server mode {mode!r}")
    return ToolResult(call.id, "ok", template_payload(call, spec, seed, provides))


def _strip_fence(text: str) -> str:
    text = text.strip()
    if text.startswith("```"):
        text = text.split("\n", 1)[1] if "\n" in text else ""
        text = text.rsplit("```", 1)[0]
    return text.strip()


# ---------------------------------------------------------------------------
# JSON-RPC service
# ---------------------------------------------------------------------------


def _error(req_id: Any, code: int, message: str, data: Any = None) -> dict[str, Any]:
    err: dict[str, Any] = {"code": code, "message": message}
    if data is not None:
        err["data"] = data
    return {"jsonrpc": "2.0", "id": req_id, "error": err}


def _result(req_id: Any, result: Any) -> dict[str, Any]:
    return {"jsonrpc": "2.0", "id": req_id, "result": result}


def tool_descriptor(spec: ToolSpec) -> dict[str, Any]:
    return {
        "name": spec.name,
        "description": spec.description,
        "inputSchema": {
            "type": "object",
            "properties": {k: v.to_json() for k, v in spec.parameters.items()},
            "required": sorted(spec.required),
        },
    }


class MCPServer:
    """Stateless request handler; safe to call from many threads."""

    def __init__(self, tools: Iterable[ToolSpec], mode: str = "template", seed: int = 0, backend: Backend | None = None):
        self.tools = {t.name: t for t in tools}
        self.mode = mode
        self.seed = seed
        self.backend = backend

    def handle(self, message: Any) -> dict[str, Any] | list | None:
        if isinstance(message, list):
            if not message:
                return _error(None, INVALID_REQUEST, "empty batch")
            out = [r for r in (self.handle(m) for m in message) if r is not None]
            return out or None
        if not isinstance(message, Mapping) or message.get("jsonrpc") != "2.0" or not isinstance(message.get("method"), str):
            req_id = message.get("id") if isinstance(message, Mapping) else None
            return _error(req_id, INVALID_REQUEST, "invalid request")
        is_notification = "id" not in message
        req_id = message.get("id")
        try:
            response = self._dispatch(req_id, message["method"], message.get("params") or {})
        except Exception as exc:  # noqa: BLE001 - a fault must still produce a response
            logger.exception("handler failed")
            response = _error(req_id, INTERNAL_ERROR, f"internal error: {exc}")
        return None if is_notification else response

    def _dispatch(self, req_id: Any, method: str, params: Any) -> dict[str, Any]:
        if method == "initialize":
            return _result(
                req_id,
                {
                    "protocolVersion": PROTOCOL_VERSION,
                    "capabilities": {"tools": {"listChanged": False}},
                    "serverInfo": SERVER_INFO,
                },
            )
        if method in ("notifications/initialized", "ping"):
            return _result(req_id, {})
        if method == "tools/list":
            return _result(req_id, {"tools": [tool_descriptor(self.tools[n]) for n in sorted(self.tools)]})
        if method == "tools/call":
            if not isinstance(params, Mapping) or not isinstance(params.get("name"), str):
                return _error(req_id, INVALID_PARAMS, "params.name is required")
            name = params["name"]
            args = params.get("arguments", {})
            call = ToolCall(name, args, id=str(req_id))
            spec = self.tools.get(name)
            if spec is None:
                report = validate_against(call, self.tools)
                return _error(req_id, INVALID_PARAMS, f"unknown tool {name!r}", report.to_json())
            result = serve_tool_call(call, spec, self.mode, self.seed, self.backend)
            if result.status == "error":
                report = result.payload["error"]["report"]
                return _error(req_id, INVALID_PARAMS, result.payload["error"]["message"], report)
            text = json.dumps(result.payload, sort_keys=True)
            return _result(
                req_id,
                {"content": [{"type": "text", "text": text}], "structuredContent": result.payload, "isError": False},
            )
        return _error(req_id, METHOD_NOT_FOUND, f"unknown method {method!r}")

    def handle_text(self, line: str) -> str | None:
        try:
            message = json.loads(line)
        except json.JSONDecodeError as exc:
            return json.dumps(_error(None, PARSE_ERROR, f"parse error: {exc}"))
        response = self.handle(message)
        return None if response is None else json.dumps(response, sort_keys=True)


def serve_stdio(server: MCPServer, stdin: TextIO = sys.stdin, stdout: TextIO = sys.stdout, workers: int = 8) -> None:
    """Line-delimited JSON-RPC over stdio; requests are handled concurrently."""
    lock = threading.Lock()

    def answer(line: str) -> None:
        out = server.handle_text(line)
        if out is not None:
            with lock:
                stdout.write(out + "\n")
                stdout.flush()

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for line in stdin:
            if line.strip():
                pool.submit(answer, line)


def make_http_server(server: MCPServer, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def do_POST(self) -> None:  # noqa: N802
            length = int(self.headers.get("Content-Length", 0))
            body = self.rfile.read(length).decode("utf-8")
            out = server.handle_text(body)
            if out is None:
                self.send_response(202)
                self.send_header("Content-Length", "0")
                self.end_headers()
                return
            data = out.encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, fmt: str, *args: Any) -> None:
            logger.debug(fmt, *args)

    class Server(ThreadingHTTPServer):
        request_queue_size = 128

    httpd = Server((host, port), Handler)
    httpd.daemon_threads = True
    return httpd
