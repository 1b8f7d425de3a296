import io
import json
import threading
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest

from toolforge.backend import ScriptedBackend
from toolforge.schema import ToolCall
from toolforge.server import (
    INVALID_PARAMS,
    INVALID_REQUEST,
    METHOD_NOT_FOUND,
    PARSE_ERROR,
    MCPServer,
    make_http_server,
    serve_stdio,
    serve_tool_call,
    template_payload,
)
from toolforge.simulated import simulated_backend

QUOTE_ARGS = {"shipment_weight": 500, "source": "Shanghai", "destination": "Rotterdam", "cargo_type": "frozen"}


def test_template_payload_is_deterministic(tools12_map):
    spec = tools12_map["get_freight_quote"]
    call = ToolCall(spec.name, QUOTE_ARGS)
    a = serve_tool_call(call, spec, seed=3)
    b = serve_tool_call(call, spec, seed=3)
    assert a.status == "ok" and json.dumps(a.payload, sort_keys=True) == json.dumps(b.payload, sort_keys=True)
    assert isinstance(a.payload["result"]["freight_cost_estimate"], float)
    assert serve_tool_call(call, spec, seed=4).payload != a.payload


def test_missing_required_is_an_error_result(tools12_map):
    spec = tools12_map["get_freight_quote"]
    result = serve_tool_call(ToolCall(spec.name, {"source": "Lima"}, id="x"), spec)
    assert result.status == "error" and result.call_id == "x"
    assert result.payload["error"]["kind"] == "missing_required"
    assert result.payload["error"]["report"]["ok"] is False


def test_provided_fields_are_filled(tools12_map):
    spec = tools12_map["get_weather"]
    payload = template_payload(ToolCall(spec.name, {"city": "Lima"}), spec, provides=("temperature", "station_id"))
    assert isinstance(payload["result"]["temperature"], float)
    assert isinstance(payload["result"]["station_id"], str)


def test_generative_mode_uses_fixture(tools12_map):
    spec = tools12_map["get_freight_quote"]
    quote = {"quote_id": "FQ-2024-5678", "freight_cost_estimate": 2450.0, "currency": "USD", "transit_days": 28}
    backend = ScriptedBackend(fixtures={("server", 0, spec.name): "```json\n" + json.dumps(quote) + "\n```"})
    result = serve_tool_call(ToolCall(spec.name, QUOTE_ARGS), spec, "generative", backend=backend)
    assert result.status == "ok" and result.payload == quote


def test_generative_garbage_degrades_to_template(tools12_map):
    spec = tools12_map["get_freight_quote"]
    backend = ScriptedBackend(fixtures={("server", i, spec.name): "no json here" for i in range(2)})
    call = ToolCall(spec.name, QUOTE_ARGS)
    result = serve_tool_call(call, spec, "generative", backend=backend)
    assert result.payload == template_payload(call, spec)


def test_unknown_mode(tools12_map):
    spec = tools12_map["get_weather"]
    with pytest.raises(ValueError):
        serve_tool_call(ToolCall(spec.name, {"city": "Lima"}), spec, "magic")


# -- JSON-RPC --------------------------------------------------------------


@pytest.fixture
def server(tools12):
    return MCPServer(tools12, seed=1)


def rpc(method, params=None, req_id=1):
    msg = {"jsonrpc": "2.0", "id": req_id, "method": method}
    if params is not None:
        msg["params"] = params
    return msg


def test_initialize_and_list(server, tools12):
    init = server.handle(rpc("initialize", {"protocolVersion": "2025-06-18"}))
    assert init["result"]["capabilities"] == {"tools": {"listChanged": False}}
    listed = server.handle(rpc("tools/list", req_id=2))["result"]["tools"]
    assert [t["name"] for t in listed] == sorted(t.name for t in tools12)
    assert listed[0]["inputSchema"]["type"] == "object"


def test_valid_call(server, tools12_map):
    resp = server.handle(rpc("tools/call", {"name": "get_freight_quote", "arguments": QUOTE_ARGS}))
    result = resp["result"]
    assert result["isError"] is False
    assert json.loads(result["content"][0]["text"]) == result["structuredContent"]
    assert "freight_cost_estimate" in result["structuredContent"]["result"]


@pytest.mark.parametrize(
    "name, args, tag",
    [
        ("get_weather2", {"city": "Lima"}, "unknown_function"),
        ("get_weather", {}, "missing_required"),
        ("get_weather", {"city": "Lima", "zip": "1"}, "unknown_param"),
        ("get_weather", {"city": 5}, "type_mismatch"),
        ("get_weather", {"city": "Lima", "units": "kelvin"}, "enum_violation"),
        ("create_calendar_event", {"title": "a", "event_date": "b", "location": {}}, "nested(location.city, missing_required)"),
    ],
)
def test_violations_map_to_invalid_params(server, name, args, tag):
    resp = server.handle(rpc("tools/call", {"name": name, "arguments": args}, req_id="abc"))
    assert resp["id"] == "abc" and resp["error"]["code"] == INVALID_PARAMS
    assert [v["tag"] for v in resp["error"]["data"]["violations"]] == [tag]


def test_protocol_errors(server):
    assert json.loads(server.handle_text("{oops"))["error"]["code"] == PARSE_ERROR
    assert server.handle({"id": 1, "method": "tools/list"})["error"]["code"] == INVALID_REQUEST
    assert server.handle(rpc("resources/list"))["error"]["code"] == METHOD_NOT_FOUND
    assert server.handle(rpc("tools/call", {"arguments": {}}))["error"]["code"] == INVALID_PARAMS
    assert server.handle([])["error"]["code"] == INVALID_REQUEST


def test_notifications_and_batches(server):
    assert server.handle({"jsonrpc": "2.0", "method": "notifications/initialized"}) is None
    batch = server.handle([rpc("ping", req_id=1), {"jsonrpc": "2.0", "method": "ping"}, rpc("tools/list", req_id=2)])
    assert [r["id"] for r in batch] == [1, 2]


def call_messages(n):
    cities = ["Lima", "Osaka", "Berlin", "Lagos"]
    msgs = []
    for i in range(n):
        if i % 5 == 4:
            msgs.append(rpc("tools/call", {"name": "get_weather", "arguments": {"city": i}}, req_id=i))
        else:
            msgs.append(rpc("tools/call", {"name": "get_weather", "arguments": {"city": cities[i % 4] + str(i)}}, req_id=i))
    return msgs


def check_responses(responses, expected):
    by_id = {r["id"]: r for r in responses}
    assert sorted(by_id) == sorted(expected)
    for i, resp in by_id.items():
        assert resp == expected[i]


def test_http_concurrent_calls(server):
    httpd = make_http_server(server)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{httpd.server_address[1]}/"
    try:
        msgs = call_messages(100)
        expected = {m["id"]: server.handle(m) for m in msgs}
        with httpx.Client(timeout=10) as client, ThreadPoolExecutor(16) as pool:
            responses = list(pool.map(lambda m: client.post(url, json=m).json(), msgs))
        check_responses(responses, expected)
        assert client.is_closed
    finally:
        httpd.shutdown()
        httpd.server_close()


def test_stdio_concurrent_calls(server):
    msgs = call_messages(100)
    expected = {m["id"]: server.handle(m) for m in msgs}
    stdin = io.StringIO("".join(json.dumps(m) + "\n" for m in msgs) + "\n")
    stdout = io.StringIO()
    serve_stdio(server, stdin, stdout, workers=8)
    lines = stdout.getvalue().splitlines()
    assert len(lines) == 100
    check_responses([json.loads(line) for line in lines], expected)


def test_simulated_server_agent_matches_template(tools12, tools12_map):
    spec = tools12_map["get_weather"]
    call = ToolCall(spec.name, {"city": "Lima"})
    gen = serve_tool_call(call, spec, "generative", seed=2, backend=simulated_backend(2))
    assert gen.payload == template_payload(call, spec, 2)
