import json
import socket
from pathlib import Path

import pytest

from toolforge.schema import parse_corpus, parse_tool_spec

FIXTURES = Path(__file__).parent / "fixtures"

FREIGHT_SPEC = {
    "name": "get_freight_quote",
    "description": "Get a freight quote for shipping cargo between two cities.",
    "parameters": {
        "weight": {"type": "number", "description": "Cargo weight in kilograms"},
        "source": {"type": "string", "description": "Origin city"},
        "destination": {"type": "string", "description": "Destination city"},
        "cargo_type": {"type": "enum", "enum": ["general", "frozen", "hazardous"]},
    },
    "required": ["weight"],
}


@pytest.fixture
def freight():
    return parse_tool_spec(FREIGHT_SPEC)


@pytest.fixture
def tools12_path():
    return FIXTURES / "tools12.json"


@pytest.fixture
def tools12(tools12_path):
    return parse_corpus(tools12_path.read_text())


@pytest.fixture
def tools12_map(tools12):
    return {t.name: t for t in tools12}


@pytest.fixture
def no_network(monkeypatch):
    """Fail loudly if anything tries to open an outbound socket."""

    def refuse(self, *args, **kwargs):
        raise AssertionError(f"network access attempted: {args}")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket.socket, "connect_ex", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
