"""Shared fixtures: mock backend bundles, configs, and a local HTTP stub."""

from __future__ import annotations

import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from rmoa.backends import Backends
from rmoa.embedding import SimilarityMatrix
from rmoa.mockbackend import MockChatBackend, MockEmbeddingBackend, MockRule
from rmoa.pipeline import RunConfig
from rmoa.termination import TerminationConfig

# Unit vectors at 0, 10, 90 and 100 degrees, written down as their exact
# pairwise cosines so the 0/3 row-mean tie is exact in floats.
_C10 = math.cos(math.radians(10))
_C80 = math.cos(math.radians(80))
_C90 = math.cos(math.radians(90))
_C100 = math.cos(math.radians(100))

ANGLE_FIXTURE_ENTRIES = (
    (1.0, _C10, _C90, _C100),
    (_C10, 1.0, _C80, _C90),
    (_C90, _C80, 1.0, _C10),
    (_C100, _C90, _C10, 1.0),
)


@pytest.fixture
def angle_matrix() -> SimilarityMatrix:
    return SimilarityMatrix(ANGLE_FIXTURE_ENTRIES)


def make_mock_bundle(
    behavior: str = "echo",
    script: tuple[bool, ...] = (),
    answers: dict[str, str] | None = None,
    seed: int = 0,
    embed_seed: int = 7,
    embed_dim: int = 64,
) -> Backends:
    rule = MockRule(
        seed=seed, behavior=behavior, answers=answers or {}, script=script
    )
    return Backends(
        chat=MockChatBackend(rule),
        embedding=MockEmbeddingBackend(seed=embed_seed, dim=embed_dim),
    )


def make_config(
    layers: int = 4,
    proposers: int = 6,
    k: int = 3,
    mode: str = "rmoa",
    policy: str = "none",
    m: int = 1,
    **extra,
) -> RunConfig:
    return RunConfig(
        layers=layers,
        proposers_per_layer=proposers,
        select_k=k,
        termination=TerminationConfig(policy=policy, m=m),
        mode=mode,
        **extra,
    )


class _StubHandler(BaseHTTPRequestHandler):
    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        length = int(self.headers.get("Content-Length", "0"))
        body = json.loads(self.rfile.read(length) or b"{}")
        server = self.server
        with server.lock:
            server.requests.append(
                {
                    "path": self.path,
                    "body": body,
                    "authorization": self.headers.get("Authorization"),
                }
            )
            status, payload = (
                server.script.pop(0) if server.script else (500, {"error": "empty script"})
            )
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args) -> None:
        pass


class HttpStub:
    """Scripted local HTTP endpoint: pop one (status, payload) per request."""

    def __init__(self) -> None:
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
        self.server.script = []
        self.server.requests = []
        self.server.lock = threading.Lock()
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def base_url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}/v1"

    @property
    def script(self) -> list:
        return self.server.script

    @property
    def requests(self) -> list:
        return self.server.requests

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def http_stub():
    stub = HttpStub()
    yield stub
    stub.close()
