import json
import socket
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def demo_dir():
    return Path(resources.files("cityprobe").joinpath("data", "demo"))


@pytest.fixture
def no_network(monkeypatch):
    """Make any socket creation fail loudly."""

    class Blocked(socket.socket):
        def __init__(self, *a, **k):
            raise RuntimeError("network access attempted")

    monkeypatch.setattr(socket, "socket", Blocked)
    monkeypatch.setattr(socket, "create_connection", lambda *a, **k: (_ for _ in ()).throw(
        RuntimeError("network access attempted")))


class StubServer:
    """Chat-completion stub that counts requests and peak concurrency."""

    def __init__(self, body="ok", delay=0.0, fail_first=0, status=500):
        self.body = body
        self.delay = delay
        self.fail_first = fail_first
        self.fail_status = status
        self.requests = []
        self.in_flight = 0
        self.peak = 0
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *a):
                pass

            def do_POST(self):
                import time

                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length))
                with stub._lock:
                    stub.requests.append({"path": self.path, "json": payload,
                                          "auth": self.headers.get("Authorization")})
                    n = len(stub.requests)
                    stub.in_flight += 1
                    stub.peak = max(stub.peak, stub.in_flight)
                try:
                    if stub.delay:
                        time.sleep(stub.delay)
                    if n <= stub.fail_first:
                        data, code = b'{"error":"busy"}', stub.fail_status
                    else:
                        content = stub.body(payload) if callable(stub.body) else stub.body
                        data = json.dumps({"choices": [{"message": {"role": "assistant",
                                                                    "content": content}}]}).encode()
                        code = 200
                    self.send_response(code)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                finally:
                    with stub._lock:
                        stub.in_flight -= 1

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}/v1"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def make(**kw):
        s = StubServer(**kw).__enter__()
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.__exit__()


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("CITYPROBE_API_KEY", "test-key")
