import json
import threading
import warnings
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class StubChatServer:
    """Chat-completions endpoint that replays a list of (status, content) replies and records requests."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                stub.requests.append({"path": self.path, "body": json.loads(body), "auth": self.headers.get("Authorization")})
                status, content = stub.replies.pop(0) if stub.replies else (500, "exhausted")
                if status == 200:
                    payload = json.dumps({"choices": [{"message": {"role": "assistant", "content": content}}]}).encode()
                else:
                    payload = json.dumps({"error": content}).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def chat_stub():
    servers = []

    def make(replies):
        s = StubChatServer(replies)
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.close()


@pytest.fixture(scope="session")
def golden_run(tmp_path_factory):
    """The bundled mini-corpus run once through every stage under the scripted backends."""
    from toolforge.minicorpus import materialize
    from toolforge.pipeline import run_pipeline
    from toolforge.store import load_config

    from toolforge.apihub import RefineRejected

    root = tmp_path_factory.mktemp("golden")
    cfg = load_config(materialize(root), environ={})
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RefineRejected)
        results = run_pipeline(cfg)
    # two scripted refinements are meant to be rejected
    assert sum(issubclass(w.category, RefineRejected) for w in caught) == 2
    return cfg, results
