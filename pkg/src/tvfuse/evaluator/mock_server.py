"""Minimal HTTP server exposing any backend over the wire protocol.

Used by the protocol-conformance tests and handy for trying the CLI with a
mock service: the HTTP client against this server must behave exactly like
the wrapped backend used in-process. `fail_next(n)` forces the next n
requests to answer 500, which exercises client retry logic.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from ..errors import BackendFailure
from .backend import EvaluationBackend, GenerationRequest


class MockInferenceServer:
    def __init__(self, backend: EvaluationBackend, host: str = "127.0.0.1", port: int = 0):
        self.backend = backend
        self._fail_lock = threading.Lock()
        self._fail_remaining = 0
        server_ref = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output clean
                pass

            def _reply(self, status: int, body: dict) -> None:
                blob = json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(blob)))
                self.end_headers()
                self.wfile.write(blob)

            def do_POST(self):
                if server_ref._consume_failure():
                    self._reply(500, {"error": "injected failure"})
                    return
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    payload = json.loads(self.rfile.read(length).decode("utf-8"))
                except (ValueError, UnicodeDecodeError):
                    self._reply(400, {"error": "bad json"})
                    return
                try:
                    if self.path == "/generate":
                        request = GenerationRequest(
                            model_ref=str(payload["model"]),
                            prompt=str(payload["prompt"]),
                            num_samples=int(payload["n"]),
                            temperature=float(payload["temperature"]),
                            max_tokens=int(payload["max_tokens"]),
                            seed=payload.get("seed"),
                        )
                        samples = server_ref.backend.generate(request)
                        self._reply(200, {"samples": [{"text": s.text} for s in samples]})
                    elif self.path == "/score":
                        result = server_ref.backend.score(
                            str(payload["model"]), str(payload["text"])
                        )
                        self._reply(200, {"token_logprobs": list(result.token_logprobs)})
                    else:
                        self._reply(404, {"error": f"no route {self.path}"})
                except (KeyError, TypeError, ValueError) as exc:
                    self._reply(400, {"error": f"bad request: {exc}"})
                except BackendFailure as exc:
                    self._reply(400, {"error": str(exc)})

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def _consume_failure(self) -> bool:
        with self._fail_lock:
            if self._fail_remaining > 0:
                self._fail_remaining -= 1
                return True
            return False

    def fail_next(self, count: int) -> None:
        """Answer the next `count` requests with HTTP 500."""
        with self._fail_lock:
            self._fail_remaining = count

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockInferenceServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "MockInferenceServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()
