"""JSON-over-HTTP retrieval service.

POST /query        {"vector": [...] | "shape_id": "..." | "modality": "text"|"image",
                    "raw_vector": [...], "k": int}
POST /query_joint  {"a": <query spec or vector>, "b": ..., "k": int}
GET  /healthz

Responses are JSON; errors carry {"code", "message"} with a 4xx status. The
index is immutable, so requests are served concurrently by a threading server.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .encoder import ModelState, project_image, project_text
from .errors import TriAlignError, ValidationError
from .retrieval import RetrievalIndex, query, query_joint

log = logging.getLogger("trialign.service")


class QueryResolver:
    """Turns a query payload into a vector in the aligned space."""

    def __init__(self, index: RetrievalIndex, state: ModelState | None = None):
        self.index = index
        self.state = state

    def resolve(self, spec) -> np.ndarray:
        if isinstance(spec, list):
            return np.asarray(spec, dtype=np.float64)
        if not isinstance(spec, dict):
            raise ValidationError("query must be a vector or an object")
        if "vector" in spec:
            return np.asarray(spec["vector"], dtype=np.float64)
        if "shape_id" in spec:
            return self.index.vector_of(str(spec["shape_id"]))
        if "modality" in spec:
            if self.state is None:
                raise ValidationError("service has no model; raw-vector queries need one")
            raw = np.asarray(spec.get("raw_vector", []), dtype=np.float64)
            modality = spec["modality"]
            if modality == "text":
                return project_text(raw, self.state)
            if modality == "image":
                return project_image(raw, self.state)
            raise ValidationError(f"unknown modality {modality!r}")
        raise ValidationError("query needs one of: vector, shape_id, modality")


def _result_payload(ranked):
    return {"results": [{"id": sid, "score": score} for sid, score in ranked]}


class _Handler(BaseHTTPRequestHandler):
    resolver: QueryResolver = None  # set by make_server

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self):
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b"{}"
        try:
            return json.loads(raw.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ValidationError(f"request body is not valid JSON: {exc}") from exc

    def do_GET(self):
        if self.path == "/healthz":
            self._send(200, {"status": "ok", "size": len(self.resolver.index)})
        else:
            self._send(404, {"code": "not_found", "message": f"no route {self.path}"})

    def do_POST(self):
        try:
            payload = self._read_json()
            k = int(payload.get("k", 5))
            if self.path == "/query":
                vec = self.resolver.resolve(payload)
                self._send(200, _result_payload(query(self.resolver.index, vec, k)))
            elif self.path == "/query_joint":
                if "a" not in payload or "b" not in payload:
                    raise ValidationError("joint query needs both 'a' and 'b'")
                a = self.resolver.resolve(payload["a"])
                b = self.resolver.resolve(payload["b"])
                self._send(
                    200, _result_payload(query_joint(self.resolver.index, a, b, k))
                )
            else:
                self._send(
                    404, {"code": "not_found", "message": f"no route {self.path}"}
                )
        except TriAlignError as exc:
            self._send(400, {"code": exc.code, "message": str(exc)})
        except Exception as exc:  # noqa: BLE001 - surface as a structured error
            log.exception("unhandled service error")
            self._send(500, {"code": "internal", "message": str(exc)})

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)


def make_server(
    index: RetrievalIndex,
    state: ModelState | None = None,
    host: str = "127.0.0.1",
    port: int = 0,
) -> ThreadingHTTPServer:
    """Build (but do not start) the HTTP server; port 0 picks a free port."""
    handler = type("BoundHandler", (_Handler,), {"resolver": QueryResolver(index, state)})
    return ThreadingHTTPServer((host, port), handler)


def serve_forever(server: ThreadingHTTPServer) -> None:
    host, port = server.server_address[:2]
    log.info("retrieval service listening on http://%s:%s", host, port)
    server.serve_forever()


def start_background(server: ThreadingHTTPServer) -> threading.Thread:
    """Run the server on a daemon thread (used by tests and embedding callers)."""
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
