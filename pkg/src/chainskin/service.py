"""Stateless HTTP facade for interactive re-posing.

Endpoints:
    GET  /api/model   -> chain, anchors, associations, mesh
    POST /api/repose  -> deformed vertices, joints, anchors for a pose doc

The model bundle is read-only for the process lifetime; the model
response is rendered once at startup so repeated requests are
byte-identical. Static UI files are served from an optional directory.
"""

from __future__ import annotations

import json
import logging
import mimetypes
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .errors import ChainError, ParseError
from .formats import ModelBundle, _floats, model_document, pose_from_document
from .skinning import repose

log = logging.getLogger("chainskin.service")


def repose_response_document(bundle: ModelBundle, pose_doc) -> dict:
    """Validate a pose document against the bundle and re-pose the mesh."""
    pose = pose_from_document(pose_doc, bundle.chain)
    result = repose(
        bundle.mesh, bundle.chain, bundle.anchors, bundle.associations, pose
    )
    return {
        "vertices": [_floats(v) for v in result.mesh.vertices],
        "joints": [_floats(p) for p in result.joints],
        "anchors": [_floats(a) for a in result.anchors],
    }


def create_server(
    bundle: ModelBundle,
    port: int = 8080,
    bind: str = "127.0.0.1",
    static_dir=None,
) -> ThreadingHTTPServer:
    """Build the HTTP server; call serve_forever() on the result."""
    model_bytes = json.dumps(model_document(bundle)).encode()
    static_root = Path(static_dir).resolve() if static_dir else None

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug("%s - %s", self.address_string(), fmt % args)

        def _reply(self, code, body: bytes, content_type="application/json"):
            self.send_response(code)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _reply_json(self, code, doc):
            self._reply(code, json.dumps(doc).encode())

        def do_GET(self):
            path = self.path.split("?", 1)[0]
            if path == "/api/model":
                self._reply(200, model_bytes)
                return
            if static_root is not None:
                rel = path.lstrip("/") or "index.html"
                target = (static_root / rel).resolve()
                try:
                    target.relative_to(static_root)
                except ValueError:
                    self._reply_json(404, {"error": "not found"})
                    return
                if target.is_file():
                    ctype = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
                    self._reply(200, target.read_bytes(), ctype)
                    return
            self._reply_json(404, {"error": "not found"})

        def do_POST(self):
            path = self.path.split("?", 1)[0]
            if path != "/api/repose":
                self._reply_json(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length)
            try:
                doc = json.loads(raw)
            except json.JSONDecodeError as exc:
                self._reply_json(400, {"error": f"invalid JSON: {exc}"})
                return
            try:
                response = repose_response_document(bundle, doc)
            except (ParseError, ChainError, ValueError) as exc:
                self._reply_json(400, {"error": str(exc)})
                return
            self._reply_json(200, response)

    return ThreadingHTTPServer((bind, port), Handler)
