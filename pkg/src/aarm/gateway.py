"""HTTP front end: JSON-RPC agent surface plus the REST approval API.

The agent side speaks JSON-RPC 2.0 over POST / with methods
``session/initialize``, ``tools/call``, ``pending/status``, ``tools/list``.
The approver side (console, conformance harness) uses REST under ``/v1/``.
A mock upstream tool server speaking the same JSON-RPC shape is included
for tests and the conformance harness.
"""

from __future__ import annotations

import json
import mimetypes
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Optional
from urllib.parse import parse_qs, urlparse

from .clock import TestClock
from .engine import (
    CODE_DEFER_PARKED,
    CODE_DENY,
    CODE_FORBIDDEN,
    CODE_STEP_UP_PARKED,
    Engine,
    EngineError,
    InProcessToolServer,
)

JSONRPC_PARSE_ERROR = -32700
JSONRPC_INVALID_REQUEST = -32600
JSONRPC_METHOD_NOT_FOUND = -32601
JSONRPC_INVALID_PARAMS = -32602
JSONRPC_INTERNAL = -32603


def _rpc_error(req_id: Any, code: int, message: str, data: Optional[dict] = None) -> dict:
    err: dict[str, Any] = {"code": code, "message": message}
    if data:
        err["data"] = data
    return {"jsonrpc": "2.0", "id": req_id, "error": err}


def _rpc_result(req_id: Any, result: Any) -> dict:
    return {"jsonrpc": "2.0", "id": req_id, "result": result}


class HttpToolCaller:
    """Forwards authorized calls to upstream tool servers over JSON-RPC."""

    def __init__(self, registry: dict[str, str], timeout: float = 30.0) -> None:
        self.registry = registry
        self.timeout = timeout
        self._counter = 0
        self._lock = threading.Lock()

    def call(self, tool: str, operation: str, parameters: dict[str, Any]) -> Any:
        url = self.registry.get(tool)
        if url is None:
            raise RuntimeError(f"no upstream registered for tool {tool!r}")
        with self._lock:
            self._counter += 1
            req_id = self._counter
        body = json.dumps(
            {
                "jsonrpc": "2.0",
                "id": req_id,
                "method": "tools/call",
                "params": {"tool": tool, "operation": operation, "parameters": parameters},
            }
        ).encode("utf-8")
        req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            reply = json.loads(resp.read())
        if "error" in reply:
            raise RuntimeError(f"upstream error: {reply['error'].get('message')}")
        return reply.get("result")


class GatewayServer:
    """The network-facing gateway process wrapped around one Engine."""

    def __init__(
        self,
        engine: Engine,
        host: Optional[str] = None,
        port: Optional[int] = None,
        console_dir: Optional[str | Path] = None,
    ) -> None:
        self.engine = engine
        self.host = host if host is not None else engine.config.listen_host
        self.port = port if port is not None else engine.config.listen_port
        self.console_dir = Path(console_dir) if console_dir else None
        self._httpd: Optional[ThreadingHTTPServer] = None
        self._sweeper: Optional[threading.Thread] = None
        self._stop = threading.Event()

    # ------------------------------------------------------------- lifecycle

    def start(self) -> None:
        handler = _make_handler(self)
        self._httpd = ThreadingHTTPServer((self.host, self.port), handler)
        self.port = self._httpd.server_address[1]
        threading.Thread(target=self._httpd.serve_forever, daemon=True).start()
        # under a test clock, expiry is driven solely by /v1/test/clock so
        # runs stay deterministic
        if not self.engine.config.test_mode:
            self._sweeper = threading.Thread(target=self._sweep_loop, daemon=True)
            self._sweeper.start()

    def serve_forever(self) -> None:
        if self._httpd is None:
            self.start()
        try:
            self._stop.wait()
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def stop(self) -> None:
        self._stop.set()
        if self._httpd:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def _sweep_loop(self) -> None:
        # periodic timeout expiry + deferred re-evaluation sweep
        while not self._stop.wait(1.0):
            try:
                self.engine.expire_timeouts()
            except Exception:
                pass

    # ---------------------------------------------------------------- JSON-RPC

    def handle_rpc(self, request: dict[str, Any]) -> dict[str, Any]:
        req_id = request.get("id")
        if request.get("jsonrpc") != "2.0" or not isinstance(request.get("method"), str):
            return _rpc_error(req_id, JSONRPC_INVALID_REQUEST, "invalid JSON-RPC request")
        method = request["method"]
        params = request.get("params") or {}
        if not isinstance(params, dict):
            return _rpc_error(req_id, JSONRPC_INVALID_PARAMS, "params must be an object")
        try:
            if method == "session/initialize":
                result = self.engine.initialize_session(
                    params.get("session_id", ""),
                    params.get("identity", {}),
                    params.get("original_request"),
                )
                return _rpc_result(req_id, result)
            if method == "tools/call":
                outcome = self.engine.tool_call(
                    params.get("session_id", ""),
                    params.get("tool", ""),
                    params.get("operation", ""),
                    params.get("parameters") or {},
                    wait=bool(params.get("wait", True)),
                )
                return self._outcome_to_rpc(req_id, outcome)
            if method == "pending/status":
                outcome = self.engine.poll_parked(
                    params.get("session_id", ""), params.get("item_id", "")
                )
                if outcome.get("status") == "pending":
                    return _rpc_result(req_id, outcome)
                return self._outcome_to_rpc(req_id, outcome)
            if method == "tools/list":
                tools = sorted(self.engine.config.tool_registry)
                return _rpc_result(req_id, {"tools": tools})
            return _rpc_error(req_id, JSONRPC_METHOD_NOT_FOUND, f"unknown method {method!r}")
        except EngineError as exc:
            return _rpc_error(req_id, exc.code, exc.message, exc.data or None)
        except Exception as exc:  # fail closed at the protocol boundary too
            return _rpc_error(req_id, JSONRPC_INTERNAL, f"internal error: {exc}")

    def _outcome_to_rpc(self, req_id: Any, outcome: dict[str, Any]) -> dict[str, Any]:
        status = outcome.get("status")
        if status == "executed":
            return _rpc_result(
                req_id,
                {
                    "status": "executed",
                    "output": outcome.get("output"),
                    "error": outcome.get("error"),
                    "receipt_id": outcome.get("receipt_id"),
                    "seq": outcome.get("seq"),
                },
            )
        if status == "parked":
            code = outcome.get("code", CODE_DEFER_PARKED)
            assert code in (CODE_DEFER_PARKED, CODE_STEP_UP_PARKED)
            return _rpc_error(
                req_id,
                code,
                f"action parked ({outcome.get('kind')})",
                {
                    "item_id": outcome.get("item_id"),
                    "kind": outcome.get("kind"),
                    "deadline": outcome.get("deadline"),
                    "reason": outcome.get("reason"),
                    "receipt_id": outcome.get("receipt_id"),
                },
            )
        # denied
        return _rpc_error(
            req_id,
            outcome.get("code", CODE_DENY),
            outcome.get("reason", "denied"),
            {
                "receipt_id": outcome.get("receipt_id"),
                "matched_policies": outcome.get("matched_policies", []),
                "resolution": outcome.get("resolution"),
            },
        )

    # -------------------------------------------------------------------- REST

    def handle_rest(
        self, method: str, path: str, query: dict[str, list[str]], body: dict[str, Any], headers
    ) -> tuple[int, Any]:
        q = {k: v[0] for k, v in query.items()}
        if method == "GET" and path == "/v1/pending":
            return 200, {"items": self.engine.list_pending(q.get("session_id"))}
        if method == "GET" and path == "/v1/history":
            return 200, {"items": self.engine.history_items(q.get("session_id"))}
        if method == "GET" and path == "/v1/receipts":
            receipts = self.engine.vault.query_receipts(
                session_id=q.get("session_id"),
                kinds=q["kind"].split(",") if "kind" in q else None,
                tool=q.get("tool"),
            )
            return 200, {"receipts": receipts}
        if method == "GET" and path == "/v1/keys":
            return 200, self.engine.signer.public_keys_json()
        if method == "GET" and path.startswith("/v1/sessions/") and path.endswith("/verify"):
            session_id = path[len("/v1/sessions/"):-len("/verify")]
            try:
                corrupt_at = self.engine.verify_session_chain(session_id)
            except Exception:
                return 404, {"error": "unknown session"}
            return 200, {"ok": corrupt_at is None, "corrupt_at": corrupt_at}
        if method == "POST" and path.startswith("/v1/pending/") and path.endswith("/decision"):
            item_id = path[len("/v1/pending/"):-len("/decision")]
            token = body.get("approver_token", "")
            auth = headers.get("Authorization", "")
            if not token and auth.startswith("Bearer "):
                token = auth[len("Bearer "):]
            try:
                outcome = self.engine.submit_approval(
                    item_id, body.get("verdict", ""), token, body.get("note", "")
                )
            except EngineError as exc:
                status = exc.data.get("http_status", 404 if exc.data.get("not_found") else 400)
                if exc.code == CODE_FORBIDDEN and "http_status" not in exc.data:
                    status = 403
                return status, {"error": exc.message, **{k: v for k, v in exc.data.items() if k != "http_status"}}
            return 200, outcome
        if method == "POST" and path == "/v1/test/clock":
            return self._handle_test_clock(body)
        return 404, {"error": "not found"}

    def _handle_test_clock(self, body: dict[str, Any]) -> tuple[int, Any]:
        if not self.engine.config.test_mode:
            return 403, {"error": "test mode disabled"}
        clock = self.engine.clock
        if not isinstance(clock, TestClock):
            return 409, {"error": "gateway is not running on a test clock"}
        if "set" in body:
            clock.set(float(body["set"]))
        elif "advance" in body:
            clock.advance(float(body["advance"]))
        expired = self.engine.expire_timeouts()
        return 200, {"now": clock.now(), "expired": expired}

    # ------------------------------------------------------------------ static

    def serve_static(self, path: str) -> Optional[tuple[str, bytes]]:
        if not self.console_dir:
            return None
        rel = path.lstrip("/") or "index.html"
        target = (self.console_dir / rel).resolve()
        if not str(target).startswith(str(self.console_dir.resolve())) or not target.is_file():
            return None
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        return ctype, target.read_bytes()


def _make_handler(server: GatewayServer) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt: str, *args: Any) -> None:  # quiet
            pass

        def _send_json(self, status: int, payload: Any) -> None:
            data = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(data)

        def _read_body(self) -> Optional[dict[str, Any]]:
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b"{}"
            try:
                doc = json.loads(raw or b"{}")
            except json.JSONDecodeError:
                return None
            return doc if isinstance(doc, dict) else None

        def do_OPTIONS(self) -> None:  # CORS preflight for the console
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type, Authorization")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_POST(self) -> None:
            parsed = urlparse(self.path)
            body = self._read_body()
            if parsed.path == "/":
                if body is None:
                    self._send_json(200, _rpc_error(None, JSONRPC_PARSE_ERROR, "parse error"))
                    return
                self._send_json(200, server.handle_rpc(body))
                return
            if parsed.path.startswith("/v1/"):
                if body is None:
                    self._send_json(400, {"error": "malformed JSON body"})
                    return
                status, payload = server.handle_rest(
                    "POST", parsed.path, parse_qs(parsed.query), body, self.headers
                )
                self._send_json(status, payload)
                return
            self._send_json(404, {"error": "not found"})

        def do_GET(self) -> None:
            parsed = urlparse(self.path)
            if parsed.path.startswith("/v1/"):
                status, payload = server.handle_rest(
                    "GET", parsed.path, parse_qs(parsed.query), {}, self.headers
                )
                self._send_json(status, payload)
                return
            static = server.serve_static(parsed.path)
            if static is not None:
                ctype, data = static
                self.send_response(200)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)
                return
            self._send_json(404, {"error": "not found"})

    return Handler


class MockToolHTTPServer:
    """Standalone upstream tool server: same JSON-RPC surface, every call
    logged to ``upstream_calls.jsonl``. Used when the gateway under test is a
    separate process."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        log_path: Optional[str | Path] = None,
        handlers: Optional[dict[tuple[str, str], Callable[[dict], Any]]] = None,
    ) -> None:
        self.backend = InProcessToolServer(log_path=log_path)
        if handlers:
            self.backend.handlers.update(handlers)
        backend = self.backend

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt: str, *args: Any) -> None:
                pass

            def do_POST(self) -> None:
                length = int(self.headers.get("Content-Length") or 0)
                try:
                    req = json.loads(self.rfile.read(length))
                    params = req.get("params", {})
                    result = backend.call(
                        params.get("tool", ""),
                        params.get("operation", ""),
                        params.get("parameters") or {},
                    )
                    reply = _rpc_result(req.get("id"), result)
                except Exception as exc:
                    reply = _rpc_error(None, JSONRPC_INTERNAL, str(exc))
                data = json.dumps(reply).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self.host = host
        self.port = self._httpd.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> None:
        threading.Thread(target=self._httpd.serve_forever, daemon=True).start()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()


class GatewayClient:
    """Minimal wire-level client used by the conformance harness and tests."""

    def __init__(self, base_url: str, timeout: float = 30.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._counter = 0
        self._lock = threading.Lock()

    def rpc(self, method: str, params: dict[str, Any]) -> dict[str, Any]:
        with self._lock:
            self._counter += 1
            req_id = self._counter
        body = json.dumps(
            {"jsonrpc": "2.0", "id": req_id, "method": method, "params": params}
        ).encode("utf-8")
        req = urllib.request.Request(
            self.base_url + "/", data=body, headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read())

    def rest(self, method: str, path: str, body: Optional[dict] = None, token: Optional[str] = None) -> tuple[int, Any]:
        headers = {"Content-Type": "application/json"}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        data = json.dumps(body or {}).encode("utf-8") if method == "POST" else None
        req = urllib.request.Request(self.base_url + path, data=data, headers=headers, method=method)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            try:
                return exc.code, json.loads(exc.read())
            except Exception:
                return exc.code, {}
