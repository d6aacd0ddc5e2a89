"""HTTP boundary between the trainer and any feedback source.

Endpoints:

- ``GET /state``    latest training snapshot (JSON)
- ``GET /queries``  the pending QuerySet object from the snapshot
- ``POST /feedback``one feedback event; acked with the iteration at which it
                    will apply, rejected with a descriptive code otherwise
- ``GET /stream``   server-sent events: one ``data:`` line per published
                    snapshot

The gateway never touches the model: validated events queue up in sequence
order and the trainer drains the queue at iteration boundaries.  Snapshot
publication swaps an immutable dict under a lock, so readers never observe
partial state.
"""

from __future__ import annotations

import json
import queue
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .errors import ContractViolation

FEEDBACK_KINDS = ("up", "down", "merge", "split")


class Gateway:
    """Thread-safe mailbox shared by the HTTP handlers and the trainer."""

    def __init__(self):
        self._lock = threading.Lock()
        self._snapshot: dict = {"iteration": 0,
                                "losses": {"rep": 0.0, "div": 0.0, "int": 0.0,
                                           "im": 0.0, "total": 0.0},
                                "prototypes": [],
                                "queries": {"prototypes": [], "actions": [],
                                            "merge_suggestions": []}}
        self._events: list[dict] = []
        self._last_seq = 0
        self._subscribers: list[queue.Queue] = []
        self._skips: list[dict] = []
        self.closed = False

    # trainer side ---------------------------------------------------------

    def publish_snapshot(self, snapshot: dict) -> None:
        with self._lock:
            self._snapshot = snapshot
            subscribers = list(self._subscribers)
        payload = json.dumps(snapshot)
        for q in subscribers:
            q.put(payload)

    def drain_events(self) -> list[dict]:
        with self._lock:
            events, self._events = self._events, []
        return events

    def note_skip(self, event: dict, reason: str) -> None:
        with self._lock:
            self._skips.append({"event": event, "reason": reason})

    def close(self) -> None:
        with self._lock:
            self.closed = True
            subscribers = list(self._subscribers)
        for q in subscribers:
            q.put(None)

    # handler side ---------------------------------------------------------

    def snapshot(self) -> dict:
        with self._lock:
            return self._snapshot

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def submit(self, event: dict) -> tuple[int, dict]:
        """Validate and enqueue one wire event; returns (http status, body)."""
        try:
            seq = int(event["seq"])
            kind = event["kind"]
            target = event["target"]
        except (KeyError, TypeError, ValueError):
            return 400, {"status": "rejected", "code": "malformed",
                         "reason": "feedback needs integer seq, kind and target"}
        if kind not in FEEDBACK_KINDS:
            return 400, {"status": "rejected", "code": "bad-kind",
                         "reason": f"kind must be one of {FEEDBACK_KINDS}"}
        with self._lock:
            snap = self._snapshot
            known = {p["id"] for p in snap.get("prototypes", [])}
            members = {p["id"]: p["members"] for p in snap.get("prototypes", [])}
            if isinstance(target, dict):
                if kind in ("merge", "split"):
                    return 400, {"status": "rejected", "code": "bad-target",
                                 "reason": "merge/split need prototype id targets"}
                if "traj" not in target or "step" not in target:
                    return 400, {"status": "rejected", "code": "bad-target",
                                 "reason": "action target needs traj and step"}
            elif isinstance(target, list):
                ids = [int(x) for x in target]
                if kind == "merge":
                    if len(ids) != 2 or ids[0] == ids[1]:
                        return 400, {"status": "rejected", "code": "bad-merge",
                                     "reason": "merge needs two distinct prototype ids"}
                elif kind == "split":
                    if len(ids) != 1:
                        return 400, {"status": "rejected", "code": "bad-target",
                                     "reason": "split needs exactly one prototype id"}
                    if members.get(ids[0], 0) < 2:
                        return 400, {"status": "rejected", "code": "split-singleton",
                                     "reason": "cannot split a cluster with fewer than 2 members"}
                elif len(ids) not in (1, 2):
                    return 400, {"status": "rejected", "code": "bad-target",
                                 "reason": "vote target must have one or two prototype ids"}
                unknown = [i for i in ids if i not in known]
                if unknown:
                    return 404, {"status": "rejected", "code": "unknown-target",
                                 "reason": f"unknown prototype ids {unknown}"}
            else:
                return 400, {"status": "rejected", "code": "bad-target",
                             "reason": "target must be an id list or {traj, step}"}
            if seq <= self._last_seq:
                return 409, {"status": "rejected", "code": "replay",
                             "reason": f"sequence {seq} already seen (last={self._last_seq})"}
            self._last_seq = seq
            self._events.append({"seq": seq, "kind": kind, "target": target})
            applies_at = snap.get("iteration", 0) + 1
        return 200, {"status": "ack", "seq": seq, "applies_at_iteration": applies_at}


class _Handler(BaseHTTPRequestHandler):
    gateway: Gateway = None  # type: ignore[assignment]

    def log_message(self, fmt, *args):  # silence default stderr chatter
        pass

    def _send_json(self, status: int, body: dict) -> None:
        payload = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(payload)

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.end_headers()

    def do_GET(self):
        if self.path == "/state":
            self._send_json(200, self.gateway.snapshot())
        elif self.path == "/queries":
            self._send_json(200, self.gateway.snapshot().get(
                "queries", {"prototypes": [], "actions": [], "merge_suggestions": []}))
        elif self.path == "/stream":
            self._stream()
        else:
            self._send_json(404, {"status": "rejected", "code": "not-found",
                                  "reason": f"no route {self.path}"})

    def _stream(self):
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        q = self.gateway.subscribe()
        try:
            # replay the latest snapshot so new consumers can render immediately
            self.wfile.write(f"data: {json.dumps(self.gateway.snapshot())}\n\n".encode())
            self.wfile.flush()
            while True:
                payload = q.get()
                if payload is None:
                    break
                self.wfile.write(f"data: {payload}\n\n".encode())
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            self.gateway.unsubscribe(q)

    def do_POST(self):
        if self.path != "/feedback":
            self._send_json(404, {"status": "rejected", "code": "not-found",
                                  "reason": f"no route {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            event = json.loads(self.rfile.read(length) or b"{}")
        except (ValueError, json.JSONDecodeError):
            self._send_json(400, {"status": "rejected", "code": "malformed",
                                  "reason": "body must be a JSON object"})
            return
        status, body = self.gateway.submit(event)
        self._send_json(status, body)


class GatewayServer:
    """Owns the HTTP server thread around a Gateway mailbox."""

    def __init__(self, gateway: Gateway, host: str = "127.0.0.1", port: int = 0):
        self.gateway = gateway
        handler = type("BoundHandler", (_Handler,), {"gateway": gateway})
        try:
            self.server = ThreadingHTTPServer((host, port), handler)
        except OSError as e:
            raise ContractViolation(f"cannot bind gateway on {host}:{port}: {e}") from e
        self.server.daemon_threads = True
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def address(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "GatewayServer":
        self.thread.start()
        return self

    def stop(self) -> None:
        self.gateway.close()
        self.server.shutdown()
        self.server.server_close()
