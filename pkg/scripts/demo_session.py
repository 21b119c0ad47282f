"""End-to-end walkthrough of a gated agent session over the wire.

Starts a gateway on a loopback port, runs one session through the JSON-RPC
surface (an allowed query, a contextual denial after PII exposure, and a
step-up that a human approves over REST), then verifies the receipt store
and the session hash chain offline.
"""

from __future__ import annotations

import json
import tempfile
import threading
import time
from pathlib import Path

from aarm.config import GatewayConfig, Timeouts
from aarm.engine import Engine, InProcessToolServer
from aarm.gateway import GatewayClient, GatewayServer
from aarm.policy import parse_policy_set
from aarm.receipts import verify_receipt_file

POLICY_DOC = {
    "policies": [
        {"id": "allow_db_query", "decision": "ALLOW", "priority": 10,
         "match": ["AND", ["==", "action.tool", "db"],
                   ["==", "action.operation", "query"]],
         "reason": "routine read"},
        {"id": "deny_external_email_after_pii", "decision": "DENY", "priority": 100,
         "match": ["AND", ["==", "action.tool", "email"],
                   ["==", "action.operation", "send"],
                   ["CONTAINS", "context.data_classification", "PII"],
                   ["NOT_IN", "action.params.to", "@internal_domains"]],
         "reason": "external email after PII exposure"},
        {"id": "allow_cleanup_delete", "decision": "ALLOW", "step_up": True,
         "priority": 40,
         "match": ["AND", ["==", "action.tool", "db"],
                   ["==", "action.operation", "delete"],
                   ["CONTAINS", "context.original_request", "clean up"]],
         "reason": "destructive delete needs a human"},
    ],
    "named_lists": {"internal_domains": ["@company.com"]},
    "defaults": {"unmatched_decision": "DENY", "confidence_threshold": 0.5,
                 "drift_threshold": 0.6},
}

IDENTITY = {
    "session_id": "demo",
    "human_principal": "alice@company.com",
    "service_identity": "agent-svc@iam",
    "agent_identity": "agent-runtime-7",
    "privilege_scope": ["db.read", "db.write", "email.send"],
}


def main() -> int:
    data_dir = Path(tempfile.mkdtemp(prefix="aarm-demo-"))
    engine = Engine(
        parse_policy_set(POLICY_DOC),
        GatewayConfig(data_dir=str(data_dir),
                      timeouts=Timeouts(step_up=300.0, defer=120.0,
                                        transport_hold=5.0),
                      approver_tokens={"demo-token": "op@company.com"},
                      test_mode=True),
        tool_caller=InProcessToolServer(),
    )
    gw = GatewayServer(engine, host="127.0.0.1", port=0)
    gw.start()
    client = GatewayClient(gw.url)
    try:
        print(f"gateway listening on {gw.url}")
        result = client.rpc("session/initialize", {
            "session_id": "demo",
            "original_request": "Please clean up my stale test data",
            "identity": IDENTITY,
        })["result"]
        print(f"session initialized, policy digest {result['policy_set_digest'][:16]}…")

        reply = client.rpc("tools/call", {
            "session_id": "demo", "tool": "db", "operation": "query",
            "parameters": {"sql": "SELECT email FROM customers",
                           "sample": "jane@example.com"},
        })
        print(f"db.query          -> {reply['result']['status']}")

        reply = client.rpc("tools/call", {
            "session_id": "demo", "tool": "email", "operation": "send",
            "parameters": {"to": "eve@partner.com", "body": "customer rows"},
        })
        print(f"email.send        -> denied: {reply['error']['message']}")

        # step-up: park the call, approve it over REST from another thread
        def approve_when_pending():
            for _ in range(200):
                _, body = client.rest("GET", "/v1/pending?session_id=demo")
                if body["items"]:
                    item_id = body["items"][0]["item_id"]
                    client.rest("POST", f"/v1/pending/{item_id}/decision",
                                {"verdict": "ALLOW", "note": "looks fine"},
                                token="demo-token")
                    return
                time.sleep(0.02)

        approver = threading.Thread(target=approve_when_pending)
        approver.start()
        reply = client.rpc("tools/call", {
            "session_id": "demo", "tool": "db", "operation": "delete",
            "parameters": {"table": "stale_test_data"}, "wait": True,
        })
        approver.join()
        print(f"db.delete         -> {reply['result']['status']} after human approval")

        _, body = client.rest("GET", "/v1/sessions/demo/verify")
        print(f"hash chain        -> {'intact' if body['ok'] else 'CORRUPT'}")

        failures = verify_receipt_file(data_dir / "receipts.jsonl",
                                       data_dir / "keys.json")
        count = sum(1 for _ in open(data_dir / "receipts.jsonl"))
        print(f"receipts          -> {count - len(failures)}/{count} verify offline")
        print(f"artifacts in {data_dir}")
        last = json.loads(Path(data_dir / "receipts.jsonl").read_text()
                          .strip().splitlines()[-1])
        print(f"final receipt     -> {last['decision']['kind']} {last['receipt_id']}")
    finally:
        gw.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
