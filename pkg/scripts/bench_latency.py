"""Measure in-process authorization latency under a large forbidden set.

Builds an engine with a configurable number of forbidden policies, fires a
batch of tool calls that hit the forbidden index, and prints median / p95 /
p99 latency in milliseconds. Every call is denied before any upstream
effect, so the numbers reflect pure gateway overhead: policy lookup,
decision assembly, and receipt signing.
"""

from __future__ import annotations

import argparse
import statistics
import time

from aarm.config import GatewayConfig
from aarm.engine import Engine, InProcessToolServer
from aarm.policy import parse_policy_set


def build_policy_doc(n_forbidden: int) -> dict:
    policies = [
        {
            "id": f"forbid_{i}",
            "forbidden": True,
            "decision": "DENY",
            "priority": 100,
            "reason": "forbidden operation",
            "match": ["AND", ["==", "action.tool", f"tool{i}"],
                      ["==", "action.operation", "run"]],
        }
        for i in range(n_forbidden)
    ]
    return {"policies": policies}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--forbidden", type=int, default=1000,
                        help="number of forbidden policies to load")
    parser.add_argument("--calls", type=int, default=10_000,
                        help="number of tool calls to time")
    args = parser.parse_args()

    engine = Engine(
        parse_policy_set(build_policy_doc(args.forbidden)),
        GatewayConfig(test_mode=True),
        tool_caller=InProcessToolServer(),
    )
    engine.initialize_session("bench", {
        "session_id": "bench",
        "human_principal": "alice@company.com",
        "service_identity": "agent-svc@iam",
        "agent_identity": "agent-runtime-7",
        "privilege_scope": ["tools.run"],
    }, None)

    samples_ms = []
    for i in range(args.calls):
        started = time.perf_counter_ns()
        engine.tool_call("bench", f"tool{i % args.forbidden}", "run", {"n": i})
        samples_ms.append((time.perf_counter_ns() - started) / 1e6)

    samples_ms.sort()
    print(f"forbidden policies: {args.forbidden}")
    print(f"calls:              {args.calls}")
    print(f"median:             {statistics.median(samples_ms):.4f} ms")
    print(f"p95:                {samples_ms[int(len(samples_ms) * 0.95)]:.4f} ms")
    print(f"p99:                {samples_ms[int(len(samples_ms) * 0.99)]:.4f} ms")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
