"""Command-line entry points: serve the gateway, verify receipt files,
run the conformance harness, and generate signing keys."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from .config import GatewayConfig, resolve_config_path
from .engine import build_engine
from .gateway import GatewayServer, HttpToolCaller
from .receipts import generate_signing_key, verify_receipt_file


def _cmd_serve(args: argparse.Namespace) -> int:
    config = GatewayConfig.from_file(resolve_config_path(args.config))
    tool_caller = HttpToolCaller(config.tool_registry) if config.tool_registry else None
    engine = build_engine(config, tool_caller=tool_caller)
    server = GatewayServer(
        engine,
        host=config.listen_host,
        port=config.listen_port,
        console_dir=args.console,
    )
    server.start()
    print(f"aarm gateway listening on {server.url}", flush=True)
    if args.console:
        print(f"approval console served from {args.console}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def _cmd_verify_receipts(args: argparse.Namespace) -> int:
    receipts = Path(args.receipts)
    keys = Path(args.keys)
    for path, label in ((receipts, "receipts"), (keys, "keys")):
        if not path.exists():
            print(f"error: {label} file not found: {path}", file=sys.stderr)
            return 2
    failures = verify_receipt_file(receipts, keys)
    total = sum(1 for line in receipts.read_bytes().splitlines() if line.strip())
    if failures:
        for receipt_id, reason in failures:
            print(f"INVALID {receipt_id}: {reason}")
        print(f"{total - len(failures)}/{total} receipts valid")
        return 1
    print(f"{total}/{total} receipts valid")
    return 0


def _cmd_conform(args: argparse.Namespace) -> int:
    from . import conformance

    forwarded: list[str] = []
    if args.target:
        forwarded += ["--target", args.target]
    if args.requirement:
        forwarded += ["--requirement", args.requirement]
    if args.scenario:
        forwarded += ["--scenario", args.scenario]
    if args.report:
        forwarded += ["--report", args.report]
    if args.data_dir:
        forwarded += ["--data-dir", args.data_dir]
    if args.parallel:
        forwarded.append("--parallel")
    if args.verbose:
        forwarded.append("--verbose")
    return conformance.main(forwarded)


def _cmd_keygen(args: argparse.Namespace) -> int:
    key_id = generate_signing_key(args.out)
    print(json.dumps({"key_id": key_id, "path": str(args.out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aarm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the authorization gateway")
    serve.add_argument("--config", help="path to gateway config JSON")
    serve.add_argument("--console", help="directory of approval-console static files")
    serve.set_defaults(func=_cmd_serve)

    verify = sub.add_parser("verify-receipts", help="offline receipt verification")
    verify.add_argument("--receipts", required=True, help="receipts.jsonl path")
    verify.add_argument("--keys", required=True, help="keys.json path")
    verify.set_defaults(func=_cmd_verify_receipts)

    conform = sub.add_parser("conform", help="run the conformance harness")
    conform.add_argument("--target", help="gateway base URL (default: self-hosted)")
    conform.add_argument("--requirement", help="run a single requirement, e.g. R4")
    conform.add_argument("--scenario", help="run a single threat scenario by id")
    conform.add_argument("--report", help="write the JSON report to this path")
    conform.add_argument("--data-dir", help="gateway data dir for file-level checks")
    conform.add_argument("--parallel", action="store_true",
                         help="run independent scenarios concurrently")
    conform.add_argument("--verbose", action="store_true", help="show per-check evidence")
    conform.set_defaults(func=_cmd_conform)

    keygen = sub.add_parser("keygen", help="generate an Ed25519 signing key")
    keygen.add_argument("--out", required=True, help="where to write the private key")
    keygen.set_defaults(func=_cmd_keygen)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
