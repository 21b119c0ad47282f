/**
 * End-to-end against a real gateway process: a parked STEP_UP item must show
 * up within two poll intervals, approving it must execute the action, and
 * the follow-up receipt must verify client-side.
 */

import { ChildProcess, spawn } from "node:child_process";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { JsonValue } from "../src/canonical.js";
import { verifyReceipt } from "../src/verify.js";
import { applyPoll, initialState, ConsoleState } from "../src/state.js";

const here = new URL(".", import.meta.url).pathname;
const POLL_INTERVAL_MS = 2000;

let proc: ChildProcess;
let client: ApiClient;
let itemId: string;

beforeAll(async () => {
  proc = spawn("python3", [`${here}/gateway_fixture.py`], {
    stdio: ["ignore", "pipe", "inherit"],
  });
  const line: string = await new Promise((resolve, reject) => {
    let buf = "";
    proc.stdout!.on("data", (chunk: Buffer) => {
      buf += chunk.toString();
      if (buf.includes("\n")) resolve(buf.split("\n")[0]);
    });
    proc.on("exit", (code) => reject(new Error(`fixture exited ${code}`)));
    setTimeout(() => reject(new Error("fixture start timeout")), 30_000);
  });
  const info = JSON.parse(line) as { port: number; item_id: string };
  itemId = info.item_id;
  client = new ApiClient(`http://127.0.0.1:${info.port}`, "console-token");
}, 40_000);

afterAll(() => {
  proc?.kill();
});

describe("console against a live gateway", () => {
  let state: ConsoleState = initialState();

  it("renders the pending STEP_UP item within two poll intervals", async () => {
    const deadline = Date.now() + 2 * POLL_INTERVAL_MS;
    let found = false;
    while (Date.now() < deadline && !found) {
      const [pending, history] = await Promise.all([
        client.listPending(),
        client.listHistory(),
      ]);
      state = applyPoll(state, pending, history);
      found = state.pending.some((i) => i.item_id === itemId && i.kind === "STEP_UP");
      if (!found) await new Promise((r) => setTimeout(r, 100));
    }
    expect(found).toBe(true);
    const item = state.pending.find((i) => i.item_id === itemId)!;
    expect(item.context?.original_request).toContain("clean up");
    expect(item.seconds_remaining).toBeGreaterThan(0);
  });

  it("approving the item executes the action", async () => {
    const outcome = await client.submitVerdict(itemId, "ALLOW", "approved in e2e test");
    expect(outcome.status).toBe("executed");
  });

  it("history links a follow-up receipt that verifies client-side", async () => {
    const [pending, history] = await Promise.all([
      client.listPending(),
      client.listHistory(),
    ]);
    state = applyPoll(state, pending, history);
    expect(state.pending.find((i) => i.item_id === itemId)).toBeUndefined();
    const entry = state.history.find((i) => i.item_id === itemId)!;
    expect(entry.status).toBe("RESOLVED_ALLOW");
    expect(entry.resolver).toBe("op@company.com");
    const followUpId = entry.final_receipt_id!;
    expect(followUpId).toBeTruthy();

    const [receipts, keys] = await Promise.all([
      client.listReceipts("console-e2e"),
      client.publicKeys(),
    ]);
    const followUp = receipts.find((r) => r["receipt_id"] === followUpId)!;
    expect(followUp).toBeTruthy();
    const result = await verifyReceipt(followUp, keys);
    expect(result).toEqual({ ok: true, reason: "" });

    // the note travels into the follow-up receipt's approval group
    const approval = followUp["approval"] as { [k: string]: JsonValue };
    expect(approval["note"]).toBe("approved in e2e test");
  });
});
