import { readFileSync } from "node:fs";
import { beforeAll, describe, expect, it } from "vitest";

import { JsonValue, parsePreserving } from "../src/canonical.js";
import { ed25519Supported, verifyReceipt } from "../src/verify.js";

const here = new URL(".", import.meta.url).pathname;
const lines = readFileSync(`${here}/fixtures/receipts.jsonl`, "utf-8")
  .trim()
  .split("\n");
const keys: Record<string, string> = JSON.parse(
  readFileSync(`${here}/fixtures/keys.json`, "utf-8"),
);

type Receipt = { [key: string]: JsonValue };

function receiptAt(index: number): Receipt {
  return parsePreserving(lines[index]) as Receipt;
}

beforeAll(async () => {
  expect(await ed25519Supported()).toBe(true);
});

describe("verifyReceipt against gateway-issued fixtures", () => {
  it("verifies every fixture receipt", async () => {
    for (const line of lines) {
      const receipt = parsePreserving(line) as Receipt;
      const result = await verifyReceipt(receipt, keys);
      expect(result).toEqual({ ok: true, reason: "" });
    }
  });

  it("rejects a tampered field", async () => {
    const tamperedLine = lines[0].replace('"kind":"ALLOW"', '"kind":"DENY"');
    expect(tamperedLine).not.toBe(lines[0]);
    const result = await verifyReceipt(parsePreserving(tamperedLine) as Receipt, keys);
    expect(result.ok).toBe(false);
    expect(result.reason).toBe("signature mismatch");
  });

  it("rejects a tampered float token (1.0 -> 1.5)", async () => {
    const line = lines.find((l) => l.includes('"cumulative_drift":1.0'))!;
    const tampered = line.replace('"cumulative_drift":1.0', '"cumulative_drift":1.5');
    const result = await verifyReceipt(parsePreserving(tampered) as Receipt, keys);
    expect(result.ok).toBe(false);
  });

  it("rejects an unknown key id", async () => {
    const result = await verifyReceipt(receiptAt(0), { deadbeef: keys[Object.keys(keys)[0]] });
    expect(result.reason).toBe("unknown key");
  });

  it("rejects a missing or non-Ed25519 signature", async () => {
    const receipt = receiptAt(0);
    const { signature: _sig, ...body } = receipt;
    expect((await verifyReceipt(body as Receipt, keys)).reason).toBe("missing signature");

    const wrongAlg = parsePreserving(lines[0]) as Receipt;
    (wrongAlg["signature"] as Receipt)["algorithm"] = "RSA";
    expect((await verifyReceipt(wrongAlg, keys)).reason).toBe("unsupported algorithm");
  });

  it("rejects garbage base64", async () => {
    const receipt = receiptAt(0);
    (receipt["signature"] as Receipt)["value"] = "!!not-base64!!";
    expect((await verifyReceipt(receipt, keys)).reason).toBe("malformed base64");
  });
});
