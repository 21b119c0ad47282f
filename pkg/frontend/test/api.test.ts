import { describe, expect, it } from "vitest";

import { ApiClient, ApiError, Unreachable } from "../src/api.js";

function fakeFetch(
  handler: (url: string, init?: RequestInit) => { status: number; body?: unknown },
) {
  const calls: { url: string; init?: RequestInit }[] = [];
  const impl = async (url: string, init?: RequestInit): Promise<Response> => {
    calls.push({ url, init });
    const { status, body } = handler(url, init);
    return new Response(body === undefined ? "" : JSON.stringify(body), { status });
  };
  return { impl, calls };
}

describe("ApiClient", () => {
  it("lists pending items", async () => {
    const { impl } = fakeFetch(() => ({
      status: 200,
      body: { items: [{ item_id: "i-1", session_id: "s-1" }] },
    }));
    const client = new ApiClient("http://gw", "tok", impl);
    const items = await client.listPending();
    expect(items).toHaveLength(1);
    expect(items[0].item_id).toBe("i-1");
  });

  it("sends the bearer token only on decisions", async () => {
    const { impl, calls } = fakeFetch(() => ({ status: 200, body: { status: "executed" } }));
    const client = new ApiClient("http://gw", "secret", impl);
    await client.submitVerdict("i-1", "ALLOW", "fine");
    const headers = calls[0].init?.headers as Record<string, string>;
    expect(headers["Authorization"]).toBe("Bearer secret");
    expect(calls[0].url).toBe("http://gw/v1/pending/i-1/decision");
    expect(JSON.parse(String(calls[0].init?.body))).toEqual({
      verdict: "ALLOW",
      note: "fine",
    });
  });

  it("maps 403 to the approver-facing message", async () => {
    const { impl } = fakeFetch(() => ({ status: 403, body: { error: "forbidden" } }));
    const client = new ApiClient("http://gw", "bad", impl);
    await expect(client.submitVerdict("i-1", "DENY")).rejects.toThrow(
      "not an authorized approver",
    );
  });

  it("maps 409 to an already-resolved conflict", async () => {
    const { impl } = fakeFetch(() => ({ status: 409, body: {} }));
    const client = new ApiClient("http://gw", "tok", impl);
    const err = await client.submitVerdict("i-1", "ALLOW").catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(409);
  });

  it("raises Unreachable when the network call itself fails", async () => {
    const impl = async (): Promise<Response> => {
      throw new TypeError("fetch failed");
    };
    const client = new ApiClient("http://gw", "tok", impl);
    await expect(client.listPending()).rejects.toBeInstanceOf(Unreachable);
  });

  it("keeps receipt number tokens intact for verification", async () => {
    const { impl } = fakeFetch(() => ({ status: 200 }));
    // hand-build a response with a float token JSON.parse would collapse
    const raw = '{"receipts":[{"context":{"cumulative_drift":1.0}}]}';
    const client = new ApiClient("http://gw", "tok", async () => new Response(raw, { status: 200 }));
    void impl;
    const receipts = await client.listReceipts();
    const ctx = receipts[0]["context"] as { [k: string]: unknown };
    expect(String(ctx["cumulative_drift"])).toBe("1.0");
  });
});
