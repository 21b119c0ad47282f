/**
 * Thin typed client for the gateway's approver REST surface. The console
 * holds no authority: every fact it renders comes from these endpoints, and
 * the only thing it can do is submit a verdict with the approver's token.
 */

import { JsonValue, parsePreserving, plain } from "./canonical.js";

export interface HistoryEntry {
  seq: number;
  tool: string;
  operation: string;
  parameters_digest: string;
}

export interface PendingContext {
  original_request: string | null;
  history: HistoryEntry[];
  data_classifications: string[];
  cumulative_drift: number | null;
  drift_threshold: number;
}

export interface PendingItem {
  item_id: string;
  session_id: string;
  kind: "STEP_UP" | "DEFER";
  status: string;
  action: {
    tool: string;
    operation: string;
    parameters: Record<string, unknown>;
    seq: number;
  };
  deadline: string;
  seconds_remaining: number;
  defer_reason: string | null;
  matched_policies: string[];
  reason: string;
  receipt_id: string | null;
  context?: PendingContext;
  resolver?: string | null;
  note?: string | null;
  final_receipt_id?: string | null;
}

export interface DecisionOutcome {
  status: string;
  [key: string]: unknown;
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

/** The network itself failed (server down, CORS, DNS): banner state. */
export class Unreachable extends Error {}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    readonly baseUrl: string,
    readonly token: string,
    private readonly fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request(
    method: string,
    path: string,
    body?: unknown,
    withToken = false,
  ): Promise<{ status: number; body: JsonValue }> {
    const headers: Record<string, string> = { "Content-Type": "application/json" };
    if (withToken) headers["Authorization"] = `Bearer ${this.token}`;
    let response: Response;
    try {
      response = await this.fetchImpl(this.baseUrl + path, {
        method,
        headers,
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (err) {
      throw new Unreachable(String(err));
    }
    const text = await response.text();
    let parsed: JsonValue = null;
    try {
      parsed = parsePreserving(text);
    } catch {
      parsed = null;
    }
    return { status: response.status, body: parsed };
  }

  async listPending(sessionId?: string): Promise<PendingItem[]> {
    const qs = sessionId ? `?session_id=${encodeURIComponent(sessionId)}` : "";
    const { status, body } = await this.request("GET", `/v1/pending${qs}`);
    if (status !== 200) throw new ApiError(status, `pending list failed (${status})`);
    return itemsOf(body) as unknown as PendingItem[];
  }

  async listHistory(sessionId?: string): Promise<PendingItem[]> {
    const qs = sessionId ? `?session_id=${encodeURIComponent(sessionId)}` : "";
    const { status, body } = await this.request("GET", `/v1/history${qs}`);
    if (status !== 200) throw new ApiError(status, `history failed (${status})`);
    return itemsOf(body) as unknown as PendingItem[];
  }

  async submitVerdict(
    itemId: string,
    verdict: "ALLOW" | "DENY",
    note = "",
  ): Promise<DecisionOutcome> {
    const { status, body } = await this.request(
      "POST",
      `/v1/pending/${encodeURIComponent(itemId)}/decision`,
      { verdict, note },
      true,
    );
    if (status === 403) throw new ApiError(403, "not an authorized approver");
    if (status === 409) throw new ApiError(409, "already resolved");
    if (status === 404) throw new ApiError(404, "no such pending item");
    if (status !== 200) throw new ApiError(status, `decision failed (${status})`);
    return plainObject(body) as DecisionOutcome;
  }

  /** Receipts as token-preserving values, ready for client-side verification. */
  async listReceipts(sessionId?: string): Promise<{ [key: string]: JsonValue }[]> {
    const qs = sessionId ? `?session_id=${encodeURIComponent(sessionId)}` : "";
    const { status, body } = await this.request("GET", `/v1/receipts${qs}`);
    if (status !== 200) throw new ApiError(status, `receipts failed (${status})`);
    if (body === null || typeof body !== "object" || Array.isArray(body)) return [];
    const receipts = (body as { [key: string]: JsonValue })["receipts"];
    return Array.isArray(receipts) ? (receipts as { [key: string]: JsonValue }[]) : [];
  }

  async publicKeys(): Promise<Record<string, string>> {
    const { status, body } = await this.request("GET", "/v1/keys");
    if (status !== 200) throw new ApiError(status, `keys failed (${status})`);
    return plainObject(body) as Record<string, string>;
  }
}

function plainObject(body: JsonValue): Record<string, unknown> {
  const value = plain(body);
  return value !== null && typeof value === "object" && !Array.isArray(value)
    ? (value as Record<string, unknown>)
    : {};
}

function itemsOf(body: JsonValue): unknown[] {
  const obj = plainObject(body);
  return Array.isArray(obj["items"]) ? (obj["items"] as unknown[]) : [];
}
