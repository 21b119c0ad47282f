/**
 * Page wiring: a 2-second poll loop drives all state, and click handlers
 * submit verdicts. The module keeps no authoritative state of its own — on
 * every poll the server's answer replaces the view wholesale.
 */

import { ApiClient, ApiError, Unreachable } from "./api.js";
import { RawNumber, plain } from "./canonical.js";
import {
  renderBanner,
  renderHistory,
  renderQueue,
  renderReceipts,
  ReceiptRow,
} from "./render.js";
import {
  ConsoleState,
  applyPoll,
  applyUnreachable,
  beginSubmit,
  canSubmit,
  finishSubmit,
  initialState,
} from "./state.js";
import { ed25519Supported, verifyReceipt } from "./verify.js";

export const POLL_INTERVAL_MS = 2000;

function $(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el;
}

function str(value: unknown): string {
  if (typeof value === "string") return value;
  if (value instanceof RawNumber) return value.raw;
  return value == null ? "" : String(value);
}

export class Console {
  state: ConsoleState = initialState();
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(readonly api: ApiClient) {}

  start(): void {
    void this.poll();
    this.timer = setInterval(() => void this.poll(), POLL_INTERVAL_MS);
    $("queue").addEventListener("click", (ev) => this.onClick(ev));
  }

  stop(): void {
    if (this.timer !== null) clearInterval(this.timer);
  }

  async poll(): Promise<void> {
    try {
      const [pending, history] = await Promise.all([
        this.api.listPending(),
        this.api.listHistory(),
      ]);
      this.state = applyPoll(this.state, pending, history);
    } catch (err) {
      this.state =
        err instanceof Unreachable
          ? applyUnreachable(this.state)
          : finishSubmitAll(this.state, String(err));
    }
    this.render();
    void this.refreshReceipts();
  }

  private onClick(ev: Event): void {
    const target = ev.target as HTMLElement;
    const itemId = target.dataset["itemId"];
    const verdict = target.dataset["verdict"] as "ALLOW" | "DENY" | undefined;
    if (!itemId || !verdict) return;
    void this.submit(itemId, verdict);
  }

  async submit(itemId: string, verdict: "ALLOW" | "DENY"): Promise<void> {
    // idempotent UI guard: a second click while in flight is a no-op
    if (!canSubmit(this.state, itemId)) return;
    this.state = beginSubmit(this.state, itemId);
    this.render();
    const noteInput = document.querySelector<HTMLInputElement>(
      `input.note[data-item-id="${itemId}"]`,
    );
    try {
      await this.api.submitVerdict(itemId, verdict, noteInput?.value ?? "");
      this.state = finishSubmit(this.state, itemId);
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // already resolved elsewhere: drop our claim and reload terminal state
        this.state = finishSubmit(this.state, itemId);
      } else if (err instanceof ApiError) {
        this.state = finishSubmit(this.state, itemId, err.message);
      } else {
        this.state = applyUnreachable(finishSubmit(this.state, itemId));
      }
    }
    await this.poll();
  }

  render(): void {
    $("banner").innerHTML = renderBanner(this.state);
    $("queue").innerHTML = renderQueue(this.state);
    $("history").innerHTML = renderHistory(this.state);
  }

  async refreshReceipts(): Promise<void> {
    let rows: ReceiptRow[];
    try {
      const [receipts, keys, supported] = await Promise.all([
        this.api.listReceipts(),
        this.api.publicKeys(),
        ed25519Supported(),
      ]);
      rows = await Promise.all(
        receipts.map(async (receipt) => {
          const p = plain(receipt) as Record<string, any>;
          const result = supported
            ? await verifyReceipt(receipt, keys)
            : { ok: null as boolean | null, reason: "Ed25519 unsupported in this browser" };
          return {
            receipt_id: str(p["receipt_id"]),
            issued_at: str(p["issued_at"]),
            kind: str(p["decision"]?.["kind"]),
            tool: str(p["action"]?.["tool"]),
            operation: str(p["action"]?.["operation"]),
            outcome: str(p["outcome"]?.["status"] ?? p["decision"]?.["kind"]),
            verified: result.ok,
            reason: result.reason,
          };
        }),
      );
    } catch {
      return; // keep the previous receipt view on transient failures
    }
    $("receipts").innerHTML = renderReceipts(rows);
  }
}

function finishSubmitAll(state: ConsoleState, error: string): ConsoleState {
  return { ...state, error };
}

export function boot(): void {
  const params = new URLSearchParams(window.location.search);
  const token =
    params.get("token") ?? window.localStorage.getItem("aarm-approver-token") ?? "";
  if (params.get("token")) {
    window.localStorage.setItem("aarm-approver-token", token);
  }
  const api = new ApiClient("", token);
  new Console(api).start();
}

if (typeof document !== "undefined" && document.getElementById("queue")) {
  boot();
}
