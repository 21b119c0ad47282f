/**
 * Pure HTML renderers. Each function turns state into a markup string; the
 * poll loop swaps them into the page. Nothing here talks to the network.
 */

import { PendingItem } from "./api.js";
import {
  ConsoleState,
  canSubmit,
  driftExceeded,
  formatCountdown,
  groupBySession,
} from "./state.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** One parameter value; redaction markers render as a digest chip. */
export function renderParamValue(value: unknown): string {
  if (
    value !== null &&
    typeof value === "object" &&
    !Array.isArray(value) &&
    typeof (value as Record<string, unknown>)["_redacted"] === "string"
  ) {
    const digest = (value as Record<string, unknown>)["_redacted"] as string;
    return `<span class="redacted" title="sha256:${escapeHtml(digest)}">redacted • ${escapeHtml(digest.slice(0, 12))}…</span>`;
  }
  return `<code>${escapeHtml(JSON.stringify(value))}</code>`;
}

export function renderBanner(state: ConsoleState): string {
  if (state.connectivity === "unreachable") {
    return `<div class="banner banner-error" role="alert">Gateway unreachable — controls disabled, showing last known state</div>`;
  }
  if (state.error) {
    return `<div class="banner banner-warn" role="alert">${escapeHtml(state.error)}</div>`;
  }
  return "";
}

function renderContext(item: PendingItem): string {
  const ctx = item.context;
  if (!ctx) return "";
  const timeline = ctx.history
    .map(
      (h) =>
        `<li>#${h.seq} <code>${escapeHtml(h.tool)}.${escapeHtml(h.operation)}</code> <span class="digest">${escapeHtml(h.parameters_digest.slice(0, 12))}…</span></li>`,
    )
    .join("");
  const labels = ctx.data_classifications
    .map((c) => `<span class="label label-${escapeHtml(c.toLowerCase())}">${escapeHtml(c)}</span>`)
    .join(" ");
  const exceeded = driftExceeded(ctx.cumulative_drift, ctx.drift_threshold);
  const drift =
    ctx.cumulative_drift == null
      ? "no baseline"
      : `${ctx.cumulative_drift.toFixed(3)} / ${ctx.drift_threshold}` +
        (exceeded ? ' <span class="drift-exceeded">over threshold</span>' : "");
  return `
    <dl class="context">
      <dt>Original request</dt>
      <dd>${ctx.original_request === null ? "<em>none recorded</em>" : escapeHtml(ctx.original_request)}</dd>
      <dt>Prior actions</dt>
      <dd><ol class="timeline">${timeline || "<li><em>none</em></li>"}</ol></dd>
      <dt>Data seen</dt>
      <dd>${labels || "<em>none</em>"}</dd>
      <dt>Intent drift</dt>
      <dd class="${exceeded ? "drift-high" : ""}">${drift}</dd>
    </dl>`;
}

export function renderPendingItem(state: ConsoleState, item: PendingItem): string {
  const enabled = canSubmit(state, item.item_id);
  const params = Object.entries(item.action.parameters)
    .map(([k, v]) => `<li><code>${escapeHtml(k)}</code>: ${renderParamValue(v)}</li>`)
    .join("");
  const policies = item.matched_policies.map((p) => `<code>${escapeHtml(p)}</code>`).join(", ");
  return `
    <article class="pending-item kind-${item.kind.toLowerCase()}" data-item-id="${escapeHtml(item.item_id)}">
      <header>
        <span class="kind">${item.kind === "STEP_UP" ? "Step-up approval" : "Deferred"}</span>
        <code class="action">${escapeHtml(item.action.tool)}.${escapeHtml(item.action.operation)}</code>
        <span class="countdown" data-deadline="${escapeHtml(item.deadline)}">${formatCountdown(item.seconds_remaining)}</span>
      </header>
      <ul class="params">${params || "<li><em>no parameters</em></li>"}</ul>
      <p class="reason">${escapeHtml(item.reason)}${policies ? ` (${policies})` : ""}</p>
      ${renderContext(item)}
      <footer>
        <button class="approve" data-item-id="${escapeHtml(item.item_id)}" data-verdict="ALLOW" ${enabled ? "" : "disabled"}>Approve</button>
        <button class="deny" data-item-id="${escapeHtml(item.item_id)}" data-verdict="DENY" ${enabled ? "" : "disabled"}>Deny</button>
        <input class="note" data-item-id="${escapeHtml(item.item_id)}" placeholder="note for the record" ${enabled ? "" : "disabled"} />
      </footer>
    </article>`;
}

export function renderQueue(state: ConsoleState): string {
  if (state.pending.length === 0) {
    return `<p class="empty">No items awaiting review.</p>`;
  }
  const groups = groupBySession(state.pending);
  const sections: string[] = [];
  for (const [sessionId, items] of groups) {
    sections.push(`
      <section class="session-group">
        <h3>Session <code>${escapeHtml(sessionId)}</code></h3>
        ${items.map((i) => renderPendingItem(state, i)).join("")}
      </section>`);
  }
  return sections.join("");
}

export function renderHistory(state: ConsoleState): string {
  if (state.history.length === 0) {
    return `<p class="empty">No resolved items yet.</p>`;
  }
  const rows = state.history
    .map((item) => {
      const receipt = item.final_receipt_id
        ? `<a href="#receipt-${escapeHtml(item.final_receipt_id)}" class="receipt-link" data-receipt-id="${escapeHtml(item.final_receipt_id)}">${escapeHtml(item.final_receipt_id.slice(0, 8))}…</a>`
        : "<em>—</em>";
      return `
        <tr class="status-${escapeHtml(item.status.toLowerCase())}">
          <td><code>${escapeHtml(item.session_id)}</code></td>
          <td><code>${escapeHtml(item.action.tool)}.${escapeHtml(item.action.operation)}</code></td>
          <td>${escapeHtml(item.status)}</td>
          <td>${item.resolver ? escapeHtml(item.resolver) : "<em>—</em>"}</td>
          <td>${item.note ? escapeHtml(item.note) : ""}</td>
          <td>${receipt}</td>
        </tr>`;
    })
    .join("");
  return `
    <table class="history">
      <thead><tr><th>Session</th><th>Action</th><th>Status</th><th>Resolved by</th><th>Note</th><th>Receipt</th></tr></thead>
      <tbody>${rows}</tbody>
    </table>`;
}

export interface ReceiptRow {
  receipt_id: string;
  issued_at: string;
  kind: string;
  tool: string;
  operation: string;
  outcome: string;
  verified: boolean | null; // null while verification is running / unsupported
  reason: string;
}

export function renderReceipts(rows: ReceiptRow[]): string {
  if (rows.length === 0) {
    return `<p class="empty">No receipts.</p>`;
  }
  const body = rows
    .map((r) => {
      const badge =
        r.verified === true
          ? `<span class="verified">verified</span>`
          : r.verified === false
            ? `<span class="invalid" title="${escapeHtml(r.reason)}">INVALID</span>`
            : `<span class="unverified">unverified</span>`;
      return `
        <tr id="receipt-${escapeHtml(r.receipt_id)}">
          <td><code>${escapeHtml(r.receipt_id.slice(0, 8))}…</code></td>
          <td>${escapeHtml(r.issued_at)}</td>
          <td>${escapeHtml(r.kind)}</td>
          <td><code>${escapeHtml(r.tool)}.${escapeHtml(r.operation)}</code></td>
          <td>${escapeHtml(r.outcome)}</td>
          <td>${badge}</td>
        </tr>`;
    })
    .join("");
  return `
    <table class="receipts">
      <thead><tr><th>Receipt</th><th>Issued</th><th>Decision</th><th>Action</th><th>Outcome</th><th>Signature</th></tr></thead>
      <tbody>${body}</tbody>
    </table>`;
}
