/**
 * Pure console state: everything is derived from the latest poll responses,
 * so there is no client-side authoritative state to drift out of sync. The
 * functions here are side-effect free and fully unit-testable.
 */

import { PendingItem } from "./api.js";

export type Connectivity = "connected" | "unreachable";

export interface ConsoleState {
  connectivity: Connectivity;
  pending: PendingItem[];
  history: PendingItem[];
  /** item_ids with an in-flight verdict; their controls are disabled. */
  submitting: Set<string>;
  /** Last error surfaced to the approver, if any. */
  error: string | null;
}

export function initialState(): ConsoleState {
  return {
    connectivity: "unreachable",
    pending: [],
    history: [],
    submitting: new Set(),
    error: null,
  };
}

/** Apply a successful poll: the server's answer simply replaces our view. */
export function applyPoll(
  state: ConsoleState,
  pending: PendingItem[],
  history: PendingItem[],
): ConsoleState {
  const stillPending = new Set(pending.map((i) => i.item_id));
  const submitting = new Set([...state.submitting].filter((id) => stillPending.has(id)));
  return { ...state, connectivity: "connected", pending, history, submitting, error: null };
}

/** The API could not be reached: keep the last view but disable controls. */
export function applyUnreachable(state: ConsoleState): ConsoleState {
  return { ...state, connectivity: "unreachable" };
}

export function beginSubmit(state: ConsoleState, itemId: string): ConsoleState {
  const submitting = new Set(state.submitting);
  submitting.add(itemId);
  return { ...state, submitting };
}

export function finishSubmit(
  state: ConsoleState,
  itemId: string,
  error: string | null = null,
): ConsoleState {
  const submitting = new Set(state.submitting);
  submitting.delete(itemId);
  return { ...state, submitting, error };
}

/** A verdict may be submitted only for a visibly pending, idle item. */
export function canSubmit(state: ConsoleState, itemId: string): boolean {
  return (
    state.connectivity === "connected" &&
    !state.submitting.has(itemId) &&
    state.pending.some((i) => i.item_id === itemId)
  );
}

/** Queue grouped by session, sessions and items in stable order. */
export function groupBySession(items: PendingItem[]): Map<string, PendingItem[]> {
  const groups = new Map<string, PendingItem[]>();
  for (const item of items) {
    const group = groups.get(item.session_id);
    if (group) {
      group.push(item);
    } else {
      groups.set(item.session_id, [item]);
    }
  }
  return groups;
}

/** "m:ss" countdown from the server-reported seconds remaining. */
export function formatCountdown(secondsRemaining: number): string {
  const total = Math.max(0, Math.floor(secondsRemaining));
  const minutes = Math.floor(total / 60);
  const seconds = total % 60;
  return `${minutes}:${String(seconds).padStart(2, "0")}`;
}

/** True when the drift reading crossed the policy threshold. */
export function driftExceeded(
  cumulativeDrift: number | null | undefined,
  threshold: number,
): boolean {
  return cumulativeDrift != null && cumulativeDrift > threshold;
}
