/**
 * Client-side receipt signature verification against the gateway's published
 * keys. The receipt body (everything except the signature object) is
 * re-serialized canonically and checked with WebCrypto Ed25519; a receipt is
 * shown as "verified" only when this succeeds locally.
 */

import { JsonValue, RawNumber, canonicalSerialize } from "./canonical.js";

export interface VerifyResult {
  ok: boolean;
  reason: string;
}

function b64decode(value: string): Uint8Array<ArrayBuffer> {
  const bin = atob(value);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

export function ed25519Supported(): Promise<boolean> {
  const key = new Uint8Array(32);
  return crypto.subtle
    .importKey("raw", key, { name: "Ed25519" }, false, ["verify"])
    .then(() => true, () => false);
}

/**
 * Verify one receipt (as parsed by `parsePreserving`, so number tokens are
 * intact) against a key_id -> base64 public key map.
 */
export async function verifyReceipt(
  receipt: { [key: string]: JsonValue },
  publicKeys: Record<string, string>,
): Promise<VerifyResult> {
  const sig = receipt["signature"];
  if (
    sig === null ||
    typeof sig !== "object" ||
    Array.isArray(sig) ||
    sig instanceof RawNumber
  ) {
    return { ok: false, reason: "missing signature" };
  }
  const signature = sig;
  if (signature["algorithm"] !== "Ed25519") {
    return { ok: false, reason: "unsupported algorithm" };
  }
  const keyId = signature["key_id"];
  if (typeof keyId !== "string" || !(keyId in publicKeys)) {
    return { ok: false, reason: "unknown key" };
  }
  const value = signature["value"];
  if (typeof value !== "string") {
    return { ok: false, reason: "malformed signature value" };
  }
  let sigBytes: Uint8Array<ArrayBuffer>;
  let keyBytes: Uint8Array<ArrayBuffer>;
  try {
    sigBytes = b64decode(value);
    keyBytes = b64decode(publicKeys[keyId]);
  } catch {
    return { ok: false, reason: "malformed base64" };
  }
  const body: { [key: string]: JsonValue } = {};
  for (const [k, v] of Object.entries(receipt)) {
    if (k !== "signature") body[k] = v;
  }
  let key: CryptoKey;
  try {
    key = await crypto.subtle.importKey("raw", keyBytes, { name: "Ed25519" }, false, [
      "verify",
    ]);
  } catch {
    return { ok: false, reason: "malformed public key" };
  }
  const ok = await crypto.subtle.verify("Ed25519", key, sigBytes, canonicalSerialize(body));
  return ok ? { ok: true, reason: "" } : { ok: false, reason: "signature mismatch" };
}
