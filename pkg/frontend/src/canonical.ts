/**
 * Canonical JSON byte serialization, matching the gateway's signing rules:
 * object keys sorted by code point, no insignificant whitespace, UTF-8 with
 * minimal escaping, numbers in shortest round-trip decimal form, and
 * NaN/Infinity rejected.
 *
 * One wrinkle: the gateway distinguishes integer and float values (1 vs 1.0)
 * and both occur in receipts, while JSON.parse collapses them into a single
 * number type. `parsePreserving` therefore keeps each number's original
 * source token, and serialization re-emits it verbatim. Since the gateway
 * itself always renders a given value the same way, the preserved token is
 * byte-identical to what was signed.
 */

/** A number that remembers the exact token it was parsed from. */
export class RawNumber {
  constructor(readonly raw: string, readonly value: number) {}

  toString(): string {
    return this.raw;
  }
}

export type JsonValue =
  | null
  | boolean
  | string
  | number
  | RawNumber
  | JsonValue[]
  | { [key: string]: JsonValue };

/** Code-point-wise string comparison (what the gateway's key sort uses). */
export function codePointCompare(a: string, b: string): number {
  const ia = a[Symbol.iterator]();
  const ib = b[Symbol.iterator]();
  for (;;) {
    const na = ia.next();
    const nb = ib.next();
    if (na.done && nb.done) return 0;
    if (na.done) return -1;
    if (nb.done) return 1;
    const ca = na.value.codePointAt(0)!;
    const cb = nb.value.codePointAt(0)!;
    if (ca !== cb) return ca - cb;
  }
}

const ESCAPES: Record<string, string> = {
  '"': '\\"',
  "\\": "\\\\",
  "\b": "\\b",
  "\f": "\\f",
  "\n": "\\n",
  "\r": "\\r",
  "\t": "\\t",
};

function escapeString(s: string): string {
  let out = '"';
  for (const ch of s) {
    const esc = ESCAPES[ch];
    if (esc !== undefined) {
      out += esc;
    } else if (ch < " ") {
      out += "\\u" + ch.charCodeAt(0).toString(16).padStart(4, "0");
    } else {
      out += ch;
    }
  }
  return out + '"';
}

function serializeValue(value: JsonValue): string {
  if (value === null) return "null";
  if (typeof value === "boolean") return value ? "true" : "false";
  if (typeof value === "string") return escapeString(value);
  if (value instanceof RawNumber) return value.raw;
  if (typeof value === "number") {
    if (!Number.isFinite(value)) {
      throw new Error(`non-finite number: ${value}`);
    }
    return String(value);
  }
  if (Array.isArray(value)) {
    return "[" + value.map(serializeValue).join(",") + "]";
  }
  const keys = Object.keys(value).sort(codePointCompare);
  const parts = keys.map((k) => escapeString(k) + ":" + serializeValue(value[k]));
  return "{" + parts.join(",") + "}";
}

/** Serialize to canonical UTF-8 bytes. */
export function canonicalSerialize(value: JsonValue): Uint8Array<ArrayBuffer> {
  return new TextEncoder().encode(serializeValue(value));
}

/** Hex SHA-256 of the canonical bytes. */
export async function canonicalDigest(value: JsonValue): Promise<string> {
  const hash = await crypto.subtle.digest("SHA-256", canonicalSerialize(value));
  return Array.from(new Uint8Array(hash))
    .map((b) => b.toString(16).padStart(2, "0"))
    .join("");
}

// ------------------------------------------------------------------ parsing

class Parser {
  pos = 0;

  constructor(readonly text: string) {}

  error(msg: string): never {
    throw new Error(`JSON parse error at ${this.pos}: ${msg}`);
  }

  skipWs(): void {
    for (;;) {
      const ch = this.text[this.pos];
      if (ch === " " || ch === "\t" || ch === "\n" || ch === "\r") {
        this.pos++;
      } else {
        return;
      }
    }
  }

  parseValue(): JsonValue {
    this.skipWs();
    const ch = this.text[this.pos];
    if (ch === undefined) this.error("unexpected end of input");
    if (ch === "{") return this.parseObject();
    if (ch === "[") return this.parseArray();
    if (ch === '"') return this.parseString();
    if (ch === "t" || ch === "f" || ch === "n") return this.parseKeyword();
    return this.parseNumber();
  }

  parseKeyword(): JsonValue {
    for (const [word, val] of [["true", true], ["false", false], ["null", null]] as const) {
      if (this.text.startsWith(word, this.pos)) {
        this.pos += word.length;
        return val;
      }
    }
    this.error("invalid literal");
  }

  parseNumber(): RawNumber {
    const match = /^-?(?:0|[1-9]\d*)(?:\.\d+)?(?:[eE][+-]?\d+)?/.exec(
      this.text.slice(this.pos),
    );
    if (!match) this.error("invalid number");
    this.pos += match[0].length;
    return new RawNumber(match[0], Number(match[0]));
  }

  parseString(): string {
    if (this.text[this.pos] !== '"') this.error("expected string");
    this.pos++;
    let out = "";
    for (;;) {
      const ch = this.text[this.pos];
      if (ch === undefined) this.error("unterminated string");
      if (ch === '"') {
        this.pos++;
        return out;
      }
      if (ch === "\\") {
        const esc = this.text[this.pos + 1];
        this.pos += 2;
        if (esc === "u") {
          const hex = this.text.slice(this.pos, this.pos + 4);
          if (!/^[0-9a-fA-F]{4}$/.test(hex)) this.error("invalid \\u escape");
          out += String.fromCharCode(parseInt(hex, 16));
          this.pos += 4;
        } else {
          const simple: Record<string, string> = {
            '"': '"', "\\": "\\", "/": "/", b: "\b", f: "\f", n: "\n", r: "\r", t: "\t",
          };
          const mapped = simple[esc ?? ""];
          if (mapped === undefined) this.error(`invalid escape \\${esc}`);
          out += mapped;
        }
      } else {
        out += ch;
        this.pos++;
      }
    }
  }

  parseArray(): JsonValue[] {
    this.pos++; // [
    const out: JsonValue[] = [];
    this.skipWs();
    if (this.text[this.pos] === "]") {
      this.pos++;
      return out;
    }
    for (;;) {
      out.push(this.parseValue());
      this.skipWs();
      const ch = this.text[this.pos];
      if (ch === ",") {
        this.pos++;
      } else if (ch === "]") {
        this.pos++;
        return out;
      } else {
        this.error("expected , or ]");
      }
    }
  }

  parseObject(): { [key: string]: JsonValue } {
    this.pos++; // {
    const out: { [key: string]: JsonValue } = {};
    this.skipWs();
    if (this.text[this.pos] === "}") {
      this.pos++;
      return out;
    }
    for (;;) {
      this.skipWs();
      const key = this.parseString();
      this.skipWs();
      if (this.text[this.pos] !== ":") this.error("expected :");
      this.pos++;
      out[key] = this.parseValue();
      this.skipWs();
      const ch = this.text[this.pos];
      if (ch === ",") {
        this.pos++;
      } else if (ch === "}") {
        this.pos++;
        return out;
      } else {
        this.error("expected , or }");
      }
    }
  }
}

/** Parse JSON, wrapping every number as a token-preserving `RawNumber`. */
export function parsePreserving(text: string): JsonValue {
  const parser = new Parser(text);
  const value = parser.parseValue();
  parser.skipWs();
  if (parser.pos !== text.length) parser.error("trailing content");
  return value;
}

/** Recursively unwrap `RawNumber` into plain numbers (for display logic). */
export function plain(value: JsonValue): unknown {
  if (value instanceof RawNumber) return value.value;
  if (Array.isArray(value)) return value.map(plain);
  if (value !== null && typeof value === "object") {
    return Object.fromEntries(Object.entries(value).map(([k, v]) => [k, plain(v)]));
  }
  return value;
}
