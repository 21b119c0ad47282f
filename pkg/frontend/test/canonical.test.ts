import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";

import {
  RawNumber,
  canonicalDigest,
  canonicalSerialize,
  codePointCompare,
  parsePreserving,
  plain,
} from "../src/canonical.js";

const here = new URL(".", import.meta.url).pathname;
const vectors: { value: unknown; canonical: string; digest: string }[] = JSON.parse(
  readFileSync(`${here}/fixtures/canonical_vectors.json`, "utf-8"),
);

function bytesToString(bytes: Uint8Array): string {
  return new TextDecoder().decode(bytes);
}

describe("canonical serialization against gateway-produced vectors", () => {
  it("re-serializes every vector byte-identically", () => {
    for (const v of vectors) {
      const parsed = parsePreserving(v.canonical);
      expect(bytesToString(canonicalSerialize(parsed))).toBe(v.canonical);
    }
  });

  it("reproduces every vector digest", async () => {
    for (const v of vectors) {
      const parsed = parsePreserving(v.canonical);
      expect(await canonicalDigest(parsed)).toBe(v.digest);
    }
  });
});

describe("serialization rules", () => {
  it("sorts object keys by code point at every level", () => {
    const out = bytesToString(
      canonicalSerialize({ b: { z: 1, a: 2 }, A: 3, a: 4 } as never),
    );
    expect(out).toBe('{"A":3,"a":4,"b":{"a":2,"z":1}}');
  });

  it("emits no insignificant whitespace", () => {
    const out = bytesToString(canonicalSerialize([1, "a", { k: true }] as never));
    expect(out).toBe('[1,"a",{"k":true}]');
  });

  it("leaves non-ASCII unescaped and escapes control characters", () => {
    const out = bytesToString(canonicalSerialize('snow ☃ tab\tctl'));
    expect(out).toBe('"snow ☃ tab\\tctl\\u0007"');
  });

  it("rejects non-finite numbers", () => {
    expect(() => canonicalSerialize(Number.NaN)).toThrow();
    expect(() => canonicalSerialize(Infinity)).toThrow();
  });

  it("preserves number tokens exactly (1.0 stays 1.0)", () => {
    const parsed = parsePreserving('{"f":1.0,"i":1}');
    expect(bytesToString(canonicalSerialize(parsed))).toBe('{"f":1.0,"i":1}');
  });
});

describe("parsePreserving", () => {
  it("wraps numbers as RawNumber with the source token", () => {
    const parsed = parsePreserving("[0.5,-0.0,1e300]") as RawNumber[];
    expect(parsed.map((n) => n.raw)).toEqual(["0.5", "-0.0", "1e300"]);
    expect(parsed[0].value).toBe(0.5);
  });

  it("round-trips strings with escapes", () => {
    const text = '"a\\nb\\u00e9\\"q\\\\"';
    expect(parsePreserving(text)).toBe('a\nbé"q\\');
  });

  it("rejects trailing content and malformed input", () => {
    expect(() => parsePreserving("{} junk")).toThrow();
    expect(() => parsePreserving('{"a":}')).toThrow();
    expect(() => parsePreserving("")).toThrow();
  });

  it("plain() unwraps RawNumber recursively", () => {
    expect(plain(parsePreserving('{"a":[1.5,{"b":2}]}'))).toEqual({
      a: [1.5, { b: 2 }],
    });
  });
});

describe("codePointCompare", () => {
  it("orders by code point, not UTF-16 code unit", () => {
    // U+FF01 (BMP) must sort before U+1F600 (astral), unlike code-unit order
    expect(codePointCompare("！", "\u{1f600}")).toBeLessThan(0);
    expect(codePointCompare("a", "b")).toBeLessThan(0);
    expect(codePointCompare("same", "same")).toBe(0);
    expect(codePointCompare("ab", "a")).toBeGreaterThan(0);
  });
});
