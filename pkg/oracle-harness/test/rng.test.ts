import { describe, expect, it } from "vitest";
import { Rng, mix64 } from "../src/rng";

// First outputs frozen from the documented recipe; these pin the stream
// so dropout masks stay portable across implementations.
const SEED42_RAWS = [
  0xbdd732262feb6e95n, 0x28efe333b266f103n,
  0x47526757130f9f52n, 0x581ce1ff0e4ae394n,
];
const SEED42_UNIFORMS = [
  0.7415648787718233, 0.1599103928769201,
  0.27860113025513866, 0.34419071652363753,
];
const SEED42_NORMALS = [
  0.4147197504315305, 0.6526812221519427,
  -0.8918862136277562, 1.3268335628141064,
];

describe("splitmix64 stream", () => {
  it("reproduces the frozen raw outputs", () => {
    const rng = new Rng(42);
    for (const expected of SEED42_RAWS) expect(rng.raw()).toBe(expected);
    const other = new Rng(7);
    expect(other.raw()).toBe(0x63cbe1e459320dd7n);
    expect(other.raw()).toBe(0x044c3cd7f43c661cn);
  });

  it("uniforms are the exact dyadic rationals", () => {
    const rng = new Rng(42);
    const u = rng.uniforms(4);
    for (let i = 0; i < 4; i++) expect(u[i]).toBe(SEED42_UNIFORMS[i]);
  });

  it("normals match the python reference to double precision", () => {
    const z = new Rng(42).normals(4);
    for (let i = 0; i < 4; i++) {
      expect(Math.abs(z[i] - SEED42_NORMALS[i])).toBeLessThan(1e-12);
    }
  });

  it("mix64 stays within 64 bits", () => {
    expect(mix64((1n << 64n) - 1n) >> 64n).toBe(0n);
  });

  it("streams are reproducible and seed-dependent", () => {
    const a = new Rng(9).uniforms(100);
    const b = new Rng(9).uniforms(100);
    const c = new Rng(10).uniforms(100);
    expect(Array.from(a)).toEqual(Array.from(b));
    expect(Array.from(a)).not.toEqual(Array.from(c));
  });
});
