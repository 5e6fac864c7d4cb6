/**
 * Counter-based SplitMix64 stream, matching the generator pinned in the
 * engine's docs so seeded artifacts (notably dropout masks) agree across
 * implementations:
 *
 *   raw_i = mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)   i = 0, 1, ...
 *   mix64(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
 *             z ^= z >> 27; z *= 0x94D049BB133111EB;
 *             z ^= z >> 31                 (all arithmetic mod 2^64)
 *
 *   uniform_i = (raw_i >> 11) * 2^-53                    exact in a double
 *   normals: Box-Muller over consecutive raw pairs with
 *            u1 = ((raw_{2j} >> 11) + 1) * 2^-53
 *
 * Uniforms are exact dyadic rationals, so threshold comparisons (dropout
 * masks) are bit-for-bit reproducible across languages; normals agree to
 * double rounding of the transcendental calls.
 */

const MASK = (1n << 64n) - 1n;
const GAMMA = 0x9e3779b97f4a7c15n;
const M1 = 0xbf58476d1ce4e5b9n;
const M2 = 0x94d049bb133111ebn;

export function mix64(z: bigint): bigint {
  z &= MASK;
  z = ((z ^ (z >> 30n)) * M1) & MASK;
  z = ((z ^ (z >> 27n)) * M2) & MASK;
  return (z ^ (z >> 31n)) & MASK;
}

export class Rng {
  private seed: bigint;
  private counter: bigint;

  constructor(seed: number | bigint) {
    this.seed = BigInt(seed) & MASK;
    this.counter = 0n;
  }

  raw(): bigint {
    this.counter += 1n;
    return mix64((this.seed + this.counter * GAMMA) & MASK);
  }

  uniform(): number {
    return Number(this.raw() >> 11n) * 2 ** -53;
  }

  uniforms(count: number): Float64Array {
    const out = new Float64Array(count);
    for (let i = 0; i < count; i++) out[i] = this.uniform();
    return out;
  }

  normals(count: number): Float64Array {
    const pairs = Math.ceil(count / 2);
    const out = new Float64Array(2 * pairs);
    for (let j = 0; j < pairs; j++) {
      const u1 = (Number(this.raw() >> 11n) + 1) * 2 ** -53;
      const u2 = Number(this.raw() >> 11n) * 2 ** -53;
      const r = Math.sqrt(-2 * Math.log(u1));
      const theta = 2 * Math.PI * u2;
      out[2 * j] = r * Math.cos(theta);
      out[2 * j + 1] = r * Math.sin(theta);
    }
    return out.subarray(0, count);
  }

  /** float32 normal tensor data scaled to the given std. */
  normalsF32(count: number, std = 1.0, mean = 0.0): Float32Array {
    const doubles = this.normals(count);
    const out = new Float32Array(count);
    for (let i = 0; i < count; i++) out[i] = Math.fround(mean + std * doubles[i]);
    return out;
  }
}
