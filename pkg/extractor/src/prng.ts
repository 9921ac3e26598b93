/** SplitMix64-based deterministic PRNG for reproducible backbone weights. */

const MASK = (1n << 64n) - 1n;
const GOLDEN = 0x9e3779b97f4a7c15n;

export class SplitMix64 {
  private state: bigint;

  constructor(seed: bigint | number) {
    this.state = BigInt(seed) & MASK;
  }

  nextU64(): bigint {
    this.state = (this.state + GOLDEN) & MASK;
    let z = this.state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK;
    return z ^ (z >> 31n);
  }

  /** Uniform double in [0, 1) with 53 random bits. */
  nextDouble(): number {
    return Number(this.nextU64() >> 11n) / 2 ** 53;
  }

  /** Deterministic weight array, uniform in [-scale, scale]. */
  uniformArray(n: number, scale: number): Float32Array {
    const out = new Float32Array(n);
    for (let i = 0; i < n; i++) {
      out[i] = Math.fround((2 * this.nextDouble() - 1) * scale);
    }
    return out;
  }
}
