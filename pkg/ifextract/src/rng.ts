/**
 * String-keyed deterministic random numbers.
 *
 * The extractor has no trained weights to load, so every "pretrained"
 * parameter is derived from a key like `model/layer/weights`.  Same key,
 * same stream, on every run and platform node supports.
 */

/** 32-bit FNV-1a hash of a string (code-unit-wise). */
export function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193);
  }
  return hash >>> 0;
}

/**
 * sfc32 generator over [0, 1).  All state updates are 32-bit integer
 * operations, so the stream is exactly reproducible.
 */
export function seededRng(key: string): () => number {
  let a = fnv1a(`${key}#a`);
  let b = fnv1a(`${key}#b`);
  let c = fnv1a(`${key}#c`);
  let d = fnv1a(`${key}#d`);
  const next = () => {
    a >>>= 0;
    b >>>= 0;
    c >>>= 0;
    d >>>= 0;
    const t = (a + b) | 0;
    a = b ^ (b >>> 9);
    b = (c + (c << 3)) | 0;
    c = (c << 21) | (c >>> 11);
    d = (d + 1) | 0;
    const out = (t + d) | 0;
    c = (c + out) | 0;
    return (out >>> 0) / 4294967296;
  };
  // the four hashes of one key are correlated; let the state mix first
  for (let i = 0; i < 12; i++) {
    next();
  }
  return next;
}

/** Standard normal samples via Box-Muller on a seeded uniform stream. */
export function gaussianRng(key: string): () => number {
  const uniform = seededRng(key);
  let spare: number | null = null;
  return () => {
    if (spare !== null) {
      const value = spare;
      spare = null;
      return value;
    }
    let u = 0;
    while (u === 0) {
      u = uniform();
    }
    const radius = Math.sqrt(-2 * Math.log(u));
    const angle = 2 * Math.PI * uniform();
    spare = radius * Math.sin(angle);
    return radius * Math.cos(angle);
  };
}
