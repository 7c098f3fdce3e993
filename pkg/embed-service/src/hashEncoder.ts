/**
 * Deterministic hashed bag-of-n-grams encoder.
 *
 * Token 1- and 2-grams are FNV-1a/32 hashed into signed buckets and the
 * result is L2-normalized. The algorithm (hash, separator, sign bit,
 * bucket fold) matches the indexer's local embedder, so vectors from this
 * service score identically against an index built offline.
 */

import { tokenize } from './tokenizer.js';
import type { Encoder } from './encoder.js';

const FNV_OFFSET = 0x811c9dc5;
const FNV_PRIME = 0x01000193;
const SEP = '\x1f';

const utf8 = new TextEncoder();

export function fnv1a32(data: Uint8Array): number {
  let h = FNV_OFFSET | 0;
  for (let i = 0; i < data.length; i++) {
    h ^= data[i];
    h = Math.imul(h, FNV_PRIME);
  }
  return h >>> 0;
}

export function hashEmbed(tokens: string[], dim: number): Float64Array {
  if (tokens.length === 0) {
    throw new Error('cannot embed an empty token stream');
  }
  const vec = new Float64Array(dim);
  const grams = tokens.slice();
  for (let i = 0; i + 1 < tokens.length; i++) {
    grams.push(tokens[i] + SEP + tokens[i + 1]);
  }
  for (const gram of grams) {
    const h = fnv1a32(utf8.encode(gram));
    const sign = (h & 0x80000000) === 0 ? 1.0 : -1.0;
    vec[h % dim] += sign;
  }
  let sq = 0;
  for (let i = 0; i < dim; i++) {
    sq += vec[i] * vec[i];
  }
  if (sq === 0) {
    // every bucket cancelled; deterministic unit spike instead
    vec[fnv1a32(utf8.encode(tokens.join(SEP))) % dim] = 1.0;
    return vec;
  }
  const norm = Math.sqrt(sq);
  for (let i = 0; i < dim; i++) {
    vec[i] /= norm;
  }
  return vec;
}

export class HashEncoder implements Encoder {
  readonly model = 'hash-ngram-v1';
  readonly dim: number;

  constructor(dim = 768) {
    if (dim < 8) {
      throw new Error('dim must be >= 8');
    }
    this.dim = dim;
  }

  async ready(): Promise<void> {}

  async encode(texts: string[], maxTokens: number): Promise<number[][]> {
    return texts.map((text, i) => {
      const tokens = tokenize(text).slice(0, maxTokens);
      if (tokens.length === 0) {
        throw new EmptyTextError(i);
      }
      return Array.from(hashEmbed(tokens, this.dim));
    });
  }
}

export class EmptyTextError extends Error {
  constructor(public readonly index: number) {
    super(`texts[${index}] has no tokens to embed`);
  }
}
