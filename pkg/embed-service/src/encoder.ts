/**
 * Encoder interface and the transformer-backed implementation.
 *
 * EMBED_MODEL selects the encoder: unset or "hash" uses the deterministic
 * hashed n-gram encoder; any other value is treated as a transformers.js
 * model id or local path (requires the optional @huggingface/transformers
 * install). Transformer outputs are mean-pooled and L2-normalized; unit
 * norm is enforced server-side either way.
 */

import { HashEncoder } from './hashEncoder.js';

export interface Encoder {
  readonly model: string;
  readonly dim: number;
  ready(): Promise<void>;
  encode(texts: string[], maxTokens: number): Promise<number[][]>;
}

export class TransformersEncoder implements Encoder {
  readonly model: string;
  dim = 0;
  private pipe: any = null;
  private loading: Promise<void> | null = null;

  constructor(model: string) {
    this.model = model;
  }

  ready(): Promise<void> {
    if (this.loading === null) {
      this.loading = this.load();
    }
    return this.loading;
  }

  private async load(): Promise<void> {
    // non-literal specifier: the dependency is optional and ships no types here
    const moduleName = '@huggingface/transformers';
    let transformers: any;
    try {
      transformers = await import(moduleName);
    } catch (err) {
      throw new Error(
        `EMBED_MODEL=${this.model} needs the optional dependency ` +
          `${moduleName} (npm install ${moduleName}): ${err}`,
      );
    }
    this.pipe = await transformers.pipeline('feature-extraction', this.model);
    const probe = await this.pipe('int main(void) { return 0; }', {
      pooling: 'mean',
      normalize: true,
    });
    this.dim = probe.dims[probe.dims.length - 1];
  }

  async encode(texts: string[], maxTokens: number): Promise<number[][]> {
    if (this.pipe === null) {
      await this.ready();
    }
    const out = await this.pipe(texts, {
      pooling: 'mean',
      normalize: true,
      truncation: true,
      max_length: maxTokens,
    });
    const [n, dim] = [out.dims[0], out.dims[out.dims.length - 1]];
    const data: Float32Array = out.data;
    const vectors: number[][] = [];
    for (let i = 0; i < n; i++) {
      vectors.push(Array.from(data.subarray(i * dim, (i + 1) * dim)));
    }
    return vectors;
  }
}

export function createEncoder(env: NodeJS.ProcessEnv = process.env): Encoder {
  const model = env.EMBED_MODEL ?? 'hash';
  if (model === 'hash') {
    const dim = env.EMBED_DIM ? parseInt(env.EMBED_DIM, 10) : 768;
    return new HashEncoder(dim);
  }
  return new TransformersEncoder(model);
}
