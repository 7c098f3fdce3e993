/**
 * Express app for the embedding wire contract.
 *
 *   POST /embed   {"texts": [string...], "max_tokens": int}
 *                 -> {"dim": int, "vectors": [[float...]...]}
 *   GET  /health  {"status", "model", "dim", "max_tokens"}
 *
 * Vectors are unit-norm (enforced server-side) and aligned with the
 * request order. Encode calls run through a serial queue so a slow model
 * is never re-entered; HTTP-level parallelism stays intact.
 */

import express, { type Express } from 'express';
import type { Encoder } from './encoder.js';
import { EmptyTextError } from './hashEncoder.js';

export const DEFAULT_MAX_TOKENS = 128;
const UNIT_NORM_TOL = 1e-5;

export function createApp(encoder: Encoder, defaultMaxTokens = DEFAULT_MAX_TOKENS): Express {
  const app = express();
  app.use(express.json({ limit: '32mb' }));

  let encoderReady = false;
  const readiness = encoder
    .ready()
    .then(() => {
      encoderReady = true;
    })
    .catch((err) => {
      console.error(`encoder failed to load: ${err}`);
    });

  let queue: Promise<unknown> = Promise.resolve();
  const enqueue = <T>(job: () => Promise<T>): Promise<T> => {
    const next = queue.then(job, job);
    queue = next.catch(() => {});
    return next;
  };

  app.get('/health', async (_req, res) => {
    await readiness;
    if (!encoderReady) {
      res.status(503).json({ status: 'loading-failed', model: encoder.model });
      return;
    }
    res.json({
      status: 'ok',
      model: encoder.model,
      dim: encoder.dim,
      max_tokens: defaultMaxTokens,
    });
  });

  app.post('/embed', async (req, res) => {
    await readiness;
    if (!encoderReady) {
      res.status(503).json({ error: 'model not ready' });
      return;
    }
    const body = req.body;
    if (!body || !Array.isArray(body.texts) || body.texts.length === 0) {
      res.status(400).json({ error: 'texts must be a non-empty array of strings' });
      return;
    }
    const texts: unknown[] = body.texts;
    for (let i = 0; i < texts.length; i++) {
      if (typeof texts[i] !== 'string' || (texts[i] as string).trim() === '') {
        res.status(400).json({ error: `texts[${i}] is empty`, index: i });
        return;
      }
    }
    const maxTokens = body.max_tokens === undefined ? defaultMaxTokens : body.max_tokens;
    if (!Number.isInteger(maxTokens) || maxTokens < 1) {
      res.status(400).json({ error: 'max_tokens must be a positive integer' });
      return;
    }

    try {
      const vectors = await enqueue(() => encoder.encode(texts as string[], maxTokens));
      res.json({ dim: encoder.dim, vectors: vectors.map(enforceUnitNorm) });
    } catch (err) {
      if (err instanceof EmptyTextError) {
        res.status(400).json({ error: err.message, index: err.index });
        return;
      }
      console.error(`embed failed: ${err}`);
      res.status(500).json({ error: String(err) });
    }
  });

  return app;
}

function enforceUnitNorm(vec: number[]): number[] {
  let sq = 0;
  for (const v of vec) {
    if (!Number.isFinite(v)) {
      throw new Error('encoder produced a non-finite component');
    }
    sq += v * v;
  }
  const norm = Math.sqrt(sq);
  if (norm === 0) {
    throw new Error('encoder produced a zero vector');
  }
  if (Math.abs(norm - 1.0) <= UNIT_NORM_TOL) {
    return vec;
  }
  return vec.map((v) => v / norm);
}
