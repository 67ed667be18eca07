import { mkdtempSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';

import * as tf from '@tensorflow/tfjs';

import { saveCheckpoint } from '../src/checkpoint.js';
import { SeededRng } from '../src/rng.js';

export const INPUT_DIM = 8;
export const HIDDEN = 6;
export const CLASSES = 3;

export function tmpDir(prefix: string): string {
  return mkdtempSync(join(tmpdir(), prefix));
}

/** Two dense layers: a relu trunk and an affine head named 'head'. */
export function buildToyModel(
  seed: number,
  opts: { classes?: number; withSquash?: boolean } = {},
): tf.LayersModel {
  const classes = opts.classes ?? CLASSES;
  const input = tf.input({ shape: [INPUT_DIM] });
  const trunk = tf.layers
    .dense({ units: HIDDEN, activation: 'relu', name: 'trunk' })
    .apply(input);
  let out = tf.layers.dense({ units: classes, name: 'head' }).apply(trunk);
  if (opts.withSquash === true) {
    out = tf.layers.activation({ activation: 'softmax', name: 'squash' }).apply(out);
  }
  const model = tf.model({ inputs: input, outputs: out as tf.SymbolicTensor });
  seedWeights(model, seed);
  return model;
}

/** Overwrite every weight with scaled seeded normal draws. */
export function seedWeights(model: tf.LayersModel, seed: number): void {
  const rng = new SeededRng(seed);
  const replacement = model.getWeights().map(w => {
    const size = w.shape.reduce((a, b) => a * b, 1);
    return tf.tensor(rng.normals(size).map(v => v * 0.5), w.shape);
  });
  model.setWeights(replacement);
  for (const t of replacement) {
    t.dispose();
  }
}

/** Save a short row of seeded checkpoints named ck-000000, ck-000010, ... */
export async function makeCheckpointRow(
  baseDir: string,
  seeds: number[],
  opts: { classes?: number; stepStride?: number } = {},
): Promise<string[]> {
  const stride = opts.stepStride ?? 10;
  const dirs: string[] = [];
  for (const [i, seed] of seeds.entries()) {
    const dir = join(baseDir, `ck-${String(i * stride).padStart(6, '0')}`);
    const model = buildToyModel(seed, { classes: opts.classes });
    await saveCheckpoint(model, dir);
    model.dispose();
    dirs.push(dir);
  }
  return dirs;
}
