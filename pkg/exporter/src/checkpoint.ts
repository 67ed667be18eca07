/**
 * Checkpoint storage as plain files (model.json + weights.bin), so no
 * native bindings are needed to save or load a layers model.
 */
import { mkdirSync, readFileSync, writeFileSync } from 'node:fs';
import { join } from 'node:path';

import * as tf from '@tensorflow/tfjs';

export async function saveCheckpoint(model: tf.LayersModel, dir: string): Promise<void> {
  mkdirSync(dir, { recursive: true });
  await model.save(
    tf.io.withSaveHandler(async artifacts => {
      const parts = Array.isArray(artifacts.weightData)
        ? artifacts.weightData
        : [artifacts.weightData];
      if (parts.some(p => p === undefined)) {
        throw new Error('model save produced no weight data');
      }
      writeFileSync(
        join(dir, 'model.json'),
        JSON.stringify({
          modelTopology: artifacts.modelTopology,
          weightSpecs: artifacts.weightSpecs,
        }),
      );
      writeFileSync(join(dir, 'weights.bin'), Buffer.concat(parts.map(p => Buffer.from(p!))));
      return {
        modelArtifactsInfo: { dateSaved: new Date(), modelTopologyType: 'JSON' },
      };
    }),
  );
}

export async function loadCheckpoint(dir: string): Promise<tf.LayersModel> {
  const doc = JSON.parse(readFileSync(join(dir, 'model.json'), 'utf8'));
  const raw = readFileSync(join(dir, 'weights.bin'));
  const weightData = raw.buffer.slice(raw.byteOffset, raw.byteOffset + raw.byteLength);
  return tf.loadLayersModel(
    tf.io.fromMemory({
      modelTopology: doc.modelTopology,
      weightSpecs: doc.weightSpecs,
      weightData,
    }),
  );
}
