/**
 * Run manifest JSON: the index the probe CLI reads to find a run's
 * trace files. Field names are snake_case on disk.
 */
import { writeFileSync } from 'node:fs';

import type { TraceMode } from './format.js';

export interface ManifestEntry {
  step: number;
  files: string[];
}

export interface RunManifest {
  runId: string;
  task: TraceMode;
  nClasses: number;
  featureDim: number;
  batchSize: number;
  entries: ManifestEntry[];
  higherIsBetter?: boolean;
  notes?: string;
}

export function manifestToJson(manifest: RunManifest): string {
  let prev: number | null = null;
  for (const entry of manifest.entries) {
    if (!Number.isInteger(entry.step) || entry.step < 0) {
      throw new Error(`manifest step must be a non-negative integer, got ${entry.step}`);
    }
    if (prev !== null && entry.step <= prev) {
      throw new Error(`manifest steps must be strictly increasing: ${entry.step} after ${prev}`);
    }
    if (entry.files.length === 0) {
      throw new Error(`step ${entry.step} lists no trace files`);
    }
    prev = entry.step;
  }
  const doc = {
    run_id: manifest.runId,
    task: manifest.task,
    n_classes: manifest.nClasses,
    feature_dim: manifest.featureDim,
    batch_size: manifest.batchSize,
    higher_is_better: manifest.higherIsBetter ?? true,
    notes: manifest.notes ?? '',
    entries: manifest.entries.map(e => ({ step: e.step, files: e.files })),
  };
  return `${JSON.stringify(doc, null, 2)}\n`;
}

export function writeRunManifest(manifest: RunManifest, path: string): void {
  writeFileSync(path, manifestToJson(manifest));
}
