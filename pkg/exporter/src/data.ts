/**
 * Probe batch sources. The batch is drawn (or loaded) once per export
 * and reused for every checkpoint, so traces stay comparable.
 */
import { readFileSync } from 'node:fs';

import type { TraceMode } from './format.js';
import { SeededRng } from './rng.js';

export type ProbeDataSource =
  | { kind: 'gaussian'; batchSize: number; seed: number }
  | { kind: 'file'; path: string };

export interface ProbeBatchData {
  /** Model inputs, one sample per row (B x inputDim). */
  inputs: number[][];
  /** Probe labels in [0, C); classification only. */
  labels?: number[];
  /** Probe targets, one sample per row (B x C); regression only. */
  targets?: number[][];
}

function drawGaussian(
  batchSize: number,
  seed: number,
  inputDim: number,
  mode: TraceMode,
  nOutputs: number,
): ProbeBatchData {
  if (!Number.isInteger(batchSize) || batchSize <= 0) {
    throw new Error(`batch size must be a positive integer, got ${batchSize}`);
  }
  const rng = new SeededRng(seed);
  const inputs = Array.from({ length: batchSize }, () => rng.normals(inputDim));
  if (mode === 'classification') {
    const labels = Array.from({ length: batchSize }, () => rng.int(nOutputs));
    return { inputs, labels };
  }
  const targets = Array.from({ length: batchSize }, () => rng.normals(nOutputs));
  return { inputs, targets };
}

function loadBatchFile(
  path: string,
  inputDim: number,
  mode: TraceMode,
  nOutputs: number,
): ProbeBatchData {
  const doc = JSON.parse(readFileSync(path, 'utf8'));
  const inputs: unknown = doc.features;
  if (!Array.isArray(inputs) || inputs.length === 0) {
    throw new Error(`${path}: "features" must be a non-empty array of rows`);
  }
  for (const [i, row] of inputs.entries()) {
    if (!Array.isArray(row) || row.length !== inputDim) {
      throw new Error(
        `${path}: feature row ${i} has ${Array.isArray(row) ? row.length : 'no'} values, model expects ${inputDim}`,
      );
    }
  }
  const batch: ProbeBatchData = { inputs: inputs as number[][] };
  if (mode === 'classification') {
    const labels: unknown = doc.labels;
    if (!Array.isArray(labels) || labels.length !== inputs.length) {
      throw new Error(`${path}: "labels" must list one label per feature row`);
    }
    for (const [i, v] of labels.entries()) {
      if (!Number.isInteger(v) || v < 0 || v >= nOutputs) {
        throw new Error(`${path}: label ${v} at row ${i} out of range for ${nOutputs} classes`);
      }
    }
    batch.labels = labels as number[];
  } else {
    const targets: unknown = doc.targets;
    if (!Array.isArray(targets) || targets.length !== inputs.length) {
      throw new Error(`${path}: "targets" must list one row per feature row`);
    }
    for (const [i, row] of targets.entries()) {
      if (!Array.isArray(row) || row.length !== nOutputs) {
        throw new Error(`${path}: target row ${i} must hold ${nOutputs} values`);
      }
    }
    batch.targets = targets as number[][];
  }
  return batch;
}

export function drawProbeBatch(
  source: ProbeDataSource,
  inputDim: number,
  mode: TraceMode,
  nOutputs: number,
): ProbeBatchData {
  if (source.kind === 'gaussian') {
    return drawGaussian(source.batchSize, source.seed, inputDim, mode, nOutputs);
  }
  return loadBatchFile(source.path, inputDim, mode, nOutputs);
}
