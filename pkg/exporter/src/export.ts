/**
 * Walks a row of checkpoints, runs the backbone forward on one fixed
 * probe batch, and writes each head snapshot as a binary trace plus a
 * run manifest. Only raw tensors are exported — features are captured
 * detached at the head input, and no gradient is ever computed here.
 */
import { mkdirSync } from 'node:fs';
import { basename, join } from 'node:path';

import * as tf from '@tensorflow/tfjs';

import { loadCheckpoint } from './checkpoint.js';
import { drawProbeBatch, type ProbeBatchData, type ProbeDataSource } from './data.js';
import { writeTrace, type TraceMode, type TraceRecord } from './format.js';
import { writeRunManifest, type ManifestEntry } from './manifest.js';

/** Invalid export configuration (distinct from per-checkpoint failures). */
export class ExportSpecError extends Error {
  constructor(message: string) {
    super(message);
    this.name = 'ExportSpecError';
  }
}

export interface ExportSpec {
  /** Checkpoint directories (model.json + weights.bin), probe order. */
  checkpoints: string[];
  /** Name of the final dense layer whose input defines the features. */
  headLayer: string;
  outDir: string;
  data: ProbeDataSource;
  mode?: TraceMode;
  /** Step numbers, one per checkpoint; default: trailing digits of the
   * checkpoint names when they increase, else 0..n-1. */
  steps?: number[];
  runId?: string;
  /** Append the head bias as an extra weight column over an all-ones
   * feature row instead of dropping it (off by default). */
  foldBias?: boolean;
  /** Record the full model's accuracy (classification) or negative MSE
   * (regression) on the probe batch as the trace metric. */
  recordMetric?: boolean;
  /** Skip checkpoints that fail instead of aborting the run. */
  keepGoing?: boolean;
}

export interface CheckpointDiagnostic {
  checkpoint: string;
  message: string;
}

export interface WrittenTrace {
  checkpoint: string;
  step: number;
  file: string;
}

export interface ExportResult {
  written: WrittenTrace[];
  errors: CheckpointDiagnostic[];
  manifestPath: string | null;
  runId: string;
}

interface ResolvedHead {
  layer: tf.layers.Layer;
  /** Output count C of the affine head. */
  c: number;
  /** Input feature dimension d of the affine head. */
  d: number;
}

function resolveHead(model: tf.LayersModel, name: string): ResolvedHead {
  const layer = model.layers.find(l => l.name === name);
  if (layer === undefined) {
    const names = model.layers.map(l => l.name).join(', ');
    throw new Error(`head layer '${name}' not found; model layers: ${names}`);
  }
  if (layer.getClassName() !== 'Dense') {
    throw new Error(
      `head layer '${name}' is ${layer.getClassName()}, expected a Dense (affine) layer`,
    );
  }
  const kernel = layer.getWeights()[0];
  if (kernel === undefined || kernel.shape.length !== 2) {
    throw new Error(`head layer '${name}' has no rank-2 kernel`);
  }
  return { layer, d: kernel.shape[0], c: kernel.shape[1] };
}

function ensureIncreasing(steps: number[], what: string): void {
  for (let i = 1; i < steps.length; i++) {
    if (steps[i] <= steps[i - 1]) {
      throw new ExportSpecError(
        `${what} must be strictly increasing: ${steps[i]} after ${steps[i - 1]}`,
      );
    }
  }
}

function resolveSteps(checkpoints: string[], explicit?: number[]): number[] {
  if (explicit !== undefined) {
    if (explicit.length !== checkpoints.length) {
      throw new ExportSpecError(
        `steps list ${explicit.length} value(s) for ${checkpoints.length} checkpoint(s)`,
      );
    }
    ensureIncreasing(explicit, 'steps');
    return explicit;
  }
  const parsed = checkpoints.map(p => {
    const m = basename(p.replace(/[\\/]+$/, '')).match(/(\d+)$/);
    return m === null ? null : Number(m[1]);
  });
  if (parsed.every(v => v !== null)) {
    const vals = parsed as number[];
    if (vals.every((v, i) => i === 0 || v > vals[i - 1])) {
      return vals;
    }
  }
  return checkpoints.map((_, i) => i);
}

async function captureFeatures(
  model: tf.LayersModel,
  head: ResolvedHead,
  inputs: tf.Tensor2D,
): Promise<Float32Array> {
  const extractor = tf.model({
    inputs: model.inputs,
    outputs: head.layer.input as tf.SymbolicTensor,
  });
  const zT = extractor.predict(inputs) as tf.Tensor;
  try {
    if (zT.rank !== 2) {
      throw new Error(
        `head input has rank ${zT.rank}, expected a rank-2 (batch x features) tensor`,
      );
    }
    return (await zT.data()) as Float32Array;
  } finally {
    zT.dispose();
  }
}

async function batchMetric(
  model: tf.LayersModel,
  inputs: tf.Tensor2D,
  batch: ProbeBatchData,
  mode: TraceMode,
): Promise<number> {
  const predsT = model.predict(inputs) as tf.Tensor2D;
  const [b, c] = predsT.shape;
  const preds = await predsT.data();
  predsT.dispose();
  if (mode === 'classification') {
    const labels = batch.labels!;
    let hits = 0;
    for (let i = 0; i < b; i++) {
      let best = 0;
      for (let ci = 1; ci < c; ci++) {
        if (preds[i * c + ci] > preds[i * c + best]) {
          best = ci;
        }
      }
      if (best === labels[i]) {
        hits += 1;
      }
    }
    return hits / b;
  }
  const targets = batch.targets!;
  let sq = 0;
  for (let i = 0; i < b; i++) {
    for (let ci = 0; ci < c; ci++) {
      const e = preds[i * c + ci] - targets[i][ci];
      sq += e * e;
    }
  }
  return -(sq / (b * c));
}

async function buildTrace(
  model: tf.LayersModel,
  head: ResolvedHead,
  mode: TraceMode,
  batch: ProbeBatchData,
  inputs: tf.Tensor2D,
  step: number,
  spec: ExportSpec,
): Promise<TraceRecord> {
  const { c, d } = head;
  const b = inputs.shape[0];
  const foldBias = spec.foldBias ?? false;
  const dEff = foldBias ? d + 1 : d;

  const zRows = await captureFeatures(model, head, inputs); // B x d row-major
  const weights = head.layer.getWeights();
  const kernel = await weights[0].data(); // d x C row-major
  const bias = weights.length > 1 ? await weights[1].data() : null;

  const w = new Float64Array(c * dEff);
  for (let ci = 0; ci < c; ci++) {
    for (let j = 0; j < d; j++) {
      w[ci * dEff + j] = kernel[j * c + ci];
    }
    if (foldBias) {
      w[ci * dEff + d] = bias === null ? 0 : bias[ci];
    }
  }
  const z = new Float64Array(dEff * b);
  for (let j = 0; j < d; j++) {
    for (let i = 0; i < b; i++) {
      z[j * b + i] = zRows[i * d + j];
    }
  }
  if (foldBias) {
    for (let i = 0; i < b; i++) {
      z[d * b + i] = 1;
    }
  }

  const metric = spec.recordMetric ? await batchMetric(model, inputs, batch, mode) : null;
  const record: TraceRecord = {
    mode,
    nOutputs: c,
    featureDim: dEff,
    batchSize: b,
    step,
    metric,
    auxLoss: null,
    headWeights: w,
    features: z,
  };
  if (mode === 'classification') {
    record.labels = batch.labels!;
  } else {
    const targets = batch.targets!;
    const flat = new Float64Array(c * b); // C x B row-major from B x C rows
    for (let i = 0; i < b; i++) {
      for (let ci = 0; ci < c; ci++) {
        flat[ci * b + i] = targets[i][ci];
      }
    }
    record.targets = flat;
  }
  return record;
}

export async function exportRun(spec: ExportSpec): Promise<ExportResult> {
  if (spec.checkpoints.length === 0) {
    throw new ExportSpecError('no checkpoints given');
  }
  const mode = spec.mode ?? 'classification';
  if (mode !== 'classification' && mode !== 'regression') {
    throw new ExportSpecError(`unknown mode ${JSON.stringify(mode)}`);
  }
  if (spec.data.kind === 'gaussian') {
    const { batchSize, seed } = spec.data;
    if (!Number.isInteger(batchSize) || batchSize <= 0) {
      throw new ExportSpecError(`batch size must be a positive integer, got ${batchSize}`);
    }
    if (!Number.isInteger(seed) || seed < 0) {
      throw new ExportSpecError(`seed must be a non-negative integer, got ${seed}`);
    }
  }
  const steps = resolveSteps(spec.checkpoints, spec.steps);
  mkdirSync(spec.outDir, { recursive: true });

  const written: WrittenTrace[] = [];
  const errors: CheckpointDiagnostic[] = [];
  const entries: ManifestEntry[] = [];
  let batch: ProbeBatchData | null = null;
  let inputs: tf.Tensor2D | null = null;
  let headShape: { c: number; d: number } | null = null;
  let runId = spec.runId ?? '';

  try {
    for (let i = 0; i < spec.checkpoints.length; i++) {
      const ckpt = spec.checkpoints[i];
      let model: tf.LayersModel | null = null;
      try {
        model = await loadCheckpoint(ckpt);
        const head = resolveHead(model, spec.headLayer);
        if (headShape === null) {
          const inShape = model.inputs[0].shape;
          if (model.inputs.length !== 1 || inShape.length !== 2 || inShape[1] == null) {
            throw new Error(
              `model input must be a single rank-2 tensor, got shape [${inShape.join(', ')}]`,
            );
          }
          headShape = { c: head.c, d: head.d };
          batch = drawProbeBatch(spec.data, inShape[1] as number, mode, head.c);
          inputs = tf.tensor2d(batch.inputs);
          if (runId === '') {
            const tag = mode === 'classification' ? 'clf' : 'reg';
            runId = `export-${tag}-c${head.c}d${head.d}-b${batch.inputs.length}`;
          }
        } else if (head.c !== headShape.c || head.d !== headShape.d) {
          throw new Error(
            `head shape ${head.c} x ${head.d} differs from ` +
              `${headShape.c} x ${headShape.d} in the first checkpoint`,
          );
        }
        const trace = await buildTrace(model, head, mode, batch!, inputs!, steps[i], spec);
        const file = `step-${String(steps[i]).padStart(6, '0')}.bin`;
        writeTrace(trace, join(spec.outDir, file));
        written.push({ checkpoint: ckpt, step: steps[i], file });
        entries.push({ step: steps[i], files: [file] });
      } catch (err) {
        errors.push({ checkpoint: ckpt, message: (err as Error).message });
        if (spec.keepGoing !== true) {
          break;
        }
      } finally {
        model?.dispose();
      }
    }
  } finally {
    inputs?.dispose();
  }

  let manifestPath: string | null = null;
  if (written.length > 0 && (errors.length === 0 || spec.keepGoing === true)) {
    const featureDim = spec.foldBias === true ? headShape!.d + 1 : headShape!.d;
    const path = join(spec.outDir, 'manifest.json');
    writeRunManifest(
      {
        runId,
        task: mode,
        nClasses: headShape!.c,
        featureDim,
        batchSize: batch!.inputs.length,
        entries,
      },
      path,
    );
    manifestPath = path;
  }
  return { written, errors, manifestPath, runId };
}
