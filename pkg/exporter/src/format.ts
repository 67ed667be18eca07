/**
 * Binary probe-trace layout: one checkpoint's head weights, detached
 * features, and labels/targets in a little-endian container.
 *
 * Header (44 bytes): magic "HGP1", version u16, mode u8 (0 =
 * classification, 1 = regression), dtype u8 (0 = f32), C u32, d u32,
 * B u32, step u64, metric f64, aux_loss f64. NaN in either f64 slot
 * means "absent". Payload: W as f32 row-major (C x d), Z as f32
 * row-major (d x B), then labels as u32 x B or targets as f32
 * row-major (C x B).
 */
import { readFileSync, writeFileSync } from 'node:fs';

export const TRACE_MAGIC = 'HGP1';
export const TRACE_VERSION = 1;
export const DTYPE_F32 = 0;
export const HEADER_BYTES = 44;

export type TraceMode = 'classification' | 'regression';

const MODE_CODES: Record<TraceMode, number> = { classification: 0, regression: 1 };
const MODE_NAMES: Record<number, TraceMode> = { 0: 'classification', 1: 'regression' };

export class TraceFormatError extends Error {
  readonly code: string;

  constructor(message: string, code = 'format') {
    super(message);
    this.name = new.target.name;
    this.code = code;
  }
}

export class BadMagicError extends TraceFormatError {
  constructor(message: string) {
    super(message, 'bad-magic');
  }
}

export class BadVersionError extends TraceFormatError {
  constructor(message: string) {
    super(message, 'bad-version');
  }
}

export class BadDtypeError extends TraceFormatError {
  constructor(message: string) {
    super(message, 'bad-dtype');
  }
}

export class TruncatedTraceError extends TraceFormatError {
  constructor(message: string) {
    super(message, 'truncated');
  }
}

export class TrailingBytesError extends TraceFormatError {
  constructor(message: string) {
    super(message, 'trailing-bytes');
  }
}

export class LabelRangeError extends TraceFormatError {
  constructor(message: string) {
    super(message, 'label-range');
  }
}

export interface TraceRecord {
  mode: TraceMode;
  /** C: class count (classification) or output dimension (regression). */
  nOutputs: number;
  /** d: feature dimension at the head input. */
  featureDim: number;
  /** B: probe batch size. */
  batchSize: number;
  step: number;
  metric: number | null;
  auxLoss: number | null;
  /** C * d values, row-major. */
  headWeights: ArrayLike<number>;
  /** d * B values, row-major. */
  features: ArrayLike<number>;
  /** B labels in [0, C); classification only. */
  labels?: ArrayLike<number>;
  /** C * B values, row-major; regression only. */
  targets?: ArrayLike<number>;
}

/** A trace decoded from bytes; payloads come back as typed arrays. */
export interface ParsedTrace extends TraceRecord {
  headWeights: Float32Array;
  features: Float32Array;
  labels?: Uint32Array;
  targets?: Float32Array;
}

function checkDim(name: string, value: number): void {
  if (!Number.isInteger(value) || value <= 0 || value >= 2 ** 32) {
    throw new Error(`${name} must be a positive u32, got ${value}`);
  }
}

function checkLength(name: string, values: ArrayLike<number>, expected: number): void {
  if (values.length !== expected) {
    throw new Error(`${name} must hold ${expected} values, got ${values.length}`);
  }
}

function writeF32(buf: Buffer, offset: number, name: string, values: ArrayLike<number>): number {
  for (let i = 0; i < values.length; i++) {
    const v = Number(values[i]);
    if (!Number.isFinite(Math.fround(v))) {
      throw new Error(`${name} contain values outside the f32 storage range`);
    }
    buf.writeFloatLE(v, offset);
    offset += 4;
  }
  return offset;
}

export function traceToBytes(trace: TraceRecord): Buffer {
  const { mode, nOutputs: c, featureDim: d, batchSize: b } = trace;
  if (!(mode in MODE_CODES)) {
    throw new Error(`unknown trace mode ${JSON.stringify(mode)}`);
  }
  checkDim('nOutputs', c);
  checkDim('featureDim', d);
  checkDim('batchSize', b);
  if (!Number.isSafeInteger(trace.step) || trace.step < 0) {
    throw new Error(`step must be a non-negative safe integer, got ${trace.step}`);
  }
  for (const [name, value] of [['metric', trace.metric], ['aux_loss', trace.auxLoss]] as const) {
    if (value !== null && !Number.isFinite(value)) {
      throw new Error(`${name} must be finite or null, got ${value}`);
    }
  }
  checkLength('headWeights', trace.headWeights, c * d);
  checkLength('features', trace.features, d * b);

  const tailBytes = mode === 'classification' ? 4 * b : 4 * c * b;
  const buf = Buffer.alloc(HEADER_BYTES + 4 * c * d + 4 * d * b + tailBytes);
  buf.write(TRACE_MAGIC, 0, 'ascii');
  buf.writeUInt16LE(TRACE_VERSION, 4);
  buf.writeUInt8(MODE_CODES[mode], 6);
  buf.writeUInt8(DTYPE_F32, 7);
  buf.writeUInt32LE(c, 8);
  buf.writeUInt32LE(d, 12);
  buf.writeUInt32LE(b, 16);
  buf.writeBigUInt64LE(BigInt(trace.step), 20);
  buf.writeDoubleLE(trace.metric ?? NaN, 28);
  buf.writeDoubleLE(trace.auxLoss ?? NaN, 36);

  let offset = HEADER_BYTES;
  offset = writeF32(buf, offset, 'head weights', trace.headWeights);
  offset = writeF32(buf, offset, 'features', trace.features);
  if (mode === 'classification') {
    const labels = trace.labels;
    if (!labels) {
      throw new Error('classification traces require labels');
    }
    checkLength('labels', labels, b);
    for (let i = 0; i < labels.length; i++) {
      const v = Number(labels[i]);
      if (!Number.isInteger(v) || v < 0 || v >= c) {
        throw new Error(`label ${v} at position ${i} out of range for ${c} classes`);
      }
      buf.writeUInt32LE(v, offset);
      offset += 4;
    }
  } else {
    const targets = trace.targets;
    if (!targets) {
      throw new Error('regression traces require targets');
    }
    checkLength('targets', targets, c * b);
    writeF32(buf, offset, 'targets', targets);
  }
  return buf;
}

function readF32(buf: Buffer, offset: number, count: number): Float32Array {
  const out = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    out[i] = buf.readFloatLE(offset + 4 * i);
  }
  return out;
}

export function traceFromBytes(data: Buffer): ParsedTrace {
  if (data.length < HEADER_BYTES) {
    throw new TruncatedTraceError(
      `file is ${data.length} bytes, shorter than the ${HEADER_BYTES}-byte header`,
    );
  }
  const magic = data.toString('ascii', 0, 4);
  const version = data.readUInt16LE(4);
  const modeCode = data.readUInt8(6);
  const dtype = data.readUInt8(7);
  const c = data.readUInt32LE(8);
  const d = data.readUInt32LE(12);
  const b = data.readUInt32LE(16);
  const stepBig = data.readBigUInt64LE(20);
  const metric = data.readDoubleLE(28);
  const auxLoss = data.readDoubleLE(36);

  if (magic !== TRACE_MAGIC) {
    throw new BadMagicError(`bad magic ${JSON.stringify(magic)}, expected ${JSON.stringify(TRACE_MAGIC)}`);
  }
  if (version !== TRACE_VERSION) {
    throw new BadVersionError(`unsupported version ${version}, expected ${TRACE_VERSION}`);
  }
  if (dtype !== DTYPE_F32) {
    throw new BadDtypeError(`unsupported dtype code ${dtype}, expected ${DTYPE_F32} (f32)`);
  }
  const mode = MODE_NAMES[modeCode];
  if (mode === undefined) {
    throw new TraceFormatError(`unknown mode code ${modeCode}`);
  }
  const tailBytes = mode === 'classification' ? 4 * b : 4 * c * b;
  const expected = HEADER_BYTES + 4 * c * d + 4 * d * b + tailBytes;
  if (data.length < expected) {
    throw new TruncatedTraceError(
      `payload truncated: file is ${data.length} bytes, layout requires ${expected}`,
    );
  }
  if (data.length > expected) {
    throw new TrailingBytesError(
      `${data.length - expected} trailing bytes after a ${expected}-byte trace`,
    );
  }
  if (stepBig > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new TraceFormatError(`step ${stepBig} exceeds the safe integer range`);
  }

  let offset = HEADER_BYTES;
  const headWeights = readF32(data, offset, c * d);
  offset += 4 * c * d;
  const features = readF32(data, offset, d * b);
  offset += 4 * d * b;
  const record: ParsedTrace = {
    mode,
    nOutputs: c,
    featureDim: d,
    batchSize: b,
    step: Number(stepBig),
    metric: Number.isNaN(metric) ? null : metric,
    auxLoss: Number.isNaN(auxLoss) ? null : auxLoss,
    headWeights,
    features,
  };
  if (mode === 'classification') {
    const labels = new Uint32Array(b);
    for (let i = 0; i < b; i++) {
      labels[i] = data.readUInt32LE(offset + 4 * i);
      if (labels[i] >= c) {
        throw new LabelRangeError(
          `label ${labels[i]} at position ${i} out of range for ${c} classes`,
        );
      }
    }
    record.labels = labels;
  } else {
    record.targets = readF32(data, offset, c * b);
  }
  return record;
}

export function writeTrace(trace: TraceRecord, path: string): void {
  writeFileSync(path, traceToBytes(trace));
}

export function readTrace(path: string): ParsedTrace {
  return traceFromBytes(readFileSync(path));
}
