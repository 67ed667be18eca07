#!/usr/bin/env node
/**
 * Command-line exporter: checkpoint directories in, probe traces and a
 * run manifest out. Exit codes: 0 success, 1 invalid flags or spec,
 * 2 checkpoint export failures (with per-checkpoint diagnostics).
 */
import process from 'node:process';

import yargs from 'yargs';
import { hideBin } from 'yargs/helpers';

import type { ProbeDataSource } from './data.js';
import { ExportSpecError, exportRun, type ExportSpec } from './export.js';

const VERSION = '0.1.0';

function parseSteps(raw: string | undefined): number[] | undefined {
  if (raw === undefined) {
    return undefined;
  }
  const parts = raw.split(',').map(s => s.trim()).filter(s => s.length > 0);
  if (parts.length === 0) {
    throw new ExportSpecError('--steps lists no values');
  }
  return parts.map(s => {
    const v = Number(s);
    if (!Number.isInteger(v) || v < 0) {
      throw new ExportSpecError(`--steps values must be non-negative integers, got '${s}'`);
    }
    return v;
  });
}

export async function main(argv: string[]): Promise<number> {
  const args = await yargs(argv)
    .scriptName('gradprobe-export')
    .usage('$0 --checkpoints <dir...> --head <layer> --out-dir <dir> [options]')
    .option('checkpoints', {
      type: 'string',
      array: true,
      demandOption: true,
      describe: 'checkpoint directories (model.json + weights.bin) in probe order',
    })
    .option('head', {
      type: 'string',
      demandOption: true,
      describe: 'name of the final dense layer whose input defines the features',
    })
    .option('out-dir', {
      type: 'string',
      demandOption: true,
      describe: 'directory for trace files and manifest.json',
    })
    .option('mode', {
      type: 'string',
      choices: ['classification', 'regression'] as const,
      default: 'classification' as const,
    })
    .option('batch-size', {
      type: 'number',
      default: 64,
      describe: 'synthetic probe batch size (default 64)',
    })
    .option('seed', {
      type: 'number',
      default: 0,
      describe: 'synthetic probe batch seed (default 0)',
    })
    .option('data', {
      type: 'string',
      describe:
        'JSON probe batch {"features": [[...]], "labels" | "targets": [...]} replacing the synthetic draw',
    })
    .option('steps', {
      type: 'string',
      describe:
        'comma-separated step numbers, one per checkpoint (default: trailing digits of checkpoint names, else 0..n-1)',
    })
    .option('run-id', {
      type: 'string',
      describe: 'run identifier recorded in the manifest',
    })
    .option('fold-bias', {
      type: 'boolean',
      default: false,
      describe: 'fold the head bias into the weights over an all-ones feature row',
    })
    .option('record-metric', {
      type: 'boolean',
      default: false,
      describe: "record the full model's accuracy (or negative MSE) on the probe batch",
    })
    .option('keep-going', {
      type: 'boolean',
      default: false,
      describe: 'skip checkpoints that fail to export instead of aborting',
    })
    .strict()
    .version(VERSION)
    .help()
    .parseAsync();

  try {
    const data: ProbeDataSource =
      args.data !== undefined
        ? { kind: 'file', path: args.data }
        : { kind: 'gaussian', batchSize: args.batchSize, seed: args.seed };
    const spec: ExportSpec = {
      checkpoints: args.checkpoints,
      headLayer: args.head,
      outDir: args.outDir,
      data,
      mode: args.mode,
      steps: parseSteps(args.steps),
      runId: args.runId,
      foldBias: args.foldBias,
      recordMetric: args.recordMetric,
      keepGoing: args.keepGoing,
    };
    const result = await exportRun(spec);
    for (const diag of result.errors) {
      process.stderr.write(`error: ${diag.checkpoint}: ${diag.message}\n`);
    }
    if (result.written.length > 0) {
      const manifest = result.manifestPath === null ? '' : ' + manifest';
      const skipped =
        result.errors.length > 0 ? ` (${result.errors.length} checkpoint(s) skipped)` : '';
      process.stdout.write(
        `exported run ${result.runId}: ${result.written.length} trace(s)${manifest}` +
          ` -> ${spec.outDir}${skipped}\n`,
      );
    }
    return result.errors.length > 0 ? 2 : 0;
  } catch (err) {
    process.stderr.write(`error: ${(err as Error).message}\n`);
    if (err instanceof ExportSpecError) {
      return 1;
    }
    return typeof (err as NodeJS.ErrnoException).code === 'string' ? 2 : 1;
  }
}

main(hideBin(process.argv)).then(code => {
  process.exitCode = code;
});
