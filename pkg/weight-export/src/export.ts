/**
 * Checkpoint -> archive conversion and bit-exact verification.
 */

import { createHash } from 'crypto';
import { readFileSync } from 'fs';

import { archiveTensorNames, expectedShape, numel } from './arch.js';
import { readArchive, writeArchive } from './archive.js';
import { checkCoverage, MappingTable } from './mapping.js';
import { asFloat32, parseSafetensors } from './safetensors.js';

export class ExportError extends Error {}

export interface ExportSpec {
  checkpointPath: string;
  mapping: MappingTable;
  outDir: string;
}

function shapesEqual(a: number[], b: number[]): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i]);
}

/** Collect the mapped architecture tensors from a checkpoint, shape-checked. */
function collectTensors(checkpointPath: string, mapping: MappingTable) {
  checkCoverage(mapping);
  const raw = parseSafetensors(readFileSync(checkpointPath));
  const byArchiveName = new Map<string, { shape: number[]; data: Float32Array }>();
  const unmapped: string[] = [];
  for (const [src, dst] of mapping.names) {
    const tensor = raw.get(src);
    if (!tensor) {
      unmapped.push(src);
      continue;
    }
    const want = expectedShape(dst);
    if (!want) {
      throw new ExportError(`mapping targets unknown architecture tensor ${dst}`);
    }
    if (!shapesEqual(tensor.shape, want)) {
      throw new ExportError(
        `${src} -> ${dst}: shape [${tensor.shape}] != expected [${want}]`,
      );
    }
    byArchiveName.set(dst, { shape: tensor.shape, data: asFloat32(tensor) });
  }
  if (unmapped.length) {
    throw new ExportError(`checkpoint lacks mapped tensors: ${unmapped.join(', ')}`);
  }
  return byArchiveName;
}

/** Convert a checkpoint into manifest.json + weights.bin in archive order. */
export function exportArchive(spec: ExportSpec): void {
  const collected = collectTensors(spec.checkpointPath, spec.mapping);
  const ordered = new Map<string, { shape: number[]; data: Float32Array }>();
  for (const name of archiveTensorNames()) {
    ordered.set(name, collected.get(name)!);
  }
  for (const [layer, scales] of spec.mapping.weightScales) {
    ordered.set(`${layer}.w_scale`, {
      shape: [scales.length],
      data: Float32Array.from(scales),
    });
  }
  const digest = createHash('sha256').update(readFileSync(spec.checkpointPath)).digest('hex');
  writeArchive(spec.outDir, ordered, {
    bit_config: 'fp32',
    source_digest: digest,
    tool: 'weight-export',
    created: new Date().toISOString(), // excluded from byte comparisons
  });
}

/** True iff every mapped tensor in the archive matches the checkpoint bit-exactly. */
export function verifyArchive(archiveDir: string, checkpointPath: string,
                              mapping: MappingTable): boolean {
  const fromCheckpoint = collectTensors(checkpointPath, mapping);
  const { tensors } = readArchive(archiveDir);
  for (const [name, expected] of fromCheckpoint) {
    const got = tensors.get(name);
    if (!got || !shapesEqual(got.shape, expected.shape)) return false;
    if (got.data.length !== expected.data.length) return false;
    const a = new Uint8Array(got.data.buffer, got.data.byteOffset, got.data.length * 4);
    const b = new Uint8Array(expected.data.buffer, expected.data.byteOffset, expected.data.length * 4);
    for (let i = 0; i < a.length; i++) {
      if (a[i] !== b[i]) return false;
    }
  }
  return true;
}

export function totalParams(): number {
  return archiveTensorNames().reduce((acc, n) => acc + numel(expectedShape(n)!), 0);
}
