/**
 * Weight-archive writer/reader: `manifest.json` + `weights.bin`.
 *
 * The manifest lists (name, shape, dtype, byte_offset, byte_length) per
 * tensor; the blob is little-endian packed f32 data, tensors in insertion
 * order.  This is the exact on-disk format the Python package loads.
 */

import { mkdirSync, readFileSync, writeFileSync } from 'fs';
import { join } from 'path';

export const MANIFEST_VERSION = 1;

export class ArchiveError extends Error {}

export interface ManifestEntry {
  name: string;
  shape: number[];
  dtype: 'f32' | 'i32';
  byte_offset: number;
  byte_length: number;
}

export interface Manifest {
  version: number;
  metadata: Record<string, unknown>;
  tensors: ManifestEntry[];
}

export function writeArchive(
  outDir: string,
  tensors: Map<string, { shape: number[]; data: Float32Array }>,
  metadata: Record<string, unknown> = {},
): Manifest {
  mkdirSync(outDir, { recursive: true });
  const entries: ManifestEntry[] = [];
  const chunks: Uint8Array[] = [];
  let offset = 0;
  for (const [name, t] of tensors) {
    const bytes = new Uint8Array(t.data.buffer.slice(t.data.byteOffset, t.data.byteOffset + t.data.length * 4));
    entries.push({
      name,
      shape: t.shape,
      dtype: 'f32',
      byte_offset: offset,
      byte_length: bytes.length,
    });
    chunks.push(bytes);
    offset += bytes.length;
  }
  const blob = new Uint8Array(offset);
  let cursor = 0;
  for (const chunk of chunks) {
    blob.set(chunk, cursor);
    cursor += chunk.length;
  }
  const manifest: Manifest = { version: MANIFEST_VERSION, metadata, tensors: entries };
  writeFileSync(join(outDir, 'weights.bin'), blob);
  writeFileSync(join(outDir, 'manifest.json'), JSON.stringify(manifest, null, 1));
  return manifest;
}

export function readArchive(dir: string): {
  manifest: Manifest;
  tensors: Map<string, { shape: number[]; data: Float32Array }>;
} {
  let manifest: Manifest;
  let blob: Uint8Array;
  try {
    manifest = JSON.parse(readFileSync(join(dir, 'manifest.json'), 'utf-8'));
    blob = readFileSync(join(dir, 'weights.bin'));
  } catch (err) {
    throw new ArchiveError(`cannot read archive at ${dir}: ${err}`);
  }
  if (manifest.version !== MANIFEST_VERSION) {
    throw new ArchiveError(`unsupported archive version ${manifest.version}`);
  }
  const tensors = new Map<string, { shape: number[]; data: Float32Array }>();
  for (const entry of manifest.tensors) {
    if (entry.dtype !== 'f32') {
      throw new ArchiveError(`tensor ${entry.name}: reader only handles f32`);
    }
    const count = entry.byte_length / 4;
    const expected = entry.shape.reduce((a, b) => a * b, 1);
    if (count !== expected) {
      throw new ArchiveError(`tensor ${entry.name}: byte length disagrees with shape`);
    }
    if (entry.byte_offset < 0 || entry.byte_offset + entry.byte_length > blob.length) {
      throw new ArchiveError(`tensor ${entry.name}: range outside the blob`);
    }
    // copy out of the (possibly pooled) read buffer into a fresh aligned one
    const bytes = new Uint8Array(entry.byte_length);
    bytes.set(blob.subarray(entry.byte_offset, entry.byte_offset + entry.byte_length));
    tensors.set(entry.name, {
      shape: entry.shape,
      data: new Float32Array(bytes.buffer, 0, count),
    });
  }
  return { manifest, tensors };
}
