/**
 * Name-mapping tables: checkpoint tensor name -> archive tensor name.
 *
 * A table is a JSON file, either a flat object of name pairs or
 * { "names": {...}, "quant": { "<layer>": { "w_scale": [...] } } }; the
 * optional quant block carries per-channel weight scales for QAT
 * checkpoints and is embedded into the archive as extra tensors.
 */

import { archiveTensorNames } from './arch.js';

export class MappingError extends Error {}

export interface MappingTable {
  /** checkpoint name -> archive name */
  names: Map<string, string>;
  /** archive layer -> per-channel weight scales */
  weightScales: Map<string, number[]>;
}

export function parseMapping(text: string): MappingTable {
  let doc: unknown;
  try {
    doc = JSON.parse(text);
  } catch (err) {
    throw new MappingError(`mapping table is not valid JSON: ${err}`);
  }
  if (typeof doc !== 'object' || doc === null) {
    throw new MappingError('mapping table must be a JSON object');
  }
  const obj = doc as Record<string, unknown>;
  const flat = (obj.names ?? obj) as Record<string, unknown>;
  const names = new Map<string, string>();
  for (const [src, dst] of Object.entries(flat)) {
    if (typeof dst !== 'string') {
      throw new MappingError(`mapping for ${src} must be a string`);
    }
    names.set(src, dst);
  }
  const weightScales = new Map<string, number[]>();
  if (obj.quant && typeof obj.quant === 'object') {
    for (const [layer, q] of Object.entries(obj.quant as Record<string, { w_scale?: number[] }>)) {
      if (q.w_scale) weightScales.set(layer, q.w_scale);
    }
  }
  return { names, weightScales };
}

/** Every architecture tensor must be the target of exactly one mapping. */
export function checkCoverage(table: MappingTable): void {
  const targets = new Set(table.names.values());
  const missing = archiveTensorNames().filter((n) => !targets.has(n));
  if (missing.length) {
    throw new MappingError(`mapping does not cover: ${missing.join(', ')}`);
  }
}
