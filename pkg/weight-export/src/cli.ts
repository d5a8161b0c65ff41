#!/usr/bin/env node
/**
 * weight-export: SuperPoint checkpoint (safetensors) -> qsp weight archive.
 *
 * Usage:
 *   weight-export export --checkpoint model.safetensors --map maps/superpoint-magicleap.json --out archive/
 *   weight-export verify --archive archive/ --checkpoint model.safetensors --map maps/superpoint-magicleap.json
 *
 * Exit codes: 0 ok / verified, 1 usage, 2 io or conversion failure,
 * 3 verification mismatch.
 */

import { readFileSync } from 'fs';

import { exportArchive, verifyArchive } from './export.js';
import { parseMapping } from './mapping.js';

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    const value = argv[i + 1];
    if (!key?.startsWith('--') || value === undefined) {
      throw new UsageError(`bad argument pair: ${key} ${value ?? ''}`);
    }
    flags.set(key.slice(2), value);
  }
  return flags;
}

class UsageError extends Error {}

function need(flags: Map<string, string>, name: string): string {
  const v = flags.get(name);
  if (!v) throw new UsageError(`missing required flag --${name}`);
  return v;
}

function main(argv: string[]): number {
  const [command, ...rest] = argv;
  try {
    const flags = parseFlags(rest);
    if (command === 'export') {
      const mapping = parseMapping(readFileSync(need(flags, 'map'), 'utf-8'));
      exportArchive({
        checkpointPath: need(flags, 'checkpoint'),
        mapping,
        outDir: need(flags, 'out'),
      });
      console.log(`exported archive -> ${flags.get('out')}`);
      return 0;
    }
    if (command === 'verify') {
      const mapping = parseMapping(readFileSync(need(flags, 'map'), 'utf-8'));
      const ok = verifyArchive(need(flags, 'archive'), need(flags, 'checkpoint'), mapping);
      console.log(ok ? 'verify: OK (bit-exact)' : 'verify: MISMATCH');
      return ok ? 0 : 3;
    }
    throw new UsageError(`unknown command ${command ?? '(none)'}; use export|verify`);
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(`weight-export: ${err.message}`);
      return 1;
    }
    console.error(`weight-export: ${err instanceof Error ? err.message : err}`);
    return 2;
  }
}

process.exit(main(process.argv.slice(2)));
