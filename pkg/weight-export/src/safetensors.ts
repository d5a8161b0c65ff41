/**
 * Minimal safetensors reader/writer.
 *
 * Layout: 8-byte little-endian header length, a JSON header mapping tensor
 * names to { dtype, shape, data_offsets }, then the raw tensor bytes.
 * Only F32 and F64 tensors are supported here; F64 is narrowed to F32 on
 * read since the archive format stores f32.
 */

export interface TensorView {
  dtype: 'F32' | 'F64';
  shape: number[];
  /** Raw little-endian bytes within the file's data section. */
  data: Uint8Array;
}

export class SafetensorsError extends Error {}

function numel(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

const DTYPE_SIZE: Record<string, number> = { F32: 4, F64: 8 };

export function parseSafetensors(buf: Uint8Array): Map<string, TensorView> {
  if (buf.length < 8) {
    throw new SafetensorsError('file too short for a safetensors header');
  }
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  const headerLen = Number(view.getBigUint64(0, true));
  if (8 + headerLen > buf.length) {
    throw new SafetensorsError('header length exceeds file size');
  }
  let header: Record<string, { dtype: string; shape: number[]; data_offsets: [number, number] }>;
  try {
    header = JSON.parse(new TextDecoder().decode(buf.subarray(8, 8 + headerLen)));
  } catch (err) {
    throw new SafetensorsError(`invalid header JSON: ${err}`);
  }
  const data = buf.subarray(8 + headerLen);
  const tensors = new Map<string, TensorView>();
  for (const [name, meta] of Object.entries(header)) {
    if (name === '__metadata__') continue;
    const size = DTYPE_SIZE[meta.dtype];
    if (size === undefined) {
      throw new SafetensorsError(`tensor ${name}: unsupported dtype ${meta.dtype}`);
    }
    const [start, end] = meta.data_offsets;
    if (end - start !== numel(meta.shape) * size) {
      throw new SafetensorsError(`tensor ${name}: offsets disagree with shape`);
    }
    if (start < 0 || end > data.length) {
      throw new SafetensorsError(`tensor ${name}: offsets outside the data section`);
    }
    tensors.set(name, {
      dtype: meta.dtype as 'F32' | 'F64',
      shape: meta.shape,
      data: data.subarray(start, end),
    });
  }
  return tensors;
}

/** Tensor bytes as float32 (F64 sources are narrowed). */
export function asFloat32(t: TensorView): Float32Array {
  const copy = new Uint8Array(t.data); // force alignment
  if (t.dtype === 'F32') {
    return new Float32Array(copy.buffer, 0, copy.length / 4);
  }
  const doubles = new Float64Array(copy.buffer, 0, copy.length / 8);
  return Float32Array.from(doubles);
}

/** Serialise float32 tensors into a safetensors buffer (test + tooling aid). */
export function writeSafetensors(tensors: Map<string, { shape: number[]; data: Float32Array }>): Uint8Array {
  const header: Record<string, unknown> = {};
  let offset = 0;
  for (const [name, t] of tensors) {
    const bytes = t.data.length * 4;
    header[name] = { dtype: 'F32', shape: t.shape, data_offsets: [offset, offset + bytes] };
    offset += bytes;
  }
  const headerBytes = new TextEncoder().encode(JSON.stringify(header));
  const out = new Uint8Array(8 + headerBytes.length + offset);
  new DataView(out.buffer).setBigUint64(0, BigInt(headerBytes.length), true);
  out.set(headerBytes, 8);
  let cursor = 8 + headerBytes.length;
  for (const [, t] of tensors) {
    out.set(new Uint8Array(t.data.buffer, t.data.byteOffset, t.data.length * 4), cursor);
    cursor += t.data.length * 4;
  }
  return out;
}
