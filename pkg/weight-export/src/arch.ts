/**
 * SuperPoint architecture table: the twelve convolution layers, in archive
 * order, with their expected weight/bias shapes.
 */

export interface LayerShape {
  name: string;
  weight: number[]; // (out, in, k, k)
  bias: number[]; // (out,)
}

export const LAYERS: LayerShape[] = [
  { name: 'conv1a', weight: [64, 1, 3, 3], bias: [64] },
  { name: 'conv1b', weight: [64, 64, 3, 3], bias: [64] },
  { name: 'conv2a', weight: [64, 64, 3, 3], bias: [64] },
  { name: 'conv2b', weight: [64, 64, 3, 3], bias: [64] },
  { name: 'conv3a', weight: [128, 64, 3, 3], bias: [128] },
  { name: 'conv3b', weight: [128, 128, 3, 3], bias: [128] },
  { name: 'conv4a', weight: [128, 128, 3, 3], bias: [128] },
  { name: 'conv4b', weight: [128, 128, 3, 3], bias: [128] },
  { name: 'convPa', weight: [256, 128, 3, 3], bias: [256] },
  { name: 'convPb', weight: [65, 256, 1, 1], bias: [65] },
  { name: 'convDa', weight: [256, 128, 3, 3], bias: [256] },
  { name: 'convDb', weight: [256, 256, 1, 1], bias: [256] },
];

/** Archive tensor names in their canonical order. */
export function archiveTensorNames(): string[] {
  const names: string[] = [];
  for (const layer of LAYERS) {
    names.push(`${layer.name}.weight`, `${layer.name}.bias`);
  }
  return names;
}

export function expectedShape(archiveName: string): number[] | undefined {
  const [layer, kind] = archiveName.split('.');
  const entry = LAYERS.find((l) => l.name === layer);
  if (!entry) return undefined;
  if (kind === 'weight') return entry.weight;
  if (kind === 'bias') return entry.bias;
  return undefined;
}

export function numel(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}
