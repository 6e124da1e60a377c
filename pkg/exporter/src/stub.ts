/**
 * Deterministic stand-in for a real vision backbone: identity patch
 * embedding. The image is cut into p x p patches (partial border patches
 * dropped, ViT-style), and each patch's feature vector is its own raw
 * RGB content scaled to [0, 1]. Channel layout: (patch_row, patch_col,
 * color), row-major. Output grid is floor(H/p) x floor(W/p), matching
 * the input-size / patch-size relation of ViT-family teachers.
 */

import { RgbImage } from './ppm.js';
import { TensorData } from './tensorfile.js';

export function identityPatchFeatures(image: RgbImage, patchSize: number): TensorData {
  if (patchSize < 1) throw new Error(`patch size must be >= 1, got ${patchSize}`);
  const gridH = Math.floor(image.height / patchSize);
  const gridW = Math.floor(image.width / patchSize);
  if (gridH < 1 || gridW < 1) {
    throw new Error(`image ${image.height}x${image.width} smaller than one ${patchSize}px patch`);
  }
  const channels = 3 * patchSize * patchSize;
  const data = new Float32Array(channels * gridH * gridW);
  for (let gy = 0; gy < gridH; gy++) {
    for (let gx = 0; gx < gridW; gx++) {
      for (let py = 0; py < patchSize; py++) {
        for (let px = 0; px < patchSize; px++) {
          const srcY = gy * patchSize + py;
          const srcX = gx * patchSize + px;
          const src = 3 * (srcY * image.width + srcX);
          for (let k = 0; k < 3; k++) {
            const c = 3 * (py * patchSize + px) + k;
            data[(c * gridH + gy) * gridW + gx] = image.pixels[src + k] / 255;
          }
        }
      }
    }
  }
  return { dims: [channels, gridH, gridW], data };
}

export function parseStubModel(modelId: string): number {
  // stub-p<N>: identity patches with patch size N.
  const match = /^stub-p(\d+)$/.exec(modelId);
  if (!match) {
    throw new Error(
      `unknown model ${JSON.stringify(modelId)}: only the stub-p<N> backend ships with the exporter; ` +
        'real backbones require their weights to be installed',
    );
  }
  return parseInt(match[1], 10);
}
