import { describe, expect, it } from 'vitest';

import { RgbImage } from '../src/ppm.js';
import { identityPatchFeatures, parseStubModel } from '../src/stub.js';

function gradientImage(width: number, height: number): RgbImage {
  const pixels = new Uint8Array(width * height * 3);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const p = 3 * (y * width + x);
      pixels[p] = (x * 7) % 256;
      pixels[p + 1] = (y * 11) % 256;
      pixels[p + 2] = (x + y) % 256;
    }
  }
  return { width, height, pixels };
}

describe('identity patch stub', () => {
  it('produces the ViT-style grid: input size over patch size', () => {
    const out = identityPatchFeatures(gradientImage(64, 64), 16);
    expect(out.dims).toEqual([3 * 16 * 16, 4, 4]);
  });

  it('drops partial border patches', () => {
    const out = identityPatchFeatures(gradientImage(10, 7), 4);
    expect(out.dims).toEqual([48, 1, 2]);
  });

  it('stores raw patch pixels scaled to [0, 1]', () => {
    const image = gradientImage(4, 4);
    const out = identityPatchFeatures(image, 2);
    // Feature channel (py=1, px=0, k=1) of grid cell (1, 0) is the green
    // value of pixel (y=3, x=0).
    const c = 3 * (1 * 2 + 0) + 1;
    const value = out.data[(c * 2 + 1) * 2 + 0];
    // float32 storage: ~7 significant digits.
    expect(value).toBeCloseTo(image.pixels[3 * (3 * 4 + 0) + 1] / 255, 6);
  });

  it('is deterministic', () => {
    const a = identityPatchFeatures(gradientImage(16, 16), 4);
    const b = identityPatchFeatures(gradientImage(16, 16), 4);
    expect(Array.from(a.data)).toEqual(Array.from(b.data));
  });

  it('parses stub model ids and rejects everything else', () => {
    expect(parseStubModel('stub-p16')).toBe(16);
    expect(() => parseStubModel('dinov3-vitl16')).toThrow(/weights/);
  });
});
