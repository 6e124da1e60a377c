/**
 * Batch feature export: one VFMT tensor file per decodable image, plus a
 * manifest written last as the commit marker.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';

import { decodePpm } from './ppm.js';
import { identityPatchFeatures, parseStubModel } from './stub.js';
import { encodeTensor } from './tensorfile.js';

export const MANIFEST_VERSION = 1;

export interface ManifestEntry {
  image: string;
  output: string;
  dims: number[];
}

export interface ManifestWarning {
  image: string;
  reason: string;
}

export interface ExportManifest {
  format_version: number;
  model: string;
  patch_size: number;
  preprocessing: string;
  entries: ManifestEntry[];
  warnings: ManifestWarning[];
}

export function exportFeatures(images: string[], modelId: string, outDir: string): ExportManifest {
  const patchSize = parseStubModel(modelId); // fatal for non-stub models
  fs.mkdirSync(outDir, { recursive: true });
  const entries: ManifestEntry[] = [];
  const warnings: ManifestWarning[] = [];
  for (const imagePath of images) {
    let tensor;
    try {
      const image = decodePpm(fs.readFileSync(imagePath));
      tensor = identityPatchFeatures(image, patchSize);
    } catch (err) {
      warnings.push({ image: imagePath, reason: (err as Error).message });
      continue;
    }
    const stem = path.basename(imagePath).replace(/\.[^.]*$/, '');
    const output = path.join(outDir, `${stem}.vfmt`);
    fs.writeFileSync(output, encodeTensor(tensor.dims, tensor.data));
    entries.push({ image: imagePath, output, dims: tensor.dims });
  }
  const manifest: ExportManifest = {
    format_version: MANIFEST_VERSION,
    model: modelId,
    patch_size: patchSize,
    preprocessing: 'rgb / 255, no resize; border pixels beyond the patch grid dropped',
    entries,
    warnings,
  };
  fs.writeFileSync(path.join(outDir, 'manifest.json'), JSON.stringify(manifest, null, 2) + '\n');
  return manifest;
}
