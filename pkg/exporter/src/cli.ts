#!/usr/bin/env node
import yargs from 'yargs';
import { hideBin } from 'yargs/helpers';

import { exportFeatures } from './export.js';

const argv = yargs(hideBin(process.argv))
  .usage('$0 --model stub-p<N> --out <dir> <images...>')
  .option('model', {
    type: 'string',
    default: 'stub-p8',
    describe: 'feature backend; stub-p<N> = identity patches of size N',
  })
  .option('out', { type: 'string', demandOption: true, describe: 'output directory' })
  .demandCommand(1, 'at least one image file is required')
  .strict()
  .parseSync();

try {
  const manifest = exportFeatures(argv._.map(String), argv.model, argv.out);
  console.log(
    `exported ${manifest.entries.length} image(s) to ${argv.out} ` +
      `(${manifest.warnings.length} skipped)`,
  );
  for (const warning of manifest.warnings) {
    console.warn(`skipped ${warning.image}: ${warning.reason}`);
  }
} catch (err) {
  console.error(`ERROR: ${(err as Error).message}`);
  process.exit(1);
}
