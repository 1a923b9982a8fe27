#!/usr/bin/env node
/**
 * Command line front-end.
 *
 * Exit codes: 0 everything written; 1 usage; 2 nothing usable was
 * produced; 3 partial success (some images skipped, dataset written).
 */

import * as fs from 'fs';
import * as path from 'path';
import yargs from 'yargs';
import { extractDataset } from './extract';
import { loadLandmarkGroundTruth } from './oxford';
import { writeGroundTruth } from './tensorStore';

const IMAGE_EXTENSIONS = new Set(['.png', '.ppm', '.pgm', '.pnm']);

function collectImages(files: string[], dir?: string): string[] {
  const images = [...files];
  if (dir) {
    const listed = fs
      .readdirSync(dir)
      .filter((name) => IMAGE_EXTENSIONS.has(path.extname(name).toLowerCase()))
      .sort()
      .map((name) => path.join(dir, name));
    images.push(...listed);
  }
  return images;
}

export function main(argv: string[]): number {
  let code = 0;
  const parser = yargs(argv)
    .scriptName('ifextract')
    .strict()
    .exitProcess(false)
    .fail((msg, err) => {
      console.error(msg ?? err?.message ?? 'unknown error');
      code = 1;
    })
    .command(
      'extract',
      'run the backbone over images and write an engine dataset',
      (cmd) =>
        cmd
          .option('images', { type: 'array', string: true, default: [] as string[], describe: 'image files' })
          .option('image-dir', { type: 'string', describe: 'directory scanned for images' })
          .option('out', { type: 'string', demandOption: true, describe: 'dataset directory to write' })
          .option('model', { type: 'string', describe: 'model identifier seeding the weights' })
          .option('layer', { type: 'string', describe: 'export layer (conv5 or conv5_3)' })
          .option('shortest-side', { type: 'number', default: 600 })
          .option('max-proposals', { type: 'number', default: 64 })
          .option('classes', { type: 'array', string: true, describe: 'class names enabling score export' })
          .option('gt-dir', { type: 'string', describe: 'landmark ground-truth directory to convert' })
          .option('dataset-name', { type: 'string' }),
      (args) => {
        const images = collectImages(args.images as string[], args['image-dir']);
        try {
          const summary = extractDataset({
            images,
            outDir: args.out,
            modelId: args.model,
            layer: args.layer,
            shortestSide: args['shortest-side'],
            maxProposals: args['max-proposals'],
            classNames: args.classes as string[] | undefined,
            gtDir: args['gt-dir'],
            datasetName: args['dataset-name'],
          });
          console.log(
            `wrote ${summary.imageIds.length} images, ${summary.queryIds.length} queries ` +
              `(${summary.featureDim} channels, stride ${summary.stride}) to ${summary.outDir}`
          );
          if (summary.skipped.length) {
            console.error(`${summary.skipped.length} of ${images.length} images skipped`);
            code = 3;
          }
        } catch (err) {
          console.error((err as Error).message);
          code = err instanceof RangeError ? 1 : 2;
        }
      }
    )
    .command(
      'convert-gt',
      'convert landmark relevance lists without extracting images',
      (cmd) =>
        cmd
          .option('gt-dir', { type: 'string', demandOption: true })
          .option('out', { type: 'string', demandOption: true, describe: 'directory for the converted lists' }),
      (args) => {
        try {
          const gt = loadLandmarkGroundTruth(args['gt-dir']);
          writeGroundTruth(
            gt.queries.map((q) => ({ queryId: q.queryId, ...gt.relevance.get(q.queryId)! })),
            args.out
          );
          console.log(`converted ${gt.queries.length} queries to ${args.out}`);
        } catch (err) {
          console.error((err as Error).message);
          code = 2;
        }
      }
    )
    .demandCommand(1, 'specify a command (extract or convert-gt)');
  parser.parseSync();
  return code;
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
