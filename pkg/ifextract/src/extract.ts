/**
 * Dataset extraction: decode images, rescale, run the backbone, propose
 * regions, and write everything as one engine-loadable dataset directory
 * (tensors/, proposals/, manifest.json, gt/).
 */

import * as fs from 'fs';
import * as path from 'path';
import { Backbone, FeatureMapData } from './backbone';
import { readImage, rescaleShortestSide } from './image';
import { ConvertedGroundTruth, landmarkOf, loadLandmarkGroundTruth } from './oxford';
import { proposeRegions } from './proposals';
import {
  ManifestImageEntry,
  ManifestQueryEntry,
  writeFeatureMap,
  writeGroundTruth,
  writeManifest,
  writeProposals,
} from './tensorStore';

export interface ExtractConfig {
  /** image files (PNG or binary netpbm); ids are basenames minus extension */
  images: string[];
  outDir: string;
  modelId?: string;
  layer?: string;
  /** default: 600 */
  shortestSide?: number;
  /** default: 64 */
  maxProposals?: number;
  /** enables per-proposal class scores and query class indices */
  classNames?: string[];
  /** landmark ground-truth directory to convert alongside extraction */
  gtDir?: string;
  datasetName?: string;
  log?: (line: string) => void;
}

export interface SkippedImage {
  source: string;
  reason: string;
}

export interface ExtractSummary {
  outDir: string;
  manifestPath: string;
  imageIds: string[];
  skipped: SkippedImage[];
  queryIds: string[];
  featureDim: number;
  stride: number;
}

function message(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}

/** Image id for a source path: basename without its extension. */
export function imageIdFor(source: string): string {
  return path.basename(source).replace(/\.[^.]+$/, '');
}

export function extractDataset(cfg: ExtractConfig): ExtractSummary {
  if (!cfg.images.length) {
    throw new RangeError('no input images given');
  }
  const shortestSide = cfg.shortestSide ?? 600;
  if (!Number.isInteger(shortestSide) || shortestSide < 1) {
    throw new RangeError(`shortestSide must be a positive integer, got ${shortestSide}`);
  }
  const log = cfg.log ?? ((line: string) => console.error(line));
  const backbone = new Backbone({ modelId: cfg.modelId, layer: cfg.layer });
  const classNames = cfg.classNames ?? [];
  const outDir = cfg.outDir;
  fs.mkdirSync(path.join(outDir, 'tensors'), { recursive: true });
  fs.mkdirSync(path.join(outDir, 'proposals'), { recursive: true });

  const images: ManifestImageEntry[] = [];
  const skipped: SkippedImage[] = [];
  const scales = new Map<string, number>();
  const sizes = new Map<string, { width: number; height: number }>();

  for (const source of cfg.images) {
    const imageId = imageIdFor(source);
    try {
      if (scales.has(imageId)) {
        throw new Error(`duplicate image id '${imageId}'`);
      }
      const decoded = readImage(source);
      const { image, scale } = rescaleShortestSide(decoded, shortestSide);
      const features: FeatureMapData = backbone.features(image, imageId);
      const proposals = proposeRegions(features, {
        imageWidth: image.width,
        imageHeight: image.height,
        maxProposals: cfg.maxProposals,
        classNames,
        seedKey: `${backbone.modelId}/${backbone.layer}`,
      });
      writeFeatureMap(features, path.join(outDir, 'tensors', `${imageId}.ifsm`));
      writeProposals(proposals, classNames.length, path.join(outDir, 'proposals', `${imageId}.prop`));
      images.push({
        imageId,
        tensor: `tensors/${imageId}.ifsm`,
        proposals: `proposals/${imageId}.prop`,
      });
      scales.set(imageId, scale);
      sizes.set(imageId, { width: image.width, height: image.height });
    } catch (err) {
      skipped.push({ source, reason: message(err) });
      log(`skipping ${source}: ${message(err)}`);
    }
  }
  if (!images.length) {
    throw new Error(`all ${cfg.images.length} input images failed`);
  }
  images.sort((a, b) => (a.imageId < b.imageId ? -1 : a.imageId > b.imageId ? 1 : 0));

  const queries: ManifestQueryEntry[] = [];
  let groundTruth: ConvertedGroundTruth | null = null;
  if (cfg.gtDir) {
    groundTruth = loadLandmarkGroundTruth(cfg.gtDir);
    for (const q of groundTruth.queries) {
      if (!scales.has(q.imageId)) {
        log(`dropping query '${q.queryId}': image '${q.imageId}' was not extracted`);
        continue;
      }
      const scale = scales.get(q.imageId)!;
      const size = sizes.get(q.imageId)!;
      // map the annotated box into the rescaled frame the tensors cover
      const clamp = (v: number, hi: number) => Math.min(Math.max(v, 0), hi);
      const box: [number, number, number, number] = [
        clamp(q.box[0] * scale, size.width),
        clamp(q.box[1] * scale, size.height),
        clamp(q.box[2] * scale, size.width),
        clamp(q.box[3] * scale, size.height),
      ];
      if (box[0] >= box[2] || box[1] >= box[3]) {
        log(`dropping query '${q.queryId}': box collapses after rescale`);
        continue;
      }
      const classIndex = classNames.indexOf(landmarkOf(q.queryId));
      queries.push({
        queryId: q.queryId,
        imageId: q.imageId,
        box,
        ...(classIndex >= 0 ? { classIndex } : {}),
      });
    }
  }

  const manifestPath = path.join(outDir, 'manifest.json');
  writeManifest(
    {
      datasetName: cfg.datasetName ?? path.basename(path.resolve(outDir)),
      featureDim: backbone.channels,
      stride: backbone.stride,
      classNames,
      images,
      queries,
    },
    manifestPath
  );
  if (groundTruth) {
    const kept = new Set(queries.map((q) => q.queryId));
    writeGroundTruth(
      groundTruth.queries
        .filter((q) => kept.has(q.queryId))
        .map((q) => ({ queryId: q.queryId, ...groundTruth!.relevance.get(q.queryId)! })),
      path.join(outDir, 'gt')
    );
  }

  return {
    outDir,
    manifestPath,
    imageIds: images.map((img) => img.imageId),
    skipped,
    queryIds: queries.map((q) => q.queryId),
    featureDim: backbone.channels,
    stride: backbone.stride,
  };
}
