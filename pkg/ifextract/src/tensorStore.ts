/**
 * Writers for the search engine's interchange files: IFSM activation
 * tensors, binary proposal tables, the dataset manifest and relevance
 * lists.  Layouts are little-endian and byte-stable; the engine's own
 * readers are the source of truth for every offset here.
 */

import * as fs from 'fs';
import * as path from 'path';
import { FeatureMapData } from './backbone';
import { ProposalData } from './proposals';

export const TENSOR_MAGIC = 'IFSM';
export const TENSOR_VERSION = 1;
const DTYPE_FLOAT32 = 0;
/** magic(4) + version(2) + dtype(1) + five u32 fields */
const HEADER_BYTES = 27;

const FLAG_CLASS_SCORES = 0x1;
/** coords(16) + objectness(4) + flags(2) */
const PROPOSAL_FIXED_BYTES = 22;

export function encodeFeatureMap(fmap: FeatureMapData): Buffer {
  const count = fmap.channels * fmap.height * fmap.width;
  if (fmap.data.length !== count) {
    throw new RangeError(
      `tensor '${fmap.imageId}': data has ${fmap.data.length} values, ` +
        `shape needs ${count}`
    );
  }
  for (let i = 0; i < count; i++) {
    if (!Number.isFinite(fmap.data[i])) {
      throw new RangeError(`tensor '${fmap.imageId}': non-finite activation at ${i}`);
    }
  }
  const id = Buffer.from(fmap.imageId, 'utf8');
  const buf = Buffer.alloc(HEADER_BYTES + id.length + 4 * count);
  buf.write(TENSOR_MAGIC, 0, 'latin1');
  buf.writeUInt16LE(TENSOR_VERSION, 4);
  buf.writeUInt8(DTYPE_FLOAT32, 6);
  buf.writeUInt32LE(fmap.channels, 7);
  buf.writeUInt32LE(fmap.height, 11);
  buf.writeUInt32LE(fmap.width, 15);
  buf.writeUInt32LE(fmap.stride, 19);
  buf.writeUInt32LE(id.length, 23);
  id.copy(buf, HEADER_BYTES);
  let offset = HEADER_BYTES + id.length;
  for (let i = 0; i < count; i++, offset += 4) {
    buf.writeFloatLE(fmap.data[i], offset);
  }
  return buf;
}

export function writeFeatureMap(fmap: FeatureMapData, file: string): void {
  fs.writeFileSync(file, encodeFeatureMap(fmap));
}

export function encodeProposals(proposals: ProposalData[], classCount: number): Buffer {
  let size = 4;
  for (const p of proposals) {
    size += PROPOSAL_FIXED_BYTES + (p.classScores ? 4 * classCount : 0);
  }
  const buf = Buffer.alloc(size);
  buf.writeUInt32LE(proposals.length, 0);
  let offset = 4;
  proposals.forEach((p, i) => {
    const [x0, y0, x1, y1] = p.box;
    if (!(x0 >= 0 && y0 >= 0 && x0 < x1 && y0 < y1)) {
      throw new RangeError(`proposal ${i}: degenerate box [${p.box.join(', ')}]`);
    }
    if (p.objectness !== undefined && !(p.objectness >= 0 && p.objectness <= 1)) {
      throw new RangeError(`proposal ${i}: objectness ${p.objectness} outside [0, 1]`);
    }
    if (p.classScores && p.classScores.length !== classCount) {
      throw new RangeError(
        `proposal ${i}: ${p.classScores.length} class scores, manifest declares ${classCount}`
      );
    }
    buf.writeFloatLE(x0, offset);
    buf.writeFloatLE(y0, offset + 4);
    buf.writeFloatLE(x1, offset + 8);
    buf.writeFloatLE(y1, offset + 12);
    buf.writeFloatLE(p.objectness ?? NaN, offset + 16);
    buf.writeUInt16LE(p.classScores ? FLAG_CLASS_SCORES : 0, offset + 20);
    offset += PROPOSAL_FIXED_BYTES;
    if (p.classScores) {
      for (let k = 0; k < classCount; k++, offset += 4) {
        buf.writeFloatLE(p.classScores[k], offset);
      }
    }
  });
  return buf;
}

export function writeProposals(
  proposals: ProposalData[],
  classCount: number,
  file: string
): void {
  fs.writeFileSync(file, encodeProposals(proposals, classCount));
}

// ---------------------------------------------------------------------------
// manifest

export interface ManifestImageEntry {
  imageId: string;
  /** path relative to the manifest */
  tensor: string;
  proposals?: string;
}

export interface ManifestQueryEntry {
  queryId: string;
  imageId: string;
  /** [x_min, y_min, x_max, y_max] in the tensor's pixel frame */
  box: [number, number, number, number];
  classIndex?: number;
  tensor?: string;
}

export interface ManifestDoc {
  datasetName: string;
  featureDim: number;
  stride: number;
  classNames: string[];
  images: ManifestImageEntry[];
  queries: ManifestQueryEntry[];
}

/** Render the manifest JSON exactly as the engine's loader expects it. */
export function manifestJson(doc: ManifestDoc): string {
  const body = {
    dataset_name: doc.datasetName,
    feature_dim: doc.featureDim,
    stride: doc.stride,
    class_names: doc.classNames,
    images: doc.images.map((img) => ({
      image_id: img.imageId,
      tensor: img.tensor,
      ...(img.proposals !== undefined ? { proposals: img.proposals } : {}),
    })),
    queries: doc.queries.map((q) => ({
      query_id: q.queryId,
      image_id: q.imageId,
      box: q.box,
      ...(q.classIndex !== undefined ? { class_index: q.classIndex } : {}),
      ...(q.tensor !== undefined ? { tensor: q.tensor } : {}),
    })),
  };
  return JSON.stringify(body, null, 2) + '\n';
}

export function writeManifest(doc: ManifestDoc, file: string): void {
  fs.writeFileSync(file, manifestJson(doc));
}

// ---------------------------------------------------------------------------
// relevance lists

export interface RelevanceSets {
  queryId: string;
  good: string[];
  ok: string[];
  junk: string[];
}

/** One `_good` / `_ok` / `_junk` list triple per query, ids sorted. */
export function writeGroundTruth(sets: RelevanceSets[], dir: string): void {
  fs.mkdirSync(dir, { recursive: true });
  for (const gt of sets) {
    for (const kind of ['good', 'ok', 'junk'] as const) {
      const ids = Array.from(new Set(gt[kind])).sort();
      const file = path.join(dir, `${gt.queryId}_${kind}.txt`);
      fs.writeFileSync(file, ids.map((i) => `${i}\n`).join(''));
    }
  }
}
