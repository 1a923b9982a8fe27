/**
 * Converters for the classic landmark-retrieval ground-truth layout:
 * one `<query>_query.txt` per query ("image x1 y1 x2 y2") next to
 * `_good` / `_ok` / `_junk` id lists.
 */

import * as fs from 'fs';
import * as path from 'path';

export interface QueryRegion {
  queryId: string;
  imageId: string;
  /** [x_min, y_min, x_max, y_max] exactly as written in the query file */
  box: [number, number, number, number];
}

export interface RelevanceLists {
  good: string[];
  ok: string[];
  junk: string[];
}

export interface ConvertedGroundTruth {
  queries: QueryRegion[];
  relevance: Map<string, RelevanceLists>;
}

/** Drop dataset-release prefixes from an image token. */
export function stripReleasePrefix(token: string): string {
  return token.replace(/^(oxc1_|paris_)/, '');
}

/**
 * Parse one query line: `<image> <x1> <y1> <x2> <y2>`.  Coordinates pass
 * through unchanged; only the image token is cleaned up.
 */
export function parseQueryLine(
  line: string,
  where = 'query'
): { imageId: string; box: [number, number, number, number] } {
  const fields = line.trim().split(/\s+/);
  if (fields.length !== 5) {
    throw new Error(`${where}: expected 'image x1 y1 x2 y2', got '${line.trim()}'`);
  }
  const coords = fields.slice(1).map(Number);
  if (coords.some((v) => !Number.isFinite(v))) {
    throw new Error(`${where}: non-numeric box in '${line.trim()}'`);
  }
  const [x1, y1, x2, y2] = coords;
  if (x1 < 0 || y1 < 0 || x1 >= x2 || y1 >= y2) {
    throw new Error(`${where}: degenerate query box [${coords.join(', ')}]`);
  }
  return { imageId: stripReleasePrefix(fields[0]), box: [x1, y1, x2, y2] };
}

/** `all_souls_3` -> `all_souls`: the landmark without its query ordinal. */
export function landmarkOf(queryId: string): string {
  return queryId.replace(/_\d+$/, '');
}

function readList(dir: string, name: string): string[] {
  const file = path.join(dir, name);
  if (!fs.existsSync(file)) {
    return [];
  }
  return fs
    .readFileSync(file, 'utf8')
    .split('\n')
    .map((line) => line.trim())
    .filter((line) => line.length > 0);
}

/**
 * Scan a ground-truth directory for queries and their relevance lists.
 * Missing list files mean empty sets; a directory without any
 * `*_query.txt` is an error.
 */
export function loadLandmarkGroundTruth(dir: string): ConvertedGroundTruth {
  let entries: string[];
  try {
    entries = fs.readdirSync(dir).sort();
  } catch (err) {
    throw new Error(`cannot read ground-truth directory ${dir}: ${(err as Error).message}`);
  }
  const queries: QueryRegion[] = [];
  const relevance = new Map<string, RelevanceLists>();
  for (const name of entries) {
    if (!name.endsWith('_query.txt')) {
      continue;
    }
    const queryId = name.slice(0, -'_query.txt'.length);
    const text = fs.readFileSync(path.join(dir, name), 'utf8');
    const line = text.split('\n').find((l) => l.trim().length > 0);
    if (!line) {
      throw new Error(`${name}: empty query file`);
    }
    const { imageId, box } = parseQueryLine(line, name);
    queries.push({ queryId, imageId, box });
    relevance.set(queryId, {
      good: readList(dir, `${queryId}_good.txt`),
      ok: readList(dir, `${queryId}_ok.txt`),
      junk: readList(dir, `${queryId}_junk.txt`),
    });
  }
  if (!queries.length) {
    throw new Error(`no *_query.txt files found in ${dir}`);
  }
  return { queries, relevance };
}
