import * as fs from 'fs';
import * as os from 'os';
import * as path from 'path';
import { afterEach, beforeEach, describe, expect, it } from 'vitest';
import {
  landmarkOf,
  loadLandmarkGroundTruth,
  parseQueryLine,
  stripReleasePrefix,
} from '../src/oxford';

describe('query line parsing', () => {
  it('keeps the annotated coordinates exactly', () => {
    const parsed = parseQueryLine('oxc1_all_souls_000013 136.5 34.1 648.5 955.7');
    expect(parsed.imageId).toBe('all_souls_000013');
    expect(parsed.box).toEqual([136.5, 34.1, 648.5, 955.7]);
  });

  it('strips either dataset release prefix', () => {
    expect(stripReleasePrefix('oxc1_radcliffe_camera_000001')).toBe('radcliffe_camera_000001');
    expect(stripReleasePrefix('paris_defense_000060')).toBe('defense_000060');
    expect(stripReleasePrefix('plain_image')).toBe('plain_image');
  });

  it('accepts integer coordinates', () => {
    expect(parseQueryLine('img 0 0 100 50').box).toEqual([0, 0, 100, 50]);
  });

  it('rejects malformed lines', () => {
    expect(() => parseQueryLine('img 1 2 3')).toThrow(/expected 'image x1 y1 x2 y2'/);
    expect(() => parseQueryLine('img 1 2 3 4 5')).toThrow(/expected/);
    expect(() => parseQueryLine('img a 2 3 4')).toThrow(/non-numeric/);
    expect(() => parseQueryLine('img 5 2 5 4')).toThrow(/degenerate/);
    expect(() => parseQueryLine('img -1 2 3 4')).toThrow(/degenerate/);
  });
});

describe('landmark naming', () => {
  it('drops the query ordinal', () => {
    expect(landmarkOf('all_souls_3')).toBe('all_souls');
    expect(landmarkOf('magdalen_12')).toBe('magdalen');
  });

  it('passes names without ordinals through', () => {
    expect(landmarkOf('ashmolean')).toBe('ashmolean');
  });
});

describe('ground-truth directory loading', () => {
  let dir: string;

  beforeEach(() => {
    dir = fs.mkdtempSync(path.join(os.tmpdir(), 'ifextract-ox-'));
  });

  afterEach(() => {
    fs.rmSync(dir, { recursive: true, force: true });
  });

  const write = (name: string, text: string) =>
    fs.writeFileSync(path.join(dir, name), text);

  it('collects queries with their relevance lists', () => {
    write('tower_1_query.txt', 'oxc1_img_a 10 20 30 40\n');
    write('tower_1_good.txt', 'img_b\nimg_c\n');
    write('tower_1_junk.txt', 'img_d\n');
    write('tower_2_query.txt', 'img_b 1 1 9 9\n');
    write('tower_2_good.txt', '\nimg_a\n\n');
    // tower_2 has no ok/junk files at all

    const gt = loadLandmarkGroundTruth(dir);
    expect(gt.queries.map((q) => q.queryId)).toEqual(['tower_1', 'tower_2']);
    expect(gt.queries[0].imageId).toBe('img_a');
    expect(gt.queries[0].box).toEqual([10, 20, 30, 40]);
    expect(gt.relevance.get('tower_1')).toEqual({
      good: ['img_b', 'img_c'],
      ok: [],
      junk: ['img_d'],
    });
    expect(gt.relevance.get('tower_2')).toEqual({ good: ['img_a'], ok: [], junk: [] });
  });

  it('ignores stray files that are not query lists', () => {
    write('tower_1_query.txt', 'img_a 1 1 5 5\n');
    write('README.txt', 'not a list');
    const gt = loadLandmarkGroundTruth(dir);
    expect(gt.queries).toHaveLength(1);
  });

  it('fails on directories without queries', () => {
    write('lonely_good.txt', 'img\n');
    expect(() => loadLandmarkGroundTruth(dir)).toThrow(/no \*_query\.txt/);
  });

  it('fails on empty query files and missing directories', () => {
    write('tower_1_query.txt', '\n\n');
    expect(() => loadLandmarkGroundTruth(dir)).toThrow(/empty query file/);
    expect(() => loadLandmarkGroundTruth(path.join(dir, 'absent'))).toThrow(
      /cannot read ground-truth directory/
    );
  });
});
