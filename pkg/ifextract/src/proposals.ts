/**
 * Region proposals from an activation tensor: multi-scale windows around
 * saliency peaks, scored by activation mass, with an optional seeded
 * per-class score head.  This plays the role of a detector's proposal
 * branch for interchange purposes.
 */

import { FeatureMapData } from './backbone';
import { gaussianRng } from './rng';

export interface ProposalData {
  /** [x_min, y_min, x_max, y_max] in the rescaled pixel frame */
  box: [number, number, number, number];
  objectness?: number;
  classScores?: Float32Array;
}

export interface ProposalOptions {
  /** pixel extent of the rescaled image; boxes are clipped to it */
  imageWidth: number;
  imageHeight: number;
  /** default: 64 */
  maxProposals?: number;
  /** a class head is attached only when class names exist */
  classNames?: string[];
  /** seeds the class head weights */
  seedKey?: string;
}

/** Window half-sizes, in grid cells, emitted around each saliency peak. */
const WINDOW_RADII = [1, 2, 4];

export function proposeRegions(
  features: FeatureMapData,
  options: ProposalOptions
): ProposalData[] {
  const maxProposals = options.maxProposals ?? 64;
  if (!Number.isInteger(maxProposals) || maxProposals < 1) {
    throw new RangeError(`maxProposals must be a positive integer, got ${maxProposals}`);
  }
  const { height: gridH, width: gridW, stride } = features;
  const plane = gridH * gridW;

  // per-cell saliency: l2 activation norm
  const saliency = new Float64Array(plane);
  for (let c = 0; c < features.channels; c++) {
    const base = c * plane;
    for (let i = 0; i < plane; i++) {
      const v = features.data[base + i];
      saliency[i] += v * v;
    }
  }
  let peakValue = 0;
  for (let i = 0; i < plane; i++) {
    saliency[i] = Math.sqrt(saliency[i]);
    if (saliency[i] > peakValue) {
      peakValue = saliency[i];
    }
  }

  // cells that dominate their 8-neighborhood, strongest first
  const peaks: number[] = [];
  for (let gy = 0; gy < gridH; gy++) {
    for (let gx = 0; gx < gridW; gx++) {
      const value = saliency[gy * gridW + gx];
      let isPeak = true;
      for (let dy = -1; dy <= 1 && isPeak; dy++) {
        for (let dx = -1; dx <= 1; dx++) {
          if (dx === 0 && dy === 0) {
            continue;
          }
          const ny = gy + dy;
          const nx = gx + dx;
          if (ny < 0 || nx < 0 || ny >= gridH || nx >= gridW) {
            continue;
          }
          if (saliency[ny * gridW + nx] > value) {
            isPeak = false;
            break;
          }
        }
      }
      if (isPeak) {
        peaks.push(gy * gridW + gx);
      }
    }
  }
  peaks.sort((a, b) => saliency[b] - saliency[a] || a - b);

  const boxes = new Map<string, ProposalData>();
  const addWindow = (gy0: number, gy1: number, gx0: number, gx1: number) => {
    const x0 = gx0 * stride;
    const y0 = gy0 * stride;
    const x1 = Math.min(gx1 * stride, options.imageWidth);
    const y1 = Math.min(gy1 * stride, options.imageHeight);
    if (x1 <= x0 || y1 <= y0) {
      return;
    }
    const key = `${x0},${y0},${x1},${y1}`;
    if (boxes.has(key)) {
      return;
    }
    let mass = 0;
    for (let gy = gy0; gy < gy1; gy++) {
      for (let gx = gx0; gx < gx1; gx++) {
        mass += saliency[gy * gridW + gx];
      }
    }
    const cells = (gy1 - gy0) * (gx1 - gx0);
    const objectness = peakValue > 0 ? mass / cells / peakValue : 0;
    boxes.set(key, { box: [x0, y0, x1, y1], objectness });
  };

  // the whole frame is always a candidate region
  addWindow(0, gridH, 0, gridW);
  const wanted = maxProposals * 2; // overshoot, then keep the strongest
  for (const peak of peaks) {
    if (boxes.size >= wanted) {
      break;
    }
    const gy = Math.floor(peak / gridW);
    const gx = peak % gridW;
    for (const radius of WINDOW_RADII) {
      addWindow(
        Math.max(gy - radius, 0),
        Math.min(gy + radius + 1, gridH),
        Math.max(gx - radius, 0),
        Math.min(gx + radius + 1, gridW)
      );
    }
  }

  const proposals = Array.from(boxes.values());
  proposals.sort(
    (a, b) =>
      (b.objectness ?? 0) - (a.objectness ?? 0) ||
      a.box[0] - b.box[0] ||
      a.box[1] - b.box[1] ||
      a.box[2] - b.box[2] ||
      a.box[3] - b.box[3]
  );
  proposals.length = Math.min(proposals.length, maxProposals);

  const classNames = options.classNames ?? [];
  if (classNames.length) {
    attachClassScores(proposals, features, classNames.length, options.seedKey ?? 'head');
  }
  return proposals;
}

/**
 * Seeded linear head over each proposal's max-pooled activations,
 * squashed with softmax so every score lies in [0, 1].
 */
function attachClassScores(
  proposals: ProposalData[],
  features: FeatureMapData,
  numClasses: number,
  seedKey: string
): void {
  const gauss = gaussianRng(`${seedKey}/class-head/${numClasses}`);
  const scale = 1 / Math.sqrt(features.channels);
  const weights = new Float64Array(numClasses * features.channels);
  for (let i = 0; i < weights.length; i++) {
    weights[i] = gauss() * scale;
  }

  const { height: gridH, width: gridW, stride } = features;
  const plane = gridH * gridW;
  const pooled = new Float64Array(features.channels);
  for (const proposal of proposals) {
    const [x0, y0, x1, y1] = proposal.box;
    const gx0 = Math.min(Math.floor(x0 / stride), gridW - 1);
    const gy0 = Math.min(Math.floor(y0 / stride), gridH - 1);
    const gx1 = Math.max(Math.min(Math.ceil(x1 / stride), gridW), gx0 + 1);
    const gy1 = Math.max(Math.min(Math.ceil(y1 / stride), gridH), gy0 + 1);
    pooled.fill(0);
    for (let c = 0; c < features.channels; c++) {
      const base = c * plane;
      let best = 0;
      for (let gy = gy0; gy < gy1; gy++) {
        for (let gx = gx0; gx < gx1; gx++) {
          const v = features.data[base + gy * gridW + gx];
          if (v > best) {
            best = v;
          }
        }
      }
      pooled[c] = best;
    }

    const logits = new Float64Array(numClasses);
    let top = -Infinity;
    for (let k = 0; k < numClasses; k++) {
      let z = 0;
      const base = k * features.channels;
      for (let c = 0; c < features.channels; c++) {
        z += weights[base + c] * pooled[c];
      }
      logits[k] = z;
      if (z > top) {
        top = z;
      }
    }
    let norm = 0;
    for (let k = 0; k < numClasses; k++) {
      logits[k] = Math.exp(logits[k] - top);
      norm += logits[k];
    }
    const scores = new Float32Array(numClasses);
    for (let k = 0; k < numClasses; k++) {
      scores[k] = Math.fround(logits[k] / norm);
    }
    proposal.classScores = scores;
  }
}
