/**
 * Simulated detection backbone: turns pixels into a conv-layer-shaped
 * activation tensor (C x H x W grid at a fixed pixel stride).
 *
 * There is no network download in this tool.  Each grid cell's patch is
 * summarized by hand-crafted local statistics (color, contrast,
 * gradients), then lifted to the layer's channel depth through a fixed
 * random projection plus ReLU, seeded by the model identifier.  The
 * result behaves like real conv features for format and pipeline
 * purposes: non-negative, sparse-ish, content-dependent, deterministic.
 * Swapping in a real exporter only means replacing this class; every
 * consumer sees the same FeatureMapData shape.
 */

import { RasterImage } from './image';
import { gaussianRng } from './rng';

export interface LayerSpec {
  channels: number;
  stride: number;
}

/** Export layers offered by the simulated backbone. */
export const LAYERS: Record<string, LayerSpec> = {
  conv5: { channels: 256, stride: 16 },
  conv5_3: { channels: 512, stride: 16 },
};

export const DEFAULT_MODEL = 'simconv-v1';
export const DEFAULT_LAYER = 'conv5';

/** Number of per-patch statistics feeding the channel projection. */
export const PATCH_STATS = 12;

export interface FeatureMapData {
  imageId: string;
  channels: number;
  /** grid rows */
  height: number;
  /** grid columns */
  width: number;
  stride: number;
  /** channel-major C*H*W activations */
  data: Float32Array;
}

export interface BackboneOptions {
  /** seeds the fixed weights; different ids emulate different snapshots */
  modelId?: string;
  /** default: 'conv5' (256 channels, stride 16) */
  layer?: string;
}

export class Backbone {
  readonly modelId: string;
  readonly layer: string;
  readonly channels: number;
  readonly stride: number;
  private readonly weights: Float64Array;
  private readonly bias: Float64Array;

  constructor(options: BackboneOptions = {}) {
    this.modelId = options.modelId ?? DEFAULT_MODEL;
    this.layer = options.layer ?? DEFAULT_LAYER;
    const spec = LAYERS[this.layer];
    if (!spec) {
      throw new RangeError(
        `unknown layer '${this.layer}' (available: ${Object.keys(LAYERS).join(', ')})`
      );
    }
    this.channels = spec.channels;
    this.stride = spec.stride;

    const gauss = gaussianRng(`${this.modelId}/${this.layer}/weights`);
    const scale = 1 / Math.sqrt(PATCH_STATS);
    this.weights = new Float64Array(this.channels * PATCH_STATS);
    for (let i = 0; i < this.weights.length; i++) {
      this.weights[i] = gauss() * scale;
    }
    this.bias = new Float64Array(this.channels);
    for (let c = 0; c < this.channels; c++) {
      this.bias[c] = gauss() * 0.05;
    }
  }

  /** One activation tensor for a (already rescaled) image. */
  features(image: RasterImage, imageId: string): FeatureMapData {
    const gridH = Math.ceil(image.height / this.stride);
    const gridW = Math.ceil(image.width / this.stride);
    const data = new Float32Array(this.channels * gridH * gridW);
    const stats = new Float64Array(PATCH_STATS);
    const plane = gridH * gridW;
    for (let gy = 0; gy < gridH; gy++) {
      for (let gx = 0; gx < gridW; gx++) {
        this.cellStats(image, gx, gy, stats);
        const cell = gy * gridW + gx;
        for (let c = 0; c < this.channels; c++) {
          let z = this.bias[c];
          const base = c * PATCH_STATS;
          for (let k = 0; k < PATCH_STATS; k++) {
            z += this.weights[base + k] * stats[k];
          }
          if (z > 0) {
            data[c * plane + cell] = Math.fround(z);
          }
        }
      }
    }
    return {
      imageId,
      channels: this.channels,
      height: gridH,
      width: gridW,
      stride: this.stride,
      data,
    };
  }

  /**
   * Local statistics of the cell's receptive patch: mean RGB, luminance
   * mean/spread, four gradient directions, center-surround contrast and
   * two asymmetries.  Written into `out` (length PATCH_STATS).
   */
  private cellStats(image: RasterImage, gx: number, gy: number, out: Float64Array): void {
    const x0 = gx * this.stride;
    const y0 = gy * this.stride;
    const x1 = Math.min(x0 + this.stride, image.width);
    const y1 = Math.min(y0 + this.stride, image.height);
    const w = image.width;
    const px = image.pixels;

    let sumR = 0;
    let sumG = 0;
    let sumB = 0;
    let sumLuma = 0;
    let sumLuma2 = 0;
    let sumDx = 0;
    let sumDy = 0;
    let sumDiag1 = 0;
    let sumDiag2 = 0;
    let sumTop = 0;
    let sumLeft = 0;
    let sumCenter = 0;
    let centerCount = 0;

    const midX = (x0 + x1) / 2;
    const midY = (y0 + y1) / 2;
    const quarterW = (x1 - x0) / 4;
    const quarterH = (y1 - y0) / 4;

    const luma = (idx: number) => 0.299 * px[idx] + 0.587 * px[idx + 1] + 0.114 * px[idx + 2];

    for (let y = y0; y < y1; y++) {
      for (let x = x0; x < x1; x++) {
        const idx = (y * w + x) * 3;
        const r = px[idx];
        const g = px[idx + 1];
        const b = px[idx + 2];
        const l = 0.299 * r + 0.587 * g + 0.114 * b;
        sumR += r;
        sumG += g;
        sumB += b;
        sumLuma += l;
        sumLuma2 += l * l;
        if (x + 1 < x1) {
          sumDx += Math.abs(luma(idx + 3) - l);
        }
        if (y + 1 < y1) {
          sumDy += Math.abs(luma(idx + 3 * w) - l);
        }
        if (x + 1 < x1 && y + 1 < y1) {
          sumDiag1 += Math.abs(luma(idx + 3 * (w + 1)) - l);
          sumDiag2 += Math.abs(luma(idx + 3 * w) - luma(idx + 3));
        }
        if (y < midY) {
          sumTop += l;
        }
        if (x < midX) {
          sumLeft += l;
        }
        if (
          Math.abs(x + 0.5 - midX) <= quarterW &&
          Math.abs(y + 0.5 - midY) <= quarterH
        ) {
          sumCenter += l;
          centerCount++;
        }
      }
    }

    const count = (x1 - x0) * (y1 - y0);
    const meanLuma = sumLuma / count;
    const variance = Math.max(sumLuma2 / count - meanLuma * meanLuma, 0);
    const edges = Math.max((x1 - x0 - 1) * (y1 - y0), 1);
    const edgesV = Math.max((x1 - x0) * (y1 - y0 - 1), 1);
    const edgesD = Math.max((x1 - x0 - 1) * (y1 - y0 - 1), 1);

    out[0] = sumR / count;
    out[1] = sumG / count;
    out[2] = sumB / count;
    out[3] = Math.sqrt(variance);
    out[4] = sumDx / edges;
    out[5] = sumDy / edgesV;
    out[6] = sumDiag1 / edgesD;
    out[7] = sumDiag2 / edgesD;
    out[8] = centerCount > 0 ? sumCenter / centerCount - meanLuma : 0;
    out[9] = meanLuma;
    out[10] = 2 * (sumTop / Math.max(Math.round(count / 2), 1)) - 2 * meanLuma;
    out[11] = 2 * (sumLeft / Math.max(Math.round(count / 2), 1)) - 2 * meanLuma;
  }
}
