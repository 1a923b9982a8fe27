/**
 * Minimal image input: PNG (8-bit, non-interlaced) and binary netpbm
 * (P5/P6), decoded to interleaved RGB floats, plus shortest-side rescaling.
 *
 * Only the subset needed for feature extraction is implemented; anything
 * else fails loudly rather than silently producing wrong pixels.
 */

import * as fs from 'fs';
import * as zlib from 'zlib';

export interface RasterImage {
  width: number;
  height: number;
  /** interleaved RGB rows, each component in [0, 1] */
  pixels: Float64Array;
}

export class ImageDecodeError extends Error {}

const PNG_SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

/** Samples per pixel for each supported PNG color type. */
const PNG_SAMPLES: Record<number, number> = {
  0: 1, // grayscale
  2: 3, // rgb
  3: 1, // palette
  4: 2, // gray + alpha
  6: 4, // rgba
};

export function decodeImage(buf: Buffer, name = 'image'): RasterImage {
  if (buf.length >= 8 && buf.subarray(0, 8).equals(PNG_SIGNATURE)) {
    return decodePng(buf, name);
  }
  const magic = buf.toString('latin1', 0, 2);
  if (magic === 'P5' || magic === 'P6') {
    return decodePnm(buf, name);
  }
  throw new ImageDecodeError(
    `${name}: unsupported image format (need PNG or binary netpbm P5/P6)`
  );
}

export function readImage(file: string): RasterImage {
  return decodeImage(fs.readFileSync(file), file);
}

// ---------------------------------------------------------------------------
// PNG

function decodePng(buf: Buffer, name: string): RasterImage {
  let offset = 8;
  let width = 0;
  let height = 0;
  let colorType = -1;
  let palette: Buffer | null = null;
  let sawIhdr = false;
  let sawIend = false;
  const idat: Buffer[] = [];

  while (offset + 8 <= buf.length && !sawIend) {
    const length = buf.readUInt32BE(offset);
    const type = buf.toString('latin1', offset + 4, offset + 8);
    const dataEnd = offset + 8 + length;
    if (dataEnd + 4 > buf.length) {
      throw new ImageDecodeError(`${name}: truncated ${type} chunk`);
    }
    const data = buf.subarray(offset + 8, dataEnd);
    offset = dataEnd + 4; // checksum is not verified

    if (type === 'IHDR') {
      if (length !== 13) {
        throw new ImageDecodeError(`${name}: malformed IHDR`);
      }
      width = data.readUInt32BE(0);
      height = data.readUInt32BE(4);
      const bitDepth = data.readUInt8(8);
      colorType = data.readUInt8(9);
      const interlace = data.readUInt8(12);
      if (bitDepth !== 8) {
        throw new ImageDecodeError(`${name}: only 8-bit PNGs supported, got depth ${bitDepth}`);
      }
      if (!(colorType in PNG_SAMPLES)) {
        throw new ImageDecodeError(`${name}: unsupported PNG color type ${colorType}`);
      }
      if (interlace !== 0) {
        throw new ImageDecodeError(`${name}: interlaced PNGs not supported`);
      }
      if (width < 1 || height < 1) {
        throw new ImageDecodeError(`${name}: empty image (${width} x ${height})`);
      }
      sawIhdr = true;
    } else if (type === 'PLTE') {
      palette = Buffer.from(data);
    } else if (type === 'IDAT') {
      idat.push(data);
    } else if (type === 'IEND') {
      sawIend = true;
    }
    // ancillary chunks are skipped
  }
  if (!sawIhdr) {
    throw new ImageDecodeError(`${name}: missing IHDR chunk`);
  }
  if (!idat.length) {
    throw new ImageDecodeError(`${name}: no IDAT data`);
  }
  if (colorType === 3 && (!palette || palette.length % 3 !== 0 || !palette.length)) {
    throw new ImageDecodeError(`${name}: palette image without usable PLTE`);
  }

  let raw: Buffer;
  try {
    raw = zlib.inflateSync(Buffer.concat(idat));
  } catch (err) {
    throw new ImageDecodeError(`${name}: bad IDAT stream (${(err as Error).message})`);
  }
  const samples = PNG_SAMPLES[colorType];
  const bytes = unfilterScanlines(raw, width, height, samples, name);
  return expandToRgb(bytes, width, height, colorType, palette, name);
}

function paeth(left: number, up: number, upLeft: number): number {
  const p = left + up - upLeft;
  const pa = Math.abs(p - left);
  const pb = Math.abs(p - up);
  const pc = Math.abs(p - upLeft);
  if (pa <= pb && pa <= pc) {
    return left;
  }
  return pb <= pc ? up : upLeft;
}

/** Undo per-scanline filtering (types 0-4) into packed sample bytes. */
export function unfilterScanlines(
  raw: Buffer,
  width: number,
  height: number,
  bpp: number,
  name = 'image'
): Buffer {
  const stride = width * bpp;
  const expected = height * (stride + 1);
  if (raw.length < expected) {
    throw new ImageDecodeError(
      `${name}: pixel data too short (${raw.length} bytes, need ${expected})`
    );
  }
  const out = Buffer.alloc(stride * height);
  let pos = 0;
  for (let row = 0; row < height; row++) {
    const filter = raw[pos++];
    const rowStart = row * stride;
    const prevStart = rowStart - stride;
    for (let i = 0; i < stride; i++) {
      const x = raw[pos + i];
      const left = i >= bpp ? out[rowStart + i - bpp] : 0;
      const up = row > 0 ? out[prevStart + i] : 0;
      let value: number;
      switch (filter) {
        case 0:
          value = x;
          break;
        case 1:
          value = x + left;
          break;
        case 2:
          value = x + up;
          break;
        case 3:
          value = x + ((left + up) >> 1);
          break;
        case 4: {
          const upLeft = row > 0 && i >= bpp ? out[prevStart + i - bpp] : 0;
          value = x + paeth(left, up, upLeft);
          break;
        }
        default:
          throw new ImageDecodeError(`${name}: unknown scanline filter ${filter}`);
      }
      out[rowStart + i] = value & 0xff;
    }
    pos += stride;
  }
  return out;
}

function expandToRgb(
  bytes: Buffer,
  width: number,
  height: number,
  colorType: number,
  palette: Buffer | null,
  name: string
): RasterImage {
  const pixels = new Float64Array(width * height * 3);
  const count = width * height;
  const samples = PNG_SAMPLES[colorType];
  for (let i = 0; i < count; i++) {
    const src = i * samples;
    let r: number;
    let g: number;
    let b: number;
    if (colorType === 2 || colorType === 6) {
      r = bytes[src];
      g = bytes[src + 1];
      b = bytes[src + 2];
    } else if (colorType === 3) {
      const entry = bytes[src] * 3;
      if (entry + 2 >= palette!.length) {
        throw new ImageDecodeError(`${name}: palette index ${bytes[src]} out of range`);
      }
      r = palette![entry];
      g = palette![entry + 1];
      b = palette![entry + 2];
    } else {
      // grayscale (with or without alpha); alpha is ignored throughout
      r = g = b = bytes[src];
    }
    const dst = i * 3;
    pixels[dst] = r / 255;
    pixels[dst + 1] = g / 255;
    pixels[dst + 2] = b / 255;
  }
  return { width, height, pixels };
}

// ---------------------------------------------------------------------------
// netpbm (binary only)

function decodePnm(buf: Buffer, name: string): RasterImage {
  const magic = buf.toString('latin1', 0, 2);
  let pos = 2;

  const nextToken = (): string => {
    // skip whitespace and '#' comment lines between header fields
    for (;;) {
      while (pos < buf.length && isSpace(buf[pos])) {
        pos++;
      }
      if (pos < buf.length && buf[pos] === 0x23) {
        while (pos < buf.length && buf[pos] !== 0x0a) {
          pos++;
        }
        continue;
      }
      break;
    }
    const start = pos;
    while (pos < buf.length && !isSpace(buf[pos])) {
      pos++;
    }
    if (start === pos) {
      throw new ImageDecodeError(`${name}: truncated netpbm header`);
    }
    return buf.toString('latin1', start, pos);
  };

  const width = parseHeaderInt(nextToken(), 'width', name);
  const height = parseHeaderInt(nextToken(), 'height', name);
  const maxval = parseHeaderInt(nextToken(), 'maxval', name);
  if (maxval < 1 || maxval > 255) {
    throw new ImageDecodeError(`${name}: unsupported maxval ${maxval} (need 1..255)`);
  }
  pos++; // single whitespace byte before the raster

  const channels = magic === 'P6' ? 3 : 1;
  const needed = width * height * channels;
  if (buf.length < pos + needed) {
    throw new ImageDecodeError(
      `${name}: raster too short (${buf.length - pos} bytes, need ${needed})`
    );
  }
  const pixels = new Float64Array(width * height * 3);
  for (let i = 0; i < width * height; i++) {
    const src = pos + i * channels;
    const dst = i * 3;
    if (channels === 3) {
      pixels[dst] = buf[src] / maxval;
      pixels[dst + 1] = buf[src + 1] / maxval;
      pixels[dst + 2] = buf[src + 2] / maxval;
    } else {
      const v = buf[src] / maxval;
      pixels[dst] = pixels[dst + 1] = pixels[dst + 2] = v;
    }
  }
  return { width, height, pixels };
}

function isSpace(byte: number): boolean {
  return byte === 0x20 || byte === 0x09 || byte === 0x0a || byte === 0x0d;
}

function parseHeaderInt(token: string, field: string, name: string): number {
  const value = Number(token);
  if (!Number.isInteger(value) || value < 1) {
    throw new ImageDecodeError(`${name}: bad ${field} '${token}'`);
  }
  return value;
}

// ---------------------------------------------------------------------------
// rescaling

export interface RescaledImage {
  image: RasterImage;
  /** rescaled / original size; query boxes are mapped with this factor */
  scale: number;
}

/**
 * Resample so the shorter image side equals `target` pixels (the longer
 * side keeps the aspect ratio, rounded).  Bilinear in both directions;
 * a no-op returns the input image unchanged.
 */
export function rescaleShortestSide(image: RasterImage, target: number): RescaledImage {
  if (!Number.isInteger(target) || target < 1) {
    throw new RangeError(`target side must be a positive integer, got ${target}`);
  }
  const shortest = Math.min(image.width, image.height);
  const scale = target / shortest;
  const width = image.width <= image.height ? target : Math.max(1, Math.round(image.width * scale));
  const height = image.height < image.width ? target : Math.max(1, Math.round(image.height * scale));
  if (width === image.width && height === image.height) {
    return { image, scale: 1 };
  }

  const pixels = new Float64Array(width * height * 3);
  const xRatio = image.width / width;
  const yRatio = image.height / height;
  for (let y = 0; y < height; y++) {
    const srcY = (y + 0.5) * yRatio - 0.5;
    const y0 = Math.min(Math.max(Math.floor(srcY), 0), image.height - 1);
    const y1 = Math.min(y0 + 1, image.height - 1);
    const fy = Math.min(Math.max(srcY - y0, 0), 1);
    for (let x = 0; x < width; x++) {
      const srcX = (x + 0.5) * xRatio - 0.5;
      const x0 = Math.min(Math.max(Math.floor(srcX), 0), image.width - 1);
      const x1 = Math.min(x0 + 1, image.width - 1);
      const fx = Math.min(Math.max(srcX - x0, 0), 1);
      const i00 = (y0 * image.width + x0) * 3;
      const i01 = (y0 * image.width + x1) * 3;
      const i10 = (y1 * image.width + x0) * 3;
      const i11 = (y1 * image.width + x1) * 3;
      const dst = (y * width + x) * 3;
      for (let c = 0; c < 3; c++) {
        const top = image.pixels[i00 + c] * (1 - fx) + image.pixels[i01 + c] * fx;
        const bottom = image.pixels[i10 + c] * (1 - fx) + image.pixels[i11 + c] * fx;
        pixels[dst + c] = top * (1 - fy) + bottom * fy;
      }
    }
  }
  return { image: { width, height, pixels }, scale };
}
