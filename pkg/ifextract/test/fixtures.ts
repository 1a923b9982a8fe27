/**
 * Test-side image encoders and pattern painters.  The PNG encoder here
 * is independent of the decoder under test (filter 0 only, checksummed),
 * so round trips are meaningful.
 */

import * as zlib from 'zlib';

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

export function crc32(buf: Buffer): number {
  let crc = 0xffffffff;
  for (let i = 0; i < buf.length; i++) {
    crc = CRC_TABLE[(crc ^ buf[i]) & 0xff] ^ (crc >>> 8);
  }
  return (crc ^ 0xffffffff) >>> 0;
}

export function pngChunk(type: string, data: Buffer): Buffer {
  const head = Buffer.alloc(8);
  head.writeUInt32BE(data.length, 0);
  head.write(type, 4, 'latin1');
  const crc = Buffer.alloc(4);
  crc.writeUInt32BE(crc32(Buffer.concat([head.subarray(4), data])), 0);
  return Buffer.concat([head, data, crc]);
}

const SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

/**
 * Encode 8-bit samples as a PNG.  `samples` must already match the color
 * type's layout (1, 2, 3 or 4 bytes per pixel); every scanline uses
 * filter 0.
 */
export function encodePng(
  width: number,
  height: number,
  samples: Uint8Array,
  colorType: 0 | 2 | 3 | 4 | 6 = 2,
  palette?: Uint8Array
): Buffer {
  const perPixel = { 0: 1, 2: 3, 3: 1, 4: 2, 6: 4 }[colorType];
  if (samples.length !== width * height * perPixel) {
    throw new Error(`fixture: ${samples.length} samples for ${width}x${height} type ${colorType}`);
  }
  const ihdr = Buffer.alloc(13);
  ihdr.writeUInt32BE(width, 0);
  ihdr.writeUInt32BE(height, 4);
  ihdr.writeUInt8(8, 8);
  ihdr.writeUInt8(colorType, 9);

  const stride = width * perPixel;
  const raw = Buffer.alloc(height * (stride + 1));
  for (let row = 0; row < height; row++) {
    raw[row * (stride + 1)] = 0;
    Buffer.from(samples.buffer, samples.byteOffset + row * stride, stride).copy(
      raw,
      row * (stride + 1) + 1
    );
  }
  const chunks = [SIGNATURE, pngChunk('IHDR', ihdr)];
  if (colorType === 3) {
    chunks.push(pngChunk('PLTE', Buffer.from(palette ?? [])));
  }
  chunks.push(pngChunk('IDAT', zlib.deflateSync(raw)));
  chunks.push(pngChunk('IEND', Buffer.alloc(0)));
  return Buffer.concat(chunks);
}

export function encodePnmP6(width: number, height: number, rgb: Uint8Array): Buffer {
  return Buffer.concat([Buffer.from(`P6\n${width} ${height}\n255\n`, 'latin1'), Buffer.from(rgb)]);
}

export function encodePnmP5(width: number, height: number, gray: Uint8Array): Buffer {
  return Buffer.concat([Buffer.from(`P5\n${width} ${height}\n255\n`, 'latin1'), Buffer.from(gray)]);
}

/** Deterministic RGB test pattern with structure in all directions. */
export function gradientImage(width: number, height: number): Uint8Array {
  const rgb = new Uint8Array(width * height * 3);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const i = (y * width + x) * 3;
      rgb[i] = (x * 7 + y * 3) % 256;
      rgb[i + 1] = (x * 2 + y * 11) % 256;
      rgb[i + 2] = (x + y * 5 + 128) % 256;
    }
  }
  return rgb;
}

export function flatImage(width: number, height: number, color: [number, number, number]): Uint8Array {
  const rgb = new Uint8Array(width * height * 3);
  for (let i = 0; i < width * height; i++) {
    rgb[i * 3] = color[0];
    rgb[i * 3 + 1] = color[1];
    rgb[i * 3 + 2] = color[2];
  }
  return rgb;
}

/** Paint an 8 px checkerboard into [x0,x1) x [y0,y1). */
export function plantChecker(
  rgb: Uint8Array,
  width: number,
  x0: number,
  y0: number,
  x1: number,
  y1: number
): void {
  for (let y = y0; y < y1; y++) {
    for (let x = x0; x < x1; x++) {
      const on = ((x >> 3) + (y >> 3)) % 2 === 0;
      const i = (y * width + x) * 3;
      rgb[i] = on ? 250 : 10;
      rgb[i + 1] = on ? 240 : 20;
      rgb[i + 2] = on ? 60 : 200;
    }
  }
}
