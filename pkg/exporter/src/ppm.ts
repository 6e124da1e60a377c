/** Minimal binary PPM/PGM (P6/P5, 8-bit) decoder. */

export interface RgbImage {
  width: number;
  height: number;
  /** Row-major RGB triplets, 8-bit. */
  pixels: Uint8Array;
}

function readToken(buf: Buffer, pos: { i: number }): string {
  // Skip whitespace and '#' comment lines between header tokens.
  for (;;) {
    while (pos.i < buf.length && /\s/.test(String.fromCharCode(buf[pos.i]))) pos.i++;
    if (pos.i < buf.length && buf[pos.i] === 0x23) {
      while (pos.i < buf.length && buf[pos.i] !== 0x0a) pos.i++;
      continue;
    }
    break;
  }
  const start = pos.i;
  while (pos.i < buf.length && !/\s/.test(String.fromCharCode(buf[pos.i]))) pos.i++;
  if (start === pos.i) throw new Error('unexpected end of header');
  return buf.toString('ascii', start, pos.i);
}

export function decodePpm(buf: Buffer): RgbImage {
  const pos = { i: 0 };
  const magic = readToken(buf, pos);
  if (magic !== 'P6' && magic !== 'P5') {
    throw new Error(`unsupported image magic ${JSON.stringify(magic)}`);
  }
  const width = parseInt(readToken(buf, pos), 10);
  const height = parseInt(readToken(buf, pos), 10);
  const maxval = parseInt(readToken(buf, pos), 10);
  if (!(width > 0 && height > 0)) throw new Error(`bad image size ${width}x${height}`);
  if (maxval !== 255) throw new Error(`only 8-bit images supported, maxval ${maxval}`);
  pos.i += 1; // single whitespace byte after the header
  const channels = magic === 'P6' ? 3 : 1;
  const needed = width * height * channels;
  if (buf.length - pos.i !== needed) {
    throw new Error(`pixel payload: expected ${needed} bytes, got ${buf.length - pos.i}`);
  }
  const raw = buf.subarray(pos.i, pos.i + needed);
  if (channels === 3) {
    return { width, height, pixels: new Uint8Array(raw) };
  }
  const rgb = new Uint8Array(width * height * 3);
  for (let p = 0; p < width * height; p++) {
    rgb[3 * p] = raw[p];
    rgb[3 * p + 1] = raw[p];
    rgb[3 * p + 2] = raw[p];
  }
  return { width, height, pixels: rgb };
}

export function encodePpm(image: RgbImage): Buffer {
  const header = Buffer.from(`P6\n${image.width} ${image.height}\n255\n`, 'ascii');
  return Buffer.concat([header, Buffer.from(image.pixels)]);
}
