/**
 * VFMT tensor container (shared byte layout with the Python toolkit).
 *
 * All integers little-endian:
 *   magic   4 bytes "VFMT"
 *   version u32     (1)
 *   dtype   u32     (1 = float32 LE)
 *   ndim    u32
 *   dims    ndim x u64
 *   payload product(dims) x 4 bytes, row-major
 */

export const MAGIC = 'VFMT';
export const FORMAT_VERSION = 1;
export const DTYPE_F32 = 1;

const HEADER_BYTES = 16;

export interface TensorData {
  dims: number[];
  data: Float32Array;
}

export function encodeTensor(dims: number[], data: Float32Array): Buffer {
  const count = dims.reduce((a, b) => a * b, 1);
  if (count !== data.length) {
    throw new Error(`dims ${JSON.stringify(dims)} need ${count} values, got ${data.length}`);
  }
  const buf = Buffer.alloc(HEADER_BYTES + 8 * dims.length + 4 * count);
  buf.write(MAGIC, 0, 'ascii');
  buf.writeUInt32LE(FORMAT_VERSION, 4);
  buf.writeUInt32LE(DTYPE_F32, 8);
  buf.writeUInt32LE(dims.length, 12);
  dims.forEach((d, i) => buf.writeBigUInt64LE(BigInt(d), HEADER_BYTES + 8 * i));
  const payloadOffset = HEADER_BYTES + 8 * dims.length;
  for (let i = 0; i < count; i++) {
    buf.writeFloatLE(data[i], payloadOffset + 4 * i);
  }
  return buf;
}

export function decodeTensor(buf: Buffer): TensorData {
  if (buf.length < HEADER_BYTES) {
    throw new Error(`header needs ${HEADER_BYTES} bytes, got ${buf.length}`);
  }
  if (buf.toString('ascii', 0, 4) !== MAGIC) {
    throw new Error('bad magic at byte offset 0');
  }
  const version = buf.readUInt32LE(4);
  if (version !== FORMAT_VERSION) {
    throw new Error(`unsupported container version ${version}`);
  }
  const dtype = buf.readUInt32LE(8);
  if (dtype !== DTYPE_F32) {
    throw new Error(`unknown dtype code ${dtype}`);
  }
  const ndim = buf.readUInt32LE(12);
  const dimsEnd = HEADER_BYTES + 8 * ndim;
  if (buf.length < dimsEnd) {
    throw new Error(`dims table needs ${dimsEnd} bytes, got ${buf.length}`);
  }
  const dims: number[] = [];
  let count = 1;
  for (let i = 0; i < ndim; i++) {
    const d = Number(buf.readBigUInt64LE(HEADER_BYTES + 8 * i));
    if (d === 0) throw new Error('zero-sized dimension');
    dims.push(d);
    count *= d;
  }
  if (buf.length !== dimsEnd + 4 * count) {
    throw new Error(`payload length mismatch: expected ${dimsEnd + 4 * count} bytes, got ${buf.length}`);
  }
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    data[i] = buf.readFloatLE(dimsEnd + 4 * i);
  }
  return { dims, data };
}
