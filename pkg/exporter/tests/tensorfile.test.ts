import { describe, expect, it } from 'vitest';

import { decodeTensor, encodeTensor } from '../src/tensorfile.js';

describe('tensor container', () => {
  it('round-trips dims and payload bit-exactly', () => {
    const data = new Float32Array([1.5, -2.25, 3.125, 0.0, 42.0, -0.5]);
    const buf = encodeTensor([2, 3], data);
    const back = decodeTensor(buf);
    expect(back.dims).toEqual([2, 3]);
    expect(Array.from(back.data)).toEqual(Array.from(data));
    expect(encodeTensor(back.dims, back.data).equals(buf)).toBe(true);
  });

  it('matches the normative byte layout', () => {
    // Hand-built reference: magic, version 1, dtype 1, ndim 1, dims [2],
    // payload [1.0, -1.0].
    const expected = Buffer.alloc(16 + 8 + 8);
    expected.write('VFMT', 0, 'ascii');
    expected.writeUInt32LE(1, 4);
    expected.writeUInt32LE(1, 8);
    expected.writeUInt32LE(1, 12);
    expected.writeBigUInt64LE(2n, 16);
    expected.writeFloatLE(1.0, 24);
    expected.writeFloatLE(-1.0, 28);
    expect(encodeTensor([2], new Float32Array([1.0, -1.0])).equals(expected)).toBe(true);
  });

  it('supports zero-dimensional scalars', () => {
    const buf = encodeTensor([], new Float32Array([2.75]));
    expect(buf.length).toBe(20);
    const back = decodeTensor(buf);
    expect(back.dims).toEqual([]);
    expect(back.data[0]).toBe(2.75);
  });

  it('rejects truncated buffers', () => {
    const buf = encodeTensor([4], new Float32Array([1, 2, 3, 4]));
    expect(() => decodeTensor(buf.subarray(0, buf.length - 2))).toThrow(/length mismatch/);
  });

  it('rejects foreign magic', () => {
    const buf = Buffer.from(encodeTensor([1], new Float32Array([0])));
    buf.write('NOPE', 0, 'ascii');
    expect(() => decodeTensor(buf)).toThrow(/magic/);
  });

  it('rejects mismatched dims and payload', () => {
    expect(() => encodeTensor([2, 2], new Float32Array([1]))).toThrow(/need 4 values/);
  });
});
