/**
 * Named-tensor flat file, bit-exact:
 *
 *   [8 bytes]  little-endian unsigned header length N
 *   [N bytes]  UTF-8 JSON: name -> {dtype: "F32"|"F16", shape: [...],
 *              data_offsets: [begin, end]}
 *   [...]      contiguous little-endian raw data
 *
 * Offsets are relative to the first byte after the header. Tensors are
 * serialized in sorted-name order with a compact sorted-key header, so
 * writing the same tensors twice yields byte-identical files. A reserved
 * "__metadata__" header key (flat string map) is tolerated and preserved.
 *
 * The same layout covers both the source checkpoints this tool reads
 * (safetensors-compatible) and the archives it emits.
 */

import * as fs from "fs";

export type Dtype = "F32" | "F16";

export interface TensorEntry {
  dtype: Dtype;
  shape: number[];
  /** Raw little-endian bytes, exactly shape.prod() * dtypeSize long. */
  data: Buffer;
}

export type TensorMap = Map<string, TensorEntry>;

export const METADATA_KEY = "__metadata__";

export function dtypeSize(dtype: Dtype): number {
  return dtype === "F32" ? 4 : 2;
}

export function numElements(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

function sortedCompactJson(obj: Record<string, unknown>): string {
  const ordered: Record<string, unknown> = {};
  for (const key of Object.keys(obj).sort()) {
    ordered[key] = obj[key];
  }
  return JSON.stringify(ordered);
}

export function serializeArchive(tensors: TensorMap, metadata?: Record<string, string>): Buffer {
  const names = [...tensors.keys()].sort();
  const header: Record<string, unknown> = {};
  const blobs: Buffer[] = [];
  let offset = 0;
  for (const name of names) {
    const entry = tensors.get(name)!;
    const expected = numElements(entry.shape) * dtypeSize(entry.dtype);
    if (entry.data.length !== expected) {
      throw new Error(`tensor '${name}': ${entry.data.length} bytes, expected ${expected}`);
    }
    header[name] = {
      data_offsets: [offset, offset + entry.data.length],
      dtype: entry.dtype,
      shape: entry.shape,
    };
    blobs.push(entry.data);
    offset += entry.data.length;
  }
  if (metadata) {
    header[METADATA_KEY] = metadata;
  }
  const headerBytes = Buffer.from(sortedCompactJson(header), "utf-8");
  const lenBuf = Buffer.alloc(8);
  lenBuf.writeBigUInt64LE(BigInt(headerBytes.length));
  return Buffer.concat([lenBuf, headerBytes, ...blobs]);
}

export function writeArchive(path: string, tensors: TensorMap, metadata?: Record<string, string>): void {
  fs.writeFileSync(path, serializeArchive(tensors, metadata));
}

export interface ParsedArchive {
  tensors: TensorMap;
  metadata: Record<string, string>;
}

export function parseArchive(buf: Buffer): ParsedArchive {
  if (buf.length < 8) {
    throw new Error("truncated header length");
  }
  const n = Number(buf.readBigUInt64LE(0));
  if (buf.length < 8 + n) {
    throw new Error("truncated header");
  }
  const header = JSON.parse(buf.subarray(8, 8 + n).toString("utf-8")) as Record<string, any>;
  const data = buf.subarray(8 + n);
  const metadata: Record<string, string> = header[METADATA_KEY] ?? {};
  delete header[METADATA_KEY];
  const tensors: TensorMap = new Map();
  for (const [name, entry] of Object.entries(header)) {
    const dtype = entry.dtype as string;
    if (dtype !== "F32" && dtype !== "F16") {
      throw new Error(`tensor '${name}': unsupported dtype ${dtype}`);
    }
    const [begin, end] = entry.data_offsets as [number, number];
    if (begin < 0 || end > data.length || end < begin) {
      throw new Error(`tensor '${name}': data offsets out of bounds`);
    }
    tensors.set(name, {
      dtype,
      shape: entry.shape as number[],
      data: Buffer.from(data.subarray(begin, end)),
    });
  }
  return { tensors, metadata };
}

export function readArchive(path: string): ParsedArchive {
  return parseArchive(fs.readFileSync(path));
}

export function f32Entry(shape: number[], values: Float32Array): TensorEntry {
  if (values.length !== numElements(shape)) {
    throw new Error(`value count ${values.length} does not match shape [${shape}]`);
  }
  const data = Buffer.alloc(values.length * 4);
  for (let i = 0; i < values.length; i++) {
    data.writeFloatLE(values[i], i * 4);
  }
  return { dtype: "F32", shape, data };
}

export function toFloat32(entry: TensorEntry): Float32Array {
  const n = numElements(entry.shape);
  const out = new Float32Array(n);
  if (entry.dtype === "F32") {
    for (let i = 0; i < n; i++) {
      out[i] = entry.data.readFloatLE(i * 4);
    }
  } else {
    for (let i = 0; i < n; i++) {
      out[i] = halfToFloat(entry.data.readUInt16LE(i * 2));
    }
  }
  return out;
}

export function halfToFloat(bits: number): number {
  const sign = (bits & 0x8000) ? -1 : 1;
  const exp = (bits >> 10) & 0x1f;
  const frac = bits & 0x3ff;
  if (exp === 0) {
    return sign * Math.pow(2, -14) * (frac / 1024);
  }
  if (exp === 0x1f) {
    return frac ? NaN : sign * Infinity;
  }
  return sign * Math.pow(2, exp - 15) * (1 + frac / 1024);
}
