/** 64-bit FNV-1a over raw bytes; cheap corruption detection for manifests. */

const FNV_OFFSET = 0xcbf29ce484222325n;
const FNV_PRIME = 0x100000001b3n;
const MASK64 = 0xffffffffffffffffn;

export function fnv1a64(data: Buffer): bigint {
  let h = FNV_OFFSET;
  for (const byte of data) {
    h ^= BigInt(byte);
    h = (h * FNV_PRIME) & MASK64;
  }
  return h;
}

export function fnv1a64Hex(data: Buffer): string {
  return fnv1a64(data).toString(16).padStart(16, "0");
}
