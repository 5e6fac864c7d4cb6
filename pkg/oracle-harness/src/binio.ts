/**
 * Writer/reader for the engine's checkpoint record format (independent
 * implementation, used only through the byte contract):
 *
 *   "CNNF" | u32 version | u32 record count | records...
 *   record: u32 name length | name utf-8 | u8 dtype | u8 ndim |
 *           u32 dims[ndim] | payload (little-endian)
 *
 * dtype codes: 1 = float32, 2 = float64.  The harness only emits float32.
 */

export interface Record {
  name: string;
  dims: number[];
  data: Float32Array;
}

const MAGIC = Buffer.from("CNNF", "ascii");
const VERSION = 1;
const F32 = 1;

export function encodeRecords(records: Record[]): Buffer {
  const parts: Buffer[] = [];
  const header = Buffer.alloc(12);
  MAGIC.copy(header, 0);
  header.writeUInt32LE(VERSION, 4);
  header.writeUInt32LE(records.length, 8);
  parts.push(header);
  for (const rec of records) {
    const name = Buffer.from(rec.name, "utf-8");
    const count = rec.dims.reduce((a, b) => a * b, 1);
    if (count !== rec.data.length) {
      throw new Error(`record ${rec.name}: dims [${rec.dims}] do not match ` +
        `${rec.data.length} elements`);
    }
    const head = Buffer.alloc(4 + name.length + 2 + 4 * rec.dims.length);
    let off = head.writeUInt32LE(name.length, 0);
    name.copy(head, off);
    off += name.length;
    off = head.writeUInt8(F32, off);
    off = head.writeUInt8(rec.dims.length, off);
    for (const d of rec.dims) off = head.writeUInt32LE(d, off);
    const payload = Buffer.alloc(4 * count);
    for (let i = 0; i < count; i++) payload.writeFloatLE(rec.data[i], 4 * i);
    parts.push(head, payload);
  }
  return Buffer.concat(parts);
}

export function decodeRecords(buf: Buffer): Record[] {
  if (!buf.subarray(0, 4).equals(MAGIC)) throw new Error("bad magic");
  const version = buf.readUInt32LE(4);
  if (version > VERSION) throw new Error(`unknown version ${version}`);
  const count = buf.readUInt32LE(8);
  let off = 12;
  const out: Record[] = [];
  for (let i = 0; i < count; i++) {
    const nameLen = buf.readUInt32LE(off);
    off += 4;
    const name = buf.subarray(off, off + nameLen).toString("utf-8");
    off += nameLen;
    const dtype = buf.readUInt8(off);
    const ndim = buf.readUInt8(off + 1);
    off += 2;
    if (dtype !== F32) throw new Error(`record ${name}: unsupported dtype ${dtype}`);
    const dims: number[] = [];
    for (let d = 0; d < ndim; d++) {
      dims.push(buf.readUInt32LE(off));
      off += 4;
    }
    const n = dims.reduce((a, b) => a * b, 1);
    const data = new Float32Array(n);
    for (let j = 0; j < n; j++) data[j] = buf.readFloatLE(off + 4 * j);
    off += 4 * n;
    out.push({ name, dims, data });
  }
  if (off !== buf.length) throw new Error("trailing bytes");
  return out;
}
