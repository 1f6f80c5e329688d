/**
 * Volume bundle I/O.  A bundle is `<prefix>.json` (header) next to
 * `<prefix>.raw` (payload).  The payload is contiguous little-endian with
 * x varying fastest, so flat index = x + nx * (y + ny * z).  Scalar
 * volumes are dtype "f32", binary masks are "u8".  The header carries the
 * grid dims and the physical spacing in mm; neither has a default.
 */
import * as fs from "fs";
import * as path from "path";

export type Triple = [number, number, number];

export interface Volume {
  dims: Triple;
  spacing: Triple;
  data: Float32Array; // length nx*ny*nz
}

export interface Mask {
  dims: Triple;
  spacing: Triple;
  data: Uint8Array; // values 0 or 1
}

export function voxelCount(dims: Triple): number {
  return dims[0] * dims[1] * dims[2];
}

function readHeader(prefix: string, wantDtype: "f32" | "u8"): { dims: Triple; spacing: Triple } {
  const headerPath = prefix + ".json";
  let hdr: any;
  try {
    hdr = JSON.parse(fs.readFileSync(headerPath, "utf-8"));
  } catch (e) {
    throw new Error(`${headerPath}: ${e instanceof Error ? e.message : e}`);
  }
  if (typeof hdr !== "object" || hdr === null) {
    throw new Error(`${headerPath}: header is not a JSON object`);
  }
  if (hdr.format !== "volb1") {
    throw new Error(`${headerPath}: format ${JSON.stringify(hdr.format)} is not "volb1"`);
  }
  if (hdr.order !== "x-fastest") {
    throw new Error(`${headerPath}: unsupported order ${JSON.stringify(hdr.order)}`);
  }
  if (hdr.dtype !== wantDtype) {
    throw new Error(`${headerPath}: dtype ${JSON.stringify(hdr.dtype)}, expected "${wantDtype}"`);
  }
  const dims = hdr.dims;
  if (!Array.isArray(dims) || dims.length !== 3 || !dims.every((d) => Number.isInteger(d) && d >= 1)) {
    throw new Error(`${headerPath}: dims must be 3 positive integers`);
  }
  const spacing = hdr.spacing_mm;
  if (
    !Array.isArray(spacing) ||
    spacing.length !== 3 ||
    !spacing.every((s) => typeof s === "number" && isFinite(s) && s > 0)
  ) {
    throw new Error(`${headerPath}: spacing_mm must be 3 positive finite numbers`);
  }
  return { dims: dims as Triple, spacing: spacing as Triple };
}

function readPayload(prefix: string, itemBytes: number, dims: Triple): Buffer {
  const rawPath = prefix + ".raw";
  const raw = fs.readFileSync(rawPath);
  const expected = voxelCount(dims) * itemBytes;
  if (raw.length !== expected) {
    throw new Error(`${rawPath}: ${raw.length} bytes, expected ${expected} for dims [${dims}]`);
  }
  return raw;
}

export function loadVolume(prefix: string): Volume {
  const { dims, spacing } = readHeader(prefix, "f32");
  const raw = readPayload(prefix, 4, dims);
  const n = voxelCount(dims);
  // copy into an aligned buffer; node buffers are pooled at odd offsets
  const bytes = new ArrayBuffer(n * 4);
  new Uint8Array(bytes).set(raw);
  const data = new Float32Array(bytes); // host is little-endian on every platform node ships on
  for (let i = 0; i < n; i++) {
    if (!Number.isFinite(data[i])) {
      throw new Error(`${prefix}.raw: non-finite value at index ${i}`);
    }
  }
  return { dims, spacing, data };
}

export function saveVolume(vol: Volume, prefix: string): void {
  writeBundle(prefix, vol.dims, vol.spacing, "f32",
    Buffer.from(vol.data.buffer, vol.data.byteOffset, vol.data.length * 4));
}

/** Load a u8 bundle as a mask; any nonzero value counts as foreground. */
export function loadMask(prefix: string): Mask {
  const { dims, spacing } = readHeader(prefix, "u8");
  const raw = readPayload(prefix, 1, dims);
  const data = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) data[i] = raw[i] === 0 ? 0 : 1;
  return { dims, spacing, data };
}

export function saveMask(mask: Mask, prefix: string): void {
  writeBundle(prefix, mask.dims, mask.spacing, "u8",
    Buffer.from(mask.data.buffer, mask.data.byteOffset, mask.data.length));
}

function writeBundle(prefix: string, dims: Triple, spacing: Triple, dtype: string, payload: Buffer): void {
  fs.mkdirSync(path.dirname(prefix), { recursive: true });
  fs.writeFileSync(prefix + ".raw", payload);
  fs.writeFileSync(
    prefix + ".json",
    JSON.stringify({ format: "volb1", dims, spacing_mm: spacing, dtype, order: "x-fastest" }),
  );
}
