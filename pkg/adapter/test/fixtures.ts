// shared test fabric: tmp dirs, a tiny deterministic prng, box phantoms,
// and an independent dice implementation for checking predictions
import * as fs from "fs";
import * as os from "os";
import * as path from "path";
import { Mask, Triple, Volume, saveMask, saveVolume } from "../src/bundle";

export function tmpdir(): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), "adapter-test-"));
}

// mulberry32; good enough to jitter phantom intensities reproducibly
export function rng(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export interface Phantom {
  volume: Volume;
  mask: Mask;
}

/**
 * Two foreground slabs on a noisy background, one slab per side of the
 * grid.  drift shifts every intensity, emulating per-scan calibration
 * differences; contrast separates foreground from background.
 */
export function makePhantom(
  dims: Triple,
  seed: number,
  opts: { drift?: number; noise?: number; contrast?: number; spacing?: Triple } = {},
): Phantom {
  const { drift = 0, noise = 0.25, contrast = 1, spacing = [1, 1, 1] } = opts;
  const [nx, ny, nz] = dims;
  const rand = rng(seed);
  const data = new Float32Array(nx * ny * nz);
  const fg = new Uint8Array(nx * ny * nz);
  const y0 = Math.floor(ny / 4);
  const y1 = Math.floor((3 * ny) / 4);
  const z0 = Math.floor(nz / 4);
  const z1 = Math.floor((3 * nz) / 4);
  const xq = Math.floor(nx / 4);
  let i = 0;
  for (let z = 0; z < nz; z++) {
    for (let y = 0; y < ny; y++) {
      for (let x = 0; x < nx; x++, i++) {
        const side = (x >= 1 && x < xq) || (x >= nx - xq && x < nx - 1);
        const inside = side && y >= y0 && y < y1 && z >= z0 && z < z1;
        fg[i] = inside ? 1 : 0;
        data[i] = drift + (inside ? contrast : 0) + (rand() * 2 - 1) * noise;
      }
    }
  }
  return { volume: { dims, spacing, data }, mask: { dims, spacing, data: fg } };
}

export function dice(a: Uint8Array, b: Uint8Array): number {
  let na = 0;
  let nb = 0;
  let inter = 0;
  for (let i = 0; i < a.length; i++) {
    if (a[i] !== 0) na++;
    if (b[i] !== 0) nb++;
    if (a[i] !== 0 && b[i] !== 0) inter++;
  }
  return na + nb === 0 ? 1 : (2 * inter) / (na + nb);
}

export interface CaseOnDisk {
  case_id: string;
  image: string;
  label: string;
}

/** Write a phantom's bundles under dir and return job-ready refs. */
export function writeCase(dir: string, caseId: string, p: Phantom): CaseOnDisk {
  const image = path.join(dir, "cases", caseId);
  const label = path.join(dir, "labels", caseId);
  saveVolume(p.volume, image);
  saveMask(p.mask, label);
  return { case_id: caseId, image, label };
}

export function writeTrainJob(
  jobDir: string,
  cases: CaseOnDisk[],
  fractions: number[],
  config: Record<string, unknown> = {},
): void {
  fs.mkdirSync(jobDir, { recursive: true });
  fs.writeFileSync(
    path.join(jobDir, "job.json"),
    JSON.stringify({
      protocol_version: 1,
      command: "train",
      cases: cases.map((c) => ({ case_id: c.case_id, image: c.image, kind: "labeled" })),
      labels: Object.fromEntries(cases.map((c) => [c.case_id, c.label])),
      config,
      checkpoint_fractions: fractions,
    }),
  );
}

export function writePredictJob(
  jobDir: string,
  cases: { case_id: string; image: string }[],
  checkpointId: string,
  emit: "masks" | "probabilities",
): void {
  fs.mkdirSync(jobDir, { recursive: true });
  fs.writeFileSync(
    path.join(jobDir, "job.json"),
    JSON.stringify({
      protocol_version: 1,
      command: "predict",
      cases: cases.map((c) => ({ case_id: c.case_id, image: c.image })),
      checkpoint_id: checkpointId,
      emit,
      config: {},
    }),
  );
}

export function readCheckpointIds(jobDir: string): string[] {
  const doc = JSON.parse(fs.readFileSync(path.join(jobDir, "checkpoints.json"), "utf-8"));
  return doc.checkpoints.map((e: { id: string }) => e.id);
}
