/**
 * Job-directory protocol handlers.  The caller writes `<job>/job.json`,
 * runs the adapter with the directory as its only argument, and reads the
 * outputs back after exit 0: `handshake.json` for capability discovery,
 * `checkpoints.json` plus one model file per checkpoint after training,
 * and `out/<case_id>` bundles after prediction.  Anything wrong with the
 * job raises JobError, which the CLI maps to exit code 3.
 */
import * as fs from "fs";
import * as path from "path";
import { z } from "zod";
import { loadMask, loadVolume, saveMask, saveVolume } from "./bundle";
import {
  DEFAULT_BINS,
  DEFAULT_SMOOTHING,
  HistogramModel,
  TrainingCase,
  fitHistogram,
  modelFromJson,
  modelToJson,
  predictMask,
  predictProbs,
} from "./model";

export const PROTOCOL_VERSION = 1;

export class JobError extends Error {}

const trainCaseSchema = z.object({
  case_id: z.string().min(1),
  image: z.string().min(1),
  kind: z.string().optional(), // "labeled" or "pseudo"; both train alike here
});

const trainSchema = z.object({
  protocol_version: z.literal(PROTOCOL_VERSION),
  command: z.literal("train"),
  cases: z.array(trainCaseSchema),
  labels: z.record(z.string(), z.string()),
  config: z.record(z.string(), z.unknown()).default({}),
  checkpoint_fractions: z.array(z.number().positive().max(1)).min(1),
  init_checkpoint: z.string().optional(), // accepted and ignored: every fit is exact
});

const predictSchema = z.object({
  protocol_version: z.literal(PROTOCOL_VERSION),
  command: z.literal("predict"),
  cases: z.array(z.object({ case_id: z.string().min(1), image: z.string().min(1) })),
  checkpoint_id: z.string().min(1),
  emit: z.enum(["masks", "probabilities"]),
  config: z.record(z.string(), z.unknown()).default({}),
});

const handshakeSchema = z.object({
  protocol_version: z.literal(PROTOCOL_VERSION),
  command: z.literal("handshake"),
});

function parseWith<T>(schema: z.ZodType<T>, doc: unknown, what: string): T {
  const res = schema.safeParse(doc);
  if (!res.success) {
    const detail = res.error.issues
      .map((i) => (i.path.length ? `${i.path.join(".")}: ${i.message}` : i.message))
      .join("; ");
    throw new JobError(`${what}: ${detail}`);
  }
  return res.data;
}

function clampInt(raw: unknown, fallback: number, min: number, max: number): number {
  const n = Math.floor(Number(raw ?? fallback));
  if (!Number.isFinite(n)) return fallback;
  return Math.max(min, Math.min(max, n));
}

function positiveNumber(raw: unknown, fallback: number): number {
  const n = Number(raw ?? fallback);
  return Number.isFinite(n) && n > 0 ? n : fallback;
}

function writeJson(p: string, payload: unknown): void {
  fs.writeFileSync(p, JSON.stringify(payload, null, 1));
}

export function runJob(jobDir: string): void {
  const jobPath = path.join(jobDir, "job.json");
  let text: string;
  try {
    text = fs.readFileSync(jobPath, "utf-8");
  } catch (e) {
    throw new JobError(`cannot read ${jobPath}: ${e instanceof Error ? e.message : e}`);
  }
  let doc: unknown;
  try {
    doc = JSON.parse(text);
  } catch (e) {
    throw new JobError(`${jobPath} is not valid JSON: ${e instanceof Error ? e.message : e}`);
  }
  const command = doc !== null && typeof doc === "object" ? (doc as { command?: unknown }).command : undefined;
  switch (command) {
    case "handshake":
      runHandshake(jobDir, doc);
      return;
    case "train":
      runTrain(jobDir, doc);
      return;
    case "predict":
      runPredict(jobDir, doc);
      return;
    default:
      throw new JobError(`job.json: unknown command ${JSON.stringify(command)}`);
  }
}

function runHandshake(jobDir: string, doc: unknown): void {
  parseWith(handshakeSchema, doc, "handshake job");
  writeJson(path.join(jobDir, "handshake.json"), {
    protocol_version: PROTOCOL_VERSION,
    concurrent_predict: true, // prediction only reads a checkpoint file, parallel calls are safe
  });
}

function loadTrainingCase(imageRef: string, labelRef: string, caseId: string): TrainingCase {
  let volume;
  let label;
  try {
    volume = loadVolume(imageRef);
    label = loadMask(labelRef);
  } catch (e) {
    throw new JobError(`case ${caseId}: ${e instanceof Error ? e.message : e}`);
  }
  const sameDims = volume.dims.every((d, i) => d === label.dims[i]);
  const sameSpacing = volume.spacing.every((s, i) => s === label.spacing[i]);
  if (!sameDims || !sameSpacing) {
    throw new JobError(
      `case ${caseId}: image grid [${volume.dims}]/[${volume.spacing}] ` +
        `does not match label grid [${label.dims}]/[${label.spacing}]`,
    );
  }
  return { values: volume.data, foreground: label.data };
}

function runTrain(jobDir: string, doc: unknown): void {
  const job = parseWith(trainSchema, doc, "train job");
  if (job.cases.length === 0) throw new JobError("train job: empty training set");
  const fitCases = job.cases.map((c) => {
    const labelRef = job.labels[c.case_id];
    if (!labelRef) throw new JobError(`train job: no label for case ${c.case_id}`);
    return loadTrainingCase(c.image, labelRef, c.case_id);
  });
  const bins = clampInt(job.config["bins"], DEFAULT_BINS, 1, 4096);
  const smoothing = positiveNumber(job.config["smoothing"], DEFAULT_SMOOTHING);

  const entries: { id: string; fraction: number }[] = [];
  for (let i = 0; i < job.checkpoint_fractions.length; i++) {
    const f = job.checkpoint_fractions[i];
    // fraction f sees the first ceil(f*n) cases, so later checkpoints fit more data
    const nFit = Math.min(job.cases.length, Math.max(1, Math.ceil(f * job.cases.length)));
    let model: HistogramModel;
    try {
      model = fitHistogram(fitCases.slice(0, nFit), bins, smoothing);
    } catch (e) {
      throw new JobError(`train job: ${e instanceof Error ? e.message : e}`);
    }
    const ckptPath = path.resolve(jobDir, `ckpt_${i}.json`);
    fs.writeFileSync(ckptPath, modelToJson(model, nFit));
    entries.push({ id: ckptPath, fraction: f });
  }
  writeJson(path.join(jobDir, "checkpoints.json"), { checkpoints: entries });
}

function loadCheckpoint(checkpointId: string): HistogramModel {
  if (!fs.existsSync(checkpointId)) {
    throw new JobError(`unknown checkpoint ${JSON.stringify(checkpointId)}`);
  }
  let text: string;
  try {
    text = fs.readFileSync(checkpointId, "utf-8");
  } catch (e) {
    throw new JobError(`unknown checkpoint ${JSON.stringify(checkpointId)}: ${e instanceof Error ? e.message : e}`);
  }
  try {
    return modelFromJson(text);
  } catch (e) {
    throw new JobError(`checkpoint ${JSON.stringify(checkpointId)}: ${e instanceof Error ? e.message : e}`);
  }
}

function runPredict(jobDir: string, doc: unknown): void {
  const job = parseWith(predictSchema, doc, "predict job");
  const model = loadCheckpoint(job.checkpoint_id); // before touching any volume, bad ids fail fast
  const outDir = path.join(jobDir, "out");
  fs.mkdirSync(outDir, { recursive: true });
  for (const c of job.cases) {
    let volume;
    try {
      volume = loadVolume(c.image);
    } catch (e) {
      throw new JobError(`case ${c.case_id}: ${e instanceof Error ? e.message : e}`);
    }
    const outPrefix = path.join(outDir, c.case_id);
    if (job.emit === "masks") {
      saveMask({ dims: volume.dims, spacing: volume.spacing, data: predictMask(model, volume.data) }, outPrefix);
    } else {
      saveVolume({ dims: volume.dims, spacing: volume.spacing, data: predictProbs(model, volume.data) }, outPrefix);
    }
  }
}
