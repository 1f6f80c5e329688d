/**
 * Intensity histogram classifier.  Training pools the voxels of labeled
 * volumes into equal-width bins over the observed intensity range and
 * records the smoothed foreground fraction per bin; prediction is a
 * per-voxel table lookup.  There is no iteration and no randomness, so
 * refitting on the same cases reproduces the table bit for bit.
 */

export interface TrainingCase {
  values: Float32Array;
  foreground: Uint8Array; // same length, 0 or 1
}

export interface HistogramModel {
  lo: number; // first bin edge
  hi: number; // last bin edge, always > lo
  bins: number;
  smoothing: number;
  probs: number[]; // P(foreground | bin), length = bins
}

export const MODEL_FORMAT = "intensity-histogram";
export const DEFAULT_BINS = 64;
export const DEFAULT_SMOOTHING = 1.0;

export function binIndex(model: Pick<HistogramModel, "lo" | "hi" | "bins">, v: number): number {
  const i = Math.floor(((v - model.lo) / (model.hi - model.lo)) * model.bins);
  return i < 0 ? 0 : i >= model.bins ? model.bins - 1 : i;
}

/** Bin boundaries, length bins + 1; the ends span the fitted range. */
export function binEdges(model: HistogramModel): number[] {
  const edges = new Array<number>(model.bins + 1);
  for (let i = 0; i <= model.bins; i++) {
    edges[i] = model.lo + ((model.hi - model.lo) * i) / model.bins;
  }
  return edges;
}

export function fitHistogram(
  cases: TrainingCase[],
  bins = DEFAULT_BINS,
  smoothing = DEFAULT_SMOOTHING,
): HistogramModel {
  if (cases.length === 0) throw new Error("histogram fit needs at least one case");
  if (!Number.isInteger(bins) || bins < 1) throw new Error(`bins must be a positive integer, got ${bins}`);
  if (!(smoothing > 0)) throw new Error(`smoothing must be > 0, got ${smoothing}`);

  let lo = Infinity;
  let hi = -Infinity;
  for (const c of cases) {
    if (c.values.length !== c.foreground.length) {
      throw new Error("values and foreground flags differ in length");
    }
    for (let i = 0; i < c.values.length; i++) {
      const v = c.values[i];
      if (v < lo) lo = v;
      if (v > hi) hi = v;
    }
  }
  if (!isFinite(lo)) throw new Error("histogram fit needs at least one voxel");
  if (hi === lo) hi = lo + 1; // constant image; one wide bin still covers it

  const fgCount = new Float64Array(bins);
  const total = new Float64Array(bins);
  const ref = { lo, hi, bins };
  for (const c of cases) {
    for (let i = 0; i < c.values.length; i++) {
      const b = binIndex(ref, c.values[i]);
      total[b] += 1;
      if (c.foreground[i] !== 0) fgCount[b] += 1;
    }
  }
  // additive smoothing keeps every bin strictly inside (0,1), empty bins
  // land on the uninformative 1/2
  const probs = new Array<number>(bins);
  for (let b = 0; b < bins; b++) {
    probs[b] = (fgCount[b] + smoothing) / (total[b] + 2 * smoothing);
  }
  return { lo, hi, bins, smoothing, probs };
}

export function predictProbs(model: HistogramModel, values: Float32Array): Float32Array {
  const out = new Float32Array(values.length);
  for (let i = 0; i < values.length; i++) {
    out[i] = model.probs[binIndex(model, values[i])];
  }
  return out;
}

export function predictMask(model: HistogramModel, values: Float32Array): Uint8Array {
  const out = new Uint8Array(values.length);
  for (let i = 0; i < values.length; i++) {
    out[i] = model.probs[binIndex(model, values[i])] >= 0.5 ? 1 : 0;
  }
  return out;
}

export function modelToJson(model: HistogramModel, casesFitted: number): string {
  return JSON.stringify(
    {
      model: MODEL_FORMAT,
      lo: model.lo,
      hi: model.hi,
      bins: model.bins,
      smoothing: model.smoothing,
      probs: model.probs,
      cases_fitted: casesFitted,
    },
    null,
    1,
  );
}

export function modelFromJson(text: string): HistogramModel {
  let doc: any;
  try {
    doc = JSON.parse(text);
  } catch {
    throw new Error("checkpoint is not valid JSON");
  }
  if (typeof doc !== "object" || doc === null || doc.model !== MODEL_FORMAT) {
    throw new Error(`checkpoint does not hold an "${MODEL_FORMAT}" model`);
  }
  const { lo, hi, bins, smoothing, probs } = doc;
  if (typeof lo !== "number" || typeof hi !== "number" || !(hi > lo)) {
    throw new Error("checkpoint has a bad intensity range");
  }
  if (!Number.isInteger(bins) || bins < 1 || !Array.isArray(probs) || probs.length !== bins) {
    throw new Error("checkpoint bin table is inconsistent");
  }
  if (!probs.every((p: unknown) => typeof p === "number" && p >= 0 && p <= 1)) {
    throw new Error("checkpoint probabilities must lie in [0,1]");
  }
  if (typeof smoothing !== "number" || !(smoothing > 0)) {
    throw new Error("checkpoint smoothing must be > 0");
  }
  return { lo, hi, bins, smoothing, probs };
}
