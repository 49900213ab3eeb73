/**
 * Run-length codec matching the annotation service's label format:
 * [start_offset, length, class_id] triples over the slice in row-major
 * order. Runs never overlap and only cover selected pixels.
 */

export type Run = [number, number, number];

/** Encode labels over the masked pixels. Adjacent same-class pixels merge. */
export function encodeRuns(
  labels: Uint8Array,
  mask: Uint8Array,
): Run[] {
  if (labels.length !== mask.length) {
    throw new Error(`labels/mask length mismatch: ${labels.length} vs ${mask.length}`);
  }
  const runs: Run[] = [];
  for (let i = 0; i < mask.length; i++) {
    if (!mask[i]) continue;
    const v = labels[i];
    const last = runs[runs.length - 1];
    if (last && last[0] + last[1] === i && last[2] === v) {
      last[1] += 1;
    } else {
      runs.push([i, 1, v]);
    }
  }
  return runs;
}

/** Decode runs into (labels, covered) arrays of the given flat size. */
export function decodeRuns(
  runs: Run[],
  size: number,
): { labels: Uint8Array; covered: Uint8Array } {
  const labels = new Uint8Array(size);
  const covered = new Uint8Array(size);
  for (const run of runs) {
    if (!Array.isArray(run) || run.length !== 3) {
      throw new Error(`malformed run: ${JSON.stringify(run)}`);
    }
    const [start, length, cls] = run.map(Number);
    if (length < 1 || start < 0 || start + length > size || cls < 0) {
      throw new Error(`run out of bounds: ${JSON.stringify(run)}`);
    }
    for (let i = start; i < start + length; i++) {
      if (covered[i]) throw new Error(`overlapping run: ${JSON.stringify(run)}`);
      labels[i] = cls;
      covered[i] = 1;
    }
  }
  return { labels, covered };
}
