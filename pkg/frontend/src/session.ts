/**
 * Canvas-side annotation state for a single query item.
 *
 * Invariants enforced here rather than in the rendering layer:
 *  - painting is clipped to the query mask, always;
 *  - undo restores the exact prior pixel state of the stroke it removes;
 *  - a submission encodes exactly the painted field over the mask.
 */

import { encodeRuns, Run } from "./rle.js";

export interface Brush {
  classId: number;
  radius: number;
}

export interface LayerVisibility {
  image: boolean;
  prediction: boolean;
  uncertainty: boolean;
  queryMask: boolean;
}

interface PixelChange {
  index: number;
  prevLabel: number;
  prevPainted: number;
}

/** One brush stroke: the set of pixel changes it caused, for undo. */
interface Stroke {
  changes: PixelChange[];
}

export class CanvasSession {
  readonly itemId: string;
  readonly width: number;
  readonly height: number;
  readonly queryMask: Uint8Array;

  brush: Brush = { classId: 1, radius: 3 };
  layers: LayerVisibility = {
    image: true,
    prediction: true,
    uncertainty: false,
    queryMask: true,
  };

  /** Class painted per pixel; only meaningful where painted[i] is set. */
  private labels: Uint8Array;
  private painted: Uint8Array;
  private undoStack: Stroke[] = [];
  private currentStroke: Stroke | null = null;

  constructor(itemId: string, width: number, height: number, queryMask: Uint8Array) {
    if (queryMask.length !== width * height) {
      throw new Error(
        `query mask size ${queryMask.length} != ${width}x${height}`,
      );
    }
    this.itemId = itemId;
    this.width = width;
    this.height = height;
    this.queryMask = queryMask;
    this.labels = new Uint8Array(width * height);
    this.painted = new Uint8Array(width * height);
  }

  queriedCount(): number {
    let n = 0;
    for (let i = 0; i < this.queryMask.length; i++) if (this.queryMask[i]) n++;
    return n;
  }

  /** Queried pixels not yet assigned a class; submit stays disabled above 0. */
  remainingCount(): number {
    let n = 0;
    for (let i = 0; i < this.queryMask.length; i++) {
      if (this.queryMask[i] && !this.painted[i]) n++;
    }
    return n;
  }

  canSubmit(): boolean {
    return this.remainingCount() === 0;
  }

  labelAt(x: number, y: number): number | null {
    const i = y * this.width + x;
    return this.painted[i] ? this.labels[i] : null;
  }

  beginStroke(): void {
    this.currentStroke = { changes: [] };
  }

  /**
   * Paint a brush stamp centred on (x, y). Pixels outside the query mask
   * are never modified. Returns the number of pixels changed.
   */
  paint(x: number, y: number): number {
    const stroke = this.currentStroke;
    if (!stroke) throw new Error("paint() outside beginStroke/endStroke");
    const r = this.brush.radius;
    const cls = this.brush.classId;
    let changed = 0;
    for (let dy = -r; dy <= r; dy++) {
      for (let dx = -r; dx <= r; dx++) {
        if (dx * dx + dy * dy > r * r) continue;
        const px = x + dx;
        const py = y + dy;
        if (px < 0 || px >= this.width || py < 0 || py >= this.height) continue;
        const i = py * this.width + px;
        if (!this.queryMask[i]) continue; // clipping rule
        if (this.painted[i] && this.labels[i] === cls) continue;
        stroke.changes.push({
          index: i,
          prevLabel: this.labels[i],
          prevPainted: this.painted[i],
        });
        this.labels[i] = cls;
        this.painted[i] = 1;
        changed++;
      }
    }
    return changed;
  }

  endStroke(): void {
    if (this.currentStroke && this.currentStroke.changes.length > 0) {
      this.undoStack.push(this.currentStroke);
    }
    this.currentStroke = null;
  }

  /** Convenience: a single-stamp stroke. */
  paintOnce(x: number, y: number): number {
    this.beginStroke();
    const n = this.paint(x, y);
    this.endStroke();
    return n;
  }

  /** Undo the latest stroke; earlier changes win when a stroke touched a
   * pixel repeatedly, so the restored state is exactly the pre-stroke one. */
  undo(): boolean {
    const stroke = this.undoStack.pop();
    if (!stroke) return false;
    for (let k = stroke.changes.length - 1; k >= 0; k--) {
      const ch = stroke.changes[k];
      this.labels[ch.index] = ch.prevLabel;
      this.painted[ch.index] = ch.prevPainted;
    }
    return true;
  }

  undoDepth(): number {
    return this.undoStack.length;
  }

  /** Snapshot of the painted label field (0 where unpainted/unqueried). */
  paintedField(): Uint8Array {
    const out = new Uint8Array(this.labels.length);
    for (let i = 0; i < out.length; i++) {
      if (this.painted[i]) out[i] = this.labels[i];
    }
    return out;
  }

  /** Run-length encoding of the painted labels over the query mask. */
  encodeSubmission(): Run[] {
    if (!this.canSubmit()) {
      throw new Error(`${this.remainingCount()} queried pixels unlabeled`);
    }
    return encodeRuns(this.labels, this.queryMask);
  }
}
