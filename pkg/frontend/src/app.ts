/**
 * Browser wiring: layer compositing onto a single canvas, brush input,
 * and the submit workflow. One active item per session; on a successful
 * submit the next pending item is loaded.
 */

import { AnnotationApi, ApiError, SessionItem } from "./api.js";
import { CanvasSession } from "./session.js";

// class id -> overlay color (background intentionally transparent)
const CLASS_COLORS = [
  [0, 0, 0, 0],
  [230, 25, 75, 160],
  [60, 180, 75, 160],
  [255, 225, 25, 160],
  [0, 130, 200, 160],
  [245, 130, 48, 160],
  [145, 30, 180, 160],
  [70, 240, 240, 160],
] as const;

const QUERY_TINT = [255, 255, 0, 90] as const; // queried pixels highlighted yellow

interface Layers {
  image: HTMLImageElement;
  prediction: Uint8Array;
  uncertainty: Float32Array;
  session: CanvasSession;
  nClasses: number;
}

export class AnnotatorApp {
  private api: AnnotationApi;
  private canvas: HTMLCanvasElement;
  private banner: HTMLElement;
  private submitBtn: HTMLButtonElement;
  private counter: HTMLElement;
  private layers: Layers | null = null;
  private paintingPointer: number | null = null;

  constructor(baseUrl: string, root: Document = document) {
    this.api = new AnnotationApi(baseUrl);
    this.canvas = root.getElementById("slice") as HTMLCanvasElement;
    this.banner = root.getElementById("banner")!;
    this.submitBtn = root.getElementById("submit") as HTMLButtonElement;
    this.counter = root.getElementById("remaining")!;
    this.bindInput(root);
  }

  async start(): Promise<void> {
    const pending = await this.api.pendingItems();
    if (!pending || pending.length === 0) {
      this.showBanner("no pending items — batch complete", false);
      return;
    }
    await this.loadItem(pending[0]);
  }

  async loadItem(item: SessionItem): Promise<void> {
    try {
      const [sess, pred, mask, unc] = await Promise.all([
        this.api.session(),
        this.api.prediction(item.item_id),
        this.api.queryMask(item.item_id),
        this.api.uncertaintyRaw(item.item_id),
      ]);
      const [h, w] = item.shape;
      let maskCount = 0;
      for (const v of mask.mask) if (v) maskCount++;
      if (maskCount !== item.queried_pixels) {
        throw new Error(
          `mask pixel count ${maskCount} != metadata ${item.queried_pixels}`,
        );
      }
      const img = new Image();
      img.src = this.api.imageUrl(item.item_id);
      await img.decode();
      this.layers = {
        image: img,
        prediction: pred.labels,
        uncertainty: unc.values,
        session: new CanvasSession(item.item_id, w, h, mask.mask),
        nClasses: sess.n_classes,
      };
      this.canvas.width = w;
      this.canvas.height = h;
      this.showBanner("", false);
      this.refresh();
    } catch (e) {
      // 404 etc: error banner, current session untouched
      this.showBanner(e instanceof Error ? e.message : String(e), true);
    }
  }

  private bindInput(root: Document): void {
    this.canvas.addEventListener("pointerdown", (ev) => {
      if (!this.layers) return;
      this.paintingPointer = ev.pointerId;
      this.layers.session.beginStroke();
      this.paintAt(ev);
    });
    this.canvas.addEventListener("pointermove", (ev) => {
      if (this.paintingPointer === ev.pointerId) this.paintAt(ev);
    });
    const finish = (ev: PointerEvent) => {
      if (this.paintingPointer === ev.pointerId && this.layers) {
        this.layers.session.endStroke();
        this.paintingPointer = null;
        this.refresh();
      }
    };
    this.canvas.addEventListener("pointerup", finish);
    this.canvas.addEventListener("pointercancel", finish);

    root.addEventListener("keydown", (ev) => {
      if (!this.layers) return;
      const s = this.layers.session;
      if (ev.key >= "1" && ev.key <= "9") {
        const cls = Number(ev.key);
        if (cls < this.layers.nClasses) s.brush.classId = cls;
      } else if (ev.key === "z" && (ev.ctrlKey || ev.metaKey)) {
        s.undo();
        this.refresh();
      } else if (ev.key === "[") {
        s.brush.radius = Math.max(1, s.brush.radius - 1);
      } else if (ev.key === "]") {
        s.brush.radius = Math.min(32, s.brush.radius + 1);
      } else if (ev.key === "i" || ev.key === "p" || ev.key === "u" || ev.key === "q") {
        const key = { i: "image", p: "prediction", u: "uncertainty", q: "queryMask" }[
          ev.key
        ] as keyof typeof s.layers;
        s.layers[key] = !s.layers[key];
        this.refresh();
      }
    });

    this.submitBtn.addEventListener("click", () => void this.submit());
  }

  private paintAt(ev: PointerEvent): void {
    if (!this.layers) return;
    const rect = this.canvas.getBoundingClientRect();
    const x = Math.floor(((ev.clientX - rect.left) / rect.width) * this.canvas.width);
    const y = Math.floor(((ev.clientY - rect.top) / rect.height) * this.canvas.height);
    this.layers.session.paint(x, y);
    this.refresh();
  }

  async submit(): Promise<void> {
    if (!this.layers) return;
    const s = this.layers.session;
    try {
      await this.api.submitLabels(s.itemId, s.encodeSubmission());
      this.layers = null;
      const pending = await this.api.pendingItems();
      if (pending && pending.length > 0) {
        await this.loadItem(pending[0]);
      } else {
        await this.api.completeStep();
        this.showBanner("batch complete — thank you", false);
        this.refresh();
      }
    } catch (e) {
      // 422 messages surfaced verbatim; session stays editable
      this.showBanner(e instanceof ApiError ? e.message : String(e), true);
    }
  }

  private showBanner(text: string, isError: boolean): void {
    this.banner.textContent = text;
    this.banner.className = isError ? "banner error" : "banner";
  }

  refresh(): void {
    const ctx = this.canvas.getContext("2d")!;
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    if (!this.layers) {
      this.submitBtn.disabled = true;
      this.counter.textContent = "";
      return;
    }
    const { image, prediction, uncertainty, session: s } = this.layers;
    const w = this.canvas.width;
    const h = this.canvas.height;
    if (s.layers.image) ctx.drawImage(image, 0, 0);
    const overlay = ctx.createImageData(w, h);
    const data = overlay.data;
    let uncMax = 0;
    for (const v of uncertainty) uncMax = Math.max(uncMax, v);
    for (let i = 0; i < w * h; i++) {
      let rgba: readonly number[] | null = null;
      const paintedCls = s.labelAt(i % w, Math.floor(i / w));
      if (paintedCls !== null) {
        rgba = CLASS_COLORS[paintedCls % CLASS_COLORS.length];
      } else if (s.layers.prediction && prediction[i] > 0) {
        const c = CLASS_COLORS[prediction[i] % CLASS_COLORS.length];
        rgba = [c[0], c[1], c[2], 70];
      }
      if (s.layers.uncertainty && uncMax > 0) {
        const a = Math.round((uncertainty[i] / uncMax) * 120);
        rgba = rgba ? rgba : [255, 0, 255, 0];
        rgba = [255, 0, 255, Math.max(rgba[3], a)];
      }
      if (s.layers.queryMask && s.queryMask[i]) {
        rgba = blend(rgba, QUERY_TINT);
      }
      if (rgba) {
        data[4 * i] = rgba[0];
        data[4 * i + 1] = rgba[1];
        data[4 * i + 2] = rgba[2];
        data[4 * i + 3] = rgba[3];
      }
    }
    ctx.putImageData(overlay, 0, 0);
    const remaining = s.remainingCount();
    this.submitBtn.disabled = remaining > 0;
    this.counter.textContent =
      remaining > 0 ? `${remaining} queried pixels left` : "ready to submit";
  }
}

function blend(
  under: readonly number[] | null,
  over: readonly number[],
): number[] {
  if (!under) return [...over];
  const a = over[3] / 255;
  return [
    Math.round(under[0] * (1 - a) + over[0] * a),
    Math.round(under[1] * (1 - a) + over[1] * a),
    Math.round(under[2] * (1 - a) + over[2] * a),
    Math.max(under[3], over[3]),
  ];
}
