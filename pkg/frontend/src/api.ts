/**
 * Thin client over the annotation service's HTTP API. All structured
 * bodies are YAML; label fields travel as [start, length, class] runs.
 */

import { parse, stringify } from "yaml";
import { decodeRuns, Run } from "./rle.js";

export interface SessionItem {
  item_id: string;
  case_id: string;
  z_index: number;
  shape: [number, number];
  queried_pixels: number;
  status: "pending" | "submitted";
}

export interface SessionDoc {
  session_id: string;
  step_index: number;
  n_classes: number;
  items: SessionItem[];
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function getYaml(url: string): Promise<any> {
  const res = await fetch(url);
  if (!res.ok) throw new ApiError(res.status, `${url}: HTTP ${res.status}`);
  return parse(await res.text());
}

export class AnnotationApi {
  constructor(private baseUrl: string) {}

  async session(): Promise<SessionDoc> {
    return getYaml(`${this.baseUrl}/api/session`);
  }

  /** Pending items, or null when the whole batch is submitted (204). */
  async pendingItems(): Promise<SessionItem[] | null> {
    const res = await fetch(`${this.baseUrl}/api/queries`);
    if (res.status === 204) return null;
    if (!res.ok) throw new ApiError(res.status, `queries: HTTP ${res.status}`);
    return parse(await res.text()).items;
  }

  imageUrl(itemId: string): string {
    return `${this.baseUrl}/api/item/${itemId}/image`;
  }

  uncertaintyUrl(itemId: string): string {
    return `${this.baseUrl}/api/item/${itemId}/uncertainty`;
  }

  async prediction(itemId: string): Promise<{ shape: [number, number]; labels: Uint8Array }> {
    const doc = await getYaml(`${this.baseUrl}/api/item/${itemId}/prediction`);
    const size = doc.shape[0] * doc.shape[1];
    return { shape: doc.shape, labels: decodeRuns(doc.pixels, size).labels };
  }

  async queryMask(itemId: string): Promise<{ shape: [number, number]; mask: Uint8Array }> {
    const doc = await getYaml(`${this.baseUrl}/api/item/${itemId}/query-mask`);
    const size = doc.shape[0] * doc.shape[1];
    return { shape: doc.shape, mask: decodeRuns(doc.pixels, size).covered };
  }

  /** Raw float32 summed-variance field with its shape from the header. */
  async uncertaintyRaw(itemId: string): Promise<{ shape: number[]; values: Float32Array }> {
    const res = await fetch(`${this.baseUrl}/api/item/${itemId}/uncertainty?format=raw`);
    if (!res.ok) throw new ApiError(res.status, `uncertainty: HTTP ${res.status}`);
    const shape = (res.headers.get("X-Shape") ?? "").split(",").map(Number);
    return { shape, values: new Float32Array(await res.arrayBuffer()) };
  }

  async submitLabels(itemId: string, runs: Run[]): Promise<void> {
    const res = await fetch(`${this.baseUrl}/api/item/${itemId}/labels`, {
      method: "POST",
      headers: { "Content-Type": "text/yaml" },
      body: stringify({ pixels: runs.map((r) => [...r]) }),
    });
    if (!res.ok) {
      let detail = `HTTP ${res.status}`;
      try {
        detail = parse(await res.text()).error ?? detail;
      } catch {
        // keep the status-only message
      }
      throw new ApiError(res.status, detail);
    }
  }

  /** Server-side copy of a submitted item's labels, decoded. */
  async submittedLabels(itemId: string): Promise<{ labels: Uint8Array; covered: Uint8Array }> {
    const doc = await getYaml(`${this.baseUrl}/api/item/${itemId}/labels`);
    const size = doc.shape[0] * doc.shape[1];
    return decodeRuns(doc.pixels, size);
  }

  async completeStep(): Promise<void> {
    const res = await fetch(`${this.baseUrl}/api/step/complete`, { method: "POST" });
    if (!res.ok) throw new ApiError(res.status, `step/complete: HTTP ${res.status}`);
  }
}
