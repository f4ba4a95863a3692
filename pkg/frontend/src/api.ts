/**
 * Thin client for the annotation service REST API.
 *
 * Network failures (fetch rejections) are retried with exponential backoff;
 * HTTP error statuses are semantic and surfaced to the caller as ApiError so
 * the app can decide (409/404 -> toast and skip, etc.).
 */

export type Decision = "unchanged" | "unsure" | "changed";

export interface QueueItemView {
  id: string;
  source_example_id: string;
  original_label: number;
  predicted_class: number;
  prediction: number[];
  channels: number;
  height: number;
  width: number;
}

export interface Progress {
  total: number;
  decided: number;
  remaining: number;
  counts: Record<Decision, number>;
  annotations: number;
  shared: number;
  agreement: number | null;
}

export interface RgbaImage {
  width: number;
  height: number;
  rgba: Uint8ClampedArray;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

export class ApiClient {
  constructor(
    private base: string = "",
    public annotator: string = "anon",
    private maxRetries: number = 4,
    private backoffMs: number = 250,
  ) {}

  /** fetch with backoff on *network* errors only. */
  private async request(path: string, init?: RequestInit): Promise<Response> {
    let lastErr: unknown;
    for (let attempt = 0; attempt <= this.maxRetries; attempt++) {
      try {
        return await fetch(this.base + path, init);
      } catch (err) {
        lastErr = err;
        if (attempt < this.maxRetries) {
          await sleep(this.backoffMs * 2 ** attempt);
        }
      }
    }
    throw lastErr;
  }

  /** Next undecided item, or null when the queue is exhausted (204). */
  async fetchNext(): Promise<QueueItemView | null> {
    const res = await this.request(
      `/api/queue/next?annotator=${encodeURIComponent(this.annotator)}`,
    );
    if (res.status === 204) return null;
    if (!res.ok) throw new ApiError(res.status, await res.text());
    return (await res.json()) as QueueItemView;
  }

  async submit(id: string, decision: Decision): Promise<void> {
    const res = await this.request("/api/annotations", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ id, decision, annotator: this.annotator }),
    });
    if (!res.ok) throw new ApiError(res.status, await res.text());
  }

  async progress(): Promise<Progress> {
    const res = await this.request("/api/progress");
    if (!res.ok) throw new ApiError(res.status, await res.text());
    return (await res.json()) as Progress;
  }

  async fetchImage(
    id: string,
    kind: "original" | "adversarial" | "diff",
  ): Promise<RgbaImage> {
    const res = await this.request(
      `/api/image/${encodeURIComponent(id)}?kind=${kind}`,
    );
    if (!res.ok) throw new ApiError(res.status, await res.text());
    const width = parseInt(res.headers.get("X-Image-Width") ?? "0", 10);
    const height = parseInt(res.headers.get("X-Image-Height") ?? "0", 10);
    const buf = await res.arrayBuffer();
    return { width, height, rgba: new Uint8ClampedArray(buf) };
  }
}
