/**
 * UI state machine, kept free of DOM access so it can be driven headlessly:
 * fetch an item, render it, accept exactly one decision at a time, advance.
 * A submit in flight disables further submits; a 409/404 answer produces a
 * toast and a skip to the next item; a 204 ends the session with counts.
 */

import { ApiClient, ApiError, Decision, Progress, QueueItemView, RgbaImage } from "./api.js";

export const DECISIONS: Decision[] = ["unchanged", "unsure", "changed"];

export interface ItemRender {
  item: QueueItemView;
  original: RgbaImage;
  adversarial: RgbaImage;
  diff: RgbaImage;
}

/** Everything the controller needs from a concrete view. */
export interface View {
  showItem(render: ItemRender): void;
  showProgress(progress: Progress): void;
  showDone(progress: Progress): void;
  showToast(message: string): void;
  setBusy(busy: boolean): void;
}

export class AppController {
  private current: QueueItemView | null = null;
  private busy = false;
  private finished = false;

  constructor(private api: ApiClient, private view: View) {}

  get currentItem(): QueueItemView | null {
    return this.current;
  }

  get isDone(): boolean {
    return this.finished;
  }

  async start(): Promise<void> {
    await this.refreshProgress();
    await this.advance();
  }

  private async refreshProgress(): Promise<Progress> {
    const progress = await this.api.progress();
    this.view.showProgress(progress);
    return progress;
  }

  private async advance(): Promise<void> {
    const item = await this.api.fetchNext();
    if (item === null) {
      this.current = null;
      this.finished = true;
      this.view.showDone(await this.api.progress());
      return;
    }
    const [original, adversarial, diff] = await Promise.all([
      this.api.fetchImage(item.id, "original"),
      this.api.fetchImage(item.id, "adversarial"),
      this.api.fetchImage(item.id, "diff"),
    ]);
    this.current = item;
    this.view.showItem({ item, original, adversarial, diff });
  }

  /** Keyboard shortcuts 1/2/3 map onto the three buttons in order. */
  async submitByIndex(oneBased: number): Promise<void> {
    const decision = DECISIONS[oneBased - 1];
    if (decision) await this.submit(decision);
  }

  async submit(decision: Decision): Promise<void> {
    if (this.busy || this.finished || this.current === null) return;
    this.busy = true;
    this.view.setBusy(true);
    const id = this.current.id;
    try {
      await this.api.submit(id, decision);
    } catch (err) {
      if (err instanceof ApiError && (err.status === 409 || err.status === 404)) {
        this.view.showToast(`item ${id}: ${err.status === 409 ? "already decided" : "unknown"}; skipping`);
      } else {
        throw err;
      }
    } finally {
      this.busy = false;
      this.view.setBusy(false);
    }
    await this.refreshProgress();
    await this.advance();
  }
}
