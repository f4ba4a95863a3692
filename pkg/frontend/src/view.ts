/**
 * DOM view: paints the original/attacked images onto canvases with
 * nearest-neighbor upscaling (small desk-scale images must stay
 * inspectable), renders label/prediction text, the progress bar, toasts,
 * and the completion screen.  A toggle swaps the attacked image for the
 * difference view.
 */

import { Progress, RgbaImage } from "./api.js";
import { ItemRender, View } from "./app.js";

const SCALE_TARGET = 256; // upscale small images to roughly this size

function paint(canvas: HTMLCanvasElement, image: RgbaImage): void {
  const off = document.createElement("canvas");
  off.width = image.width;
  off.height = image.height;
  const offCtx = off.getContext("2d")!;
  const pixels = new Uint8ClampedArray(image.rgba); // fresh, non-shared buffer
  offCtx.putImageData(new ImageData(pixels, image.width, image.height), 0, 0);

  const scale = Math.max(1, Math.floor(SCALE_TARGET / Math.max(image.width, image.height)));
  canvas.width = image.width * scale;
  canvas.height = image.height * scale;
  const ctx = canvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false; // nearest neighbor
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

export class DomView implements View {
  private originalCanvas = document.getElementById("original") as HTMLCanvasElement;
  private attackedCanvas = document.getElementById("attacked") as HTMLCanvasElement;
  private labelText = document.getElementById("label-text")!;
  private predictionText = document.getElementById("prediction-text")!;
  private progressBar = document.getElementById("progress-bar")!;
  private progressText = document.getElementById("progress-text")!;
  private toast = document.getElementById("toast")!;
  private mainPanel = document.getElementById("main")!;
  private donePanel = document.getElementById("done")!;
  private buttons = Array.from(
    document.querySelectorAll<HTMLButtonElement>("button[data-decision]"));
  private diffToggle = document.getElementById("diff-toggle") as HTMLInputElement;
  private lastRender: ItemRender | null = null;
  private toastTimer: number | undefined;

  constructor() {
    this.diffToggle.addEventListener("change", () => this.paintAttacked());
  }

  showItem(render: ItemRender): void {
    this.lastRender = render;
    this.mainPanel.hidden = false;
    this.donePanel.hidden = true;
    paint(this.originalCanvas, render.original);
    this.paintAttacked();
    const item = render.item;
    this.labelText.textContent =
      `original label: class ${item.original_label}`;
    const conf = (item.prediction[item.predicted_class] * 100).toFixed(1);
    this.predictionText.textContent =
      `model now predicts: class ${item.predicted_class} (${conf}%)`;
  }

  private paintAttacked(): void {
    if (!this.lastRender) return;
    paint(this.attackedCanvas,
          this.diffToggle.checked ? this.lastRender.diff : this.lastRender.adversarial);
  }

  showProgress(progress: Progress): void {
    const done = progress.decided;
    const pct = progress.total ? Math.round((100 * done) / progress.total) : 0;
    this.progressBar.style.width = `${pct}%`;
    this.progressText.textContent =
      `${done}/${progress.total} decided ` +
      `(unchanged ${progress.counts.unchanged}, unsure ${progress.counts.unsure}, ` +
      `changed ${progress.counts.changed})`;
  }

  showDone(progress: Progress): void {
    this.showProgress(progress);
    this.mainPanel.hidden = true;
    this.donePanel.hidden = false;
    this.donePanel.querySelector("#done-counts")!.textContent =
      `unchanged ${progress.counts.unchanged} / unsure ${progress.counts.unsure} / ` +
      `changed ${progress.counts.changed}`;
  }

  showToast(message: string): void {
    this.toast.textContent = message;
    this.toast.classList.add("visible");
    window.clearTimeout(this.toastTimer);
    this.toastTimer = window.setTimeout(
      () => this.toast.classList.remove("visible"), 2500);
  }

  setBusy(busy: boolean): void {
    for (const b of this.buttons) b.disabled = busy;
  }
}
