// End-to-end annotation loop against the real service (acceptance A14):
// train a small model, serve a 30-item queue, drive 30 decisions through the
// UI controller (10 per decision), then check log conservation, the
// /progress counters, and that merge-retrain grows the dataset by exactly
// the 10 records marked "unchanged".

import { spawn, spawnSync, ChildProcess } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { ApiClient } from "../src/api.js";
import { AppController, ItemRender, View } from "../src/app.js";

const PY = process.env.PYTHON ?? "python3";
const REPO = path.resolve(__dirname, "..", "..");
const PORT = 8471;
const BASE = `http://127.0.0.1:${PORT}`;

let work: string;
let server: ChildProcess | null = null;

function run(args: string[]): string {
  const res = spawnSync(PY, ["-m", "robustkit.cli", ...args],
                        { cwd: REPO, encoding: "utf8" });
  if (res.status !== 0) {
    throw new Error(`robustkit ${args[0]} failed: ${res.stderr}\n${res.stdout}`);
  }
  return res.stdout;
}

async function waitForServer(): Promise<void> {
  for (let i = 0; i < 120; i++) {
    try {
      const res = await fetch(`${BASE}/api/progress`);
      if (res.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 500));
  }
  throw new Error("service did not come up");
}

class HeadlessView implements View {
  rendered: string[] = [];
  done = false;

  showItem(render: ItemRender): void {
    this.rendered.push(render.item.id);
    // sanity: images arrive as RGBA with the advertised geometry
    expect(render.original.rgba.length).toBe(
      render.original.width * render.original.height * 4);
  }
  showProgress(): void {}
  showDone(): void {
    this.done = true;
  }
  showToast(message: string): void {
    throw new Error(`unexpected toast: ${message}`);
  }
  setBusy(): void {}
}

beforeAll(async () => {
  work = fs.mkdtempSync(path.join(os.tmpdir(), "robustkit-e2e-"));
  run(["gen-data", "--dataset", "blobs", "--classes", "3", "--per-class", "60",
       "--spread", "0.14", "--seed", "21", "--out", path.join(work, "data")]);
  const cfg = {
    architecture: "mlp-2d", epochs: 10, batch_size: 32, seed: 3,
    schedule: { base_lr: 0.2, warmup_epochs: 2, step_epochs: [8], step_factor: 0.1 },
  };
  fs.writeFileSync(path.join(work, "train.json"), JSON.stringify(cfg));
  run(["train", "--data", path.join(work, "data"),
       "--config", path.join(work, "train.json"),
       "--out", path.join(work, "ckpt")]);
  server = spawn(PY, ["-m", "robustkit.cli", "serve",
                      "--ckpt", path.join(work, "ckpt"),
                      "--data", path.join(work, "data"),
                      "--annotations", path.join(work, "annotations.jsonl"),
                      "--queue-size", "30", "--steps", "200",
                      "--port", String(PORT)],
                 { cwd: REPO, stdio: ["ignore", "pipe", "pipe"] });
  await waitForServer();
}, 240_000);

afterAll(() => {
  if (server) server.kill("SIGTERM");
});

describe("annotation loop end to end", () => {
  it("drives 30 decisions through the UI and merges the accepted ones back",
     async () => {
    const api = new ApiClient(BASE, "e2e");
    const view = new HeadlessView();
    const controller = new AppController(api, view);
    await controller.start();

    // 10 of each decision, via the same code path the buttons use
    for (let i = 0; i < 30; i++) {
      expect(controller.isDone).toBe(false);
      await controller.submitByIndex((i % 3) + 1);
    }
    expect(controller.isDone).toBe(true);
    expect(view.done).toBe(true);
    expect(view.rendered.length).toBe(30);
    expect(new Set(view.rendered).size).toBe(30);

    // progress endpoint conserves the decision counts
    const progress = await api.progress();
    expect(progress.total).toBe(30);
    expect(progress.decided).toBe(30);
    expect(progress.remaining).toBe(0);
    expect(progress.counts).toEqual({ unchanged: 10, unsure: 10, changed: 10 });

    // every click produced exactly one log record
    const log = fs.readFileSync(path.join(work, "annotations.jsonl"), "utf8")
      .trim().split("\n").map((line) => JSON.parse(line));
    expect(log.length).toBe(30);
    const byDecision = log.reduce((acc: Record<string, number>, rec) => {
      acc[rec.decision] = (acc[rec.decision] ?? 0) + 1;
      return acc;
    }, {});
    expect(byDecision).toEqual({ unchanged: 10, unsure: 10, changed: 10 });

    // merge-retrain consumes only the 10 "unchanged" records
    const out = run(["merge-retrain",
                     "--data", path.join(work, "data"),
                     "--annotations", path.join(work, "annotations.jsonl"),
                     "--config", path.join(work, "train.json"),
                     "--out", path.join(work, "ckpt2"),
                     "--merged-out", path.join(work, "merged")]);
    const summary = JSON.parse(out);
    expect(summary.added).toBe(10);
    expect(summary.total).toBe(summary.base_examples + 10);
    expect(fs.existsSync(path.join(work, "ckpt2", "manifest.json"))).toBe(true);
  }, 240_000);
});
