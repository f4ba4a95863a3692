"""Annotation service for the active-learning loop.

A queue of high-confidence adversarial examples is generated offline (the
attack is far too slow for on-demand serving), then annotators walk it
through a small REST API: lease the next undecided item, look at the
original and attacked images, and record one of three decisions (unchanged /
unsure / changed).  Decisions append to a JSON-lines log; replaying the log
reconstructs the progress counters exactly.  Accepted ("unchanged") records
are later merged back into training data.
"""

from __future__ import annotations

import dataclasses
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from . import attack as atk
from . import autodiff as ad
from . import nn
from .data import Dataset


DECISIONS = ("unchanged", "unsure", "changed")
LOG_VERSION = 1


class ServiceError(RuntimeError):
    pass


@dataclass
class AnnotationRecord:
    id: str
    source_example_id: str
    adversarial_image: str       # AETN path
    original_label: int
    predicted_adversarial_class: int
    decision: str
    annotator: str
    timestamp: int               # UTC seconds
    v: int = LOG_VERSION

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclass
class QueueItem:
    id: str
    source_example_id: str
    original: np.ndarray
    adversarial: np.ndarray
    original_label: int
    prediction: np.ndarray       # softmax at the adversarial image
    adversarial_path: str = ""
    leased_until: float = 0.0
    decided_by: dict = field(default_factory=dict)  # annotator -> decision

    def view(self) -> dict:
        c, h, w = _chw(self.original)
        return {
            "id": self.id,
            "source_example_id": self.source_example_id,
            "original_label": int(self.original_label),
            "predicted_class": int(np.argmax(self.prediction)),
            "prediction": [float(p) for p in self.prediction],
            "channels": c,
            "height": h,
            "width": w,
        }


def _chw(image: np.ndarray) -> tuple[int, int, int]:
    """Normalize any image shape to (channels, height, width) for display."""
    if image.ndim == 3:
        return image.shape
    if image.ndim == 1:
        return (1, 1, image.shape[0])
    if image.ndim == 2:
        return (1, *image.shape)
    raise ServiceError(f"cannot display image of shape {image.shape}")


def image_rgba(image: np.ndarray) -> bytes:
    """8-bit RGBA bytes (row-major), grayscale replicated across RGB."""
    c, h, w = _chw(image)
    px = np.clip(image.reshape(c, h, w), 0.0, 1.0)
    if c == 1:
        rgb = np.repeat(px, 3, axis=0)
    elif c == 3:
        rgb = px
    else:
        rgb = np.repeat(px[:1], 3, axis=0)
    out = np.empty((h, w, 4), dtype=np.uint8)
    out[:, :, :3] = np.transpose(np.round(rgb * 255), (1, 2, 0))
    out[:, :, 3] = 255
    return out.tobytes()


# ---------------------------------------------------------------------------
# Queue generation / persistence


def generate_queue(net: nn.Network, dataset: Dataset, size: int,
                   margin: float = 0.5, steps: int = 450, seed: int = 0,
                   eta: float = 0.55, batch_size: int = 32) -> list[QueueItem]:
    """Attack correctly classified examples with the high-confidence goal
    until ``size`` successful adversarial images exist (or the data runs
    out)."""
    cfg = atk.AttackConfig(goal="high-confidence", margin=margin, steps=steps,
                           eta=eta)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    preds = net.predict(dataset.images)
    candidates = [i for i in order if preds[i] == dataset.labels[i]]
    items: list[QueueItem] = []
    for start in range(0, len(candidates), batch_size):
        if len(items) >= size:
            break
        chunk = candidates[start:start + batch_size]
        outcomes = atk.attack_batch(net, dataset.images[chunk],
                                    dataset.labels[chunk], cfg)
        for idx, out in zip(chunk, outcomes):
            if len(items) >= size:
                break
            if not out.success:
                continue
            original = dataset.images[idx]
            adversarial = np.clip(original + out.delta_best, 0.0, 1.0)
            ex = dataset.examples[idx]
            items.append(QueueItem(
                id=f"q{len(items):05d}-{ex.id}",
                source_example_id=ex.id,
                original=original,
                adversarial=adversarial,
                original_label=int(ex.label),
                prediction=out.final_prediction))
    return items


def save_queue(items: list[QueueItem], directory) -> Path:
    directory = Path(directory)
    images = directory / "images"
    images.mkdir(parents=True, exist_ok=True)
    manifest = []
    for item in items:
        adv_path = images / f"{item.id}-adv.aetn"
        ad.save_tensor(adv_path, item.adversarial)
        ad.save_tensor(images / f"{item.id}-orig.aetn", item.original)
        item.adversarial_path = str(adv_path)
        manifest.append({
            "id": item.id,
            "source_example_id": item.source_example_id,
            "original_label": item.original_label,
            "prediction": [float(p) for p in item.prediction],
        })
    with open(directory / "queue.json", "w") as fh:
        json.dump({"format": "robustkit-queue", "version": 1,
                   "items": manifest}, fh, indent=2)
    return directory


def load_queue(directory) -> list[QueueItem]:
    directory = Path(directory)
    with open(directory / "queue.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "robustkit-queue":
        raise ServiceError(f"{directory} is not a queue directory")
    items = []
    for entry in manifest["items"]:
        adv_path = directory / "images" / f"{entry['id']}-adv.aetn"
        items.append(QueueItem(
            id=entry["id"],
            source_example_id=entry["source_example_id"],
            original=ad.load_tensor(directory / "images" / f"{entry['id']}-orig.aetn"),
            adversarial=ad.load_tensor(adv_path),
            original_label=entry["original_label"],
            prediction=np.array(entry["prediction"]),
            adversarial_path=str(adv_path)))
    return items


def verify_queue(net: nn.Network, items: list[QueueItem], margin: float = 0.5,
                 sample: int = 8) -> None:
    """Spot-check that queued adversarial images still satisfy the
    high-confidence goal against the generating network."""
    for item in items[:sample]:
        s = net.predict_proba(item.adversarial)
        if not atk.goal_high_confidence(s, item.original_label, margin):
            raise ServiceError(
                f"queue item {item.id} no longer satisfies the "
                "high-confidence goal; was it built from this checkpoint?")


# ---------------------------------------------------------------------------
# Queue state machine


class AnnotationQueue:
    """Thread-safe lease/decide state over queue items plus the append-only
    decision log."""

    def __init__(self, items: list[QueueItem], log_path,
                 allow_overlap: bool = False, lease_seconds: float = 600.0,
                 clock=time.time):
        self.items = {item.id: item for item in items}
        if len(self.items) != len(items):
            raise ServiceError("duplicate queue item ids")
        self.order = [item.id for item in items]
        self.log_path = Path(log_path)
        self.allow_overlap = allow_overlap
        self.lease_seconds = lease_seconds
        self.clock = clock
        self.records: list[AnnotationRecord] = []
        self._lock = threading.Lock()
        if self.log_path.exists():
            for rec in read_log(self.log_path):
                self._apply(rec)

    def _apply(self, rec: AnnotationRecord) -> None:
        item = self.items.get(rec.id)
        if item is not None:
            item.decided_by[rec.annotator] = rec.decision
        self.records.append(rec)

    def _available(self, item: QueueItem, annotator: str, now: float) -> bool:
        if item.leased_until > now:
            return False
        if not self.allow_overlap:
            return not item.decided_by
        return annotator not in item.decided_by

    def next_item(self, annotator: str) -> QueueItem | None:
        now = self.clock()
        with self._lock:
            for iid in self.order:
                item = self.items[iid]
                if self._available(item, annotator, now):
                    item.leased_until = now + self.lease_seconds
                    return item
        return None

    def submit(self, item_id: str, decision: str, annotator: str) -> AnnotationRecord:
        if decision not in DECISIONS:
            raise ValueError(f"decision must be one of {DECISIONS}")
        if not annotator:
            raise ValueError("annotator required")
        with self._lock:
            item = self.items.get(item_id)
            if item is None:
                raise KeyError(item_id)
            if self.allow_overlap:
                if annotator in item.decided_by:
                    raise FileExistsError(item_id)
            elif item.decided_by:
                raise FileExistsError(item_id)
            rec = AnnotationRecord(
                id=item.id,
                source_example_id=item.source_example_id,
                adversarial_image=item.adversarial_path,
                original_label=item.original_label,
                predicted_adversarial_class=int(np.argmax(item.prediction)),
                decision=decision,
                annotator=annotator,
                timestamp=int(self.clock()))
            with open(self.log_path, "a") as fh:
                fh.write(rec.to_json() + "\n")
                fh.flush()
            item.decided_by[annotator] = decision
            item.leased_until = 0.0
            self.records.append(rec)
            return rec

    def progress(self) -> dict:
        with self._lock:
            counts = {d: 0 for d in DECISIONS}
            for rec in self.records:
                if rec.id in self.items:
                    counts[rec.decision] += 1
            decided_items = sum(1 for i in self.items.values() if i.decided_by)
            shared = [i for i in self.items.values() if len(i.decided_by) >= 2]
            agreeing = sum(1 for i in shared
                           if len(set(i.decided_by.values())) == 1)
            return {
                "total": len(self.items),
                "decided": decided_items,
                "remaining": len(self.items) - decided_items,
                "counts": counts,
                "annotations": sum(counts.values()),
                "shared": len(shared),
                "agreement": (agreeing / len(shared)) if shared else None,
            }


def read_log(path) -> list[AnnotationRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            records.append(AnnotationRecord(**raw))
    return records


# ---------------------------------------------------------------------------
# HTTP app


def build_app(queue: AnnotationQueue, ui_dir=None) -> FastAPI:
    app = FastAPI(title="robustkit annotation service")
    app.state.queue = queue

    @app.get("/api/queue/next")
    def queue_next(annotator: str = "anon"):
        item = queue.next_item(annotator)
        if item is None:
            return Response(status_code=204)
        return item.view()

    @app.post("/api/annotations")
    async def annotate(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "malformed JSON body"}, status_code=400)
        if not isinstance(body, dict) or "id" not in body or "decision" not in body:
            return JSONResponse({"error": "fields 'id' and 'decision' required"},
                                status_code=400)
        annotator = str(body.get("annotator", "anon"))
        try:
            rec = queue.submit(str(body["id"]), str(body["decision"]), annotator)
        except ValueError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        except KeyError:
            return JSONResponse({"error": f"unknown item {body['id']}"},
                                status_code=404)
        except FileExistsError:
            return JSONResponse({"error": f"item {body['id']} already decided"},
                                status_code=409)
        return dataclasses.asdict(rec)

    @app.get("/api/progress")
    def progress():
        return queue.progress()

    @app.get("/api/image/{item_id}")
    def image(item_id: str, request: Request, kind: str = "adversarial"):
        item = queue.items.get(item_id)
        if item is None:
            return JSONResponse({"error": f"unknown item {item_id}"},
                                status_code=404)
        if kind == "original":
            img = item.original
        elif kind == "adversarial":
            img = item.adversarial
        elif kind == "diff":
            img = np.clip(0.5 + (item.adversarial - item.original) / 2, 0, 1)
        else:
            return JSONResponse({"error": "kind must be original|adversarial|diff"},
                                status_code=400)
        accept = request.headers.get("accept", "")
        if "application/x-aetn" in accept:
            return Response(content=ad.tensor_bytes(img),
                            media_type="application/x-aetn")
        c, h, w = _chw(img)
        return Response(content=image_rgba(img),
                        media_type="application/octet-stream",
                        headers={"X-Image-Width": str(w),
                                 "X-Image-Height": str(h)})

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
