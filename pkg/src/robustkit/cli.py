"""Command line for every pipeline: dataset generation, training, attacks,
explanation triptychs, robustness curves, the annotation service, and the
merge-retrain step of the active-learning loop.

Successful commands print machine-readable JSON to stdout (or write to
--out); failures print a structured error object to stderr and exit 1.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import attack as atk
from . import autodiff as ad
from . import metrics
from . import nn
from . import service as svc
from . import train as trainmod
from .data import Dataset, gen_blobs, load_cifar_subset, load_digits_dataset, \
    merge_annotations


def _fail(exc: BaseException) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(payload), err=True)
    sys.exit(1)


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2)
    if out:
        Path(out).write_text(text + "\n")
        click.echo(json.dumps({"written": out}))
    else:
        click.echo(text)


def _load_train_config(path: str | None, seed: int | None) -> trainmod.TrainConfig:
    cfg = trainmod.TrainConfig() if path is None \
        else trainmod.TrainConfig.from_dict(json.loads(Path(path).read_text()))
    if seed is not None:
        cfg.seed = seed
    return cfg


@click.group()
def main():
    """Robust-classifier toolkit: train, attack, measure, annotate."""


@main.command("gen-data")
@click.option("--dataset", type=click.Choice(["blobs", "digits", "cifar"]),
              default="blobs", show_default=True)
@click.option("--classes", default=3, show_default=True)
@click.option("--per-class", default=300, show_default=True)
@click.option("--spread", default=0.12, show_default=True,
              help="Blob cluster diameter (about two standard deviations).")
@click.option("--cifar-path", type=click.Path(exists=True),
              help="CIFAR-10 binary file or directory (dataset=cifar).")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def gen_data(dataset, classes, per_class, spread, cifar_path, seed, out):
    """Generate or import a dataset directory."""
    try:
        if dataset == "blobs":
            ds = gen_blobs(classes, per_class, spread, seed)
        elif dataset == "digits":
            ds = load_digits_dataset(per_class=per_class)
        else:
            if not cifar_path:
                raise click.UsageError("--cifar-path required for dataset=cifar")
            ds = load_cifar_subset(cifar_path, per_class=per_class)
        ds.save(out)
        _emit({"dataset": ds.name, "examples": len(ds),
               "classes": ds.n_classes, "shape": list(ds.input_shape),
               "out": str(out)}, None)
    except Exception as exc:  # noqa: BLE001 - structured CLI error path
        _fail(exc)


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="Training config JSON; defaults are used when omitted.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "ckpt_dir", type=click.Path(), help="Checkpoint directory.")
@click.option("--report", "report_path", type=click.Path(),
              help="Write the full report JSON here instead of stdout.")
def train(data_dir, config_path, seed, ckpt_dir, report_path):
    """Train a network on a dataset directory."""
    try:
        dataset = Dataset.load(data_dir)
        cfg = _load_train_config(config_path, seed)
        _, report = trainmod.train(cfg, dataset, checkpoint_dir=ckpt_dir)
        _emit(report.to_dict(), report_path)
    except Exception as exc:
        _fail(exc)


def _attack_config(goal, steps, eta, margin, rho, target) -> atk.AttackConfig:
    return atk.AttackConfig(goal=goal, steps=steps, eta=eta, margin=margin,
                            rho=rho, target_class=target)


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--goal", type=click.Choice(list(atk.GOALS)), default="adv",
              show_default=True)
@click.option("--count", default=20, show_default=True,
              help="How many correctly classified examples to attack.")
@click.option("--steps", default=450, show_default=True)
@click.option("--eta", default=0.55, show_default=True)
@click.option("--margin", default=0.5, show_default=True)
@click.option("--rho", default=0.0, show_default=True)
@click.option("--target", type=int, default=None)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), help="Write JSONL records here.")
@click.option("--dump-dir", type=click.Path(),
              help="Dump delta/attacked AETN tensors per example.")
@click.option("--queue-out", type=click.Path(),
              help="Also save successful attacks as an annotation queue.")
def attack(ckpt, data_dir, goal, count, steps, eta, margin, rho, target, seed,
           out, dump_dir, queue_out):
    """Attack examples and emit one JSON record per example."""
    try:
        net = nn.load_checkpoint(ckpt)
        dataset = Dataset.load(data_dir)
        cfg = _attack_config(goal, steps, eta, margin, rho, target)
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(dataset))
        preds = net.predict(dataset.images)
        chosen = [i for i in order if preds[i] == dataset.labels[i]][:count]
        outcomes = atk.attack_batch(net, dataset.images[chosen],
                                    dataset.labels[chosen], cfg)
        records = []
        for idx, outcome in zip(chosen, outcomes):
            ex = dataset.examples[idx]
            rec = {
                "id": ex.id,
                "goal": goal,
                "label": int(ex.label),
                "success": outcome.success,
                "m_best": outcome.m_best,
                "rmse": outcome.rmse,
                "steps_to_first_success": outcome.steps_to_first_success,
                "prediction": [float(p) for p in outcome.final_prediction],
            }
            if dump_dir and outcome.success:
                ddir = Path(dump_dir)
                ddir.mkdir(parents=True, exist_ok=True)
                ad.save_tensor(ddir / f"{ex.id}-delta.aetn", outcome.delta_best)
                attacked = np.clip(ex.image + outcome.delta_best, 0, 1)
                ad.save_tensor(ddir / f"{ex.id}-attacked.aetn", attacked)
                rec["delta"] = str(ddir / f"{ex.id}-delta.aetn")
                rec["attacked"] = str(ddir / f"{ex.id}-attacked.aetn")
            records.append(rec)
        if queue_out:
            items = []
            for idx, outcome in zip(chosen, outcomes):
                if not outcome.success:
                    continue
                ex = dataset.examples[idx]
                items.append(svc.QueueItem(
                    id=f"q{len(items):05d}-{ex.id}",
                    source_example_id=ex.id,
                    original=ex.image,
                    adversarial=np.clip(ex.image + outcome.delta_best, 0, 1),
                    original_label=int(ex.label),
                    prediction=outcome.final_prediction))
            svc.save_queue(items, queue_out)
        lines = "\n".join(json.dumps(r) for r in records)
        if out:
            Path(out).write_text(lines + "\n")
            click.echo(json.dumps({"written": out, "records": len(records)}))
        else:
            click.echo(lines)
    except Exception as exc:
        _fail(exc)


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--index", default=0, show_default=True,
              help="Dataset index of the example to explain.")
@click.option("--goal", type=click.Choice(["explain-plus", "explain-minus"]),
              default="explain-plus", show_default=True)
@click.option("--target", type=int, required=True)
@click.option("--rho", default=0.1, show_default=True)
@click.option("--steps", default=450, show_default=True)
@click.option("--eta", default=0.55, show_default=True)
@click.option("--out", required=True, type=click.Path(),
              help="Directory for the input/delta/attacked triptych.")
def explain(ckpt, data_dir, index, goal, target, rho, steps, eta, out):
    """Produce an explanation triptych for one example."""
    try:
        net = nn.load_checkpoint(ckpt)
        dataset = Dataset.load(data_dir)
        ex = dataset.examples[index]
        cfg = atk.AttackConfig(goal=goal, rho=rho, target_class=target,
                               steps=steps, eta=eta)
        outcome = atk.attack(net, ex.image, ex.label, cfg)
        odir = Path(out)
        odir.mkdir(parents=True, exist_ok=True)
        ad.save_tensor(odir / "input.aetn", ex.image)
        payload = {
            "id": ex.id,
            "goal": goal,
            "target": target,
            "rho": rho,
            "success": outcome.success,
            "rmse": outcome.rmse,
            "out": str(odir),
        }
        if outcome.success:
            attacked = np.clip(ex.image + outcome.delta_best, 0, 1)
            ad.save_tensor(odir / "delta.aetn", outcome.delta_best)
            ad.save_tensor(odir / "attacked.aetn", attacked)
            payload["prediction"] = [float(p) for p in outcome.final_prediction]
        _emit(payload, None)
    except Exception as exc:
        _fail(exc)


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--goal", type=click.Choice(["adv", "btr"]), default="adv",
              show_default=True)
@click.option("--quota", default=200, show_default=True)
@click.option("--cap", default=0.2, show_default=True)
@click.option("--steps", default=450, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), help="Write the JSON summary here.")
@click.option("--curve-csv", type=click.Path(), help="Write (r, accuracy) rows.")
def ara(ckpt, data_dir, goal, quota, cap, steps, seed, out, curve_csv):
    """Build an accuracy-vs-RMSE curve and report its area."""
    try:
        net = nn.load_checkpoint(ckpt)
        dataset = Dataset.load(data_dir)
        cfg = atk.AttackConfig(goal=goal, steps=steps)
        curve = metrics.build_curve(net, dataset, goal, quota, cap,
                                    attack_cfg=cfg, seed=seed)
        if curve_csv:
            curve.to_csv(curve_csv)
        _emit(curve.summary(), out)
    except Exception as exc:
        _fail(exc)


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--annotations", "log_path", required=True, type=click.Path())
@click.option("--queue", "queue_dir", type=click.Path(),
              help="Pre-generated queue directory (reused if it exists).")
@click.option("--queue-size", default=30, show_default=True)
@click.option("--margin", default=0.5, show_default=True)
@click.option("--steps", default=450, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--lease-seconds", default=600.0, show_default=True)
@click.option("--allow-overlap", is_flag=True,
              help="Let different annotators each decide the same item.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, show_default=True)
@click.option("--ui", "ui_dir", type=click.Path(exists=True),
              help="Static frontend directory to serve at /.")
def serve(ckpt, data_dir, log_path, queue_dir, queue_size, margin, steps, seed,
          lease_seconds, allow_overlap, host, port, ui_dir):
    """Serve the annotation API (and optionally the UI) over HTTP."""
    try:
        import uvicorn

        net = nn.load_checkpoint(ckpt)
        dataset = Dataset.load(data_dir)
        if queue_dir and (Path(queue_dir) / "queue.json").exists():
            items = svc.load_queue(queue_dir)
        else:
            items = svc.generate_queue(net, dataset, queue_size, margin=margin,
                                       steps=steps, seed=seed)
            svc.save_queue(items, queue_dir or Path(log_path).parent / "queue")
        if not items:
            raise svc.ServiceError("queue is empty; is the model attackable?")
        svc.verify_queue(net, items, margin=margin)
        queue = svc.AnnotationQueue(items, log_path, allow_overlap=allow_overlap,
                                    lease_seconds=lease_seconds)
        app = svc.build_app(queue, ui_dir=ui_dir)
        click.echo(json.dumps({"serving": f"http://{host}:{port}",
                               "queue": len(items),
                               "annotations": str(log_path)}))
        uvicorn.run(app, host=host, port=port, log_level="warning")
    except Exception as exc:
        _fail(exc)


@main.command("merge-retrain")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--annotations", "log_path", required=True,
              type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--out", "ckpt_dir", type=click.Path(), required=True)
@click.option("--merged-out", type=click.Path(),
              help="Also save the merged dataset directory.")
def merge_retrain(data_dir, log_path, config_path, seed, ckpt_dir, merged_out):
    """Merge accepted annotations into the dataset and retrain from scratch."""
    try:
        dataset = Dataset.load(data_dir)
        records = [dataclasses.asdict(r) for r in svc.read_log(log_path)]
        merged = merge_annotations(dataset, records)
        added = len(merged) - len(dataset)
        if merged_out:
            merged.save(merged_out)
        cfg = _load_train_config(config_path, seed)
        _, report = trainmod.train(cfg, merged, checkpoint_dir=ckpt_dir)
        _emit({"base_examples": len(dataset), "added": added,
               "total": len(merged), "checkpoint": str(ckpt_dir),
               "final_accuracy": report.final_accuracy}, None)
    except Exception as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
