"""End-to-end CLI checks through click's runner: dataset generation, training
to a checkpoint, attacking, explanation triptychs, curve summaries, queue
dumps, merge-retrain bookkeeping, and the structured error path."""

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from robustkit import autodiff as ad
from robustkit import service as svc
from robustkit.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A dataset and a quickly trained checkpoint shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    r = runner.invoke(main, ["gen-data", "--dataset", "blobs", "--classes", "3",
                             "--per-class", "60", "--spread", "0.14",
                             "--seed", "21", "--out", str(root / "data")])
    assert r.exit_code == 0, r.output
    cfg = {
        "architecture": "mlp-2d", "epochs": 10, "batch_size": 32, "seed": 3,
        "schedule": {"base_lr": 0.2, "warmup_epochs": 2, "step_epochs": [8],
                     "step_factor": 0.1},
    }
    (root / "train.json").write_text(json.dumps(cfg))
    r = runner.invoke(main, ["train", "--data", str(root / "data"),
                             "--config", str(root / "train.json"),
                             "--out", str(root / "ckpt"),
                             "--report", str(root / "report.json")])
    assert r.exit_code == 0, r.output
    return root


def test_gen_data_reports_shape(workdir):
    manifest = json.loads((workdir / "data" / "manifest.json").read_text())
    assert manifest["n_classes"] == 3
    assert len(manifest["ids"]) == 180


def test_train_report_and_checkpoint(workdir):
    report = json.loads((workdir / "report.json").read_text())
    assert len(report["epochs"]) == 10
    assert report["final_accuracy"] > 0.9
    assert (workdir / "ckpt" / "manifest.json").exists()


def test_attack_records(workdir, tmp_path):
    runner = CliRunner()
    out = tmp_path / "records.jsonl"
    r = runner.invoke(main, ["attack", "--ckpt", str(workdir / "ckpt"),
                             "--data", str(workdir / "data"),
                             "--goal", "adv", "--count", "5",
                             "--steps", "150", "--seed", "1",
                             "--out", str(out),
                             "--dump-dir", str(tmp_path / "dumps")])
    assert r.exit_code == 0, r.output
    records = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(records) == 5
    for rec in records:
        assert rec["goal"] == "adv"
        if rec["success"]:
            assert rec["rmse"] > 0
            assert Path(rec["delta"]).exists()
            delta = ad.load_tensor(rec["delta"])
            assert delta.shape == (2,)


def test_attack_queue_out(workdir, tmp_path):
    runner = CliRunner()
    qdir = tmp_path / "queue"
    r = runner.invoke(main, ["attack", "--ckpt", str(workdir / "ckpt"),
                             "--data", str(workdir / "data"),
                             "--goal", "high-confidence", "--count", "6",
                             "--steps", "200", "--queue-out", str(qdir)])
    assert r.exit_code == 0, r.output
    items = svc.load_queue(qdir)
    assert len(items) >= 1


def test_explain_triptych(workdir, tmp_path):
    runner = CliRunner()
    odir = tmp_path / "triptych"
    r = runner.invoke(main, ["explain", "--ckpt", str(workdir / "ckpt"),
                             "--data", str(workdir / "data"),
                             "--index", "0", "--goal", "explain-plus",
                             "--target", "2", "--rho", "0.1",
                             "--steps", "200", "--out", str(odir)])
    assert r.exit_code == 0, r.output
    payload = json.loads(r.output)
    assert payload["success"]
    x = ad.load_tensor(odir / "input.aetn")
    d = ad.load_tensor(odir / "delta.aetn")
    a = ad.load_tensor(odir / "attacked.aetn")
    np.testing.assert_allclose(np.clip(x + d, 0, 1), a, atol=1e-12)


def test_ara_summary_and_csv(workdir, tmp_path):
    runner = CliRunner()
    csv_path = tmp_path / "curve.csv"
    r = runner.invoke(main, ["ara", "--ckpt", str(workdir / "ckpt"),
                             "--data", str(workdir / "data"),
                             "--goal", "adv", "--quota", "20",
                             "--cap", "0.2", "--steps", "150",
                             "--curve-csv", str(csv_path)])
    assert r.exit_code == 0, r.output
    summary = json.loads(r.output)
    assert "area" in summary and summary["area"] >= 0
    assert summary["quota"] == 20
    assert csv_path.read_text().startswith("r,accuracy")


def test_merge_retrain_counts(workdir, tmp_path):
    # one unchanged + one changed annotation: dataset grows by exactly one
    img_path = tmp_path / "adv.aetn"
    ad.save_tensor(img_path, np.array([0.25, 0.75]))
    log = tmp_path / "ann.jsonl"
    rows = [
        {"id": "ann-1", "source_example_id": "blob-0-0",
         "adversarial_image": str(img_path), "original_label": 0,
         "predicted_adversarial_class": 1, "decision": "unchanged",
         "annotator": "a", "timestamp": 0, "v": 1},
        {"id": "ann-2", "source_example_id": "blob-0-1",
         "adversarial_image": str(img_path), "original_label": 1,
         "predicted_adversarial_class": 2, "decision": "changed",
         "annotator": "a", "timestamp": 0, "v": 1},
    ]
    log.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    cfg = {"architecture": "mlp-2d", "epochs": 2, "batch_size": 32, "seed": 0,
           "schedule": {"base_lr": 0.1, "warmup_epochs": 1, "step_epochs": []}}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    runner = CliRunner()
    r = runner.invoke(main, ["merge-retrain", "--data", str(workdir / "data"),
                             "--annotations", str(log),
                             "--config", str(cfg_path),
                             "--out", str(tmp_path / "ckpt2"),
                             "--merged-out", str(tmp_path / "merged")])
    assert r.exit_code == 0, r.output
    payload = json.loads(r.output)
    assert payload["added"] == 1
    assert payload["total"] == payload["base_examples"] + 1
    merged_manifest = json.loads((tmp_path / "merged" / "manifest.json").read_text())
    assert merged_manifest["origins"].count("annotation") == 1


def test_structured_error_on_bad_input(tmp_path):
    runner = CliRunner(mix_stderr=False) if "mix_stderr" in \
        CliRunner.__init__.__code__.co_varnames else CliRunner()
    r = runner.invoke(main, ["train", "--data", str(tmp_path / "missing")])
    assert r.exit_code != 0


def test_error_json_on_stderr(workdir, tmp_path):
    # dataset dir exists but is not a dataset -> structured JSON error
    bogus = tmp_path / "bogus"
    bogus.mkdir()
    (bogus / "manifest.json").write_text("{}")
    runner = CliRunner()
    r = runner.invoke(main, ["train", "--data", str(bogus)])
    assert r.exit_code == 1
    err_text = r.stderr if hasattr(r, "stderr") and r.stderr else r.output
    payload = json.loads(err_text.strip().splitlines()[-1])
    assert payload["error"] == "DataError"
