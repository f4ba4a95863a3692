"""Accuracy-vs-perturbation curves and the area above a naive baseline.

The protocol walks a dataset in a seeded random order, attacking correctly
classified examples until a quota is met.  Initially misclassified examples
contribute a robustness radius of zero; examples the attack never breaks are
censored at the evaluation cap (they integrate as fully robust up to it).
The headline number is the exact integral, over radii in [0, cap], of the
curve's accuracy in excess of the constant-majority baseline."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import attack as atk
from . import nn
from .data import Dataset


class MetricsError(ValueError):
    """Invalid curve construction arguments."""


def rmse(delta) -> float:
    """L2 norm of a perturbation divided by sqrt(element count): 0 means no
    change, 1 the distance between an all-black and all-white image."""
    delta = np.asarray(delta, dtype=np.float64)
    return float(np.linalg.norm(delta.reshape(-1)) / math.sqrt(delta.size))


def naive_baseline(labels, n_classes: int, mode: str = "naive") -> float:
    """"naive": accuracy of the best constant classifier (majority class
    frequency); "random": 1/V."""
    if mode == "random":
        return 1.0 / n_classes
    if mode != "naive":
        raise MetricsError("mode must be 'naive' or 'random'")
    labels = np.asarray(labels)
    if labels.size == 0:
        raise MetricsError("empty dataset")
    counts = np.bincount(labels, minlength=n_classes)
    return float(counts.max() / labels.size)


@dataclass
class AraCurve:
    radii: np.ndarray          # per-example robustness RMSEs (0 / value / cap)
    cap: float                 # evaluation upper bound
    naive_accuracy: float      # constant-classifier baseline
    clean_accuracy: float      # fraction of radii > 0
    area: float                # integral above the baseline
    censored_count: int = 0
    quota: int = 0
    partial: bool = False      # dataset ran out before the quota was met

    def accuracy_at(self, r: float) -> float:
        return float(np.count_nonzero(self.radii > r) / len(self.radii))

    def summary(self) -> dict:
        return {
            "area": self.area,
            "clean_accuracy": self.clean_accuracy,
            "naive_accuracy": self.naive_accuracy,
            "cap": self.cap,
            "quota": self.quota,
            "examples": int(len(self.radii)),
            "censored": int(self.censored_count),
            "partial": self.partial,
        }

    def to_csv(self, path) -> None:
        """Step-function breakpoints as (r, accuracy) rows."""
        points = np.concatenate([[0.0], np.unique(np.clip(self.radii, 0, self.cap)),
                                 [self.cap]])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["r", "accuracy"])
            for r in np.unique(points):
                writer.writerow([f"{r:.10g}", f"{self.accuracy_at(r):.10g}"])


def ara(curve: AraCurve) -> float:
    """Exact integral over [0, cap] of max(accuracy(r) - naive, 0) for the
    step function defined by the curve's radii."""
    return area_above_baseline(curve.radii, curve.cap, curve.naive_accuracy)


def area_above_baseline(radii, cap: float, naive: float) -> float:
    radii = np.clip(np.asarray(radii, dtype=np.float64), 0.0, cap)
    if radii.size == 0:
        raise MetricsError("cannot integrate an empty radius list")
    if cap <= 0:
        raise MetricsError("cap must be positive")
    n = radii.size
    edges = np.concatenate([[0.0], np.unique(radii), [cap]])
    edges = np.unique(np.clip(edges, 0.0, cap))
    total = 0.0
    for left, right in zip(edges[:-1], edges[1:]):
        if right <= left:
            continue
        acc = np.count_nonzero(radii > left) / n
        total += (right - left) * max(acc - naive, 0.0)
    return float(total)


def build_curve(net: nn.Network, dataset: Dataset, goal: str, quota: int,
                cap: float, attack_cfg: atk.AttackConfig | None = None,
                seed: int = 0, batch_size: int = 64) -> AraCurve:
    """Walk the dataset in a seeded random order, attacking correctly
    classified examples until ``quota`` of them have been attacked.

    goal is "adv" or "btr"; either way the area baseline is the naive
    (constant-majority) classifier -- the 1/V chance threshold lives inside
    the btr goal itself.
    """
    if quota < 1:
        raise MetricsError("quota must be >= 1")
    if goal not in ("adv", "btr"):
        raise MetricsError("curves are built with goal 'adv' or 'btr'")
    cfg = dataclasses.replace(attack_cfg, goal=goal) if attack_cfg \
        else atk.AttackConfig(goal=goal)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    preds = net.predict(dataset.images)

    radii: list[float] = []
    to_attack: list[int] = []
    for idx in order:
        if len(to_attack) >= quota:
            break
        if preds[idx] == dataset.labels[idx]:
            to_attack.append(idx)
        else:
            radii.append(0.0)
    partial = len(to_attack) < quota

    censored = 0
    for start in range(0, len(to_attack), batch_size):
        chunk = to_attack[start:start + batch_size]
        outcomes = atk.attack_batch(net, dataset.images[chunk],
                                    dataset.labels[chunk], cfg)
        for out in outcomes:
            if out.success:
                radii.append(min(out.rmse, cap))
            else:
                radii.append(cap)
                censored += 1

    radii_arr = np.array(radii, dtype=np.float64)
    naive = naive_baseline(dataset.labels, dataset.n_classes, "naive")
    curve = AraCurve(
        radii=radii_arr, cap=cap, naive_accuracy=naive,
        clean_accuracy=float(np.count_nonzero(radii_arr > 0) / len(radii_arr)),
        area=0.0, censored_count=censored, quota=len(to_attack), partial=partial)
    curve.area = ara(curve)
    return curve
