"""End-to-end training: classification loss plus the optional gradient
penalty, output zeroing, weight decay (inside the optimizer step), and
adversarial/noisy example synthesis, under a warmup+step learning-rate
schedule.  The final model is the result; no validation-based selection.

Reproducibility contract: all randomness flows from named sub-streams of the
config seed, so equal configs give bit-identical parameter trajectories, and
disabling every extension (psi=0, k_out=0, mode none) leaves a loop whose
floating-point operations exactly match a plain classifier loop.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import advtrain
from . import autodiff as ad
from . import data as datamod
from . import nn
from . import regularizers as reg


class TrainError(RuntimeError):
    """Configuration problem or numerical divergence during training."""


@dataclass
class AdaptivePsiParams:
    L_target: float
    k_psi_0: float = 220.0
    k_psi: float = 0.02
    eps_better: float = 1.0
    eps_worse: float = 0.01


@dataclass
class TrainConfig:
    architecture: str = "mlp-2d"
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    d: float = 1.0
    schedule: nn.ScheduleConfig = field(default_factory=nn.ScheduleConfig)
    optimizer: nn.OptimizerConfig = field(default_factory=nn.OptimizerConfig)
    lipschitz: reg.LipschitzConfig = field(default_factory=reg.LipschitzConfig)
    adaptive_psi: AdaptivePsiParams | None = None
    output_zero: reg.OutputZeroConfig = field(default_factory=reg.OutputZeroConfig)
    adv_train: advtrain.AdvTrainConfig = field(default_factory=advtrain.AdvTrainConfig)
    augment: datamod.AugmentConfig | None = None

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch size must be positive")
        if self.adaptive_psi is not None and self.lipschitz.psi != 0:
            raise TrainError("choose either a fixed psi or the adaptive "
                             "controller, not both")
        self.adv_train.validate()
        self.output_zero.validate()

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["schedule"]["step_epochs"] = list(self.schedule.step_epochs)
        return out

    @staticmethod
    def from_dict(cfg: dict) -> "TrainConfig":
        cfg = dict(cfg)
        nested = {
            "schedule": nn.ScheduleConfig,
            "optimizer": nn.OptimizerConfig,
            "lipschitz": reg.LipschitzConfig,
            "output_zero": reg.OutputZeroConfig,
            "adv_train": advtrain.AdvTrainConfig,
        }
        kwargs = {}
        for key, cls in nested.items():
            if key in cfg and cfg[key] is not None:
                sub = dict(cfg.pop(key))
                if key == "schedule" and "step_epochs" in sub:
                    sub["step_epochs"] = tuple(sub["step_epochs"])
                kwargs[key] = cls(**sub)
        if cfg.get("adaptive_psi") is not None:
            kwargs["adaptive_psi"] = AdaptivePsiParams(**cfg.pop("adaptive_psi"))
        else:
            cfg.pop("adaptive_psi", None)
        if cfg.get("augment") is not None:
            kwargs["augment"] = datamod.AugmentConfig(**cfg.pop("augment"))
        else:
            cfg.pop("augment", None)
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(cfg) - known
        if unknown:
            raise TrainError(f"unknown training config keys: {sorted(unknown)}")
        kwargs.update(cfg)
        return TrainConfig(**kwargs)


@dataclass
class EpochStats:
    epoch: int
    classification_loss: float
    penalty_loss: float
    output_loss: float
    total_loss: float
    effective_psi: float
    accuracy: float
    lr: float


@dataclass
class TrainReport:
    epochs: list
    final_psi: float
    final_accuracy: float
    checkpoint: str | None
    config: dict

    def to_dict(self) -> dict:
        return {
            "epochs": [dataclasses.asdict(e) for e in self.epochs],
            "final_psi": self.final_psi,
            "final_accuracy": self.final_accuracy,
            "checkpoint": self.checkpoint,
            "config": self.config,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Named deterministic random streams derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(5)
    names = ("init", "shuffle", "penalty", "synthesis", "augment")
    return {name: np.random.default_rng(ss) for name, ss in zip(names, children)}


def train(config: TrainConfig, dataset: datamod.Dataset,
          checkpoint_dir=None) -> tuple[nn.Network, TrainReport]:
    """Train a preset network on the dataset per the config; optionally save
    a checkpoint.  Returns the final network and the per-epoch report."""
    config.validate()
    if len(dataset) == 0:
        raise TrainError("empty dataset")
    streams = rng_streams(config.seed)
    net = nn.build_preset(config.architecture, dataset.input_shape,
                          dataset.n_classes, d=config.d, rng=streams["init"])
    if config.lipschitz.psi > 0 or config.adaptive_psi is not None:
        config.lipschitz.validate(net.n_classes)
    state = nn.init_optimizer(net, config.optimizer,
                              lr=nn.lr_schedule(0, config.schedule))
    controller = None
    if config.adaptive_psi is not None:
        controller = reg.AdaptivePsiState(**dataclasses.asdict(config.adaptive_psi))

    param_names = list(net.params)
    stats: list[EpochStats] = []
    psi_eff = config.lipschitz.psi
    for epoch in range(config.epochs):
        state.lr = nn.lr_schedule(epoch, config.schedule)
        sums = {"ce": 0.0, "pen": 0.0, "out": 0.0, "total": 0.0}
        n_batches = 0
        for X, t in dataset.iterate_batches(config.batch_size, streams["shuffle"]):
            if config.augment is not None:
                X = np.stack([datamod.augment(x, config.augment, streams["augment"])
                              for x in X])
            X_train = advtrain.synthesize(net, X, t, config.adv_train,
                                          streams["synthesis"])
            fp = nn.run_forward(net, X_train)
            ce = nn.cross_entropy(nn.softmax(fp.y), t)
            ce_val = ce.item()
            if not np.isfinite(ce_val):
                raise TrainError(f"diverged at epoch {epoch}, batch {n_batches}: "
                                 f"classification loss {ce_val}")
            total = ce
            pen_val = 0.0
            if controller is not None:
                psi_eff = reg.adaptive_psi_update(controller, ce_val)
            if psi_eff > 0:
                pen_cfg = dataclasses.replace(config.lipschitz, psi=psi_eff)
                pen = reg.lipschitz_loss(net, X_train, t, pen_cfg,
                                         streams["penalty"], forward=fp)
                pen_val = pen.item()
                total = ad.add(total, pen)
            out_val = 0.0
            if config.output_zero.k_out > 0:
                out_term = reg.output_zero_loss(fp.y, config.output_zero)
                out_val = out_term.item()
                total = ad.add(total, out_term)
            total_val = total.item()
            if not np.isfinite(total_val):
                raise TrainError(f"diverged at epoch {epoch}, batch {n_batches}: "
                                 f"total loss {total_val}")
            grads = ad.grad(total, [fp.params[k] for k in param_names])
            nn.sgd_step(net, state, dict(zip(param_names, grads)))
            sums["ce"] += ce_val
            sums["pen"] += pen_val
            sums["out"] += out_val
            sums["total"] += total_val
            n_batches += 1
        acc = float(np.mean(net.predict(dataset.images) == dataset.labels))
        stats.append(EpochStats(
            epoch=epoch,
            classification_loss=sums["ce"] / n_batches,
            penalty_loss=sums["pen"] / n_batches,
            output_loss=sums["out"] / n_batches,
            total_loss=sums["total"] / n_batches,
            effective_psi=psi_eff,
            accuracy=acc,
            lr=state.lr))

    ckpt = None
    if checkpoint_dir is not None:
        nn.save_checkpoint(net, checkpoint_dir)
        ckpt = str(checkpoint_dir)
    report = TrainReport(epochs=stats, final_psi=psi_eff,
                         final_accuracy=stats[-1].accuracy,
                         checkpoint=ckpt, config=config.to_dict())
    return net, report


def input_gradient_stats(net: nn.Network, X: np.ndarray,
                         max_examples: int | None = None) -> dict:
    """Mean absolute logit/input derivative over outputs, inputs, and
    examples, plus the mean (over examples) of the per-example maximum."""
    X = np.asarray(X, dtype=np.float64)
    if max_examples is not None:
        X = X[:max_examples]
    n = X.shape[0]
    fp = nn.run_forward(net, X)
    per_class = []
    for i in range(net.n_classes):
        hot = np.zeros((n, net.n_classes))
        hot[:, i] = 1.0
        scalar = ad.reduce_sum(ad.mul(fp.y, ad.constant(hot)))
        per_class.append(np.abs(ad.grad(scalar, fp.x)).reshape(n, -1))
    mags = np.stack(per_class, axis=1)  # (n, V, n_in)
    return {
        "mean_abs_gradient": float(mags.mean()),
        "mean_max_abs_gradient": float(mags.reshape(n, -1).max(axis=1).mean()),
    }


def evaluate(net: nn.Network, dataset: datamod.Dataset,
             gradient_examples: int = 128) -> dict:
    """Clean accuracy plus input-gradient magnitude statistics."""
    preds = net.predict(dataset.images)
    out = {"accuracy": float(np.mean(preds == dataset.labels))}
    out.update(input_gradient_stats(net, dataset.images, gradient_examples))
    return out
