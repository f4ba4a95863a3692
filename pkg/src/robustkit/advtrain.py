"""Training-time example synthesis: fixed-budget L2 ascent, boundary-seeking
minimal perturbation with a decreasing step schedule, half-clean/half-attacked
batch composition, and plain Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from . import nn


class AdvTrainError(ValueError):
    """Invalid synthesis configuration."""


MODES = ("none", "l2", "l2min", "gaussian")


@dataclass
class AdvTrainConfig:
    mode: str = "none"
    epsilon: float = 0.0   # raw L2 budget over the whole input
    steps: int = 7
    half_half: bool = False
    gaussian_scale: float = 0.0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise AdvTrainError(f"mode must be one of {MODES}")
        if self.epsilon < 0:
            raise AdvTrainError("epsilon must be nonnegative")
        if self.steps < 1:
            raise AdvTrainError("steps must be >= 1")
        if self.gaussian_scale < 0:
            raise AdvTrainError("gaussian scale must be nonnegative")


def step_schedule(k: int) -> np.ndarray:
    """Decreasing step weights 2*(k-n) / (k*(k+1)) for n in 0..k-1.

    They telescope to exactly 1, so the full walk spends precisely the given
    budget while later steps make progressively finer movements.
    """
    if k < 1:
        raise AdvTrainError("schedule needs at least one step")
    n = np.arange(k, dtype=np.float64)
    return 2.0 * (k - n) / (k * (k + 1))


def step_schedule_exact(k: int) -> list[Fraction]:
    """Rational form of the schedule, for exactness checks."""
    return [Fraction(2 * (k - n), k * (k + 1)) for n in range(k)]


def _loss_grads(net: nn.Network, X: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Per-example input gradient of the summed cross-entropy (rows are
    independent, so each row is its example's own gradient)."""
    fp = nn.run_forward(net, X)
    ce = nn.cross_entropy(nn.softmax(fp.y), t)
    return ad.grad(ce, fp.x) * len(t)  # undo the batch mean


def _scaled_rows(direction: np.ndarray, lengths) -> np.ndarray:
    """Rescale each row of ``direction`` to the requested L2 length; rows with
    zero norm stay zero (that step is skipped for them)."""
    n = direction.shape[0]
    flat = direction.reshape(n, -1)
    norms = np.linalg.norm(flat, axis=1)
    scale = np.zeros(n)
    nonzero = norms > 0
    lengths = np.broadcast_to(np.asarray(lengths, dtype=np.float64), (n,))
    scale[nonzero] = lengths[nonzero] / norms[nonzero]
    return (flat * scale[:, None]).reshape(direction.shape)


def _as_batch(net, x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == net.input_shape
    if single:
        x = x[None]
        t = np.array([t], dtype=np.int64)
    else:
        t = np.asarray(t, dtype=np.int64)
    return x, t, single


def perturb_l2(net: nn.Network, x, t, cfg: AdvTrainConfig) -> np.ndarray:
    """Fixed-budget adversary: follow the cross-entropy ascent direction for
    ``steps`` steps of length epsilon/steps each, clamping to [0,1] after
    every step.  Steps with an exactly zero gradient are skipped."""
    cfg.validate()
    X, t, single = _as_batch(net, x, t)
    if cfg.epsilon == 0:
        return X[0].copy() if single else X.copy()
    step_len = cfg.epsilon / cfg.steps
    cur = X.copy()
    for _ in range(cfg.steps):
        g = _loss_grads(net, cur, t)
        cur = np.clip(cur + _scaled_rows(g, step_len), 0.0, 1.0)
    return cur[0] if single else cur


def perturb_l2min(net: nn.Network, x, t, cfg: AdvTrainConfig) -> np.ndarray:
    """Boundary-seeking adversary: while still correctly classified, ascend
    the loss; once misclassified, walk back along the negated perturbation.
    Step n moves 2*(k-n)/(k*(k+1)) * epsilon, so the walk settles near the
    misclassification boundary.  An initially misclassified example with zero
    perturbation has nothing to negate and stays put for that step."""
    cfg.validate()
    X, t, single = _as_batch(net, x, t)
    if cfg.epsilon == 0:
        return X[0].copy() if single else X.copy()
    weights = step_schedule(cfg.steps) * cfg.epsilon
    cur = X.copy()
    for w in weights:
        pred = net.predict(cur)
        correct = pred == t
        direction = np.zeros_like(cur)
        if correct.any():
            g = _loss_grads(net, cur[correct], t[correct])
            direction[correct] = _scaled_rows(g, w)
        wrong = ~correct
        if wrong.any():
            back = X[wrong] - cur[wrong]  # negated perturbation
            direction[wrong] = _scaled_rows(back, w)
        cur = np.clip(cur + direction, 0.0, 1.0)
    return cur[0] if single else cur


def perturb_gaussian(x, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Independent zero-mean Gaussian noise per element, clamped to [0,1]."""
    if scale < 0:
        raise AdvTrainError("gaussian scale must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if scale == 0:
        return x.copy()
    return np.clip(x + rng.normal(0.0, scale, size=x.shape), 0.0, 1.0)


def compose_batch(clean: np.ndarray, adversarial: np.ndarray,
                  half_half: bool) -> np.ndarray:
    """Half-half keeps the first half of the batch clean and the second half
    adversarial (labels are unchanged either way); otherwise the batch is
    fully adversarial."""
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    if clean.shape != adversarial.shape:
        raise AdvTrainError("clean and adversarial batches must align")
    if not half_half:
        return adversarial.copy()
    out = adversarial.copy()
    keep = (len(clean) + 1) // 2
    out[:keep] = clean[:keep]
    return out


def synthesize(net: nn.Network, X: np.ndarray, t: np.ndarray,
               cfg: AdvTrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Produce the training inputs for one batch according to the mode."""
    cfg.validate()
    if cfg.mode == "none":
        return X
    if cfg.mode == "l2":
        adv = perturb_l2(net, X, t, cfg)
    elif cfg.mode == "l2min":
        adv = perturb_l2min(net, X, t, cfg)
    else:
        adv = perturb_gaussian(X, cfg.gaussian_scale, rng)
    return compose_batch(X, adv, cfg.half_half)
