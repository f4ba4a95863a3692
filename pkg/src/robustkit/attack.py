"""Minimal-perturbation attack with pluggable goal predicates.

The search alternates between two phases driven by a single persistent
momentum-SGD optimizer over the perturbation: while the goal predicate is
unsatisfied, follow the (fixed-magnitude) gradient of the selected class
probability; once satisfied, descend the squared perturbation norm instead,
bookkeeping the smallest goal-satisfying perturbation seen.  Alternating
between the two lets the search settle onto the smallest perturbation that
still meets the goal.

Goals:
  adv              flip top-1 away from the true class
  btr              push the true class below chance (1/V)
  explain-plus     grow the perturbation RMSE past a perceptual budget while
                   *raising* a chosen class's confidence
  explain-minus    same budget goal while *lowering* a chosen class
  high-confidence  some wrong class leads every other class by a margin
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nn


class AttackError(RuntimeError):
    """Numerical failure or bad configuration during an attack."""


GOALS = ("adv", "btr", "explain-plus", "explain-minus", "high-confidence")


@dataclass
class AttackConfig:
    goal: str = "adv"
    steps: int = 450
    eta: float = 0.55          # fixed gradient-step magnitude
    lr: float = 0.01
    momentum: float = 0.9
    rho: float = 0.0           # perceptual budget (RMSE) for explain goals
    margin: float = 0.5        # confidence margin for high-confidence
    target_class: Optional[int] = None

    def validate(self, n_classes: int) -> None:
        if self.goal not in GOALS:
            raise AttackError(f"goal must be one of {GOALS}")
        if self.steps < 1:
            raise AttackError("steps must be >= 1")
        if self.goal.startswith("explain"):
            if self.rho <= 0:
                raise AttackError("explain goals require rho > 0")
            if self.target_class is None:
                raise AttackError("explain goals require a target class")
            if not 0 <= self.target_class < n_classes:
                raise AttackError("target class out of range")


@dataclass
class AttackOutcome:
    """Result of one attacked example.

    ``delta_best`` is the smallest goal-satisfying perturbation found (absent
    when censored); ``m_best`` its L2 norm and ``rmse`` that norm divided by
    sqrt(input element count).  ``final_prediction`` is the softmax at the
    returned point (the best point on success, the last iterate otherwise).
    """

    success: bool
    delta_best: Optional[np.ndarray]
    m_best: Optional[float]
    rmse: Optional[float]
    steps_to_first_success: Optional[int]
    final_prediction: np.ndarray


# ---------------------------------------------------------------------------
# Goal predicates


def goal_adv(s: np.ndarray, t: int) -> bool:
    """True iff the true class no longer strictly leads (ties stay False)."""
    s = np.asarray(s)
    others = np.delete(s, t)
    return bool(s[t] - others.max() < 0)


def goal_btr(s: np.ndarray, t: int, n_classes: int) -> bool:
    """True iff the true class's confidence is strictly below chance."""
    return bool(np.asarray(s)[t] < 1.0 / n_classes)


def goal_explain(delta: np.ndarray, rho: float) -> bool:
    """True iff the perturbation's RMSE exceeds the perceptual budget."""
    delta = np.asarray(delta)
    return bool(np.linalg.norm(delta.reshape(-1)) / math.sqrt(delta.size) > rho)


def goal_high_confidence(s: np.ndarray, t: int, margin: float) -> bool:
    """True iff the best wrong class beats every other class (including the
    true one) by more than ``margin``."""
    s = np.asarray(s)
    wrong = [j for j in range(len(s)) if j != t]
    j = wrong[int(np.argmax(s[wrong]))]
    rest = np.delete(s, j)
    return bool(s[j] - rest.max() > margin)


def _goal_rows(cfg: AttackConfig, s: np.ndarray, deltas: np.ndarray,
               ts: np.ndarray, n_classes: int) -> np.ndarray:
    n = s.shape[0]
    out = np.empty(n, dtype=bool)
    for i in range(n):
        if cfg.goal == "adv":
            out[i] = goal_adv(s[i], ts[i])
        elif cfg.goal == "btr":
            out[i] = goal_btr(s[i], ts[i], n_classes)
        elif cfg.goal == "high-confidence":
            out[i] = goal_high_confidence(s[i], ts[i], cfg.margin)
        else:
            out[i] = goal_explain(deltas[i], cfg.rho)
    return out


# ---------------------------------------------------------------------------
# The search


def attack_batch(net: nn.Network, X, ts, cfg: AttackConfig) -> list[AttackOutcome]:
    """Run the attack on a batch of independent examples at once.

    Results are identical, example for example, to running :func:`attack`
    one at a time; batching just shares the forward/backward passes.
    """
    cfg.validate(net.n_classes)
    X = np.asarray(X, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.int64)
    n = X.shape[0]
    n_in = int(np.prod(net.input_shape))

    if cfg.goal == "explain-plus":
        sel = np.full(n, cfg.target_class)
        sign = -1.0  # ascend the target class's confidence
    elif cfg.goal == "explain-minus":
        sel = np.full(n, cfg.target_class)
        sign = 1.0
    else:
        sel = ts.copy()
        sign = 1.0

    deltas = np.zeros_like(X)
    velocity = np.zeros_like(X)
    m_best = np.full(n, np.inf)
    delta_best = np.full_like(X, np.nan)
    ever = np.zeros(n, dtype=bool)
    first_step = np.full(n, -1, dtype=np.int64)

    consts = {k: ad.constant(v) for k, v in net.params.items()}
    sel_hot = np.zeros((n, net.n_classes))
    sel_hot[np.arange(n), sel] = 1.0

    s_vals = None
    for step in range(cfg.steps):
        g = ad.DiffGraph()
        u = g.leaf(X + deltas, requires_grad=True)
        clamped = ad.clamp(u, 0.0, 1.0)
        s_var = nn.softmax(net.forward(clamped, consts))
        s_vals = s_var.data
        if not np.all(np.isfinite(s_vals)):
            raise AttackError(f"non-finite prediction at step {step}")

        satisfied = _goal_rows(cfg, s_vals, deltas, ts, net.n_classes)

        norms = np.linalg.norm(deltas.reshape(n, -1), axis=1)
        newly = satisfied & (norms < m_best)
        if newly.any():
            m_best[newly] = norms[newly]
            delta_best[newly] = deltas[newly]
        starts = satisfied & ~ever
        if starts.any():
            first_step[starts] = step
            ever |= starts

        update = np.zeros_like(X)
        update[satisfied] = 2.0 * deltas[satisfied]
        pending = ~satisfied
        if pending.any():
            mask = sel_hot * pending[:, None]
            scalar = ad.reduce_sum(ad.mul(s_var, ad.constant(mask)))
            grad_u = ad.grad(scalar, u)
            if not np.all(np.isfinite(grad_u)):
                raise AttackError(f"non-finite gradient at step {step}")
            flat = grad_u.reshape(n, -1)
            gnorm = np.linalg.norm(flat, axis=1)
            scale = np.zeros(n)
            nz = pending & (gnorm > 0)
            scale[nz] = cfg.eta / gnorm[nz]
            update += sign * (flat * scale[:, None]).reshape(X.shape)

        velocity = cfg.momentum * velocity + update
        deltas = deltas - cfg.lr * velocity

    outcomes = []
    for i in range(n):
        if ever[i]:
            db = delta_best[i].copy()
            sv = net.predict_proba(np.clip(X[i] + db, 0.0, 1.0))
            if not _goal_rows(cfg, sv[None], db[None], ts[i:i + 1],
                              net.n_classes)[0]:
                raise AttackError("recorded perturbation no longer satisfies "
                                  "its goal on re-verification")
            mb = float(m_best[i])
            outcomes.append(AttackOutcome(
                success=True, delta_best=db, m_best=mb,
                rmse=mb / math.sqrt(n_in),
                steps_to_first_success=int(first_step[i]),
                final_prediction=sv))
        else:
            sv = net.predict_proba(np.clip(X[i] + deltas[i], 0.0, 1.0))
            outcomes.append(AttackOutcome(
                success=False, delta_best=None, m_best=None, rmse=None,
                steps_to_first_success=None, final_prediction=sv))
    return outcomes


def attack(net: nn.Network, x, t: int, cfg: AttackConfig) -> AttackOutcome:
    """Attack one example; see :func:`attack_batch`."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise AttackError(f"input shape {x.shape} != network input {net.input_shape}")
    if np.min(x) < 0 or np.max(x) > 1:
        raise AttackError("input must lie in [0, 1]")
    if not 0 <= int(t) < net.n_classes:
        raise AttackError("true class out of range")
    return attack_batch(net, x[None], np.array([int(t)]), cfg)[0]
