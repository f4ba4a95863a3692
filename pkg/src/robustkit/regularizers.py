"""Input-gradient penalty family, output zeroing, and the adaptive strength
controller.

The core penalty samples K output logits per example (without replacement),
differentiates each selected logit with respect to the input, optionally
carves out a "dead zone" below a magnitude threshold, and penalizes the
surviving gradient magnitudes raised to a power.  Because the gradient
computation itself is recorded on the tape, the penalty is an ordinary
differentiable term in the training loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Variable


class RegularizerError(ValueError):
    """Invalid penalty configuration."""


@dataclass
class LipschitzConfig:
    """Knobs for the stochastic input-gradient penalty.

    psi: overall strength (0 disables the term entirely).
    K: number of output indices drawn per example, without replacement.
    z: power applied to each surviving gradient component (>= 1).
    q: power of the per-example gradient-magnitude sum multiplied in (0 = off).
    zeta: probability that the first drawn index is replaced by the true
        class (or, with ``tandem``, by the true-vs-runner-up margin).
    dead_zone: magnitude threshold below which gradients go unpunished.
    tandem: penalize the gradient of (true logit - best other logit) on
        zeta-selected rows instead of a single logit's gradient.
    tandem_combine: "subtract" is the useful form; "add" reproduces a known
        inferior variant and exists only for comparison runs.
    """

    psi: float = 0.0
    K: int = 1
    z: int = 2
    q: int = 0
    zeta: float = 0.0
    dead_zone: float = 0.0
    tandem: bool = False
    tandem_combine: str = "subtract"

    def validate(self, n_classes: int) -> None:
        if self.psi < 0:
            raise RegularizerError("psi must be nonnegative")
        if not 1 <= self.K <= n_classes:
            raise RegularizerError(f"K must be in 1..{n_classes}")
        if self.z < 1:
            raise RegularizerError("z must be >= 1")
        if self.q < 0:
            raise RegularizerError("q must be >= 0")
        if not 0.0 <= self.zeta <= 1.0:
            raise RegularizerError("zeta must be in [0, 1]")
        if self.dead_zone < 0:
            raise RegularizerError("dead zone must be nonnegative")
        if self.tandem and n_classes < 2:
            raise RegularizerError("tandem form needs at least 2 classes")
        if self.tandem_combine not in ("subtract", "add"):
            raise RegularizerError("tandem_combine must be 'subtract' or 'add'")


def draw_output_indices(rng: np.random.Generator, n_classes: int, cfg: LipschitzConfig,
                        true_class: int) -> tuple[np.ndarray, bool]:
    """Sample one example's K output indices, without replacement.

    Returns (indices, special_first): with probability zeta the first slot
    becomes the true class, and ``special_first`` marks that event so the
    tandem form knows which slot to treat differently.  When the true class
    was already among the draws it is swapped into the first slot rather
    than duplicated, preserving the without-replacement property (and making
    the K=V loss value independent of the sampling for the plain form).
    """
    idx = rng.choice(n_classes, size=cfg.K, replace=False)
    special = cfg.zeta > 0 and rng.random() < cfg.zeta
    if special and idx[0] != true_class:
        idx = idx.copy()
        where = np.nonzero(idx == true_class)[0]
        if where.size:
            idx[where[0]] = idx[0]
        idx[0] = true_class
    return idx, special


def _selected_logit_sum(y: Variable, draws_k: np.ndarray, specials: np.ndarray,
                        t: np.ndarray, cfg: LipschitzConfig) -> Variable:
    """Scalar summing, per example, the quantity whose input gradient is
    penalized for one draw slot: a plain logit, or the tandem margin."""
    n, v = y.shape
    onehot = np.zeros((n, v))
    onehot[np.arange(n), draws_k] = 1.0
    tandem_rows = specials & np.full(n, cfg.tandem)
    if not tandem_rows.any():
        return ad.reduce_sum(ad.mul(y, ad.constant(onehot)))
    # tandem rows contribute y_t -/+ max_{j != t} y_j instead of y_{v_k}
    onehot[tandem_rows] = 0.0
    true_hot = np.zeros((n, v))
    true_hot[tandem_rows, t[tandem_rows]] = 1.0
    mask_true = np.zeros((n, v))
    mask_true[np.arange(n), t] = -1e9
    other_max = ad.reduce_max(ad.add(y, ad.constant(mask_true)), axis=1)  # (n,)
    row_pick = ad.constant(tandem_rows.astype(np.float64))
    plain = ad.reduce_sum(ad.mul(y, ad.constant(onehot)))
    trues = ad.reduce_sum(ad.mul(y, ad.constant(true_hot)))
    others = ad.reduce_sum(ad.mul(other_max, row_pick))
    margin = ad.sub(trues, others) if cfg.tandem_combine == "subtract" \
        else ad.add(trues, others)
    return ad.add(plain, margin)


def lipschitz_loss(net: nn.Network, x_batch: np.ndarray, t_batch,
                   cfg: LipschitzConfig, rng: np.random.Generator,
                   forward: "nn.ForwardPass | None" = None) -> Variable:
    """Stochastic input-gradient penalty over a batch, as a differentiable
    scalar.

    Per example, K output indices are drawn without replacement; with
    probability zeta the first becomes the true class (or the tandem margin).
    Each selected quantity's gradient w.r.t. the input is taken through a
    differentiable pass, the dead zone is applied as max(|g| - sigma, 0), and
    the result is sum_k sum_j (sum_l g_l)^q * g_j^z, scaled by
    psi / (K * n_in) and averaged over the batch.

    Pass ``forward`` (an existing recorded pass over the same batch) to share
    the tape with other loss terms; gradients of the returned Variable with
    respect to ``forward.params`` then combine all terms.
    """
    t = np.atleast_1d(np.asarray(t_batch, dtype=np.int64))
    cfg.validate(net.n_classes)
    if forward is None:
        forward = nn.run_forward(net, x_batch)
    x, y = forward.x, forward.y
    n = x.shape[0]
    if n == 0:
        raise RegularizerError("empty batch")
    n_in = int(np.prod(net.input_shape))

    draws = np.empty((n, cfg.K), dtype=np.int64)
    specials = np.empty(n, dtype=bool)
    for i in range(n):
        draws[i], specials[i] = draw_output_indices(rng, net.n_classes, cfg, t[i])

    total = None
    for k in range(cfg.K):
        scalar = _selected_logit_sum(y, draws[:, k], specials if k == 0 else
                                     np.zeros(n, dtype=bool), t, cfg)
        g = ad.grad(scalar, x, differentiable=True)
        gd = ad.absolute(g)
        if cfg.dead_zone > 0:
            gd = ad.clamp(ad.sub(gd, cfg.dead_zone), 0.0, None)
        flat = ad.reshape(gd, (n, n_in))
        term = ad.reduce_sum(ad.power(flat, cfg.z), axis=1)  # (n,)
        if cfg.q > 0:
            term = ad.mul(ad.power(ad.reduce_sum(flat, axis=1), cfg.q), term)
        total = term if total is None else ad.add(total, term)

    scale = cfg.psi / (cfg.K * n_in * n)
    return ad.mul(ad.reduce_sum(total), scale)


# ---------------------------------------------------------------------------
# Output zeroing


@dataclass
class OutputZeroConfig:
    k_out: float = 0.0

    def validate(self) -> None:
        if self.k_out < 0:
            raise RegularizerError("k_out must be nonnegative")


def output_zero_loss(y: Variable, cfg: OutputZeroConfig) -> Variable:
    """k_out times the batch-mean squared pre-softmax output, countering the
    softmax's translation invariance by biasing logits toward zero."""
    cfg.validate()
    n = y.shape[0] if len(y.shape) == 2 else 1
    return ad.mul(ad.reduce_sum(ad.square(y)), cfg.k_out / n)


def suggest_k_out(s_target: float, n_classes: int) -> float:
    """Balance point between cross-entropy and the output penalty when one
    logit carries confidence ``s_target`` against all-zero others."""
    if not 1.0 / n_classes < s_target < 1.0:
        raise RegularizerError(
            f"target confidence must be in (1/{n_classes}, 1)")
    y_t = math.log(s_target * (n_classes - 1) / (1.0 - s_target))
    return (1.0 - s_target) / (2 * y_t * (1 + (n_classes - 1) * (1.0 - s_target)))


# ---------------------------------------------------------------------------
# Adaptive strength controller


@dataclass
class AdaptivePsiState:
    """Integrating controller: effective strength k_psi_0 * exp(k_psi * I__)
    where the integral I accumulates clipped log-ratios of target to observed
    classification loss and never drops below zero (so k_psi_0 is the floor).
    """

    L_target: float
    k_psi_0: float = 220.0
    k_psi: float = 0.02
    eps_better: float = 1.0
    eps_worse: float = 0.01
    integral: float = 0.0

    @property
    def effective_psi(self) -> float:
        return self.k_psi_0 * math.exp(self.k_psi * self.integral)


def adaptive_psi_update(state: AdaptivePsiState, train_loss: float) -> float:
    """Fold one batch's classification loss into the controller and return
    the strength to use.  Loss below target grows the integral (at most
    eps_better per batch); loss above target shrinks it (at most eps_worse),
    floored at zero."""
    if not train_loss > 0:
        raise RegularizerError("training loss must be positive")
    delta = -math.log(train_loss / state.L_target)
    delta = min(max(delta, -state.eps_worse), state.eps_better)
    state.integral = max(0.0, state.integral + delta)
    return state.effective_psi
