"""robustkit: train gradient-regularized robust classifiers, attack them with
minimal-perturbation searches, score robustness curves, and close a
human-annotation loop over the resulting adversarial images.

The sklearn-style :class:`RobustClassifier` is the front door; the
``train``, ``attack``, ``metrics``, and ``service`` submodules expose the
underlying pipelines (``robustkit.train.train``, ``robustkit.attack.attack``,
and friends)."""

from .attack import AttackConfig, AttackOutcome, attack_batch, goal_adv, \
    goal_btr, goal_explain, goal_high_confidence
from .advtrain import AdvTrainConfig, compose_batch, perturb_gaussian, \
    perturb_l2, perturb_l2min, step_schedule
from .data import AugmentConfig, Dataset, Example, augment, gen_blobs, \
    load_cifar_subset, load_digits_dataset, merge_annotations
from .estimator import RobustClassifier
from .metrics import AraCurve, ara, build_curve, naive_baseline, rmse
from .nn import Network, build_preset, cross_entropy, lr_schedule, softmax, \
    softmax_values
from .regularizers import AdaptivePsiState, LipschitzConfig, OutputZeroConfig, \
    adaptive_psi_update, lipschitz_loss, output_zero_loss, suggest_k_out
from .train import TrainConfig, TrainReport, evaluate
from . import attack, train  # noqa: F401  (modules; their main entry points
#                              are robustkit.attack.attack / robustkit.train.train)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackOutcome", "attack", "attack_batch",
    "goal_adv", "goal_btr", "goal_explain", "goal_high_confidence",
    "AdvTrainConfig", "compose_batch", "perturb_gaussian", "perturb_l2",
    "perturb_l2min", "step_schedule",
    "AugmentConfig", "Dataset", "Example", "augment", "gen_blobs",
    "load_cifar_subset", "load_digits_dataset", "merge_annotations",
    "RobustClassifier",
    "AraCurve", "ara", "build_curve", "naive_baseline", "rmse",
    "Network", "build_preset", "cross_entropy", "lr_schedule", "softmax",
    "softmax_values",
    "AdaptivePsiState", "LipschitzConfig", "OutputZeroConfig",
    "adaptive_psi_update", "lipschitz_loss", "output_zero_loss",
    "suggest_k_out",
    "TrainConfig", "TrainReport", "evaluate", "train",
]
