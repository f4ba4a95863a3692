"""scikit-learn style front door.

``RobustClassifier`` exposes the whole training stack (gradient penalty,
output zeroing, adaptive strength, adversarial/noisy synthesis) through the
familiar ``fit``/``predict``/``get_params`` surface so it drops into sklearn
pipelines, grid search, and cross-validation.  Inputs are flat feature rows
in [0,1]; image architectures take an ``input_shape`` to unflatten them.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import advtrain
from . import data as datamod
from . import metrics
from . import nn
from . import regularizers as reg
from . import train as trainmod


class RobustClassifier(BaseEstimator, ClassifierMixin):
    """Classifier trained with an input-gradient penalty and friends.

    Parameters mirror the training config: ``psi``/``K``/``z``/``q``/
    ``zeta``/``dead_zone``/``tandem`` shape the gradient penalty,
    ``adaptive_l_target`` switches to the integrating controller (``psi``
    must then stay 0), ``k_out`` adds the output-zeroing term, and
    ``adv_mode`` ("none", "l2", "l2min", "gaussian") with ``adv_epsilon``,
    ``half_half``, and ``gaussian_scale`` controls example synthesis.
    """

    def __init__(self, architecture="mlp-2d", input_shape=None, epochs=30,
                 batch_size=64, base_lr=0.2, warmup_epochs=5, step_epochs=(20, 26),
                 momentum=0.9, weight_decay=1e-4, bias_decay=1e-4, d=1.0,
                 psi=0.0, K=1, z=2, q=0, zeta=0.0, dead_zone=0.0, tandem=False,
                 adaptive_l_target=None, adaptive_k_psi_0=220.0,
                 adaptive_k_psi=0.02, adaptive_eps_better=1.0,
                 adaptive_eps_worse=0.01, k_out=0.0, adv_mode="none",
                 adv_epsilon=0.0, adv_steps=7, half_half=False,
                 gaussian_scale=0.0, seed=0):
        self.architecture = architecture
        self.input_shape = input_shape
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.warmup_epochs = warmup_epochs
        self.step_epochs = step_epochs
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.bias_decay = bias_decay
        self.d = d
        self.psi = psi
        self.K = K
        self.z = z
        self.q = q
        self.zeta = zeta
        self.dead_zone = dead_zone
        self.tandem = tandem
        self.adaptive_l_target = adaptive_l_target
        self.adaptive_k_psi_0 = adaptive_k_psi_0
        self.adaptive_k_psi = adaptive_k_psi
        self.adaptive_eps_better = adaptive_eps_better
        self.adaptive_eps_worse = adaptive_eps_worse
        self.k_out = k_out
        self.adv_mode = adv_mode
        self.adv_epsilon = adv_epsilon
        self.adv_steps = adv_steps
        self.half_half = half_half
        self.gaussian_scale = gaussian_scale
        self.seed = seed

    # -- plumbing ------------------------------------------------------------

    def _shape(self):
        return None if self.input_shape is None else tuple(self.input_shape)

    def _unflatten(self, X):
        shape = self._shape()
        return X if shape is None else X.reshape((X.shape[0], *shape))

    def _train_config(self) -> trainmod.TrainConfig:
        adaptive = None
        if self.adaptive_l_target is not None:
            adaptive = trainmod.AdaptivePsiParams(
                L_target=self.adaptive_l_target,
                k_psi_0=self.adaptive_k_psi_0,
                k_psi=self.adaptive_k_psi,
                eps_better=self.adaptive_eps_better,
                eps_worse=self.adaptive_eps_worse)
        return trainmod.TrainConfig(
            architecture=self.architecture,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            d=self.d,
            schedule=nn.ScheduleConfig(base_lr=self.base_lr,
                                       warmup_epochs=self.warmup_epochs,
                                       step_epochs=tuple(self.step_epochs)),
            optimizer=nn.OptimizerConfig(momentum=self.momentum,
                                         weight_decay_weights=self.weight_decay,
                                         weight_decay_biases=self.bias_decay),
            lipschitz=reg.LipschitzConfig(psi=self.psi, K=self.K, z=self.z,
                                          q=self.q, zeta=self.zeta,
                                          dead_zone=self.dead_zone,
                                          tandem=self.tandem),
            adaptive_psi=adaptive,
            output_zero=reg.OutputZeroConfig(k_out=self.k_out),
            adv_train=advtrain.AdvTrainConfig(mode=self.adv_mode,
                                              epsilon=self.adv_epsilon,
                                              steps=self.adv_steps,
                                              half_half=self.half_half,
                                              gaussian_scale=self.gaussian_scale))

    def _dataset(self, X, y_encoded, name="fit"):
        images = self._unflatten(X)
        examples = [datamod.Example(f"{name}-{i}", img, int(lab))
                    for i, (img, lab) in enumerate(zip(images, y_encoded))]
        return datamod.Dataset(name, len(self.classes_), examples)

    # -- sklearn surface -------------------------------------------------------

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        X = np.asarray(X, dtype=np.float64)
        if X.min() < 0 or X.max() > 1:
            raise ValueError("features must lie in [0, 1]")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        dataset = self._dataset(X, y_enc)
        self.network_, self.report_ = trainmod.train(self._train_config(), dataset)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        X = np.asarray(check_array(X), dtype=np.float64)
        return self.network_.logits(self._unflatten(X))

    def predict_proba(self, X):
        return nn.softmax_values(self.decision_function(X))

    def predict(self, X):
        idx = np.argmax(self.decision_function(X), axis=1)
        return self.classes_[idx]

    # -- robustness extras -----------------------------------------------------

    def input_gradient_magnitude(self, X) -> float:
        """Mean absolute derivative of logits w.r.t. inputs over the batch."""
        check_is_fitted(self, "network_")
        X = np.asarray(check_array(X), dtype=np.float64)
        stats = trainmod.input_gradient_stats(self.network_, self._unflatten(X))
        return stats["mean_abs_gradient"]

    def robustness_curve(self, X, y, goal="adv", quota=100, cap=0.2,
                         attack_steps=450, seed=0) -> metrics.AraCurve:
        """Attack held-out data and integrate the accuracy-vs-RMSE curve."""
        check_is_fitted(self, "network_")
        X, y = check_X_y(X, y)
        X = np.asarray(X, dtype=np.float64)
        lookup = {c: i for i, c in enumerate(self.classes_)}
        y_enc = np.array([lookup[v] for v in y])
        dataset = self._dataset(X, y_enc, name="curve")
        from . import attack as atk
        cfg = atk.AttackConfig(goal=goal, steps=attack_steps)
        return metrics.build_curve(self.network_, dataset, goal, quota, cap,
                                   attack_cfg=cfg, seed=seed)
