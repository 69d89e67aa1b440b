"""Estimator-style facade over :func:`racer.trainer.train`."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .actor_limits import mean_actions
from .critic import ensemble_cvar
from .trainer import TrainerConfig, evaluate_policy, train

_DEFAULTS = TrainerConfig()


class RacerAgent(BaseEstimator):
    """Risk-averse agent; ``fit`` takes an environment instead of ``(X, y)``.

    Hyperparameters mirror :class:`~racer.trainer.TrainerConfig`; ``random_state``
    maps onto its ``seed``.  After fitting, ``predict`` maps observations to the
    deterministic limited action and ``predict_cvar`` queries the critic.
    """

    def __init__(self, alpha=_DEFAULTS.alpha, gamma=_DEFAULTS.gamma, utd_ratio=_DEFAULTS.utd_ratio,
                 update_every=_DEFAULTS.update_every, ensemble_n=_DEFAULTS.ensemble_n, n_atoms=_DEFAULTS.n_atoms,
                 hidden=_DEFAULTS.hidden, lr_actor=_DEFAULTS.lr_actor, lr_critic=_DEFAULTS.lr_critic,
                 lr_limits=_DEFAULTS.lr_limits, tau=_DEFAULTS.tau, weight_decay=_DEFAULTS.weight_decay,
                 batch_size=_DEFAULTS.batch_size, buffer_size=_DEFAULTS.buffer_size,
                 warmup_steps=_DEFAULTS.warmup_steps, total_steps=_DEFAULTS.total_steps,
                 entropy_in_coef=_DEFAULTS.entropy_in_coef, entropy_ood_coef=_DEFAULTS.entropy_ood_coef,
                 no_epistemic=False, no_limits=False, risk_neutral=False, random_state=0):
        self.alpha = alpha
        self.gamma = gamma
        self.utd_ratio = utd_ratio
        self.update_every = update_every
        self.ensemble_n = ensemble_n
        self.n_atoms = n_atoms
        self.hidden = hidden
        self.lr_actor = lr_actor
        self.lr_critic = lr_critic
        self.lr_limits = lr_limits
        self.tau = tau
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.buffer_size = buffer_size
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.entropy_in_coef = entropy_in_coef
        self.entropy_ood_coef = entropy_ood_coef
        self.no_epistemic = no_epistemic
        self.no_limits = no_limits
        self.risk_neutral = risk_neutral
        self.random_state = random_state

    def to_config(self) -> TrainerConfig:
        params = self.get_params()
        seed = params.pop("random_state")
        known = {f.name for f in fields(TrainerConfig)}
        return TrainerConfig(seed=0 if seed is None else int(seed), **{k: v for k, v in params.items() if k in known})

    def fit(self, env, y=None, metrics_stream=None):
        config = self.to_config()
        result = train(config, env, metrics_stream)
        self.learner_ = result.learner
        self.cum_failures_ = result.cum_failures
        self.cum_failures_fast_ = result.cum_failures_fast
        self.v_plus_history_ = result.v_plus_history
        self.n_features_in_ = env.obs_dim
        return self

    def predict(self, X):
        check_is_fitted(self, "learner_")
        X = check_array(X, ensure_2d=False)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        a = mean_actions(self.learner_.actor, X, self.learner_.limits)
        return a[0] if single else a

    def predict_cvar(self, X, actions):
        check_is_fitted(self, "learner_")
        X = check_array(X)
        actions = check_array(actions)
        return ensemble_cvar(self.learner_.critic, X, actions, self.to_config().effective_alpha)

    def evaluate(self, env, n_episodes: int = 5, seed=0):
        check_is_fitted(self, "learner_")
        return evaluate_policy(self.learner_.actor, self.learner_.limits, env, n_episodes, seed)
