"""scikit-learn compatible estimators wrapping the DPVI optimizer."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, DensityMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted, validate_data

from .accounting import calibrate_sigma_for_budget
from .models import (
    GmmModel,
    LogRegModel,
    gmm_predictive_loglik_rows,
    logreg_predict,
)
from .optimizer import OptimizerConfig, run_dpvi
from .variational import transform_forward

__all__ = ["DPVILogisticRegression", "DPVIGaussianMixture"]


def _resolve_seed(random_state) -> int:
    if random_state is None:
        return int(np.random.SeedSequence().generate_state(1)[0])
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    raise ValueError("random_state must be an int or None")


class _DPVIMixin:
    """Noise calibration and optimizer plumbing shared by the estimators."""

    def _noise_multiplier(self, steps: int) -> float:
        if not self.private:
            if self.target_epsilon is not None:
                raise ValueError("target_epsilon is meaningless for a non-private fit")
            return 0.0
        if (self.noise_multiplier is None) == (self.target_epsilon is None):
            raise ValueError("set exactly one of noise_multiplier and target_epsilon")
        if self.target_epsilon is not None:
            return calibrate_sigma_for_budget(
                self.target_epsilon, self.delta, self.sampling_ratio, steps, self.accountant
            )
        return float(self.noise_multiplier)

    def _optimizer_config(self, seed: int) -> OptimizerConfig:
        sigma = self._noise_multiplier(self.n_iter)
        return OptimizerConfig(
            sampling_ratio=self.sampling_ratio,
            steps=self.n_iter,
            step_size=self.step_size,
            clip=math.inf if self.clip is None else float(self.clip),
            noise_multiplier=sigma,
            mc_samples=self.mc_samples,
            seed=seed,
            private=self.private,
            target_delta=self.delta,
        )

    def _set_privacy(self, trace):
        self.privacy_ = trace.privacy
        self.epsilon_ = None
        if trace.privacy is not None:
            budget = getattr(trace.privacy, self.accountant)
            self.epsilon_ = None if budget is None else budget.epsilon


class DPVILogisticRegression(_DPVIMixin, ClassifierMixin, BaseEstimator):
    """Bayesian logistic regression fitted with differentially private VI.

    Give either ``noise_multiplier`` or a ``target_epsilon`` (the noise is then
    calibrated with ``accountant``). ``private=False`` runs the same loop
    without noise; ``clip=None`` then disables clipping as well.

    Attributes:
        classes_: The two class labels; ``classes_[1]`` is the positive class.
        vp_: Fitted :class:`~dpvi.variational.GaussianVariational`.
        coef_, intercept_: Posterior means of the weights and bias.
        trace_: :class:`~dpvi.optimizer.RunTrace` of the fit.
        privacy_: Report with both accountants, ``None`` for non-private fits.
        epsilon_: Spent epsilon under ``accountant``.
    """

    def __init__(
        self,
        sampling_ratio=0.05,
        n_iter=1000,
        step_size=0.5,
        clip=5.0,
        noise_multiplier=None,
        target_epsilon=None,
        delta=1e-5,
        accountant="moments",
        private=True,
        mc_samples=1,
        prior_var=1.0,
        fit_intercept=True,
        random_state=None,
    ):
        self.sampling_ratio = sampling_ratio
        self.n_iter = n_iter
        self.step_size = step_size
        self.clip = clip
        self.noise_multiplier = noise_multiplier
        self.target_epsilon = target_epsilon
        self.delta = delta
        self.accountant = accountant
        self.private = private
        self.mc_samples = mc_samples
        self.prior_var = prior_var
        self.fit_intercept = fit_intercept
        self.random_state = random_state

    def _design(self, X):
        if self.fit_intercept:
            return np.hstack([X, np.ones((X.shape[0], 1))])
        return X

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise ValueError(f"need exactly two classes, got {len(self.classes_)}")
        y_pm = np.where(y == self.classes_[1], 1.0, -1.0)
        Xd = self._design(X)
        self.seed_ = _resolve_seed(self.random_state)
        model = LogRegModel(Xd.shape[1], 0.0, self.prior_var)
        config = self._optimizer_config(self.seed_)
        self.noise_multiplier_ = config.noise_multiplier
        self.vp_, self.trace_ = run_dpvi(model, Xd, y_pm, model.initial_posterior(), config)
        w = self.vp_.mean
        self.coef_ = w[: X.shape[1]].copy()
        self.intercept_ = float(w[-1]) if self.fit_intercept else 0.0
        self._set_privacy(self.trace_)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "vp_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        p = logreg_predict(self.vp_, self._design(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        p = self.predict_proba(X)[:, 1]
        return np.where(p >= 0.5, self.classes_[1], self.classes_[0])


class DPVIGaussianMixture(_DPVIMixin, DensityMixin, BaseEstimator):
    """Spherical Gaussian mixture with latent assignments marginalised out.

    ``score_samples`` returns the Monte Carlo posterior predictive log density
    of each row, using ``n_predictive_samples`` posterior draws.
    """

    def __init__(
        self,
        n_components=5,
        sampling_ratio=0.01,
        n_iter=5000,
        step_size=0.5,
        clip=5.0,
        noise_multiplier=None,
        target_epsilon=None,
        delta=1e-3,
        accountant="moments",
        private=True,
        mc_samples=4,
        dirichlet_alpha=1.0,
        init_spread=1.0,
        n_predictive_samples=1000,
        random_state=None,
    ):
        self.n_components = n_components
        self.sampling_ratio = sampling_ratio
        self.n_iter = n_iter
        self.step_size = step_size
        self.clip = clip
        self.noise_multiplier = noise_multiplier
        self.target_epsilon = target_epsilon
        self.delta = delta
        self.accountant = accountant
        self.private = private
        self.mc_samples = mc_samples
        self.dirichlet_alpha = dirichlet_alpha
        self.init_spread = init_spread
        self.n_predictive_samples = n_predictive_samples
        self.random_state = random_state

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=np.float64)
        self.seed_ = _resolve_seed(self.random_state)
        self.model_ = GmmModel(self.n_components, X.shape[1], self.dirichlet_alpha)
        config = self._optimizer_config(self.seed_)
        self.noise_multiplier_ = config.noise_multiplier
        # init draw uses its own stream so it never touches the data
        vp0 = self.model_.initial_posterior(
            np.random.SeedSequence([self.seed_, 1]), spread=self.init_spread
        )
        self.vp_, self.trace_ = run_dpvi(self.model_, X, None, vp0, config)
        theta = {}
        for block, sl in zip(self.vp_.blocks, self.vp_.block_slices().values()):
            theta[block.name] = transform_forward(block, self.vp_.mean[sl])[0]
        self.weights_, self.means_, self.variances_ = self.model_.unpack(theta)
        self._set_privacy(self.trace_)
        return self

    def score_samples(self, X):
        check_is_fitted(self, "vp_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed_, 2]))
        return gmm_predictive_loglik_rows(self.vp_, self.model_, X, self.n_predictive_samples, rng)

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))
