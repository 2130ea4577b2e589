"""Scikit-learn style front end for the two-level mixture of regressions."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_X_y

from .em import EmConfig, GroupedData, ModelSpec, fit as fit_em


class MultilevelLatentClassRegression(BaseEstimator):
    """Mixture of linear regressions with latent classes at the group level.

    Groups (Trusts) are softly assigned to ``n_trust_classes`` latent classes;
    within a group class, observations are softly assigned to
    ``n_patient_classes`` classes. Classes share regression slopes and differ
    only in intercept, so group classes are adjusted for the observation-level
    covariates.

    Parameters
    ----------
    n_trust_classes : number of latent classes at the group level.
    n_patient_classes : number of latent classes at the observation level.
    n_restarts, max_iter, tol : EM restart and convergence controls.
    random_state : seed for the restart initializations.
    """

    def __init__(
        self,
        n_trust_classes=2,
        n_patient_classes=1,
        n_restarts=20,
        max_iter=500,
        tol=1e-8,
        random_state=0,
    ):
        self.n_trust_classes = n_trust_classes
        self.n_patient_classes = n_patient_classes
        self.n_restarts = n_restarts
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def _spec(self) -> ModelSpec:
        return ModelSpec(
            n_patient_classes=self.n_patient_classes,
            n_trust_classes=self.n_trust_classes,
        )

    def _em_config(self) -> EmConfig:
        return EmConfig(
            n_restarts=self.n_restarts,
            max_iter=self.max_iter,
            rel_tol=self.tol,
            seed=self.random_state or 0,
        )

    def fit(self, X, y, groups):
        X, y = check_X_y(X, y, y_numeric=True)
        groups = np.asarray(groups)
        if groups.shape[0] != X.shape[0]:
            raise ValueError("groups must have one entry per row of X")
        codes, self.group_labels_ = self._encode_groups(groups)
        data = GroupedData(y, X, codes, n_trusts=len(self.group_labels_))
        result = fit_em(data, self._spec(), self._em_config())
        self.result_ = result
        self.weights_ = result.params.trust_weights
        self.class_mix_ = result.params.patient_mix
        self.intercepts_ = result.params.intercepts
        self.coef_ = result.params.slopes
        self.sigma2_ = result.params.sigma2
        self.posteriors_ = result.trust_posteriors
        self.loglik_ = result.loglik
        self.converged_ = result.converged
        self.n_iter_ = result.n_iter
        return self

    @staticmethod
    def _encode_groups(groups):
        labels, codes = np.unique(groups, return_inverse=True)
        return codes, labels

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise NotFittedError("call fit before using this estimator")

    def predict(self, X, groups):
        """Posterior-weighted conditional mean outcome for known groups."""
        self._check_fitted()
        X = check_array(X)
        codes = np.searchsorted(self.group_labels_, np.asarray(groups))
        class_level = np.sum(
            self.posteriors_ * self.result_.params.class_means()[None, :], axis=1
        )
        return class_level[codes] + X @ self.coef_

    def score(self, X, y, groups):
        """Mean per-observation log-likelihood under the fitted model."""
        self._check_fitted()
        X, y = check_X_y(X, y, y_numeric=True)
        codes = np.searchsorted(self.group_labels_, np.asarray(groups))
        from .em import GroupedData, loglik

        data = GroupedData(y, X, codes, n_trusts=len(self.group_labels_))
        return loglik(self.result_.params, data) / y.shape[0]
