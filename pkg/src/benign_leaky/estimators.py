"""scikit-learn style wrappers around the functional core."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import ConfigurationError
from .limit import build_block_gram, limit_output, min_norm_direction, qp_oracle
from .mixture import Dataset
from .network import NeuronSplit, TrainConfig, forward, init_network, train

__all__ = ["LeakyReLUNetworkClassifier", "MinNormLimitClassifier", "MaxMarginLimitClassifier"]


class _BinaryMixin(ClassifierMixin):
    def _encode(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_ = unique_labels(y)
        if self.classes_.size != 2:
            raise ValueError(f"need exactly two classes, got {self.classes_.size}")
        self.n_features_in_ = X.shape[1]
        return X, np.where(y == self.classes_[1], 1.0, -1.0)

    def _check(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X):
        s = self.decision_function(X)
        return np.where(s > 0, self.classes_[1], self.classes_[0])

    def _split(self):
        return NeuronSplit(self.j_plus, self.m)


class LeakyReLUNetworkClassifier(_BinaryMixin, BaseEstimator):
    """Width-``m`` leaky-ReLU network with fixed second layer trained by GD.

    ``alpha='auto'`` picks 0.5 / (||X||_2^2) which keeps GD stable in the
    activated regime; ``sigma_init`` is the initial radius.
    """

    def __init__(self, m=4, j_plus=2, gamma=0.5, alpha="auto", sigma_init=1e-6,
                 n_steps=1000, random_state=0):
        self.m = m
        self.j_plus = j_plus
        self.gamma = gamma
        self.alpha = alpha
        self.sigma_init = sigma_init
        self.n_steps = n_steps
        self.random_state = random_state

    def fit(self, X, y):
        X, yy = self._encode(X, y)
        split = self._split()
        alpha = self.alpha
        if alpha == "auto":
            alpha = 0.5 / float(np.linalg.norm(X, 2) ** 2)
        if not 0 < self.gamma < 1:
            raise ConfigurationError("gamma must lie in (0, 1)")
        cfg = TrainConfig(alpha=float(alpha), sigma_init=float(self.sigma_init), T=int(self.n_steps))
        data = Dataset.from_arrays(X, yy)
        seed = 0 if self.random_state is None else int(self.random_state)
        state0 = init_network(X.shape[1], split.signs(), self.gamma, cfg, seed=seed)
        self.trace_ = train(data, cfg, state0)
        self.state_ = self.trace_.final_state
        self.W_ = self.state_.W
        self.alpha_ = float(alpha)
        return self

    def decision_function(self, X):
        X = self._check(X)
        return forward(self.state_, X)


class MinNormLimitClassifier(_BinaryMixin, BaseEstimator):
    """Closed-form min-norm interpolator in the transformed sample space."""

    def __init__(self, m=4, j_plus=2, gamma=0.5):
        self.m = m
        self.j_plus = j_plus
        self.gamma = gamma

    def _solve(self, data):
        return min_norm_direction(data, build_block_gram(data, self.gamma, self._split()),
                                  R=float(np.mean(np.sum(data.X**2, axis=1))))

    def fit(self, X, y):
        X, yy = self._encode(X, y)
        ld = self._solve(Dataset.from_arrays(X, yy))
        self.limit_ = ld
        self.w_plus_, self.w_minus_ = ld.w_plus, ld.w_minus
        self.coef_ = ld.w_bar
        self.sv_certificate_ = ld.sv_certificate
        self.all_support_vectors_ = ld.certificate_positive
        return self

    def network_output(self, X):
        return limit_output(self._check(X), self.w_plus_, self.w_minus_, self._split(), self.gamma)

    def decision_function(self, X):
        return self._check(X) @ self.coef_


class MaxMarginLimitClassifier(MinNormLimitClassifier):
    """Same interface, solved as the max-margin QP by dual coordinate ascent."""

    def __init__(self, m=4, j_plus=2, gamma=0.5, tol=1e-9):
        super().__init__(m=m, j_plus=j_plus, gamma=gamma)
        self.tol = tol

    def _solve(self, data):
        return qp_oracle(data, self.gamma, self._split(), tol=self.tol)
