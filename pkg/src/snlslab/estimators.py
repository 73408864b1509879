"""scikit-learn style wrappers around flows, samplers and certificates.

Coefficient matrices have one row per field and one complex column per
mode; the basis is rebuilt from the column count with an index cutoff.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .config import SimConfig
from .density import distribution_of
from .dynamics import HamiltonianStepper, flow_batch
from .measures import EmpiricalMeasure, krylov_bogoliubov_sample, observable_functions, sigma_levels, stationary_report
from .noise import GrowthPair
from .spectral import build_basis
from .validation import check_coefficients, check_fitted_basis

__all__ = [
    "FlowTransformer",
    "ObservableTransformer",
    "KrylovBogoliubovSampler",
    "SigmaMembership",
    "ObservableDensity",
]


def _basis_for(X, d):
    return build_basis(d, X.shape[1] - 1, full_shell=False)


class FlowTransformer(TransformerMixin, BaseEstimator):
    """Map coefficient rows to their image under the truncated flow at time ``t``."""

    def __init__(self, t=1.0, dt=1e-3, p=7.0, d=1, scheme="strang-splitting"):
        self.t = t
        self.dt = dt
        self.p = p
        self.d = d
        self.scheme = scheme

    def fit(self, X, y=None):
        X = check_coefficients(X)
        self.basis_ = _basis_for(X, self.d)
        self.n_features_in_ = X.shape[1]
        self.stepper_ = HamiltonianStepper(self.basis_, self.p, self.scheme)
        return self

    def transform(self, X):
        basis = check_fitted_basis(self)
        X = check_coefficients(X, basis)
        n = int(round(self.t / self.dt))
        out, _ = flow_batch(self.stepper_, X, self.dt, n)
        return out


class ObservableTransformer(TransformerMixin, BaseEstimator):
    """Real feature matrix of named observables (mass, energy, norms, low modes)."""

    def __init__(self, p=7.0, r=1.9, d=1, low_modes=(0, 1)):
        self.p = p
        self.r = r
        self.d = d
        self.low_modes = low_modes

    def fit(self, X, y=None):
        X = check_coefficients(X)
        self.basis_ = _basis_for(X, self.d)
        self.n_features_in_ = X.shape[1]
        self.observables_ = observable_functions(self.basis_, self.p, self.r, self.low_modes)
        self.feature_names_ = list(self.observables_)
        return self

    def transform(self, X):
        basis = check_fitted_basis(self)
        X = check_coefficients(X, basis)
        return np.column_stack([f(X) for f in self.observables_.values()])

    def get_feature_names_out(self, input_features=None):
        check_fitted_basis(self)
        return np.asarray(self.feature_names_, dtype=object)


class KrylovBogoliubovSampler(BaseEstimator):
    """Sample the stationary measure of the damped-forced system.

    ``fit`` ignores ``X`` and stores ``measure_`` and ``report_``.
    """

    def __init__(self, config=None, count=2048, burn_in=None, stride=None, n_chains=None,
                 xi=None, threads=1):
        self.config = config
        self.count = count
        self.burn_in = burn_in
        self.stride = stride
        self.n_chains = n_chains
        self.xi = xi
        self.threads = threads

    def fit(self, X=None, y=None):
        cfg = self.config or SimConfig()
        growth = GrowthPair(self.xi or cfg.xi)
        m = krylov_bogoliubov_sample(cfg, None, growth, self.burn_in, self.stride, self.count,
                                     self.n_chains, threads=self.threads)
        self.measure_ = m
        self.basis_ = m.basis
        self.report_ = stationary_report(m, cfg, growth=growth)
        return self

    def sample(self, n, seed=0):
        check_fitted_basis(self)
        return self.measure_.snapshots[self.measure_.resample(n, seed)]


class SigmaMembership(BaseEstimator):
    """Slow-growth membership at level ``i``; ``predict`` returns booleans."""

    def __init__(self, i=1.0, j_max=3, r=1.9, xi="log1p", config=None, safety=None):
        self.i = i
        self.j_max = j_max
        self.r = r
        self.xi = xi
        self.config = config
        self.safety = safety

    def _certify(self, X):
        cfg = self.config or SimConfig(N=X.shape[1] - 1, full_shell=False)
        basis = _basis_for(X, cfg.d)
        return sigma_levels(X, [self.i], self.j_max, self.r, GrowthPair(self.xi), cfg,
                            self.safety, basis)[float(self.i)]

    def fit(self, X, y=None):
        X = check_coefficients(X)
        self.basis_ = _basis_for(X, (self.config or SimConfig()).d)
        self.n_features_in_ = X.shape[1]
        self.certificate_ = self._certify(X)
        return self

    def predict(self, X):
        basis = check_fitted_basis(self)
        X = check_coefficients(X, basis)
        return self._certify(X).passed


class ObservableDensity(BaseEstimator):
    """Histogram and kernel density of the mass or the energy."""

    def __init__(self, observable="mass", p=7.0, d=1, bins="auto", bandwidth_factor=1.0):
        self.observable = observable
        self.p = p
        self.d = d
        self.bins = bins
        self.bandwidth_factor = bandwidth_factor

    def fit(self, X, y=None, sample_weight=None):
        X = check_coefficients(X)
        self.basis_ = _basis_for(X, self.d)
        self.n_features_in_ = X.shape[1]
        w = np.full(len(X), 1.0 / len(X)) if sample_weight is None else np.asarray(sample_weight, float)
        w = w / w.sum()
        m = EmpiricalMeasure(self.basis_, X, w, {"kind": "fit"})
        self.distribution_ = distribution_of(m, self.observable, self.p, self.bins)
        return self

    def score_samples(self, values):
        """Log kernel density at observable ``values``."""
        check_fitted_basis(self)
        with np.errstate(divide="ignore"):
            return np.log(self.distribution_.kde(values, self.bandwidth_factor))
