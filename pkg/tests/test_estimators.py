import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from snlslab.config import SimConfig
from snlslab.dynamics import integrate_deterministic
from snlslab.estimators import (
    FlowTransformer,
    KrylovBogoliubovSampler,
    ObservableDensity,
    ObservableTransformer,
    SigmaMembership,
)
from snlslab.noise import random_field
from snlslab.spectral import SpectralField, build_basis


@pytest.fixture
def X():
    b = build_basis(1, 8, full_shell=False)
    return np.stack([random_field(b, 2.0, 0.5, k).coeffs for k in range(6)])


class TestFlowTransformer:
    def test_matches_integrator(self, X):
        out = FlowTransformer(t=0.05, dt=1e-3).fit_transform(X)
        b = build_basis(1, 8, full_shell=False)
        ref = integrate_deterministic(SpectralField(b, X[2]), None, 1e-3, 0.05, p=7).coeffs[-1]
        assert np.allclose(out[2], ref, atol=1e-13)

    def test_not_fitted(self, X):
        with pytest.raises(NotFittedError):
            FlowTransformer().transform(X)

    def test_shape_checked(self, X):
        est = FlowTransformer(t=0.01, dt=1e-3).fit(X)
        with pytest.raises(ValueError):
            est.transform(X[:, :5])
        with pytest.raises(ValueError):
            FlowTransformer().fit(np.full((2, 3), np.nan))

    def test_clone_and_params(self):
        est = FlowTransformer(t=2.0, p=5.0)
        assert clone(est).get_params()["t"] == 2.0
        assert est.set_params(dt=0.1).dt == 0.1


class TestObservableTransformer:
    def test_features(self, X):
        est = ObservableTransformer().fit(X)
        F = est.transform(X)
        assert F.shape == (6, 7) and F.dtype == float
        names = list(est.get_feature_names_out())
        assert names[:3] == ["M", "E", "norm_1.9"]
        b = build_basis(1, 8, full_shell=False)
        assert np.allclose(F[:, 0], 0.5 * b.norm(X, 0.0) ** 2)

    def test_pipeline(self, X):
        pipe = make_pipeline(FlowTransformer(t=0.05, dt=1e-3), ObservableTransformer())
        F0 = ObservableTransformer().fit_transform(X)
        F1 = pipe.fit_transform(X)
        # mass and energy are invariants of the flow
        assert np.allclose(F1[:, 0], F0[:, 0], rtol=1e-12)
        assert np.allclose(F1[:, 1], F0[:, 1], rtol=1e-6)

    def test_accepts_fields(self):
        b = build_basis(1, 4, full_shell=False)
        F = ObservableTransformer().fit_transform([random_field(b, 2.0, 0.3, k) for k in range(3)])
        assert F.shape[0] == 3


def test_sampler():
    cfg = SimConfig(N=4, alpha=1.0, dt=1e-2)
    est = KrylovBogoliubovSampler(cfg, count=16, burn_in=0.5, stride=0.1, n_chains=4).fit()
    assert len(est.measure_) == 16 and "mean_calM" in est.report_
    draws = est.sample(10, seed=1)
    assert draws.shape == (10, est.basis_.n_modes)
    assert np.array_equal(draws, est.sample(10, seed=1))
    with pytest.raises(NotFittedError):
        KrylovBogoliubovSampler().sample(3)


def test_sigma_membership(X):
    cfg = SimConfig(N=8, full_shell=False, dt=1e-3)
    big = X.copy()
    big[0] *= 20
    est = SigmaMembership(i=1.0, j_max=1, config=cfg, safety=0.5).fit(big)
    pred = est.predict(big)
    assert pred.dtype == bool and not pred[0] and pred[1:].all()
    assert np.array_equal(pred, est.certificate_.passed)


def test_observable_density(X):
    est = ObservableDensity().fit(X)
    vals = est.distribution_.values
    assert np.allclose(vals, 0.5 * build_basis(1, 8, full_shell=False).norm(X, 0.0) ** 2)
    s = est.score_samples(np.array([vals.mean(), 1e3]))
    assert np.isfinite(s[0]) and s[1] == -np.inf
    w = np.arange(1, 7, dtype=float)
    est_w = ObservableDensity().fit(X, sample_weight=w)
    assert np.allclose(est_w.distribution_.weights, w / w.sum())
