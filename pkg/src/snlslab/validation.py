"""Input checks shared by the estimators.

scikit-learn's ``check_array`` rejects complex input, so coefficient
matrices are validated here instead.
"""

from __future__ import annotations

import numpy as np

from .spectral import ModeBasis, SpectralField

__all__ = ["check_coefficients", "check_fitted_basis"]


def check_coefficients(X, basis: ModeBasis | None = None, allow_single: bool = True) -> np.ndarray:
    """Return ``X`` as a finite complex array of shape ``(n_samples, n_modes)``.

    Accepts a coefficient matrix, a single coefficient vector, a
    :class:`SpectralField` or a list of fields.
    """
    if isinstance(X, SpectralField):
        X = X.coeffs[None, :]
    elif isinstance(X, (list, tuple)) and X and isinstance(X[0], SpectralField):
        X = np.stack([u.coeffs for u in X])
    X = np.asarray(X)
    if X.dtype == object:
        raise TypeError("coefficients must be numeric")
    X = X.astype(complex, copy=True)
    if X.ndim == 1 and allow_single:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"expected a 2D coefficient array, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(X)):
        raise ValueError("coefficients contain NaN or inf")
    if basis is not None and X.shape[1] != basis.n_modes:
        raise ValueError(f"expected {basis.n_modes} modes, got {X.shape[1]}")
    return X


def check_fitted_basis(est, attr: str = "basis_"):
    from sklearn.utils.validation import check_is_fitted

    check_is_fitted(est, attr)
    return getattr(est, attr)
