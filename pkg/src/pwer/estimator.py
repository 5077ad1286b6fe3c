"""Estimator-style wrapper around the single-step testing core."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import core
from .exceptions import ValidationError
from .popmodel import PopulationStructure, make_structure


def _as_structure(structure) -> PopulationStructure:
    if isinstance(structure, PopulationStructure):
        return structure
    if isinstance(structure, dict):
        return PopulationStructure.from_dict(structure)
    if isinstance(structure, str):
        return PopulationStructure.from_json(structure)
    return make_structure(structure)


class MultipleTest(TransformerMixin, BaseEstimator):
    """Single-step test controlling the population-wise (or family-wise) error rate.

    ``fit`` solves for the critical value; nothing is learned from data, so
    ``X`` is optional and ignored. ``predict`` maps rows of observed test
    statistics to rejection indicators and ``transform`` to adjusted
    p-values.

    Parameters
    ----------
    structure : PopulationStructure, dict, JSON string or list of (subset, pi)
    correlation : array-like of shape (m, m), default identity
    df : float, default inf
        Degrees of freedom of the joint t distribution; inf means normal.
    alpha : float, default 0.025
    weights : array-like of shape (m,), optional
    true_nulls : iterable of 1-based indices, optional
        Least favourable configuration; defaults to the global null.
    error_rate : {"pwer", "fwer"}
    backend : {"auto", "exact", "qmc", "mc"}
    tol : float, default 1e-5
        Target absolute error for the QMC backend.
    seed : int, default 0
    n_draws : int, default 1_000_000
        Ensemble size for the ``mc`` backend.
    """

    def __init__(self, structure=None, correlation=None, df=math.inf, alpha=0.025,
                 weights=None, true_nulls=None, error_rate="pwer", backend="auto",
                 tol=1e-5, seed=0, n_draws=1_000_000):
        self.structure = structure
        self.correlation = correlation
        self.df = df
        self.alpha = alpha
        self.weights = weights
        self.true_nulls = true_nulls
        self.error_rate = error_rate
        self.backend = backend
        self.tol = tol
        self.seed = seed
        self.n_draws = n_draws

    def _engine_kw(self):
        return {"backend": self.backend, "tol": self.tol, "seed": self.seed,
                "n_draws": self.n_draws}

    def fit(self, X=None, y=None):
        if self.structure is None:
            raise ValidationError("structure is required")
        structure = _as_structure(self.structure)
        m = structure.m
        R = np.eye(m) if self.correlation is None else np.asarray(self.correlation, dtype=float)
        self.problem_ = core.PwerProblem(structure, core.CorrelationModel(R, self.df),
                                         self.true_nulls, self.weights)
        self.result_ = core.solve_critical(self.problem_, self.alpha,
                                           error_rate=self.error_rate, **self._engine_kw())
        self.c_star_ = self.result_.c_star
        self.thresholds_ = np.asarray(self.result_.thresholds)
        self.n_features_in_ = m
        return self

    def _check_Z(self, Z):
        check_is_fitted(self, "c_star_")
        Z = check_array(Z, ensure_2d=False, dtype=float)
        Z = np.atleast_2d(Z)
        if Z.shape[1] != self.n_features_in_:
            raise ValidationError(f"expected {self.n_features_in_} statistics per row, got {Z.shape[1]}")
        return Z

    def predict(self, Z):
        """Boolean rejections ``Z_i > w_i c*``, one row per observation vector."""
        Z = self._check_Z(Z)
        return Z > self.thresholds_[None, :]

    def transform(self, Z):
        """Adjusted p-values for each row of ``Z``."""
        Z = self._check_Z(Z)
        return np.vstack([core.adjusted_p(self.problem_, row, error_rate=self.error_rate,
                                          **self._engine_kw()) for row in Z])

    def confidence_bounds(self, estimates, ses, side="lower") -> core.SciResult:
        """Simultaneous bounds dual to the fitted test."""
        check_is_fitted(self, "c_star_")
        return core.sci_bounds(estimates, ses, self.c_star_, side, self.problem_.weights)
