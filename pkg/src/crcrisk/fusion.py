"""Combining the WSI risk score (or embedding) with clinical features.

Two decision-level rules operate on probabilities directly. Two trained
models take features: one appends the WSI probability to the clinical vector,
the other concatenates the patient embedding with it and fits an MLP.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .clinical import MLPConfig, fit_mlp, fit_tabular, TABULAR_MODELS
from .errors import ConfigError, ShapeError, UndefinedMetricError
from .evalstat import auc

FUSION_METHODS = ("decision_average", "decision_weighted", "wsi_decision_feature", "feature_level")
WEIGHT_GRID = np.round(np.arange(21) * 0.05, 2)


@dataclass(frozen=True)
class FusionSpec:
    """``weight`` is only meaningful for decision_weighted; None there means
    "select on validation"."""

    method: str = "decision_weighted"
    weight: float | None = None
    classifier: str = "lr"
    hidden: int = 32
    lam: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.method not in FUSION_METHODS:
            raise ConfigError(f"unknown fusion method {self.method!r}; valid: {', '.join(FUSION_METHODS)}")
        if self.weight is not None:
            if self.method != "decision_weighted":
                raise ConfigError("a fusion weight is only allowed for decision_weighted")
            if not 0.0 <= self.weight <= 1.0:
                raise ConfigError("fusion weight must lie in [0, 1]")
        if self.classifier not in TABULAR_MODELS:
            raise ConfigError(f"unknown classifier {self.classifier!r}; valid: {', '.join(TABULAR_MODELS)}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _probs(p, name):
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError(f"{name} must contain probabilities in [0, 1]")
    return p


def fuse_decision_average(p_wsi, p_clin):
    return fuse_decision_weighted(p_wsi, p_clin, 0.5)


def fuse_decision_weighted(p_wsi, p_clin, w):
    if not 0.0 <= w <= 1.0:
        raise ValueError("w must lie in [0, 1]")
    p_wsi = _probs(p_wsi, "p_wsi")
    p_clin = _probs(p_clin, "p_clin")
    if w == 1.0:
        return p_wsi.copy()
    if w == 0.0:
        return p_clin.copy()
    return w * p_wsi + (1.0 - w) * p_clin


def select_weight(p_wsi, p_clin, labels):
    """Grid weight maximizing validation AUC; ties go to the smaller weight."""
    p_wsi = _probs(p_wsi, "p_wsi")
    p_clin = _probs(p_clin, "p_clin")
    if p_wsi.size == 0:
        raise ValueError("validation set is empty")
    best_w, best = 0.5, -np.inf
    for w in WEIGHT_GRID:
        try:
            a = auc(fuse_decision_weighted(p_wsi, p_clin, float(w)), labels)
        except UndefinedMetricError:
            warnings.warn("validation labels are single-class; using w = 0.5", RuntimeWarning)
            return 0.5
        if a > best + 1e-12:
            best_w, best = float(w), a
    return best_w


class _Standardizer:
    def __init__(self, X):
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.sd = np.where(sd > 0, sd, 1.0)

    def __call__(self, X):
        return (X - self.mean) / self.sd


class DecisionFusionModel:
    """Weighted decision fusion as a function of [clinical columns..., p_wsi]."""

    def __init__(self, clinical_model, w):
        self.clinical_model = clinical_model
        self.w = float(w)

    def predict_proba(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        p_clin = self.clinical_model.predict_proba(Z[:, :-1])
        return self.w * np.clip(Z[:, -1], 0, 1) + (1.0 - self.w) * p_clin


class WsiDecisionFeatureModel:
    """Tabular classifier on the clinical vector with p_wsi appended as the last column."""

    def __init__(self, model, scaler, width):
        self.model = model
        self.scaler = scaler
        self.width = width

    def predict_proba(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.width:
            raise ShapeError(f"expected {self.width} columns, got {Z.shape[1]}")
        return self.model.predict_proba(self.scaler(Z))


def stack_wsi(X_clin, p_wsi):
    X_clin = np.asarray(X_clin, dtype=np.float64)
    p_wsi = _probs(p_wsi, "p_wsi")
    if X_clin.ndim != 2 or len(X_clin) != len(p_wsi):
        raise ShapeError("clinical matrix and p_wsi disagree in length")
    return np.hstack([X_clin, p_wsi[:, None]])


def fuse_wsi_decision_feature(p_wsi, X_clin, y, spec: FusionSpec = FusionSpec("wsi_decision_feature")):
    """Train on [X_clin, p_wsi]; pass out-of-fold p_wsi for the training rows."""
    Z = stack_wsi(X_clin, p_wsi)
    scaler = _Standardizer(Z)
    model = fit_tabular(spec.classifier, scaler(Z), y, seed=spec.seed, lam=spec.lam)
    return WsiDecisionFeatureModel(model, scaler, Z.shape[1])


class FeatureLevelModel:
    def __init__(self, mlp, scaler, embed_dim, clin_width):
        self.mlp = mlp
        self.scaler = scaler
        self.embed_dim = embed_dim
        self.clin_width = clin_width

    def predict_proba(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.embed_dim + self.clin_width:
            raise ShapeError(f"expected {self.embed_dim + self.clin_width} columns, got {Z.shape[1]}")
        return self.mlp.predict_proba(self.scaler(Z))


def concat_features(embeddings, X_clin):
    E = np.asarray(embeddings, dtype=np.float64)
    X = np.asarray(X_clin, dtype=np.float64)
    if E.ndim != 2 or X.ndim != 2 or len(E) != len(X):
        raise ShapeError("embeddings and clinical matrix disagree in shape")
    return np.hstack([E, X])


def fuse_feature_level(embeddings, X_clin, y, spec: FusionSpec = FusionSpec("feature_level")):
    Z = concat_features(embeddings, X_clin)
    scaler = _Standardizer(Z)
    mlp = fit_mlp(scaler(Z), y, MLPConfig(hidden=spec.hidden, lam=spec.lam, seed=spec.seed))
    return FeatureLevelModel(mlp, scaler, np.asarray(embeddings).shape[1], np.asarray(X_clin).shape[1])
