"""Correction stage for conjoint data.

A multinomial logistic regression over the K+1 answers (K options plus the
outside option) maps (task features x, agent choice z) to a predicted human
choice distribution. It is fitted on the primary customers, where both y and
z are observed, and applied to the auxiliary customers, where only z is.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.optimize import minimize

MODEL_FORMAT = "aem.conjoint-correction"
MODEL_VERSION = 1


class CorrectionFitError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict[str, Any]):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class FeatureLayout:
    """Column layout of the corrector's design matrix."""

    n_options: int
    n_attributes: int
    interactions: bool = False
    n_profile: int = 0

    @property
    def n_classes(self) -> int:
        return self.n_options + 1

    @property
    def dim(self) -> int:
        d = self.n_options * self.n_attributes + self.n_classes + self.n_profile
        if self.interactions:
            d += self.n_options * self.n_attributes
        return d

    def design(self, X: np.ndarray, z: np.ndarray, profile: np.ndarray | None = None) -> np.ndarray:
        """[x flattened | one-hot(z) | optional x_j * 1{z = j} | optional profile]."""
        X = np.asarray(X, dtype=np.float64)
        z = np.asarray(z, dtype=np.int64)
        if X.ndim != 3 or X.shape[1:] != (self.n_options, self.n_attributes):
            raise ValueError(
                f"task features have shape {X.shape[1:]}, model expects ({self.n_options}, {self.n_attributes})"
            )
        if z.shape != (X.shape[0],) or np.any((z < 0) | (z >= self.n_classes)):
            raise ValueError("agent choices must be one index in 0..K per row")
        Z = np.zeros((X.shape[0], self.n_classes))
        Z[np.arange(X.shape[0]), z] = 1.0
        blocks = [X.reshape(X.shape[0], -1), Z]
        if self.interactions:
            blocks.append((X * Z[:, : self.n_options, None]).reshape(X.shape[0], -1))
        if self.n_profile:
            if profile is None or np.shape(profile) != (X.shape[0], self.n_profile):
                raise ValueError(f"model expects {self.n_profile} profile columns per row")
            blocks.append(np.asarray(profile, dtype=np.float64))
        elif profile is not None:
            raise ValueError("model was fitted without profile features")
        return np.concatenate(blocks, axis=1)

    def to_dict(self) -> dict[str, Any]:
        return {"n_options": self.n_options, "n_attributes": self.n_attributes,
                "interactions": self.interactions, "n_profile": self.n_profile}


@dataclass(frozen=True)
class CorrectionModel:
    coef: np.ndarray  # (K+1, dim)
    intercept: np.ndarray  # (K+1,)
    layout: FeatureLayout
    lam: float
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.coef.shape != (self.layout.n_classes, self.layout.dim) or self.intercept.shape != (self.layout.n_classes,):
            raise ValueError("coefficient shapes do not match the feature layout")
        if not (np.all(np.isfinite(self.coef)) and np.all(np.isfinite(self.intercept))):
            raise ValueError("non-finite correction coefficients")

    def to_json(self) -> str:
        return json.dumps({
            "format": MODEL_FORMAT, "version": MODEL_VERSION,
            "layout": self.layout.to_dict(), "lambda": self.lam,
            "coef": {"shape": list(self.coef.shape), "data": self.coef.ravel().tolist()},
            "intercept": self.intercept.tolist(),
            "metadata": self.metadata,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CorrectionModel":
        d = json.loads(text)
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported correction model document {d.get('format')!r} v{d.get('version')}")
        coef = np.asarray(d["coef"]["data"], dtype=np.float64).reshape(d["coef"]["shape"])
        return cls(coef, np.asarray(d["intercept"], dtype=np.float64), FeatureLayout(**d["layout"]),
                   float(d["lambda"]), d["metadata"])


def _softmax(logits: np.ndarray) -> np.ndarray:
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def correction_loss_grad(theta: np.ndarray, D: np.ndarray, Y: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """Mean cross-entropy plus 0.5 * lam * ||coef||^2 (intercepts unpenalized), and its gradient.

    ``theta`` packs coef (C x d) row-major followed by the C intercepts.
    """
    n, d = D.shape
    C = Y.shape[1]
    W = theta[: C * d].reshape(C, d)
    b = theta[C * d:]
    logits = D @ W.T + b
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float(np.mean(lse - (Y * logits).sum(axis=1)) + 0.5 * lam * np.sum(W * W))
    R = (_softmax(logits) - Y) / n
    gW = R.T @ D + lam * W
    return loss, np.concatenate([gW.ravel(), R.sum(axis=0)])


def fit_correction(
    X: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    lam: float = 1e-4,
    tol: float = 1e-8,
    max_iter: int = 5000,
    interactions: bool = False,
    profile: np.ndarray | None = None,
) -> CorrectionModel:
    """Fit P(y | x, z) on primary rows by L2-regularized multinomial logistic regression.

    The outside class is always modelled, even when no primary row chose it.
    The full-batch quasi-Newton optimizer stops when the gradient
    infinity-norm reaches ``tol`` or after ``max_iter`` iterations. Without
    regularization, diverging coefficients are flagged in the metadata as
    separation rather than clipped.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[0] == 0:
        raise ValueError("primary set is empty")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    layout = FeatureLayout(X.shape[1], X.shape[2], interactions, 0 if profile is None else np.shape(profile)[1])
    D = layout.design(X, z, profile)
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (X.shape[0],) or np.any((y < 0) | (y >= layout.n_classes)):
        raise ValueError("human choices must be one index in 0..K per row")
    Y = np.zeros((D.shape[0], layout.n_classes))
    Y[np.arange(D.shape[0]), y] = 1.0
    n_free = layout.n_classes * (layout.dim + 1)
    history: list[float] = []

    def fun(theta):
        loss, grad = correction_loss_grad(theta, D, Y, lam)
        if not np.isfinite(loss):
            raise CorrectionFitError("non-finite correction loss", {"iteration": len(history), "history": history[-5:]})
        return loss, grad

    def record(theta):
        history.append(correction_loss_grad(theta, D, Y, lam)[0])

    theta0 = np.zeros(n_free)
    history.append(correction_loss_grad(theta0, D, Y, lam)[0])
    res = minimize(fun, theta0, jac=True, method="L-BFGS-B", callback=record,
                   options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0, "maxcor": 20})
    theta = res.x
    grad_norm = float(np.abs(correction_loss_grad(theta, D, Y, lam)[1]).max())
    C, d = layout.n_classes, layout.dim
    coef = theta[: C * d].reshape(C, d)
    # a (numerically) zero loss on hard labels is only reachable under separation
    separation = lam == 0 and (grad_norm > tol or np.abs(coef).max() > 1e3 or res.fun < 1e-6)
    meta = {
        "iterations": int(res.nit), "final_loss": float(res.fun), "grad_inf_norm": grad_norm,
        "converged": grad_norm <= tol, "separation": bool(separation), "loss_history": history,
        "classes_seen": np.bincount(y, minlength=C).astype(int).tolist(),
    }
    return CorrectionModel(coef, theta[C * d:], layout, float(lam), meta)


def predict_soft_choices(model: CorrectionModel, X: np.ndarray, z: np.ndarray, profile: np.ndarray | None = None) -> np.ndarray:
    """Predicted human choice distribution for each (x, z) row, shape (n, K+1)."""
    D = model.layout.design(X, z, profile)
    return _softmax(D @ model.coef.T + model.intercept)
