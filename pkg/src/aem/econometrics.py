"""Inference stage: MNL part-worths, difference-in-differences, evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .domain import ARMS, PERIODS, ChoiceTask, DomainError, EffectEstimate, PartWorth


class EstimationError(RuntimeError):
    pass


class RankDeficientPanel(EstimationError):
    pass


class UndefinedMAPE(ValueError):
    pass


# ---------------------------------------------------------------------------
# Multinomial logit with an outside option
# ---------------------------------------------------------------------------


def _options_array(task: ChoiceTask | np.ndarray) -> np.ndarray:
    return task.options if isinstance(task, ChoiceTask) else np.asarray(task, dtype=np.float64)


def mnl_choice_probs(task: ChoiceTask | np.ndarray, beta: Sequence[float]) -> np.ndarray:
    """sigma_j = exp(x_j.beta) / (1 + sum_l exp(x_l.beta)); the last entry is the outside option."""
    x = _options_array(task)
    beta = np.asarray(beta, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != beta.size:
        raise DomainError(f"attribute count {x.shape[-1]} != beta length {beta.size}")
    u = np.append(x @ beta, 0.0)
    if not np.all(np.isfinite(u)):
        raise EstimationError("non-finite utilities")
    u -= u.max()
    e = np.exp(u)
    return e / e.sum()


def _batch_probs(X: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Choice probabilities for a stack of tasks X with shape (n, K, q) -> (n, K+1)."""
    u = np.concatenate([X @ beta, np.zeros((X.shape[0], 1))], axis=1)
    u -= u.max(axis=1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=1, keepdims=True)


def _as_targets(labels: np.ndarray, n_alt: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 1:
        Y = np.zeros((labels.size, n_alt))
        Y[np.arange(labels.size), labels.astype(np.int64)] = 1.0
        return Y
    if labels.shape[1] != n_alt:
        raise DomainError(f"soft labels have {labels.shape[1]} columns, expected {n_alt}")
    return labels.astype(np.float64)


def mnl_loss_grad_hess(
    beta: np.ndarray, X: np.ndarray, Y: np.ndarray, w: np.ndarray, ridge: float = 0.0
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted mean cross-entropy of targets Y against sigma(X; beta), with gradient and Hessian.

    With soft targets this equals the expected KL divergence up to the
    (beta-independent) entropy of Y.
    """
    P = _batch_probs(X, beta)
    wsum = w.sum()
    logP = np.log(np.clip(P, 1e-300, None))
    loss = -(w * (Y * logP).sum(axis=1)).sum() / wsum + 0.5 * ridge * beta @ beta
    # inside options only; the outside row of X is identically zero
    R = (P - Y)[:, :-1]
    grad = np.einsum("n,nk,nkq->q", w, R, X) / wsum + ridge * beta
    Pin = P[:, :-1]
    xbar = np.einsum("nk,nkq->nq", Pin, X)
    Exx = np.einsum("n,nk,nkq,nkr->qr", w, Pin, X, X)
    hess = (Exx - np.einsum("n,nq,nr->qr", w, xbar, xbar)) / wsum + ridge * np.eye(beta.size)
    return float(loss), grad, hess


def fit_mnl(
    X: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
    tol: float = 1e-9,
    max_iter: int = 100,
    method: str = "",
) -> PartWorth:
    """Fit MNL part-worths by damped Newton on the weighted cross-entropy.

    ``labels`` is either an int vector (hard choices, K = outside) or an
    (n, K+1) matrix of target probabilities. Divergence under perfect
    separation (or a perfect fit to hard labels) triggers a refit with a
    1e-6 ridge, recorded in metadata.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[0] == 0:
        raise DomainError(f"expected a nonempty (n, K, q) task stack, got shape {X.shape}")
    Y = _as_targets(labels, X.shape[1] + 1)
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    result = _newton(X, Y, w, 0.0, tol, max_iter)
    meta = {"iterations": result[3], "ridge": 0.0, "separation": False}
    hard_labels = bool(np.all((Y == 0) | (Y == 1)))
    # hard labels fitted with (numerically) zero loss only happen under separation
    perfect = hard_labels and result[1] < 1e-8
    if not result[2] or perfect or not np.all(np.isfinite(result[0])) or np.abs(result[0]).max() > 1e3:
        result = _newton(X, Y, w, 1e-6, tol, max_iter)
        meta.update(iterations=result[3], ridge=1e-6, separation=True)
    beta, loss, converged, _ = result
    entropy = -(w * (Y * np.log(np.where(Y > 0, Y, 1.0))).sum(axis=1)).sum() / w.sum()
    meta["kl"] = max(loss - entropy, 0.0)
    return PartWorth(beta, converged, max(loss, 0.0), method=method, metadata=meta)


def _newton(X, Y, w, ridge, tol, max_iter):
    beta = np.zeros(X.shape[2])
    loss, grad, hess = mnl_loss_grad_hess(beta, X, Y, w, ridge)
    it = 0
    for it in range(1, max_iter + 1):
        if np.abs(grad).max() <= tol:
            return beta, loss, True, it - 1
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta - t * step
            c_loss, c_grad, c_hess = mnl_loss_grad_hess(cand, X, Y, w, ridge)
            if c_loss <= loss - 1e-4 * t * (grad @ step) or t < 1e-10:
                break
            t *= 0.5
        if t < 1e-10 and c_loss > loss:
            break
        beta, loss, grad, hess = cand, c_loss, c_grad, c_hess
        if not np.all(np.isfinite(beta)):
            return beta, loss, False, it
    return beta, loss, bool(np.abs(grad).max() <= tol), it


# ---------------------------------------------------------------------------
# Conjoint estimator suite and metrics
# ---------------------------------------------------------------------------

SUITE_METHODS = ("beta_star", "beta_primary", "beta_aux", "beta_naive", "beta_corr")


def estimate_partworth_suite(
    X_primary: np.ndarray,
    y_primary: np.ndarray,
    X_aux: np.ndarray,
    z_aux: np.ndarray,
    y_hat_aux: np.ndarray,
    y_aux_hidden: np.ndarray,
    **fit_kwargs,
) -> dict[str, PartWorth]:
    """Fit the five part-worth estimators, each on its own choice set.

    beta_star    primary + aux human choices (needs the hidden aux labels)
    beta_primary primary human choices
    beta_aux     aux agent choices
    beta_naive   primary human choices + aux agent choices
    beta_corr    aux corrected soft choices
    """
    n_alt = X_primary.shape[1] + 1
    X_all = np.concatenate([X_primary, X_aux])
    hard = lambda a: _as_targets(a, n_alt)  # noqa: E731
    return {
        "beta_star": fit_mnl(X_all, np.concatenate([hard(y_primary), hard(y_aux_hidden)]), method="beta_star", **fit_kwargs),
        "beta_primary": fit_mnl(X_primary, y_primary, method="beta_primary", **fit_kwargs),
        "beta_aux": fit_mnl(X_aux, z_aux, method="beta_aux", **fit_kwargs),
        "beta_naive": fit_mnl(X_all, np.concatenate([hard(y_primary), hard(z_aux)]), method="beta_naive", **fit_kwargs),
        "beta_corr": fit_mnl(X_aux, y_hat_aux, method="beta_corr", **fit_kwargs),
    }


def mape(beta: Sequence[float], beta_star: Sequence[float]) -> float:
    """Mean absolute percentage error of beta against the reference beta_star (as a fraction)."""
    b = np.asarray(beta, dtype=np.float64)
    ref = np.asarray(beta_star, dtype=np.float64)
    if b.shape != ref.shape:
        raise ValueError(f"length mismatch {b.shape} vs {ref.shape}")
    if np.any(ref == 0):
        raise UndefinedMAPE(f"reference coefficient(s) at {np.flatnonzero(ref == 0).tolist()} are zero")
    return float(np.mean(np.abs(b - ref) / np.abs(ref)))


def bias_reduction(mape_method: float, mape_primary: float) -> float:
    """Change in MAPE relative to the primary-only estimator; negative is an improvement."""
    return mape_method - mape_primary


def share_mape(predicted: np.ndarray, truth: np.ndarray) -> float:
    """MAPE between predicted and ground-truth share vectors, over categories with nonzero truth."""
    p = np.asarray(predicted, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    keep = t > 0
    return float(np.mean(np.abs(p[keep] - t[keep]) / t[keep]))


# ---------------------------------------------------------------------------
# Difference-in-differences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PanelCell:
    region_id: str
    period: str
    arm: str
    outcome: float
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.period not in PERIODS or self.arm not in ARMS:
            raise DomainError(f"bad cell labels period={self.period!r} arm={self.arm!r}")
        if not self.weight > 0:
            raise DomainError(f"cell weight must be > 0, got {self.weight}")
        if not math.isfinite(self.outcome):
            raise DomainError(f"non-finite outcome in region {self.region_id}")


def did_estimate(
    panel: Iterable[PanelCell],
    se_kind: str = "cluster",
    confidence: float = 0.95,
    method: str = "did",
) -> EffectEstimate:
    """Weighted OLS of Y on (1, Treatment, Post, Treatment x Post).

    ``se_kind`` is ``"classic"`` (homoskedastic) or ``"cluster"`` (CR1,
    clustered by region). The p-value and CI use a t distribution with the
    OLS residual degrees of freedom.
    """
    cells = list(panel)
    if se_kind not in ("classic", "cluster"):
        raise ValueError(f"unknown se_kind {se_kind!r}")
    n = len(cells)
    y = np.array([c.outcome for c in cells])
    w = np.array([c.weight for c in cells])
    treat = np.array([c.arm == "treatment" for c in cells], dtype=np.float64)
    post = np.array([c.period == "post" for c in cells], dtype=np.float64)
    present = {(a, p) for a, p in zip(treat, post)}
    if len(present) < 4:
        missing = sorted({(a, p) for a in (0.0, 1.0) for p in (0.0, 1.0)} - present)
        labels = [f"{ARMS[0] if a else ARMS[1]}/{PERIODS[int(p)]}" for a, p in missing]
        raise RankDeficientPanel(f"missing panel cells: {', '.join(labels)}")
    X = np.column_stack([np.ones(n), treat, post, treat * post])
    Xw = X * w[:, None]
    bread = np.linalg.inv(X.T @ Xw)
    coef = bread @ (Xw.T @ y)
    resid = y - X @ coef
    df = n - X.shape[1]
    if df <= 0:
        raise RankDeficientPanel(f"panel with {n} cells leaves no residual degrees of freedom")
    if se_kind == "classic":
        sigma2 = (w * resid**2).sum() / df
        cov = sigma2 * bread
    else:
        groups: dict[str, list[int]] = {}
        for i, c in enumerate(cells):
            groups.setdefault(c.region_id, []).append(i)
        meat = np.zeros((4, 4))
        for idx in groups.values():
            s = Xw[idx].T @ resid[idx]
            meat += np.outer(s, s)
        g = len(groups)
        correction = (g / (g - 1)) * ((n - 1) / df) if g > 1 else 1.0
        cov = correction * bread @ meat @ bread
    beta3 = float(coef[3])
    se = float(math.sqrt(max(cov[3, 3], 0.0)))
    if se > 0:
        t = beta3 / se
        p = float(2 * stats.t.sf(abs(t), df))
    else:
        p = 0.0 if beta3 != 0 else 1.0
    half = float(stats.t.ppf(0.5 + confidence / 2, df)) * se
    return EffectEstimate(
        beta3, se, min(max(p, 0.0), 1.0), beta3 - half, beta3 + half, method=method,
        extra={"df": df, "n_cells": n, "se_kind": se_kind, "coef": coef.tolist()},
    )


def panel_from_shares(
    shares: dict[tuple[str, str], np.ndarray],
    arms: dict[str, str],
    category: int,
    regions: Iterable[str] | None = None,
) -> list[PanelCell]:
    """Build DiD cells from {(region, period): share vector}, taking one category as outcome."""
    keep = None if regions is None else set(regions)
    cells = []
    for (region, period), s in sorted(shares.items()):
        if keep is not None and region not in keep:
            continue
        cells.append(PanelCell(region, period, arms[region], float(s[category])))
    return cells
