"""Correction stage for region-level data.

Two correctors map triplets (order, persona, agent choice) to region share
vectors and are fitted to observed human shares under a KL loss:

* the mixture model reweights the agent's one-hot choices with attention
  weights ``softmax_i(U . tanh(V (W h_i + b)))`` computed over a region batch;
* the integrated model predicts a soft human choice per triplet with a
  three-layer network and averages the predictions within a region.

Triplet features are stored in two blocks, order context (region, period,
order) and persona, and gathered per triplet. Both models start with a
linear layer, so that layer is evaluated once per block row rather than
once per triplet.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import sparse

from . import seeding
from .domain import PERIODS, ShareVector
from .generation import triplet_slots

log = logging.getLogger(__name__)

HIDDEN = 64
ATTENTION = 32
EPS_FLOOR = 1e-8
MODEL_FORMAT = "aem.regional-model"
MODEL_VERSION = 1


class SupportViolation(ValueError):
    """Predicted share is zero where the human share is positive, so KL is infinite."""

    def __init__(self, unit: Any, category: int):
        super().__init__(f"unit {unit}: predicted share 0 for category {category} with positive human share")
        self.unit = unit
        self.category = category


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray], curve: list[float]):
        super().__init__(message)
        self.last_good = last_good
        self.curve = curve


# ---------------------------------------------------------------------------
# Feature encoding
# ---------------------------------------------------------------------------


@dataclass
class TripletEncoder:
    """Standardizes order-context features and one-hot encodes persona observables.

    Observable codes not seen at fit time go to a per-field "other" column.
    All output columns are centred and scaled with training-set statistics
    (weighted by how many triplets use each row); constant columns are only
    centred.
    """

    levels: list[list[int]] = field(default_factory=list)
    ctx_mean: np.ndarray | None = None
    ctx_scale: np.ndarray | None = None
    per_mean: np.ndarray | None = None
    per_scale: np.ndarray | None = None

    def _onehot(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.int64).reshape(-1, len(self.levels))
        cols = []
        for j, lv in enumerate(self.levels):
            block = np.zeros((obs.shape[0], len(lv) + 1))
            pos = {v: i for i, v in enumerate(lv)}
            for n, v in enumerate(obs[:, j]):
                block[n, pos.get(int(v), len(lv))] = 1.0
            cols.append(block)
        return np.concatenate(cols, axis=1)

    def fit(self, ctx: np.ndarray, ctx_counts: np.ndarray, obs: np.ndarray, obs_counts: np.ndarray) -> "TripletEncoder":
        obs = np.asarray(obs, dtype=np.int64)
        if ctx.size == 0 or obs.size == 0:
            raise ValueError("cannot fit encoder on an empty training set")
        self.levels = [sorted(set(obs[obs_counts > 0, j].tolist())) for j in range(obs.shape[1])]
        self.ctx_mean, self.ctx_scale = _weighted_moments(ctx, ctx_counts)
        self.per_mean, self.per_scale = _weighted_moments(self._onehot(obs), obs_counts)
        return self

    def encode_context(self, ctx: np.ndarray) -> np.ndarray:
        if ctx.shape[-1] != self.ctx_mean.size:
            raise ValueError(f"order feature dimension {ctx.shape[-1]} != fitted {self.ctx_mean.size}")
        return (ctx - self.ctx_mean) / self.ctx_scale

    def encode_persona(self, obs: np.ndarray) -> np.ndarray:
        if np.asarray(obs).shape[-1] != len(self.levels):
            raise ValueError("persona observables have the wrong length")
        return (self._onehot(obs) - self.per_mean) / self.per_scale

    def encode_triplet(self, order_features: np.ndarray, observables: Sequence[int]) -> np.ndarray:
        if order_features is None or observables is None:
            raise ValueError("triplet is missing order or persona fields")
        return np.concatenate([
            self.encode_context(np.asarray(order_features, dtype=np.float64)[None, :])[0],
            self.encode_persona(np.asarray(observables)[None, :])[0],
        ])

    @property
    def dims(self) -> tuple[int, int]:
        return self.ctx_mean.size, self.per_mean.size

    def to_dict(self) -> dict[str, Any]:
        return {
            "levels": self.levels,
            "ctx_mean": self.ctx_mean.tolist(), "ctx_scale": self.ctx_scale.tolist(),
            "per_mean": self.per_mean.tolist(), "per_scale": self.per_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TripletEncoder":
        return cls(
            [list(map(int, lv)) for lv in d["levels"]],
            np.asarray(d["ctx_mean"]), np.asarray(d["ctx_scale"]),
            np.asarray(d["per_mean"]), np.asarray(d["per_scale"]),
        )


def _weighted_moments(X: np.ndarray, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = np.asarray(counts, dtype=np.float64)
    mean = (w[:, None] * X).sum(axis=0) / w.sum()
    var = (w[:, None] * (X - mean) ** 2).sum(axis=0) / w.sum()
    scale = np.sqrt(var)
    scale[scale < 1e-12] = 1.0
    return mean, scale


@dataclass
class UnitBatch:
    """Encoded triplets grouped into (region, period) units.

    Triplet i uses context row ``ctx_index[i]`` and persona row
    ``persona_index[i]``; ``unit`` is nondecreasing. ``multiplicity`` counts
    duplicates from bootstrap resampling. ``target`` holds one human share
    vector per unit (absent at prediction time).
    """

    ctx: np.ndarray
    per: np.ndarray
    ctx_index: np.ndarray
    persona_index: np.ndarray
    choice: np.ndarray
    unit: np.ndarray
    unit_keys: list[Any]
    n_categories: int
    multiplicity: np.ndarray | None = None
    target: np.ndarray | None = None
    unit_weight: np.ndarray | None = None

    def __post_init__(self) -> None:
        n = self.choice.size
        if n == 0:
            raise ValueError("empty batch")
        if np.any(np.diff(self.unit) < 0):
            raise ValueError("triplets must be sorted by unit")
        if self.multiplicity is None:
            self.multiplicity = np.ones(n)
        if self.unit_weight is None:
            self.unit_weight = np.ones(len(self.unit_keys))
        self.starts = np.flatnonzero(np.r_[True, self.unit[1:] != self.unit[:-1]])
        present = self.unit[self.starts]
        if present.size != len(self.unit_keys) or np.any(present != np.arange(len(self.unit_keys))):
            raise ValueError("every unit needs at least one triplet and unit ids must be 0..U-1")
        ones = np.ones(n)
        cols = np.arange(n)
        self._s_ctx = sparse.csr_matrix((ones, (self.ctx_index, cols)), shape=(self.ctx.shape[0], n))
        self._s_per = sparse.csr_matrix((ones, (self.persona_index, cols)), shape=(self.per.shape[0], n))
        self._s_choice = sparse.csr_matrix((ones, (self.choice, cols)), shape=(self.n_categories, n))

    @property
    def n_units(self) -> int:
        return len(self.unit_keys)

    @property
    def input_dim(self) -> int:
        return self.ctx.shape[1] + self.per.shape[1]

    def dense(self) -> np.ndarray:
        return np.concatenate([self.ctx[self.ctx_index], self.per[self.persona_index]], axis=1)

    def onehot(self) -> np.ndarray:
        C = np.zeros((self.choice.size, self.n_categories))
        C[np.arange(self.choice.size), self.choice] = 1.0
        return C

    def with_target(self, target: np.ndarray | None, unit_weight: np.ndarray | None = None) -> "UnitBatch":
        return UnitBatch(
            self.ctx, self.per, self.ctx_index, self.persona_index, self.choice, self.unit,
            self.unit_keys, self.n_categories, self.multiplicity, target, unit_weight,
        )


def context_rows(tasks) -> np.ndarray:
    """Raw order-context features for every (region, period, slot), row (r * 2 + period) * n_z + slot."""
    feats = np.stack([tasks.order_features(0), tasks.order_features(1)], axis=1)  # (R, 2, n_z, F)
    return feats.reshape(-1, feats.shape[-1])


def _context_index(table, tasks) -> np.ndarray:
    n_z = tasks.order_index.shape[1]
    return (table.region * 2 + table.period) * n_z + triplet_slots(table, tasks)


def fit_encoder(table, tasks, observables: np.ndarray, multiplicity: np.ndarray | None = None) -> TripletEncoder:
    """Fit standardization on the triplets in ``table`` (the training set) only."""
    if len(table) == 0:
        raise ValueError("cannot fit encoder on an empty training set")
    w = np.ones(len(table)) if multiplicity is None else np.asarray(multiplicity, dtype=np.float64)
    ctx = context_rows(tasks)
    ci = _context_index(table, tasks)
    ctx_counts = np.bincount(ci, weights=w, minlength=ctx.shape[0])
    per_counts = np.bincount(table.persona, weights=w, minlength=observables.shape[0])
    used_c, used_p = ctx_counts > 0, per_counts > 0
    return TripletEncoder().fit(ctx[used_c], ctx_counts[used_c], observables[used_p], per_counts[used_p])


def build_unit_batch(
    table,
    tasks,
    observables: np.ndarray,
    encoder: TripletEncoder,
    targets: np.ndarray | None = None,
    multiplicity: np.ndarray | None = None,
    unit_weight: Mapping[tuple[str, str], float] | None = None,
) -> UnitBatch:
    """Group triplets into (region, period) units and encode their features.

    ``targets`` has shape (R, 2, K) indexed by region and period; units are
    keyed ``(region_id, period_name)`` in region-then-period order.
    """
    if len(table) == 0:
        raise ValueError("empty batch")
    order = np.argsort(table.unit_keys(), kind="stable")
    ukey = table.unit_keys()[order]
    present, unit = np.unique(ukey, return_inverse=True)
    ci = _context_index(table, tasks)[order]
    ctx_used, ctx_index = np.unique(ci, return_inverse=True)
    per_used, per_index = np.unique(table.persona[order], return_inverse=True)
    ctx = encoder.encode_context(context_rows(tasks)[ctx_used])
    per = encoder.encode_persona(np.asarray(observables)[per_used])
    keys = [(table.region_ids[k // 2], PERIODS[k % 2]) for k in present.tolist()]
    tgt = None if targets is None else np.asarray(targets)[present // 2, present % 2]
    uw = None if unit_weight is None else np.array([unit_weight[k] for k in keys], dtype=np.float64)
    mult = None if multiplicity is None else np.asarray(multiplicity, dtype=np.float64)[order]
    return UnitBatch(ctx, per, ctx_index, per_index, table.choice[order], unit, keys,
                     table.n_categories, mult, tgt, uw)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_mixture(input_dim: int, seed: int, hidden: int = HIDDEN, attention: int = ATTENTION) -> dict[str, np.ndarray]:
    rng = seeding.stream(seed, "init", "mixture")
    return {
        "W": _uniform(rng, input_dim, (input_dim, hidden)),
        "b": np.zeros(hidden),
        "V": _uniform(rng, hidden, (hidden, attention)),
        "U": _uniform(rng, attention, (attention,)),
    }


def init_integrated(
    input_dim: int, n_categories: int, seed: int, hidden: int = HIDDEN, attention: int = ATTENTION
) -> dict[str, np.ndarray]:
    """Layers input(+choice one-hot) -> 64 -> 32 -> K."""
    rng = seeding.stream(seed, "init", "integrated")
    d = input_dim + n_categories
    return {
        "W1": _uniform(rng, d, (d, hidden)), "b1": np.zeros(hidden),
        "W2": _uniform(rng, hidden, (hidden, attention)), "b2": np.zeros(attention),
        "W3": _uniform(rng, attention, (attention, n_categories)), "b3": np.zeros(n_categories),
    }


# ---------------------------------------------------------------------------
# Forward passes on plain arrays
# ---------------------------------------------------------------------------


def attention_weights(params: Mapping[str, np.ndarray], H: np.ndarray) -> np.ndarray:
    s = np.tanh((H @ params["W"] + params["b"]) @ params["V"]) @ params["U"]
    e = np.exp(s - s.max())
    return e / e.sum()


def mixture_forward(params: Mapping[str, np.ndarray], H: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Region share of one batch: attention-weighted sum of one-hot choices C."""
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    if H.shape[0] == 0:
        raise ValueError("empty batch")
    if H.shape[0] != C.shape[0]:
        raise ValueError(f"{H.shape[0]} feature rows but {C.shape[0]} choices")
    return attention_weights(params, H) @ C


def integrated_triplet_probs(params: Mapping[str, np.ndarray], H: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Per-triplet predicted human choice g_i = softmax(f(h_i, c_i))."""
    X = np.concatenate([np.atleast_2d(H), np.atleast_2d(C)], axis=1)
    h1 = np.maximum(X @ params["W1"] + params["b1"], 0.0)
    h2 = np.tanh(h1 @ params["W2"] + params["b2"])
    z = h2 @ params["W3"] + params["b3"]
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def aggregate_region(g: np.ndarray) -> np.ndarray:
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    if g.shape[0] == 0:
        raise ValueError("empty region")
    return g.mean(axis=0)


def integrated_forward(params: Mapping[str, np.ndarray], H: np.ndarray, C: np.ndarray) -> np.ndarray:
    return aggregate_region(integrated_triplet_probs(params, H, C))


# ---------------------------------------------------------------------------
# KL loss
# ---------------------------------------------------------------------------


def kl_share_loss(predicted: Mapping[Any, np.ndarray], human: Mapping[Any, np.ndarray]) -> float:
    """Sum over units of KL(human || predicted), with 0 log 0 = 0."""
    if set(predicted) != set(human):
        raise ValueError("predicted and human shares cover different units")
    total = 0.0
    for key in human:
        h = np.asarray(getattr(human[key], "shares", human[key]), dtype=np.float64)
        p = np.asarray(getattr(predicted[key], "shares", predicted[key]), dtype=np.float64)
        pos = h > 0
        bad = np.flatnonzero(pos & (p <= 0))
        if bad.size:
            raise SupportViolation(key, int(bad[0]))
        total += float(np.sum(h[pos] * np.log(h[pos] / p[pos])))
    return total


def _kl_terms(share: np.ndarray, target: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit KL with an epsilon floor inside the log, and d loss / d share."""
    floored = np.maximum(share, eps)
    pos = target > 0
    safe_t = np.where(pos, target, 1.0)
    per_unit = np.where(pos, target * (np.log(safe_t) - np.log(floored)), 0.0).sum(axis=1)
    grad = np.where(share > eps, -target / floored, 0.0)
    return per_unit, grad


# ---------------------------------------------------------------------------
# Batched losses with analytic gradients
# ---------------------------------------------------------------------------


def _segment_softmax(s: np.ndarray, batch: UnitBatch) -> np.ndarray:
    smax = np.maximum.reduceat(s, batch.starts)[batch.unit]
    e = batch.multiplicity * np.exp(s - smax)
    z = np.add.reduceat(e, batch.starts)[batch.unit]
    return e / z


def _unit_shares(weights: np.ndarray, batch: UnitBatch) -> np.ndarray:
    flat = np.bincount(batch.unit * batch.n_categories + batch.choice, weights=weights,
                       minlength=batch.n_units * batch.n_categories)
    return flat.reshape(batch.n_units, batch.n_categories)


def mixture_shares(params: Mapping[str, np.ndarray], batch: UnitBatch) -> np.ndarray:
    return _mixture_pass(params, batch)[0]


def _mixture_pass(params, batch):
    d1 = batch.ctx.shape[1]
    A = batch.ctx @ params["W"][:d1] + params["b"]
    B = batch.per @ params["W"][d1:]
    AV = A @ params["V"]
    BV = B @ params["V"]
    act = np.tanh(AV[batch.ctx_index] + BV[batch.persona_index])
    s = act @ params["U"]
    w = _segment_softmax(s, batch)
    return _unit_shares(w, batch), (A, B, act, w)


def mixture_loss_grad(
    params: Mapping[str, np.ndarray], batch: UnitBatch, eps: float = EPS_FLOOR, need_grad: bool = True
) -> tuple[float, dict[str, np.ndarray] | None]:
    d1 = batch.ctx.shape[1]
    share, (A, B, act, w) = _mixture_pass(params, batch)
    per_unit, gshare = _kl_terms(share, batch.target, eps)
    loss = float(batch.unit_weight @ per_unit)
    if not need_grad:
        return loss, None
    gshare = gshare * batch.unit_weight[:, None]
    # d share_uj / d s_i = w_i (c_ij - share_uj)
    g_choice = gshare[batch.unit, batch.choice]
    g_mean = (gshare * share).sum(axis=1)[batch.unit]
    ds = w * (g_choice - g_mean)
    dU = act.T @ ds
    dpre = np.outer(ds, params["U"]) * (1.0 - act**2)
    dAV = batch._s_ctx @ dpre
    dBV = batch._s_per @ dpre
    dV = A.T @ dAV + B.T @ dBV
    dA = dAV @ params["V"].T
    dB = dBV @ params["V"].T
    dW = np.concatenate([batch.ctx.T @ dA, batch.per.T @ dB], axis=0)
    return loss, {"W": dW, "b": dA.sum(axis=0), "V": dV, "U": dU}


def _integrated_pass(params, batch):
    d1, d2 = batch.ctx.shape[1], batch.per.shape[1]
    W1 = params["W1"]
    A = batch.ctx @ W1[:d1]
    B = batch.per @ W1[d1:d1 + d2]
    Wc = W1[d1 + d2:]
    z1 = A[batch.ctx_index] + B[batch.persona_index] + Wc[batch.choice] + params["b1"]
    h1 = np.maximum(z1, 0.0)
    h2 = np.tanh(h1 @ params["W2"] + params["b2"])
    z3 = h2 @ params["W3"] + params["b3"]
    e = np.exp(z3 - z3.max(axis=1, keepdims=True))
    g = e / e.sum(axis=1, keepdims=True)
    mass = np.add.reduceat(batch.multiplicity, batch.starts)
    coef = batch.multiplicity / mass[batch.unit]
    share = sparse.csr_matrix(
        (coef, (batch.unit, np.arange(batch.unit.size))), shape=(batch.n_units, batch.unit.size)
    ) @ g
    return share, (z1, h1, h2, g, coef)


def integrated_shares(params: Mapping[str, np.ndarray], batch: UnitBatch) -> np.ndarray:
    return _integrated_pass(params, batch)[0]


def integrated_loss_grad(
    params: Mapping[str, np.ndarray], batch: UnitBatch, eps: float = EPS_FLOOR, need_grad: bool = True
) -> tuple[float, dict[str, np.ndarray] | None]:
    d1, d2 = batch.ctx.shape[1], batch.per.shape[1]
    share, (z1, h1, h2, g, coef) = _integrated_pass(params, batch)
    per_unit, gshare = _kl_terms(share, batch.target, eps)
    loss = float(batch.unit_weight @ per_unit)
    if not need_grad:
        return loss, None
    gshare = gshare * batch.unit_weight[:, None]
    dg = coef[:, None] * gshare[batch.unit]
    dz3 = g * (dg - (g * dg).sum(axis=1, keepdims=True))
    dW3 = h2.T @ dz3
    dh2 = dz3 @ params["W3"].T
    dz2 = dh2 * (1.0 - h2**2)
    dW2 = h1.T @ dz2
    dz1 = (dz2 @ params["W2"].T) * (z1 > 0)
    dW1 = np.concatenate([
        batch.ctx.T @ (batch._s_ctx @ dz1),
        batch.per.T @ (batch._s_per @ dz1),
        batch._s_choice @ dz1,
    ], axis=0)
    return loss, {
        "W1": dW1, "b1": dz1.sum(axis=0), "W2": dW2, "b2": dz2.sum(axis=0),
        "W3": dW3, "b3": dz3.sum(axis=0),
    }


MODELS = {
    "mixture": (init_mixture, mixture_loss_grad, mixture_shares),
    "integrated": (init_integrated, integrated_loss_grad, integrated_shares),
}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "mixture"
    lr: float = 1e-5
    epochs: int = 500
    patience: int = 20
    seed: int = 0
    eps_floor: float = EPS_FLOOR
    hidden: int = HIDDEN
    attention: int = ATTENTION

    def __post_init__(self) -> None:
        if self.kind not in MODELS:
            raise ValueError(f"unknown corrector kind {self.kind!r}")
        if self.lr < 0 or self.epochs < 0 or self.patience < 1:
            raise ValueError("lr and epochs must be >= 0, patience >= 1")


@dataclass
class TrainResult:
    kind: str
    params: dict[str, np.ndarray]
    train_curve: list[float]
    val_curve: list[float]
    best_epoch: int
    stopped_early: bool
    pre_train_loss: float = float("nan")


def train_correction(train: UnitBatch, val: UnitBatch | None, config: TrainConfig) -> TrainResult:
    """Full-batch Adam on the total KL loss (one term per training unit).

    Early stopping keeps the parameters with the best validation KL and
    stops after ``patience`` epochs without improvement. Without a
    validation batch the final parameters are returned.
    """
    if train is None or train.n_units == 0:
        raise ValueError("empty training set")
    if train.target is None or (val is not None and val.target is None):
        raise ValueError("training and validation units need human share targets")
    init, loss_grad, _ = MODELS[config.kind]
    if config.kind == "mixture":
        params = init(train.input_dim, config.seed, config.hidden, config.attention)
    else:
        params = init(train.input_dim, train.n_categories, config.seed, config.hidden, config.attention)
    opt = Adam(params, config.lr)
    train_curve: list[float] = []
    val_curve: list[float] = []
    best = {k: v.copy() for k, v in params.items()}
    best_val = math.inf
    best_epoch = 0
    since = 0
    stopped = False
    pre_loss = loss_grad(params, train, config.eps_floor, need_grad=False)[0]
    for epoch in range(1, config.epochs + 1):
        loss, grads = loss_grad(params, train, config.eps_floor)
        if not math.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", best, train_curve)
        opt.step(params, grads)
        train_curve.append(loss)
        if val is not None:
            vloss = loss_grad(params, val, config.eps_floor, need_grad=False)[0]
            val_curve.append(vloss)
            if vloss < best_val - 1e-12:
                best_val, best_epoch, since = vloss, epoch, 0
                best = {k: v.copy() for k, v in params.items()}
            else:
                since += 1
                if since >= config.patience:
                    stopped = True
                    break
        else:
            best_epoch = epoch
    final = best if val is not None else params
    return TrainResult(config.kind, {k: v.copy() for k, v in final.items()}, train_curve, val_curve,
                       best_epoch, stopped, pre_loss)


def predict_region_shares(params: Mapping[str, np.ndarray], kind: str, batch: UnitBatch) -> dict[Any, np.ndarray]:
    """Forward pass only: one predicted share vector per unit key."""
    expected = _input_dim(params, kind, batch.n_categories)
    if expected != batch.input_dim:
        raise ValueError(f"feature dimension {batch.input_dim} does not match model input {expected}")
    shares = MODELS[kind][2](params, batch)
    return {key: shares[u] for u, key in enumerate(batch.unit_keys)}


def _input_dim(params: Mapping[str, np.ndarray], kind: str, n_categories: int) -> int:
    return params["W"].shape[0] if kind == "mixture" else params["W1"].shape[0] - n_categories


def as_share_vectors(shares: Mapping[tuple[str, str], np.ndarray], arms: Mapping[str, str]) -> list[ShareVector]:
    return [ShareVector(s, region, arms[region], period) for (region, period), s in shares.items()]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def model_to_json(kind: str, params: Mapping[str, np.ndarray], encoder: TripletEncoder | None = None,
                  config: Mapping[str, Any] | None = None) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": kind,
        "layers": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.items()},
        "encoder": None if encoder is None else encoder.to_dict(),
        "config": dict(config or {}),
    }
    return json.dumps(doc, sort_keys=True)


def model_from_json(text: str) -> tuple[str, dict[str, np.ndarray], TripletEncoder | None, dict[str, Any]]:
    doc = json.loads(text)
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model document {doc.get('format')!r} v{doc.get('version')}")
    params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["layers"].items()}
    enc = None if doc["encoder"] is None else TripletEncoder.from_dict(doc["encoder"])
    return doc["kind"], params, enc, doc["config"]
