"""Generation stage.

Simulates a ground-truth human population (persona logit agents mixed with
community weights), a distorted "LLM" agent that acts under the same
personas, and the task scaffolding for both the conjoint study and the
regional delivery-option experiment.
"""

from __future__ import annotations

import json
import logging
import math
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import seeding
from .domain import (
    DEFAULT_CATEGORIES,
    ChoiceTask,
    PERIODS,
    DomainError,
    Persona,
    Region,
    TripletTable,
)

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Agent and community choice rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureSpec:
    weights: np.ndarray
    persona_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 1 or w.size != len(self.persona_ids):
            raise DomainError("mixture weights and persona ids differ in length")
        if w.size == 0:
            raise DomainError("empty mixture")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DomainError(f"mixture weights must be a probability vector (sum={w.sum():.12g})")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "persona_ids", tuple(self.persona_ids))


@dataclass(frozen=True)
class DistortionSpec:
    """Monotone distortion of persona decision weights: scale * shrink(w) + shift."""

    scale: float = 1.0
    shift: tuple[float, ...] | None = None
    heterogeneity_shrink: float = 0.0

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise DomainError(f"distortion scale must be > 0, got {self.scale}")
        if not 0.0 <= self.heterogeneity_shrink <= 1.0:
            raise DomainError(f"heterogeneity_shrink must lie in [0, 1], got {self.heterogeneity_shrink}")
        if self.shift is not None:
            object.__setattr__(self, "shift", tuple(float(v) for v in self.shift))

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.heterogeneity_shrink == 0.0 and not any(self.shift or ())

    def apply(self, weights: np.ndarray, population_mean: np.ndarray | None = None) -> np.ndarray:
        W = np.asarray(weights, dtype=np.float64)
        mean = W.reshape(-1, W.shape[-1]).mean(axis=0) if population_mean is None else population_mean
        s = self.heterogeneity_shrink
        out = self.scale * ((1.0 - s) * W + s * mean)
        if self.shift is not None:
            if len(self.shift) != W.shape[-1]:
                raise DomainError(f"shift length {len(self.shift)} != {W.shape[-1]} attributes")
            out = out + np.asarray(self.shift)
        return out

    @classmethod
    def identity(cls) -> "DistortionSpec":
        return cls()


def agent_choice_probs(weights: Sequence[float], task: ChoiceTask | np.ndarray) -> np.ndarray:
    """Logit choice probabilities of one agent; the outside option (last entry) has utility 0."""
    x = task.options if isinstance(task, ChoiceTask) else np.asarray(task, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.size:
        raise DomainError(f"weights of length {w.size} do not match {x.shape[-1]} attributes")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(x))):
        raise DomainError("non-finite weights or attributes")
    has_outside = task.has_outside if isinstance(task, ChoiceTask) else True
    u = x @ w
    if has_outside:
        u = np.append(u, 0.0)
    e = np.exp(u - u.max())
    return e / e.sum()


def community_choice_probs(
    mixture: MixtureSpec, personas: Mapping[str, Persona] | Sequence[Persona], task: ChoiceTask
) -> np.ndarray:
    """Mixture-weighted average of the member personas' choice probabilities."""
    if not isinstance(personas, Mapping):
        personas = {p.persona_id: p for p in personas}
    missing = [pid for pid in mixture.persona_ids if pid not in personas]
    if missing:
        raise DomainError(f"mixture references unknown personas {missing[:5]}")
    out = None
    for theta, pid in zip(mixture.weights, mixture.persona_ids):
        probs = theta * agent_choice_probs(personas[pid].latent_weights, task)
        out = probs if out is None else out + probs
    return out


# ---------------------------------------------------------------------------
# Choice providers
# ---------------------------------------------------------------------------


class ProviderUnavailable(RuntimeError):
    """An external choice provider could not be reached after retries."""


class ChoiceProvider:
    """Maps (persona, task) to a chosen option index (n_options = outside)."""

    name = "provider"

    def choose(self, persona: Persona, task: ChoiceTask, rng: np.random.Generator) -> int:
        raise NotImplementedError


class LogitProvider(ChoiceProvider):
    """In-process provider whose choices are logit draws under transformed persona weights."""

    def decision_weights(self, latent: np.ndarray) -> np.ndarray:
        return np.asarray(latent, dtype=np.float64)

    def choose(self, persona: Persona, task: ChoiceTask, rng: np.random.Generator) -> int:
        p = agent_choice_probs(self.decision_weights(persona.latent_weights[None, :])[0], task)
        return int(rng.choice(p.size, p=p))


class GroundTruthHuman(LogitProvider):
    """Human customers: each persona follows its own latent weights.

    ``community_weights`` (optional) is the mixture used to aggregate members
    into community shares; it does not change individual choices.
    """

    name = "oracle"

    def __init__(self, community_weights: Callable[[np.ndarray], np.ndarray] | None = None):
        self.community_weights = community_weights


class DistortedAgent(LogitProvider):
    name = "distorted"

    def __init__(self, distortion: DistortionSpec, population_mean: np.ndarray | None = None):
        self.distortion = distortion
        self.population_mean = None if population_mean is None else np.asarray(population_mean, dtype=np.float64)

    def decision_weights(self, latent: np.ndarray) -> np.ndarray:
        return self.distortion.apply(latent, self.population_mean)


Transport = Callable[[str, dict[str, Any]], dict[str, Any]]


def _http_json_transport(endpoint: str, payload: dict[str, Any], timeout: float = 10.0) -> dict[str, Any]:
    req = urllib.request.Request(
        endpoint, data=json.dumps(payload).encode("utf-8"),
        headers={"Content-Type": "application/json"}, method="POST",
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:  # noqa: S310 - endpoint is user configured
        return json.loads(resp.read().decode("utf-8"))


class ExternalProvider(ChoiceProvider):
    """Synchronous request/response adapter for an out-of-process chooser.

    Request body::

        {"persona": {"persona_id": ..., "observables": [...]},
         "options": [{"index": 0, "category": ..., "attributes": [...]}, ...],
         "outside_index": K}

    Response body: ``{"choice": int}``. Failed calls are retried up to
    ``max_retries`` times, then ``ProviderUnavailable`` is raised.
    """

    name = "external"

    def __init__(self, endpoint: str, transport: Transport | None = None, max_retries: int = 3):
        self.endpoint = endpoint
        self.transport = transport or _http_json_transport
        self.max_retries = max_retries

    @staticmethod
    def request_payload(persona: Persona, task: ChoiceTask) -> dict[str, Any]:
        cats = task.categories or (None,) * task.n_options
        return {
            "persona": {"persona_id": persona.persona_id, "observables": list(persona.observables)},
            "options": [
                {"index": i, "category": None if c is None else DEFAULT_CATEGORIES[c], "attributes": row.tolist()}
                for i, (row, c) in enumerate(zip(task.options, cats))
            ],
            "outside_index": task.n_options if task.has_outside else None,
        }

    def choose(self, persona: Persona, task: ChoiceTask, rng: np.random.Generator | None = None) -> int:
        payload = self.request_payload(persona, task)
        last: Exception | None = None
        for attempt in range(1, self.max_retries + 1):
            try:
                resp = self.transport(self.endpoint, payload)
                choice = int(resp["choice"])
            except (OSError, urllib.error.URLError, KeyError, TypeError, ValueError) as exc:
                last = exc
                log.warning("provider %s attempt %d failed: %s", self.endpoint, attempt, exc)
                continue
            upper = task.n_options + (1 if task.has_outside else 0)
            if not 0 <= choice < upper:
                last = ValueError(f"choice {choice} out of range 0..{upper - 1}")
                continue
            return choice
        raise ProviderUnavailable(f"provider {self.endpoint} failed after {self.max_retries} attempts: {last}")


def make_provider(spec: str, distortion: DistortionSpec | None = None, **kwargs) -> ChoiceProvider:
    """Provider from a CLI-style spec: ``oracle``, ``distorted`` or ``external:<endpoint>``."""
    if spec == "oracle":
        return GroundTruthHuman()
    if spec == "distorted":
        return DistortedAgent(distortion or DistortionSpec(), **kwargs)
    if spec.startswith("external:"):
        return ExternalProvider(spec.split(":", 1)[1])
    raise ValueError(f"unknown provider {spec!r}")


def _gumbel_choice(utilities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Exact logit draws along the last axis via the Gumbel-max trick (-inf marks absent options)."""
    g = rng.gumbel(size=utilities.shape)
    return np.argmax(utilities + g, axis=-1)


# ---------------------------------------------------------------------------
# Conjoint study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConjointConfig:
    n_primary: int = 100
    n_aux: int = 1000
    tasks_per_customer: int = 10
    n_attributes: int = 6
    n_options: int = 4
    beta_mean: tuple[float, ...] = (1.0, -1.2, 0.8, -0.7, 1.4, -0.9)
    heterogeneity: float = 1.0
    preference_scale: float = 2.0
    distortion: DistortionSpec = field(default_factory=DistortionSpec)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_primary < 1 or self.tasks_per_customer < 1:
            raise DomainError("need at least one primary customer and one task per customer")
        if self.n_aux <= self.n_primary:
            raise DomainError(f"auxiliary set ({self.n_aux}) must be larger than primary set ({self.n_primary})")
        if len(self.beta_mean) != self.n_attributes:
            raise DomainError(f"beta_mean has {len(self.beta_mean)} entries for {self.n_attributes} attributes")
        if self.n_options < 2:
            raise DomainError("conjoint tasks need at least two options")


@dataclass(frozen=True)
class ConjointDataset:
    """Primary rows carry human (y) and agent (z) labels; auxiliary rows carry z only.

    ``y_aux_hidden`` holds the auxiliary humans' true choices and is meant
    for evaluation only. Labels index options 0..K-1, with K the outside option.
    """

    X_primary: np.ndarray
    y_primary: np.ndarray
    z_primary: np.ndarray
    customer_primary: np.ndarray
    X_aux: np.ndarray
    z_aux: np.ndarray
    customer_aux: np.ndarray
    y_aux_hidden: np.ndarray
    beta_population: np.ndarray

    @property
    def n_options(self) -> int:
        return self.X_primary.shape[1]

    @property
    def n_attributes(self) -> int:
        return self.X_primary.shape[2]

    def rows(self, part: str = "primary") -> list[dict[str, Any]]:
        if part == "primary":
            return [{"options": x, "y": int(y), "z": int(z)} for x, y, z in zip(self.X_primary, self.y_primary, self.z_primary)]
        return [{"options": x, "z": int(z)} for x, z in zip(self.X_aux, self.z_aux)]


def make_conjoint_dataset(config: ConjointConfig) -> ConjointDataset:
    """Draw customers, tasks, human choices and agent choices for a conjoint study.

    Customers have logit weights ``beta_mean + heterogeneity * eps`` scaled by
    ``preference_scale``; the agent answers each task independently of the
    human under the distorted version of the same customer's weights.
    """
    c = config
    rng = seeding.stream(c.seed, "conjoint")
    n_cust = c.n_primary + c.n_aux
    q, k, t = c.n_attributes, c.n_options, c.tasks_per_customer
    beta = np.asarray(c.beta_mean, dtype=np.float64)
    W = c.preference_scale * (beta + c.heterogeneity * rng.standard_normal((n_cust, q)))
    X = rng.standard_normal((n_cust, t, k, q))
    agent_W = c.distortion.apply(W)

    def sample(weights: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        u = np.einsum("ctkq,cq->ctk", X, weights)
        u = np.concatenate([u, np.zeros((n_cust, t, 1))], axis=-1)
        return _gumbel_choice(u, gen)

    y = sample(W, seeding.stream(c.seed, "conjoint", "human"))
    z = sample(agent_W, seeding.stream(c.seed, "conjoint", "agent"))
    cust = np.repeat(np.arange(n_cust), t).reshape(n_cust, t)
    prim = slice(0, c.n_primary)
    aux = slice(c.n_primary, n_cust)
    flat = lambda a: a.reshape((-1,) + a.shape[2:])  # noqa: E731
    return ConjointDataset(
        X_primary=flat(X[prim]), y_primary=flat(y[prim]), z_primary=flat(z[prim]), customer_primary=flat(cust[prim]),
        X_aux=flat(X[aux]), z_aux=flat(z[aux]), customer_aux=flat(cust[aux]), y_aux_hidden=flat(y[aux]),
        beta_population=c.preference_scale * beta,
    )


# ---------------------------------------------------------------------------
# Regional experiment: population, orders, menus
# ---------------------------------------------------------------------------

# option attribute layout for regional menus
REGIONAL_ATTRIBUTES = (
    "asc_sameday", "asc_nextday", "asc_standard", "asc_fst",
    "delivery_days", "fee", "treat_sameday", "treat_nextday",
)
N_REGIONAL_ATTRIBUTES = len(REGIONAL_ATTRIBUTES)
# inside categories; NoPurchase is the implicit outside option
INSIDE_CATEGORIES = 4
SAMEDAY, NEXTDAY, STANDARD, FST, NOPURCHASE = range(5)

# observables: age band, gender, income band, education level
OBSERVABLE_LEVELS = (6, 2, 5, 4)
OBSERVABLE_NAMES = ("age_band", "gender", "income_band", "education")

# strata order: (treatment, ssd) = (T, SSD), (T, no SSD), (C, SSD), (C, no SSD)
STRATA = ((True, True), (True, False), (False, True), (False, False))
DEFAULT_STRATA_COUNTS = (229, 220, 245, 212)


@dataclass(frozen=True)
class PopulationConfig:
    n_regions: int = 906
    personas_per_region: int = 16
    strata_counts: tuple[int, ...] = DEFAULT_STRATA_COUNTS
    base_weights: tuple[float, ...] = (1.2, 2.0, 1.9, 2.6, -0.30, -0.45, -0.14, 0.03)
    # rows: attributes, columns: standardized (age, gender, income, education)
    observable_loadings: tuple[tuple[float, ...], ...] = (
        (-0.40, 0.00, 0.60, 0.20),
        (-0.10, 0.10, 0.30, 0.10),
        (0.20, 0.00, -0.20, 0.00),
        (0.30, 0.00, -0.40, -0.10),
        (0.00, 0.00, 0.00, -0.05),
        (-0.05, 0.00, 0.15, 0.00),
        (-0.06, 0.00, 0.06, 0.00),
        (0.00, 0.00, 0.01, 0.00),
    )
    idiosyncratic_sd: tuple[float, ...] = (0.3, 0.3, 0.3, 0.3, 0.05, 0.05, 0.03, 0.02)
    heterogeneity: float = 1.0
    region_spread: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_regions < 4:
            raise DomainError("need at least 4 regions for Treatment x SSD stratification")
        if len(self.strata_counts) != 4 or any(v < 0 for v in self.strata_counts) or sum(self.strata_counts) == 0:
            raise DomainError(f"invalid strata proportions {self.strata_counts}")
        if self.personas_per_region < 1:
            raise DomainError("personas_per_region must be >= 1")
        if self.heterogeneity < 0:
            raise DomainError("heterogeneity must be >= 0")


@dataclass(frozen=True)
class Population:
    personas: tuple[Persona, ...]
    regions: tuple[Region, ...]
    # persona row ranges per region, in region order
    persona_offsets: np.ndarray

    @property
    def latent(self) -> np.ndarray:
        return np.stack([p.latent_weights for p in self.personas])

    @property
    def observables(self) -> np.ndarray:
        return np.array([p.observables for p in self.personas], dtype=np.int64)

    def region_slice(self, i: int) -> slice:
        return slice(int(self.persona_offsets[i]), int(self.persona_offsets[i + 1]))

    def persona_index(self) -> dict[str, int]:
        return {p.persona_id: i for i, p in enumerate(self.personas)}


def allocate_strata(n_regions: int, counts: Sequence[int]) -> list[int]:
    """Largest-remainder allocation of n_regions to strata in proportion to counts."""
    counts = np.asarray(counts, dtype=np.float64)
    raw = n_regions * counts / counts.sum()
    alloc = np.floor(raw).astype(int)
    short = n_regions - alloc.sum()
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - alloc[i]), i))
    for i in order[:short]:
        alloc[i] += 1
    return alloc.tolist()


def standardize_observables(obs: np.ndarray) -> np.ndarray:
    """Map observable codes to roughly unit-scale centred values using the nominal level counts."""
    levels = np.asarray(OBSERVABLE_LEVELS, dtype=np.float64)
    centre = (levels - 1) / 2
    scale = np.sqrt((levels**2 - 1) / 12)
    return (np.asarray(obs, dtype=np.float64) - centre) / scale


def sample_population(config: PopulationConfig) -> Population:
    """Draw regions (with Treatment x SSD strata) and region-specific persona sets.

    Each region has its own demographic mix; a persona's latent weights are
    the base weights plus ``heterogeneity`` times an observable-driven and an
    idiosyncratic deviation.
    """
    c = config
    alloc = allocate_strata(c.n_regions, c.strata_counts)
    strata = [s for s, n in zip(STRATA, alloc) for _ in range(n)]
    order = seeding.stream(c.seed, "population", "strata").permutation(c.n_regions)
    strata = [strata[i] for i in order]
    base = np.asarray(c.base_weights, dtype=np.float64)
    load = np.asarray(c.observable_loadings, dtype=np.float64)
    idio = np.asarray(c.idiosyncratic_sd, dtype=np.float64)
    if base.size != N_REGIONAL_ATTRIBUTES or load.shape != (N_REGIONAL_ATTRIBUTES, 4) or idio.size != N_REGIONAL_ATTRIBUTES:
        raise DomainError("regional weight configuration has the wrong shape")
    personas: list[Persona] = []
    regions: list[Region] = []
    offsets = [0]
    m = c.personas_per_region
    for r, (treat, ssd) in enumerate(strata):
        rid = f"Z{r:03d}"
        rng = seeding.stream(c.seed, "population", r)
        tilt = c.region_spread * rng.standard_normal(4)
        obs = np.empty((m, 4), dtype=np.int64)
        for j, levels in enumerate(OBSERVABLE_LEVELS):
            logits = tilt[j] * (np.arange(levels) - (levels - 1) / 2) / max(levels - 1, 1) * 2
            p = np.exp(logits - logits.max())
            obs[:, j] = rng.choice(levels, size=m, p=p / p.sum())
        dev = standardize_observables(obs) @ load.T + rng.standard_normal((m, N_REGIONAL_ATTRIBUTES)) * idio
        W = base + c.heterogeneity * dev
        pids = []
        for i in range(m):
            pid = f"{rid}-P{i:02d}"
            pids.append(pid)
            personas.append(Persona(W[i], tuple(obs[i]), pid, rid))
        regions.append(Region(rid, treat, ssd, tuple(pids)))
        offsets.append(offsets[-1] + m)
    return Population(tuple(personas), tuple(regions), np.asarray(offsets))


@dataclass(frozen=True)
class OrderPool:
    order_ids: tuple[str, ...]
    basket: np.ndarray
    fst_days: np.ndarray
    embedding: np.ndarray

    def __len__(self) -> int:
        return len(self.order_ids)


def order_embedding(order_id: str, dim: int = 8) -> np.ndarray:
    """Pseudo product embedding, a pure function of the order id."""
    return seeding.stream(0, "embedding", order_id).standard_normal(dim)


def make_order_pool(
    n_orders: int = 3806,
    seed: int = 0,
    fst_days_levels: Sequence[int] = (4, 5, 6, 7),
    fst_days_probs: Sequence[float] = (0.2, 0.35, 0.3, 0.15),
    embedding_dim: int = 8,
) -> OrderPool:
    if n_orders < 1:
        raise DomainError("order pool must be nonempty")
    rng = seeding.stream(seed, "orders")
    ids = tuple(f"O{i:05d}" for i in range(n_orders))
    basket = np.round(np.exp(rng.normal(math.log(32.0), 0.6, n_orders)), 2)
    fst = rng.choice(np.asarray(fst_days_levels), size=n_orders, p=np.asarray(fst_days_probs))
    emb = np.stack([order_embedding(o, embedding_dim) for o in ids])
    return OrderPool(ids, basket, fst.astype(np.float64), emb)


@dataclass(frozen=True)
class MenuRules:
    fst_threshold: float = 35.0
    expedited_probs_ssd: tuple[float, float, float] = (0.5, 0.3, 0.2)  # same, next, second day
    expedited_probs_no_ssd: tuple[float, float] = (0.6, 0.4)  # next, second day
    sameday_fee: float = 2.99
    nextday_fee: float = 0.99
    secondday_fee: float = 0.0
    standard_fee_below_threshold: float = 5.99
    standard_fee_above_threshold: float = 0.0


@dataclass(frozen=True)
class RegionalTaskSet:
    """Delivery menus for every (region, order slot), in category-slot layout.

    ``options[r, o, k]`` is the attribute row of the category-k option for
    region r's o-th order in the pre period (no treatment features);
    ``available[r, o, k]`` says whether that category is on the menu.
    """

    region_ids: tuple[str, ...]
    order_index: np.ndarray  # (R, n_z) index into the pool
    options: np.ndarray  # (R, n_z, 4, q)
    available: np.ndarray  # (R, n_z, 4)
    treatment: np.ndarray  # (R,)
    ssd: np.ndarray  # (R,)
    pool: OrderPool

    @property
    def n_z(self) -> int:
        return self.order_index.shape[1]

    def period_options(self, period: int) -> np.ndarray:
        """Attribute rows with treatment features switched on for treatment regions post-launch."""
        if period == 0:
            return self.options
        opts = self.options.copy()
        t = self.treatment[:, None]
        opts[:, :, SAMEDAY, 6] = np.where(t & self.available[:, :, SAMEDAY], 1.0, 0.0)
        opts[:, :, NEXTDAY, 7] = np.where(t & self.available[:, :, NEXTDAY], 1.0, 0.0)
        return opts

    def tasks(self, region: int, period: int) -> list[ChoiceTask]:
        opts = self.period_options(period)[region]
        out = []
        for o in range(self.n_z):
            cats = [k for k in range(INSIDE_CATEGORIES) if self.available[region, o, k]]
            out.append(ChoiceTask(
                opts[o, cats], True,
                f"{self.region_ids[region]}:{self.pool.order_ids[self.order_index[region, o]]}:{period}",
                tuple(cats),
            ))
        return out

    def as_tasks(self) -> dict[str, list[ChoiceTask]]:
        return {rid: self.tasks(r, 0) + self.tasks(r, 1) for r, rid in enumerate(self.region_ids)}

    def order_features(self, period: int) -> np.ndarray:
        """Per (region, slot) numeric order features for triplet encoding, shape (R, n_z, F)."""
        opts = self.period_options(period)
        idx = self.order_index
        avail = self.available.astype(np.float64)
        days = np.where(self.available, opts[..., 4], 0.0)
        fees = np.where(self.available, opts[..., 5], 0.0)
        feats = [
            np.log(self.pool.basket[idx])[..., None],
            avail,
            days,
            fees,
            opts[:, :, SAMEDAY, 6:7],
            opts[:, :, NEXTDAY, 7:8],
            self.pool.embedding[idx],
        ]
        return np.concatenate(feats, axis=-1)


ORDER_FEATURE_NAMES = (
    ("log_basket",)
    + tuple(f"avail_{c}" for c in DEFAULT_CATEGORIES[:4])
    + tuple(f"days_{c}" for c in DEFAULT_CATEGORIES[:4])
    + tuple(f"fee_{c}" for c in DEFAULT_CATEGORIES[:4])
    + ("treat_sameday", "treat_nextday")
)


def build_regional_tasks(
    regions: Sequence[Region],
    pool: OrderPool,
    n_z: int = 42,
    seed: int = 0,
    rules: MenuRules = MenuRules(),
) -> RegionalTaskSet:
    """Sample n_z orders per region and build each order's delivery menu.

    FST is offered iff the basket exceeds the threshold; the standard option
    is strictly faster than the FST time and slower than the expedited one;
    exactly one expedited option is drawn, same-day only where SSD launched;
    the give-up option is the implicit outside alternative.
    """
    if len(pool) == 0:
        raise DomainError("empty order pool")
    if n_z < 1:
        raise DomainError("n_z must be >= 1")
    if n_z > len(pool):
        raise DomainError(f"n_z={n_z} exceeds pool size {len(pool)}")
    R = len(regions)
    q = N_REGIONAL_ATTRIBUTES
    order_index = np.empty((R, n_z), dtype=np.int64)
    options = np.zeros((R, n_z, INSIDE_CATEGORIES, q))
    available = np.zeros((R, n_z, INSIDE_CATEGORIES), dtype=bool)
    for r, region in enumerate(regions):
        rng = seeding.stream(seed, "tasks", region.region_id)
        idx = rng.choice(len(pool), size=n_z, replace=False)
        order_index[r] = idx
        basket = pool.basket[idx]
        fst_days = pool.fst_days[idx]
        if region.ssd_launched:
            exp_cat = rng.choice(3, size=n_z, p=rules.expedited_probs_ssd)  # 0 same, 1 next, 2 second
        else:
            exp_cat = 1 + rng.choice(2, size=n_z, p=rules.expedited_probs_no_ssd)
        exp_days = np.choose(exp_cat, [0.5, 1.0, 2.0])
        exp_fee = np.choose(exp_cat, [rules.sameday_fee, rules.nextday_fee, rules.secondday_fee])
        # standard: strictly inside (expedited days, fst days)
        lo = np.floor(exp_days) + 1
        hi = fst_days - 1
        std_days = lo + np.floor(rng.random(n_z) * (hi - lo + 1))
        has_fst = basket > rules.fst_threshold
        std_fee = np.where(has_fst, rules.standard_fee_above_threshold, rules.standard_fee_below_threshold)
        same = exp_cat == 0
        options[r, same, SAMEDAY, 0] = 1.0
        options[r, same, SAMEDAY, 4] = exp_days[same]
        options[r, same, SAMEDAY, 5] = exp_fee[same]
        available[r, same, SAMEDAY] = True
        nd = ~same
        options[r, nd, NEXTDAY, 1] = 1.0
        options[r, nd, NEXTDAY, 4] = exp_days[nd]
        options[r, nd, NEXTDAY, 5] = exp_fee[nd]
        available[r, nd, NEXTDAY] = True
        options[r, :, STANDARD, 2] = 1.0
        options[r, :, STANDARD, 4] = std_days
        options[r, :, STANDARD, 5] = std_fee
        available[r, :, STANDARD] = True
        options[r, has_fst, FST, 3] = 1.0
        options[r, has_fst, FST, 4] = fst_days[has_fst]
        available[r, has_fst, FST] = True
    return RegionalTaskSet(
        tuple(r.region_id for r in regions), order_index, options, available,
        np.array([r.treatment for r in regions]), np.array([r.ssd_launched for r in regions]), pool,
    )


def _region_utilities(weights: np.ndarray, opts: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """Utilities (n_z, m, 5) over category slots with outside last; absent options -> -inf."""
    u = np.einsum("okq,pq->opk", opts, weights)
    u = np.where(avail[:, None, :], u, -np.inf)
    return np.concatenate([u, np.zeros(u.shape[:2] + (1,))], axis=-1)


def region_choice_probs(weights: np.ndarray, opts: np.ndarray, avail: np.ndarray) -> np.ndarray:
    u = _region_utilities(weights, opts, avail)
    e = np.exp(u - u.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def simulate_choices(
    provider: ChoiceProvider,
    tasks: RegionalTaskSet,
    population: Population,
    seed: int,
    common_shocks: bool = True,
) -> TripletTable:
    """One triplet per (period, order, persona) in every region.

    Logit providers are simulated with the Gumbel-max trick; with
    ``common_shocks`` the same taste shocks are reused for a given
    (order, persona) in both periods. Other providers are queried per triplet.
    """
    if len(tasks.region_ids) != len(population.regions):
        raise DomainError("task set and population cover different regions")
    latent = population.latent
    if isinstance(provider, DistortedAgent) and provider.population_mean is None:
        provider = DistortedAgent(provider.distortion, latent.mean(axis=0))
    cols: list[list[np.ndarray]] = [[], [], [], [], []]
    k = INSIDE_CATEGORIES + 1
    for r, region in enumerate(population.regions):
        sl = population.region_slice(r)
        m = sl.stop - sl.start
        rng = seeding.stream(seed, "choices", region.region_id)
        shocks = rng.gumbel(size=(tasks.n_z, m, k)) if common_shocks else None
        for period in (0, 1):
            opts = tasks.period_options(period)[r]
            if isinstance(provider, LogitProvider):
                W = provider.decision_weights(latent[sl])
                u = _region_utilities(W, opts, tasks.available[r])
                g = shocks if common_shocks else rng.gumbel(size=u.shape)
                choice = np.argmax(u + g, axis=-1)
            else:
                choice = np.empty((tasks.n_z, m), dtype=np.int64)
                region_tasks = tasks.tasks(r, period)
                for o, task in enumerate(region_tasks):
                    for p in range(m):
                        idx = provider.choose(population.personas[sl.start + p], task, rng)
                        choice[o, p] = task.categories[idx] if idx < task.n_options else k - 1
            oo, pp = np.meshgrid(np.arange(tasks.n_z), np.arange(m), indexing="ij")
            cols[0].append(np.full(oo.size, r))
            cols[1].append(tasks.order_index[r][oo.ravel()])
            cols[2].append(sl.start + pp.ravel())
            cols[3].append(np.full(oo.size, period))
            cols[4].append(choice.ravel())
    return TripletTable(
        *(np.concatenate(c) for c in cols),
        region_ids=tasks.region_ids,
        order_ids=tasks.pool.order_ids,
        persona_ids=tuple(p.persona_id for p in population.personas),
        treatment=tasks.treatment,
        n_categories=k,
    )


# ---------------------------------------------------------------------------
# Human community shares
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CommunityWeights:
    """Known persona mixture: theta_p proportional to exp(coef . standardized observables)."""

    coef: tuple[float, ...] = (-0.8, 0.0, 0.9, 0.3)

    def __call__(self, observables: np.ndarray) -> np.ndarray:
        s = standardize_observables(observables) @ np.asarray(self.coef)
        e = np.exp(s - s.max())
        return e / e.sum()


def expected_human_shares(
    population: Population,
    tasks: RegionalTaskSet,
    community: CommunityWeights = CommunityWeights(),
    persona_counts: np.ndarray | None = None,
) -> np.ndarray:
    """Noise-free human shares, shape (R, 2 periods, 5 categories).

    A region's community share is the theta-weighted mixture of member
    personas' logit probabilities, averaged over the region's orders.
    ``persona_counts`` optionally reweights personas by a multiplicity.
    """
    latent = population.latent
    obs = population.observables
    out = np.empty((len(population.regions), 2, INSIDE_CATEGORIES + 1))
    for r in range(len(population.regions)):
        sl = population.region_slice(r)
        theta = community(obs[sl])
        if persona_counts is not None:
            theta = theta * persona_counts[sl]
            theta = theta / theta.sum()
        for period in (0, 1):
            probs = region_choice_probs(latent[sl], tasks.period_options(period)[r], tasks.available[r])
            out[r, period] = np.einsum("p,opk->k", theta, probs) / tasks.n_z
    return out


def observe_human_shares(
    expected: np.ndarray, days: int, customers_per_day: int, seed: int
) -> np.ndarray:
    """Observed shares from ``days`` days of ``customers_per_day`` multinomial draws per region-period."""
    if days < 1 or customers_per_day < 1:
        raise DomainError("need at least one day and one customer")
    out = np.empty_like(expected)
    for r in range(expected.shape[0]):
        for t in range(expected.shape[1]):
            counts = np.zeros(expected.shape[2])
            p = expected[r, t] / expected[r, t].sum()
            for d in range(days):
                counts += seeding.stream(seed, "human", r, t, d).multinomial(customers_per_day, p)
            out[r, t] = counts / counts.sum()
    return out


def triplet_slots(table: TripletTable, tasks: RegionalTaskSet) -> np.ndarray:
    """Order slot (0..n_z-1) of each triplet within its region's task set."""
    n_pool = len(tasks.pool)
    R, n_z = tasks.order_index.shape
    keys = (np.arange(R)[:, None] * n_pool + tasks.order_index).ravel()
    order = np.argsort(keys, kind="stable")
    want = table.region * n_pool + table.order
    pos = np.searchsorted(keys[order], want)
    if np.any(pos >= keys.size) or np.any(keys[order][np.minimum(pos, keys.size - 1)] != want):
        raise DomainError("triplet refers to an order outside its region's task set")
    return order[pos] % n_z


def triplet_days(table: TripletTable, tasks: RegionalTaskSet) -> np.ndarray:
    """Simulated day (0..n_z-1) of each triplet.

    On day d the j-th persona of a region places the order in slot
    (d + j) mod n_z, so a day holds one order per persona and spans several
    menus; over n_z days every persona sees every slot once.
    """
    first = np.full(len(table.region_ids), np.iinfo(np.int64).max)
    np.minimum.at(first, table.region, table.persona)
    rank = table.persona - first[table.region]
    return (triplet_slots(table, tasks) - rank) % tasks.n_z


def community_theta(population: Population, community: CommunityWeights = CommunityWeights()) -> np.ndarray:
    """Mixture weight of every persona within its own region (sums to 1 per region)."""
    obs = population.observables
    return np.concatenate([community(obs[population.region_slice(r)]) for r in range(len(population.regions))])


def realized_human_shares(
    choices: TripletTable,
    tasks: RegionalTaskSet,
    theta: np.ndarray,
    days: int | None = None,
) -> np.ndarray:
    """Community shares built from realized persona choices, shape (R, 2, K).

    A region-period share is the theta-weighted average of the personas'
    choices over the first ``days`` simulated days (all by default); see
    ``triplet_days``.
    """
    R = len(tasks.region_ids)
    n_z = tasks.n_z
    if days is not None and not 1 <= days <= n_z:
        raise DomainError(f"days must be in 1..{n_z}, got {days}")
    w = np.asarray(theta, dtype=np.float64)[choices.persona]
    if days is not None and days < n_z:
        w = w * (triplet_days(choices, tasks) < days)
    k = choices.n_categories
    flat = (choices.region * 2 + choices.period) * k + choices.choice
    out = np.bincount(flat, weights=w, minlength=R * 2 * k).reshape(R, 2, k)
    tot = out.sum(axis=2, keepdims=True)
    if np.any(tot <= 0):
        bad = np.argwhere(tot[..., 0] <= 0)[0]
        raise DomainError(f"no human observations for region {tasks.region_ids[bad[0]]} period {PERIODS[bad[1]]}")
    return out / tot
