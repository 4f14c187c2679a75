"""Core data types shared by the generation, correction and inference stages.

All types are frozen dataclasses. Array fields are copied to float64 and
marked read-only on construction, so instances can be shared freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

SUM_TOL = 1e-9

DEFAULT_CATEGORIES: tuple[str, ...] = (
    "SameDay",
    "NextOrSecondDay",
    "Standard",
    "FST",
    "NoPurchase",
)

PERIODS = ("pre", "post")
ARMS = ("treatment", "control")


class DomainError(ValueError):
    """Raised when a domain object violates one of its invariants."""


def _frozen_array(values: Any, ndim: int | None = None, name: str = "array") -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise DomainError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def is_probability_vector(p: np.ndarray, tol: float = SUM_TOL) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(p.ndim == 1 and np.all(np.isfinite(p)) and np.all(p >= 0) and abs(p.sum() - 1.0) <= tol)


@dataclass(frozen=True)
class ChoiceTask:
    """One decision instance: K inside options with q attributes each.

    ``categories`` optionally maps each option row to a delivery category
    index (regional menus); conjoint tasks leave it unset. The outside
    alternative is implicit with utility 0.
    """

    options: np.ndarray
    has_outside: bool = True
    task_id: str = ""
    categories: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        opts = _frozen_array(self.options, ndim=2, name="options")
        if opts.shape[0] < 2:
            raise DomainError(f"task {self.task_id!r}: need at least 2 options, got {opts.shape[0]}")
        if not np.all(np.isfinite(opts)):
            raise DomainError(f"task {self.task_id!r}: non-finite attribute values")
        object.__setattr__(self, "options", opts)
        if self.categories is not None:
            cats = tuple(int(c) for c in self.categories)
            if len(cats) != opts.shape[0]:
                raise DomainError(f"task {self.task_id!r}: categories length {len(cats)} != options {opts.shape[0]}")
            object.__setattr__(self, "categories", cats)

    @property
    def n_options(self) -> int:
        return self.options.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.options.shape[1]


@dataclass(frozen=True)
class ChoiceLabel:
    """Hard (index) or soft (distribution) response over K inside options plus outside.

    Index ``n_options`` (the last slot) denotes the outside alternative.
    """

    probs: np.ndarray
    index: int | None = None

    def __post_init__(self) -> None:
        p = _frozen_array(self.probs, ndim=1, name="probs")
        if not is_probability_vector(p):
            raise DomainError(f"label is not a probability vector (sum={p.sum():.12g})")
        object.__setattr__(self, "probs", p)
        if self.index is not None and not 0 <= self.index < p.size:
            raise DomainError(f"hard index {self.index} out of range 0..{p.size - 1}")

    @classmethod
    def hard(cls, index: int, n_options: int) -> "ChoiceLabel":
        if not 0 <= index <= n_options:
            raise DomainError(f"hard index {index} out of range 0..{n_options}")
        p = np.zeros(n_options + 1)
        p[index] = 1.0
        return cls(p, int(index))

    @classmethod
    def soft(cls, probs: Sequence[float]) -> "ChoiceLabel":
        return cls(np.asarray(probs, dtype=np.float64))

    @property
    def kind(self) -> str:
        return "hard" if self.index is not None else "soft"


@dataclass(frozen=True)
class Persona:
    latent_weights: np.ndarray
    observables: tuple[int, ...]
    persona_id: str
    region_id: str = ""

    def __post_init__(self) -> None:
        w = _frozen_array(self.latent_weights, ndim=1, name="latent_weights")
        if not np.all(np.isfinite(w)):
            raise DomainError(f"persona {self.persona_id}: non-finite latent weights")
        object.__setattr__(self, "latent_weights", w)
        object.__setattr__(self, "observables", tuple(int(v) for v in self.observables))


@dataclass(frozen=True)
class Region:
    region_id: str
    treatment: bool
    ssd_launched: bool
    persona_ids: tuple[str, ...]
    order_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.persona_ids:
            raise DomainError(f"region {self.region_id}: empty persona set")
        object.__setattr__(self, "persona_ids", tuple(self.persona_ids))
        object.__setattr__(self, "order_ids", tuple(self.order_ids))

    @property
    def arm(self) -> str:
        return "treatment" if self.treatment else "control"

    @property
    def stratum(self) -> tuple[bool, bool]:
        return (self.treatment, self.ssd_launched)


@dataclass(frozen=True)
class TripletRecord:
    order_id: str
    persona_id: str
    region_id: str
    choice: tuple[int, ...]
    period: str
    arm: str

    @property
    def choice_index(self) -> int:
        return self.choice.index(1)


@dataclass(frozen=True)
class ShareVector:
    shares: np.ndarray
    region_id: str
    arm: str
    period: str

    def __post_init__(self) -> None:
        s = _frozen_array(self.shares, ndim=1, name="shares")
        if not is_probability_vector(s):
            raise DomainError(
                f"region {self.region_id} ({self.period}): shares not normalized (sum={s.sum():.12g})"
            )
        object.__setattr__(self, "shares", s)

    @property
    def key(self) -> tuple[str, str]:
        return (self.region_id, self.period)


@dataclass(frozen=True)
class PartWorth:
    beta: np.ndarray
    converged: bool
    final_loss: float
    method: str = ""
    metadata: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        b = _frozen_array(self.beta, ndim=1, name="beta")
        if not np.all(np.isfinite(b)):
            raise DomainError("part-worth has non-finite entries")
        if not self.final_loss >= 0:
            raise DomainError(f"final_loss must be >= 0, got {self.final_loss}")
        object.__setattr__(self, "beta", b)


@dataclass(frozen=True)
class EffectEstimate:
    """DiD interaction coefficient. Values are kept in outcome units
    (fractions for shares); ``to_record`` converts to basis points."""

    beta3: float
    se: float
    p_value: float
    ci_low: float | None = None
    ci_high: float | None = None
    method: str = ""
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_value <= 1.0):
            raise DomainError(f"p-value {self.p_value} outside [0, 1]")
        if self.ci_low is not None and self.ci_high is not None:
            slack = 1e-12 * max(1.0, abs(self.beta3))
            if not (self.ci_low - slack <= self.beta3 <= self.ci_high + slack):
                raise DomainError(f"estimate {self.beta3} outside CI [{self.ci_low}, {self.ci_high}]")

    @property
    def beta3_bps(self) -> float:
        return self.beta3 * 1e4

    def to_record(self) -> dict[str, Any]:
        def bps(v: float | None) -> float | None:
            return None if v is None else v * 1e4

        return {
            "method": self.method,
            "beta3_bps": bps(self.beta3),
            "se_bps": bps(self.se),
            "p": self.p_value,
            "ci_low_bps": bps(self.ci_low),
            "ci_high_bps": bps(self.ci_high),
        }


# ---------------------------------------------------------------------------
# Columnar triplet storage.  A regional run has ~10^6 triplets, too many for
# one Python object each; TripletRecord is the row view.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TripletTable:
    region: np.ndarray  # int index into region_ids
    order: np.ndarray  # int index into order_ids
    persona: np.ndarray  # int index into persona_ids
    period: np.ndarray  # 0 = pre, 1 = post
    choice: np.ndarray  # category index
    region_ids: tuple[str, ...]
    order_ids: tuple[str, ...]
    persona_ids: tuple[str, ...]
    treatment: np.ndarray  # per region, bool
    n_categories: int = len(DEFAULT_CATEGORIES)

    def __post_init__(self) -> None:
        n = len(self.choice)
        for name in ("region", "order", "persona", "period", "choice"):
            arr = np.array(getattr(self, name), dtype=np.int64, copy=True)
            if arr.shape != (n,):
                raise DomainError(f"triplet column {name} has shape {arr.shape}, expected ({n},)")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        treat = np.array(self.treatment, dtype=bool, copy=True)
        treat.setflags(write=False)
        object.__setattr__(self, "treatment", treat)

    def __len__(self) -> int:
        return len(self.choice)

    def onehot(self) -> np.ndarray:
        out = np.zeros((len(self), self.n_categories))
        out[np.arange(len(self)), self.choice] = 1.0
        return out

    def subset(self, mask_or_index: np.ndarray) -> "TripletTable":
        idx = np.asarray(mask_or_index)
        return TripletTable(
            self.region[idx], self.order[idx], self.persona[idx], self.period[idx], self.choice[idx],
            self.region_ids, self.order_ids, self.persona_ids, self.treatment, self.n_categories,
        )

    def records(self) -> Iterator[TripletRecord]:
        k = self.n_categories
        for r, o, p, t, c in zip(self.region, self.order, self.persona, self.period, self.choice):
            onehot = [0] * k
            onehot[c] = 1
            yield TripletRecord(
                order_id=self.order_ids[o],
                persona_id=self.persona_ids[p],
                region_id=self.region_ids[r],
                choice=tuple(onehot),
                period=PERIODS[t],
                arm=ARMS[0] if self.treatment[r] else ARMS[1],
            )

    @classmethod
    def from_records(
        cls, records: Iterable[TripletRecord], n_categories: int = len(DEFAULT_CATEGORIES)
    ) -> "TripletTable":
        region_ix: dict[str, int] = {}
        order_ix: dict[str, int] = {}
        persona_ix: dict[str, int] = {}
        treat: dict[str, bool] = {}
        cols: list[list[int]] = [[], [], [], [], []]
        for rec in records:
            if sum(rec.choice) != 1 or len(rec.choice) != n_categories:
                raise DomainError(f"triplet {rec.order_id}/{rec.persona_id}: choice not one-hot")
            cols[0].append(region_ix.setdefault(rec.region_id, len(region_ix)))
            cols[1].append(order_ix.setdefault(rec.order_id, len(order_ix)))
            cols[2].append(persona_ix.setdefault(rec.persona_id, len(persona_ix)))
            cols[3].append(PERIODS.index(rec.period))
            cols[4].append(rec.choice_index)
            treat[rec.region_id] = rec.arm == "treatment"
        region_ids = tuple(region_ix)
        return cls(
            *(np.array(c, dtype=np.int64) for c in cols),
            region_ids=region_ids,
            order_ids=tuple(order_ix),
            persona_ids=tuple(persona_ix),
            treatment=np.array([treat[r] for r in region_ids], dtype=bool),
            n_categories=n_categories,
        )

    def unit_keys(self) -> np.ndarray:
        """Integer key region * 2 + period identifying each (region, period) unit."""
        return self.region * 2 + self.period


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSchema:
    kind: str  # "triplets" | "conjoint" | "shares"
    n_categories: int = len(DEFAULT_CATEGORIES)
    n_options: int | None = None
    n_attributes: int | None = None


@dataclass(frozen=True)
class Violation:
    row: int
    message: str

    def __str__(self) -> str:
        return f"row {self.row}: {self.message}"


def validate_dataset(records: Iterable[Any], schema: DatasetSchema) -> list[Violation]:
    """Check every record against the schema; an empty list means the dataset is valid.

    Records may be TripletRecords, ShareVector-like mappings, or conjoint rows
    given as mappings with keys ``options`` (K x q), ``y`` and ``z``. Values are
    inspected raw, so objects that would fail construction can still be reported.
    """
    out: list[Violation] = []
    for i, rec in enumerate(records):
        if schema.kind == "triplets":
            choice = list(_get(rec, "choice"))
            if len(choice) != schema.n_categories:
                out.append(Violation(i, f"choice length {len(choice)} != {schema.n_categories}"))
            elif sorted(choice) != [0] * (len(choice) - 1) + [1]:
                out.append(Violation(i, f"choice {tuple(choice)} not one-hot"))
            if _get(rec, "period") not in PERIODS:
                out.append(Violation(i, f"unknown period {_get(rec, 'period')!r}"))
            if _get(rec, "arm") not in ARMS:
                out.append(Violation(i, f"unknown arm {_get(rec, 'arm')!r}"))
        elif schema.kind == "shares":
            s = np.asarray(_get(rec, "shares"), dtype=np.float64)
            if s.shape != (schema.n_categories,):
                out.append(Violation(i, f"share length {s.size} != {schema.n_categories}"))
            elif np.any(s < 0) or not np.all(np.isfinite(s)):
                out.append(Violation(i, "negative or non-finite share"))
            elif abs(s.sum() - 1.0) > SUM_TOL:
                out.append(Violation(i, f"unnormalized shares (region {_get(rec, 'region_id')}, sum={s.sum():.12g})"))
        elif schema.kind == "conjoint":
            x = np.asarray(_get(rec, "options"), dtype=np.float64)
            k, q = schema.n_options, schema.n_attributes
            if x.ndim != 2 or (k is not None and x.shape[0] != k) or (q is not None and x.shape[1] != q):
                out.append(Violation(i, f"option matrix shape {x.shape} != ({k}, {q})"))
            elif not np.all(np.isfinite(x)):
                out.append(Violation(i, "non-finite attribute values"))
            n_opt = x.shape[0] if x.ndim == 2 else (k or 0)
            for name in ("y", "z"):
                lab = _get(rec, name, None)
                if lab is None:
                    continue
                if isinstance(lab, (int, np.integer)):
                    if not 0 <= int(lab) <= n_opt:
                        out.append(Violation(i, f"{name} index {lab} out of range 0..{n_opt}"))
                    continue
                p = np.asarray(lab, dtype=np.float64)
                if p.shape != (n_opt + 1,):
                    out.append(Violation(i, f"{name} soft label length {p.size} != {n_opt + 1}"))
                elif np.any(p < 0) or abs(p.sum() - 1.0) > SUM_TOL:
                    out.append(Violation(i, f"{name} soft label unnormalized (sum={p.sum():.12g})"))
        else:
            raise ValueError(f"unknown dataset kind {schema.kind!r}")
    return out


def _get(rec: Any, name: str, *default: Any) -> Any:
    if isinstance(rec, dict):
        return rec.get(name, *default) if default else rec[name]
    return getattr(rec, name, *default)

