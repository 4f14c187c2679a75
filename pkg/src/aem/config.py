"""Run configuration: strict schema, TOML loading and a stable hash."""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DistortionParams(_Strict):
    scale: float = Field(1.0, gt=0)
    shift: Optional[list[float]] = None
    heterogeneity_shrink: float = Field(0.0, ge=0, le=1)


class ConjointParams(_Strict):
    n_primary: int = Field(100, ge=1)
    n_aux: int = Field(1000, ge=2)
    tasks_per_customer: int = Field(10, ge=1)
    n_attributes: int = Field(6, ge=1)
    n_options: int = Field(4, ge=2)
    beta_mean: list[float] = [1.0, -1.2, 0.8, -0.7, 1.4, -0.9]
    heterogeneity: float = Field(1.0, ge=0)
    preference_scale: float = Field(2.0, gt=0)
    distortion: DistortionParams = DistortionParams(scale=0.5, shift=[0.6, 0.6, 0.6, 0.6, 0.6, 0.6], heterogeneity_shrink=0.8)
    lam: float = Field(1e-4, ge=0)
    tol: float = Field(1e-8, gt=0)
    max_iter: int = Field(5000, ge=1)
    interactions: bool = False

    @model_validator(mode="after")
    def _sizes(self) -> "ConjointParams":
        if self.n_aux <= self.n_primary:
            raise ValueError("n_aux must exceed n_primary")
        if len(self.beta_mean) != self.n_attributes:
            raise ValueError("beta_mean length must equal n_attributes")
        return self


class RegionalParams(_Strict):
    n_regions: int = Field(906, ge=4)
    strata_counts: list[int] = [229, 220, 245, 212]
    personas_per_region: int = Field(16, ge=1)
    n_z: int = Field(42, ge=1)
    n_orders: int = Field(3806, ge=1)
    heterogeneity: float = Field(1.0, ge=0)
    # latent attribute weights shared by all personas before heterogeneity; None keeps the defaults
    base_weights: Optional[list[float]] = None
    community_coef: list[float] = [-0.8, 0.0, 0.9, 0.3]
    provider: str = "distorted"
    distortion: DistortionParams = DistortionParams()
    # oracle mode: community shares are theta-weighted averages of the agent's own draws
    shared_draws: bool = True
    common_shocks: bool = True
    # number of leading order slots ("days") with human data; None means all
    human_days: Optional[int] = Field(None, ge=1)
    outcome_category: int = Field(0, ge=0, le=4)
    ssd_only: bool = True

    @field_validator("provider")
    @classmethod
    def _provider(cls, v: str) -> str:
        if v not in ("oracle", "distorted") and not v.startswith("external:"):
            raise ValueError("provider must be oracle, distorted or external:<endpoint>")
        return v

    @model_validator(mode="after")
    def _days(self) -> "RegionalParams":
        if self.base_weights is not None and len(self.base_weights) != 8:
            raise ValueError("base_weights needs one entry per regional attribute (8)")
        if self.human_days is not None and self.human_days > self.n_z:
            raise ValueError("human_days cannot exceed n_z")
        return self


class CorrectorParams(_Strict):
    kinds: list[Literal["mixture", "integrated"]] = ["mixture", "integrated"]
    lr: float = Field(1e-5, ge=0)
    epochs: int = Field(500, ge=0)
    patience: int = Field(20, ge=1)


class SplitParams(_Strict):
    train_fraction: float = Field(1 / 7, gt=0, lt=1)
    val_fraction: float = Field(1 / 14, gt=0, lt=1)
    r: float = Field(0.1, gt=0, lt=1)
    val_region_fraction: float = Field(1 / 7, gt=0, lt=1)

    @model_validator(mode="after")
    def _sum(self) -> "SplitParams":
        if self.train_fraction + self.val_fraction >= 1:
            raise ValueError("train_fraction + val_fraction must be < 1")
        return self


class BootstrapParams(_Strict):
    replications: int = Field(20, ge=2)
    resample: Literal["personas", "personas+regions"] = "personas+regions"
    confidence: float = Field(0.95, gt=0, lt=1)
    regenerate: bool = False
    redraw_id: bool = False


class RunConfig(_Strict):
    scenario: Literal["conjoint", "regional-timewise", "regional-regionwise"] = "regional-regionwise"
    seed: int = 0
    output_dir: str = "runs"
    conjoint: ConjointParams = ConjointParams()
    regional: RegionalParams = RegionalParams()
    corrector: CorrectorParams = CorrectorParams()
    split: SplitParams = SplitParams()
    bootstrap: BootstrapParams = BootstrapParams()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Digest of everything that affects results; the output location is excluded."""
        data = self.model_dump(mode="json", exclude={"output_dir"})
        text = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def updated(self, **changes) -> "RunConfig":
        """Copy with top-level or dotted (``"regional.n_z"``) fields replaced, revalidated."""
        data = self.model_dump(mode="json")
        for key, value in changes.items():
            node = data
            *path, leaf = key.replace("__", ".").split(".")
            for p in path:
                node = node[p]
            node[leaf] = value
        return RunConfig.model_validate(data)


def load_config(path: str | Path) -> RunConfig:
    """Read a TOML or JSON config file; unknown keys are rejected."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    return RunConfig.model_validate(data)
