"""Orchestration: splits, end-to-end runs and the pipeline-wide bootstrap."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy import stats

from . import conjoint as cj
from . import econometrics as ec
from . import generation as gen
from . import regional as rg
from . import seeding
from .config import RunConfig
from .domain import PERIODS, EffectEstimate, Region, TripletTable

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A stage failure, tagged with the stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class SplitError(ValueError):
    pass


class BootstrapError(RuntimeError):
    def __init__(self, message: str, failures: list[dict[str, Any]]):
        super().__init__(message)
        self.failures = failures


@dataclass(frozen=True)
class SplitPlan:
    kind: str = "timewise"
    train_fraction: float = 1 / 7
    val_fraction: float = 1 / 14
    r: float = 0.1
    val_region_fraction: float = 1 / 7
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("timewise", "regionwise"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        for name in ("train_fraction", "val_fraction", "r", "val_region_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.train_fraction + self.val_fraction >= 1:
            raise ValueError("train_fraction + val_fraction must be < 1")


@dataclass(frozen=True)
class BootstrapPlan:
    replications: int = 20
    resample_units: str = "personas+regions"
    confidence: float = 0.95
    regenerate: bool = False
    redraw_id: bool = False

    def __post_init__(self) -> None:
        if self.replications < 2:
            raise ValueError("bootstrap needs B >= 2")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if self.resample_units not in ("personas", "personas+regions"):
            raise ValueError(f"unknown resample_units {self.resample_units!r}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def split_timewise(table: TripletTable, plan: SplitPlan) -> dict[str, np.ndarray]:
    """Per-region random split of triplets into train / val / test index arrays.

    The pre and post copies of one (order, persona) pair always land in the
    same part, so each part sees matching pre and post menus. Part sizes are
    round-half-up fractions of the region's triplet count.
    """
    n = len(table)
    rng = seeding.stream(plan.seed, "split", "timewise")
    counts = np.bincount(table.region, minlength=len(table.region_ids))
    small = np.flatnonzero((counts > 0) & (counts < 14))
    if small.size:
        rid = table.region_ids[small[0]]
        raise SplitError(f"region {rid} has {counts[small[0]]} triplets; a time-wise split needs at least 14")
    pair = (table.region.astype(np.int64) * len(table.order_ids) + table.order) * len(table.persona_ids) + table.persona
    order = np.lexsort((pair, table.region))
    parts = {"train": [], "val": [], "test": []}
    bounds = np.flatnonzero(np.r_[True, np.diff(table.region[order]) != 0, True])
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = order[a:b]
        keys, inverse = np.unique(pair[idx], return_inverse=True)
        members = np.argsort(inverse, kind="stable")
        starts = np.r_[0, np.cumsum(np.bincount(inverse))]
        perm = rng.permutation(keys.size)
        # allocate in triplet units: groups are taken in random order until each target is met
        sizes = np.diff(starts)[perm]
        cum = np.cumsum(sizes)
        n_train = _round_half_up(idx.size * plan.train_fraction)
        n_val = _round_half_up(idx.size * plan.val_fraction)
        g_train = int(np.searchsorted(cum, n_train, side="left")) + 1 if n_train else 0
        g_val = int(np.searchsorted(cum, n_train + n_val, side="left")) + 1 if n_val else g_train
        cut = {"train": perm[:g_train], "val": perm[g_train:g_val], "test": perm[g_val:]}
        for name, groups in cut.items():
            if groups.size:
                parts[name].append(idx[np.concatenate([members[starts[g]:starts[g + 1]] for g in groups])])
    out = {k: np.sort(np.concatenate(v)) if v else np.empty(0, dtype=np.int64) for k, v in parts.items()}
    assert sum(v.size for v in out.values()) == n
    return out


def split_regionwise(regions: Sequence[Region], r: float, seed: int) -> dict[str, tuple[str, ...]]:
    """Stratified sample of in-distribution regions by (treatment, SSD) stratum.

    Each stratum contributes round-half-up(r * size) regions, at least 1 and
    at most the stratum size; the rest are out-of-distribution.
    """
    if not 0 < r < 1:
        raise SplitError(f"r must lie in (0, 1), got {r}")
    rng = seeding.stream(seed, "split", "regionwise")
    strata: dict[tuple[bool, bool], list[str]] = {s: [] for s in gen.STRATA}
    for reg in regions:
        strata[reg.stratum].append(reg.region_id)
    empty = [s for s, v in strata.items() if not v]
    if empty:
        raise SplitError(f"strata {empty} have no regions")
    if all(_round_half_up(r * len(v)) == 0 for v in strata.values()):
        raise SplitError(f"r={r} selects no region in any stratum")
    chosen: set[str] = set()
    for s in gen.STRATA:
        ids = strata[s]
        k = min(len(ids), max(1, _round_half_up(r * len(ids))))
        chosen.update(ids[i] for i in rng.choice(len(ids), size=k, replace=False))
    in_id = tuple(reg.region_id for reg in regions if reg.region_id in chosen)
    ood = tuple(reg.region_id for reg in regions if reg.region_id not in chosen)
    return {"Z_ID": in_id, "Z_OOD": ood}


# ---------------------------------------------------------------------------
# Regional world
# ---------------------------------------------------------------------------


@dataclass
class RegionalWorld:
    population: gen.Population
    tasks: gen.RegionalTaskSet
    agent: TripletTable
    human: TripletTable
    theta: np.ndarray
    human_shares: np.ndarray  # community shares from the days with human data
    full_shares: np.ndarray  # community shares over the whole experiment
    expected_shares: np.ndarray

    @property
    def arms(self) -> dict[str, str]:
        return {r.region_id: r.arm for r in self.population.regions}

    def target_regions(self, ids: Sequence[str] | None, ssd_only: bool) -> list[str]:
        keep = None if ids is None else set(ids)
        return [r.region_id for r in self.population.regions
                if (keep is None or r.region_id in keep) and (r.ssd_launched or not ssd_only)]


def _distortion(params) -> gen.DistortionSpec:
    return gen.DistortionSpec(params.scale, None if params.shift is None else tuple(params.shift),
                              params.heterogeneity_shrink)


def simulate_agent(cfg: RunConfig, population: gen.Population, tasks: gen.RegionalTaskSet, seed: int) -> TripletTable:
    p = cfg.regional
    provider = gen.make_provider(p.provider, _distortion(p.distortion))
    return gen.simulate_choices(provider, tasks, population, seed, common_shocks=p.common_shocks)


def build_design(cfg: RunConfig) -> tuple[gen.Population, gen.RegionalTaskSet]:
    """Population and menus of a regional scenario (no choices yet)."""
    p = cfg.regional
    s = cfg.seed
    pop = gen.sample_population(gen.PopulationConfig(
        n_regions=p.n_regions, personas_per_region=p.personas_per_region, strata_counts=tuple(p.strata_counts),
        heterogeneity=p.heterogeneity, seed=seeding.derive_seed(s, "generation", "population"),
        **({} if p.base_weights is None else {"base_weights": tuple(p.base_weights)}),
    ))
    pool = gen.make_order_pool(p.n_orders, seed=seeding.derive_seed(s, "generation", "orders"))
    tasks = gen.build_regional_tasks(pop.regions, pool, n_z=p.n_z, seed=seeding.derive_seed(s, "generation", "tasks"))
    return pop, tasks


def assemble_world(cfg: RunConfig, pop: gen.Population, tasks: gen.RegionalTaskSet,
                   agent: TripletTable, human: TripletTable) -> RegionalWorld:
    community = gen.CommunityWeights(tuple(cfg.regional.community_coef))
    theta = gen.community_theta(pop, community)
    return RegionalWorld(
        pop, tasks, agent, human, theta,
        human_shares=gen.realized_human_shares(human, tasks, theta, cfg.regional.human_days),
        full_shares=gen.realized_human_shares(human, tasks, theta),
        expected_shares=gen.expected_human_shares(pop, tasks, community),
    )


def build_world(cfg: RunConfig) -> RegionalWorld:
    """Population, menus, agent triplets and the community's shares for a regional scenario.

    The community is a known persona mixture. With ``shared_draws`` its
    members' choices reuse the agent's random shocks (so an undistorted
    agent reproduces them exactly); otherwise they are drawn independently.
    """
    p = cfg.regional
    pop, tasks = build_design(cfg)
    agent_seed = seeding.derive_seed(cfg.seed, "generation", "agent")
    agent = simulate_agent(cfg, pop, tasks, agent_seed)
    human_seed = agent_seed if p.shared_draws else seeding.derive_seed(cfg.seed, "generation", "human")
    if p.shared_draws and p.provider in ("oracle", "distorted") and _distortion(p.distortion).is_identity:
        human = agent
    else:
        human = gen.simulate_choices(gen.GroundTruthHuman(), tasks, pop, human_seed, common_shocks=p.common_shocks)
    return assemble_world(cfg, pop, tasks, agent, human)


def _share_dict(shares: np.ndarray, region_ids: Sequence[str]) -> dict[tuple[str, str], np.ndarray]:
    return {(rid, PERIODS[t]): shares[r, t] for r, rid in enumerate(region_ids) for t in (0, 1)}


def effect_from_shares(
    shares: dict[tuple[str, str], np.ndarray],
    arms: dict[str, str],
    category: int,
    regions: Sequence[str],
    method: str,
    confidence: float = 0.95,
) -> EffectEstimate:
    panel = ec.panel_from_shares(shares, arms, category, regions)
    return ec.did_estimate(panel, "cluster", confidence, method=method)


# ---------------------------------------------------------------------------
# Regional runs
# ---------------------------------------------------------------------------


@dataclass
class RegionalInputs:
    """Everything a regional correction needs besides the configuration."""

    train: TripletTable
    val: TripletTable
    predict: TripletTable
    target_regions: list[str]
    train_multiplicity: np.ndarray | None = None
    val_multiplicity: np.ndarray | None = None
    predict_multiplicity: np.ndarray | None = None
    unit_weight: dict[tuple[str, str], float] | None = None


def _regionwise_parts(world: RegionalWorld, cfg: RunConfig, seed: int) -> tuple[dict[str, tuple[str, ...]], np.ndarray, np.ndarray]:
    split = split_regionwise(world.population.regions, cfg.split.r, seed)
    ids = np.array(split["Z_ID"])
    rng = seeding.stream(seed, "split", "validation-regions")
    n_val = max(1, _round_half_up(ids.size * cfg.split.val_region_fraction))
    if n_val >= ids.size:
        raise SplitError(f"Z_ID has {ids.size} regions; cannot hold out {n_val} for validation")
    val_ids = set(ids[rng.choice(ids.size, n_val, replace=False)].tolist())
    train_ids = [z for z in split["Z_ID"] if z not in val_ids]
    return split, np.array(train_ids), np.array(sorted(val_ids))


def _region_mask(table: TripletTable, ids: Sequence[str]) -> np.ndarray:
    keep = np.zeros(len(table.region_ids), dtype=bool)
    index = {rid: i for i, rid in enumerate(table.region_ids)}
    keep[[index[z] for z in ids]] = True
    return keep[table.region]


def prepare_inputs(world: RegionalWorld, cfg: RunConfig, split_seed: int | None = None) -> tuple[RegionalInputs, dict[str, Any]]:
    """Split the agent triplets for the configured scenario."""
    seed = cfg.seed if split_seed is None else split_seed
    table = world.agent
    ssd_only = cfg.regional.ssd_only
    if cfg.scenario == "regional-timewise":
        plan = SplitPlan("timewise", cfg.split.train_fraction, cfg.split.val_fraction, seed=seed)
        parts = split_timewise(table, plan)
        inputs = RegionalInputs(table.subset(parts["train"]), table.subset(parts["val"]), table.subset(parts["test"]),
                                world.target_regions(None, ssd_only))
        info = {"split": "timewise", "sizes": {k: int(v.size) for k, v in parts.items()}}
    elif cfg.scenario == "regional-regionwise":
        split, train_ids, val_ids = _regionwise_parts(world, cfg, seed)
        inputs = RegionalInputs(
            table.subset(np.flatnonzero(_region_mask(table, train_ids))),
            table.subset(np.flatnonzero(_region_mask(table, val_ids))),
            table.subset(np.flatnonzero(_region_mask(table, split["Z_OOD"]))),
            world.target_regions(split["Z_OOD"], ssd_only),
        )
        info = {"split": "regionwise", "Z_ID": list(split["Z_ID"]), "Z_OOD_size": len(split["Z_OOD"]),
                "validation_regions": val_ids.tolist()}
    else:
        raise ValueError(f"scenario {cfg.scenario!r} is not regional")
    return inputs, info


@dataclass
class CorrectionFit:
    kind: str
    result: rg.TrainResult
    encoder: rg.TripletEncoder
    predicted: dict[tuple[str, str], np.ndarray]
    effect: EffectEstimate
    unit_kl: dict[tuple[str, str], float] = field(default_factory=dict)


def train_config(cfg: RunConfig, kind: str, seed: int) -> rg.TrainConfig:
    c = cfg.corrector
    return rg.TrainConfig(kind=kind, lr=c.lr, epochs=c.epochs, patience=c.patience, seed=seed)


def fit_and_infer(world: RegionalWorld, inputs: RegionalInputs, cfg: RunConfig, kind: str, init_seed: int) -> CorrectionFit:
    """Train one corrector on the inputs and estimate the effect on the target regions."""
    obs = world.population.observables
    tasks = world.tasks
    enc = rg.fit_encoder(inputs.train, tasks, obs, inputs.train_multiplicity)
    train = rg.build_unit_batch(inputs.train, tasks, obs, enc, world.human_shares,
                                inputs.train_multiplicity, inputs.unit_weight)
    val = rg.build_unit_batch(inputs.val, tasks, obs, enc, world.human_shares, inputs.val_multiplicity)
    pred_batch = rg.build_unit_batch(inputs.predict, tasks, obs, enc, None, inputs.predict_multiplicity)
    result = rg.train_correction(train, val, train_config(cfg, kind, init_seed))
    predicted = rg.predict_region_shares(result.params, kind, pred_batch)
    effect = effect_from_shares(predicted, world.arms, cfg.regional.outcome_category, inputs.target_regions, kind)
    # KL to the full-experiment community share on every predicted unit
    full = _share_dict(world.full_shares, tasks.region_ids)
    unit_kl = {k: _kl(full[k], v) for k, v in predicted.items()}
    return CorrectionFit(kind, result, enc, predicted, effect, unit_kl)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m] / np.maximum(q[m], 1e-300))))


def _agent_shares(table: TripletTable, multiplicity: np.ndarray | None = None) -> dict[tuple[str, str], np.ndarray]:
    w = np.ones(len(table)) if multiplicity is None else multiplicity
    k = table.n_categories
    flat = (table.region * 2 + table.period) * k + table.choice
    R = len(table.region_ids)
    counts = np.bincount(flat, weights=w, minlength=R * 2 * k).reshape(R, 2, k)
    present = np.unique(table.region * 2 + table.period)
    return {(table.region_ids[u // 2], PERIODS[u % 2]): counts[u // 2, u % 2] / counts[u // 2, u % 2].sum()
            for u in present.tolist()}


def _record(e: EffectEstimate) -> dict[str, Any]:
    rec = e.to_record()
    rec["df"] = e.extra.get("df")
    return rec


def regional_effects(
    shares: dict[str, dict[tuple[str, str], np.ndarray]],
    arms: dict[str, str],
    targets: dict[str, list[str]],
    scenario: str,
    category: int,
    confidence: float = 0.95,
) -> dict[str, dict[str, Any]]:
    """All DiD estimates of a regional report, from share tables alone.

    ``shares`` holds ``human`` (days with human data), ``full`` (whole
    experiment), ``expected``, ``agent`` and ``predicted:<kind>`` tables;
    ``targets`` lists the ``target``, ``national`` and (region-wise) ``id``
    region sets.
    """
    def eff(table: str, regions: str, method: str) -> dict[str, Any]:
        return _record(effect_from_shares(shares[table], arms, category, targets[regions], method, confidence))

    out = {
        "injected": eff("full", "target", "injected"),
        "population": eff("expected", "target", "population"),
        "agent": eff("agent", "target", "agent"),
        "national": eff("full", "national", "national"),
    }
    if scenario == "regional-regionwise":
        out["id_human"] = eff("human", "id", "id_human")
        out["ood_human"] = out["injected"] | {"method": "ood_human"}
    else:
        out["human_observed"] = eff("human", "target", "human_observed")
    for name in sorted(k for k in shares if k.startswith("predicted:")):
        kind = name.split(":", 1)[1]
        out[kind] = eff(name, "target", kind)
    return out


def regional_report(cfg: RunConfig, shares, arms, targets, split_summary, training) -> dict[str, Any]:
    return {
        "scenario": cfg.scenario, "seed": cfg.seed, "config_hash": cfg.config_hash(),
        "outcome_category": cfg.regional.outcome_category, "split": split_summary,
        "n_target_regions": len(targets["target"]),
        "effects": regional_effects(shares, arms, targets, cfg.scenario, cfg.regional.outcome_category,
                                    cfg.bootstrap.confidence),
        "training": training,
    }


def run_regional(cfg: RunConfig, world: RegionalWorld | None = None) -> tuple[dict[str, Any], dict[str, Any]]:
    """One regional run. Returns (report, artifacts); artifacts include every share table."""
    world = _stage("generation", build_world, cfg) if world is None else world
    inputs, info = _stage("split", prepare_inputs, world, cfg)
    rids = world.tasks.region_ids
    ssd_only = cfg.regional.ssd_only
    targets = {"target": list(inputs.target_regions), "national": world.target_regions(None, ssd_only)}
    if cfg.scenario == "regional-regionwise":
        targets["id"] = world.target_regions(info["Z_ID"], ssd_only)
    shares = {
        "human": _share_dict(world.human_shares, rids),
        "full": _share_dict(world.full_shares, rids),
        "expected": _share_dict(world.expected_shares, rids),
        "agent": _agent_shares(inputs.predict),
    }
    fits = {}
    training = {}
    for kind in cfg.corrector.kinds:
        fit = _stage(f"correction:{kind}", fit_and_infer, world, inputs, cfg, kind,
                     seeding.derive_seed(cfg.seed, "init", kind))
        fits[kind] = fit
        shares[f"predicted:{kind}"] = fit.predicted
        r = fit.result
        kl = np.array(list(fit.unit_kl.values()))
        training[kind] = {
            "epochs_run": len(r.train_curve), "best_epoch": r.best_epoch, "stopped_early": r.stopped_early,
            "train_kl_per_unit": r.train_curve[-1] / _n_units(inputs.train) if r.train_curve else None,
            "best_val_kl": min(r.val_curve) if r.val_curve else None,
            "predicted_unit_kl_mean": float(kl.mean()), "predicted_unit_kl_max": float(kl.max()),
        }
    summary = {k: v for k, v in info.items() if k != "Z_ID"}
    if "Z_ID" in info:
        summary["Z_ID_size"] = len(info["Z_ID"])
    report = _stage("inference", regional_report, cfg, shares, world.arms, targets, summary, training)
    artifacts = {"world": world, "inputs": inputs, "fits": fits, "split": info, "shares": shares,
                 "targets": targets, "arms": world.arms, "training": training, "split_summary": summary}
    return report, artifacts


def _n_units(table: TripletTable) -> int:
    return int(np.unique(table.region * 2 + table.period).size)


# ---------------------------------------------------------------------------
# Conjoint runs
# ---------------------------------------------------------------------------


def conjoint_config(cfg: RunConfig, seed: int | None = None) -> gen.ConjointConfig:
    c = cfg.conjoint
    return gen.ConjointConfig(
        c.n_primary, c.n_aux, c.tasks_per_customer, c.n_attributes, c.n_options, tuple(c.beta_mean),
        c.heterogeneity, c.preference_scale, _distortion(c.distortion),
        seed=seeding.derive_seed(cfg.seed if seed is None else seed, "generation", "conjoint"),
    )


def conjoint_report(cfg: RunConfig, data: gen.ConjointDataset, model: cj.CorrectionModel) -> tuple[dict[str, Any], dict[str, Any]]:
    """Inference stage for conjoint data: corrected labels, the estimator suite and MAPE."""
    y_hat = cj.predict_soft_choices(model, data.X_aux, data.z_aux)
    suite = ec.estimate_partworth_suite(data.X_primary, data.y_primary, data.X_aux, data.z_aux, y_hat, data.y_aux_hidden)
    star = suite["beta_star"].beta
    mapes = {k: ec.mape(v.beta, star) for k, v in suite.items()}
    report = {
        "scenario": cfg.scenario, "seed": cfg.seed, "config_hash": cfg.config_hash(),
        "partworths": {k: v.beta.tolist() for k, v in suite.items()},
        "mape": mapes,
        "bias_reduction": {k: ec.bias_reduction(mapes[k], mapes["beta_primary"]) for k in ("beta_aux", "beta_naive", "beta_corr")},
        "correction": {k: model.metadata[k] for k in ("iterations", "final_loss", "grad_inf_norm", "converged", "separation")},
    }
    return report, {"y_hat": y_hat, "suite": suite}


def run_conjoint(cfg: RunConfig) -> tuple[dict[str, Any], dict[str, Any]]:
    data = _stage("generation", gen.make_conjoint_dataset, conjoint_config(cfg))
    c = cfg.conjoint
    model = _stage("correction", cj.fit_correction, data.X_primary, data.y_primary, data.z_primary,
                   c.lam, c.tol, c.max_iter, c.interactions)
    report, extra = _stage("inference", conjoint_report, cfg, data, model)
    return report, {"dataset": data, "model": model, **extra}


def _stage(name: str, fn: Callable, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:  # tag and propagate
        raise PipelineError(name, exc) from exc


def run_pipeline(cfg: RunConfig) -> tuple[dict[str, Any], dict[str, Any]]:
    """Generation, correction and inference for the configured scenario."""
    log.info("run %s seed=%d hash=%s", cfg.scenario, cfg.seed, cfg.config_hash())
    if cfg.scenario == "conjoint":
        return run_conjoint(cfg)
    return run_regional(cfg)


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


def t_interval(values: Sequence[float], confidence: float = 0.95) -> tuple[float, float, float, float]:
    """(mean, low, high, sd) of mean +- t_{(1+c)/2, B-1} * sd / sqrt(B)."""
    v = np.sort(np.asarray(values, dtype=np.float64))  # sorting makes the sums order-invariant
    if v.size < 2:
        raise ValueError("need at least two values")
    mean = float(v.mean())
    sd = float(v.std(ddof=1))
    half = float(stats.t.ppf(0.5 + confidence / 2, v.size - 1)) * sd / math.sqrt(v.size)
    return mean, mean - half, mean + half, sd


def bootstrap_plan(cfg: RunConfig) -> BootstrapPlan:
    b = cfg.bootstrap
    return BootstrapPlan(b.replications, b.resample, b.confidence, b.regenerate, b.redraw_id)


def persona_multiplicity(population: gen.Population, rng: np.random.Generator) -> np.ndarray:
    """Within each region, how often each persona is drawn in a with-replacement resample."""
    counts = np.zeros(len(population.personas))
    for r in range(len(population.regions)):
        sl = population.region_slice(r)
        m = sl.stop - sl.start
        counts[sl] = np.bincount(rng.integers(0, m, size=m), minlength=m)
    return counts


def _keep(table: TripletTable, mult: np.ndarray) -> tuple[TripletTable, np.ndarray]:
    w = mult[table.persona]
    idx = np.flatnonzero(w > 0)
    return table.subset(idx), w[idx]


def regional_replica(cfg: RunConfig, world: RegionalWorld, plan: BootstrapPlan, b: int, kind: str) -> EffectEstimate:
    """One bootstrap replica: resample, optionally regenerate, retrain, re-infer."""
    rng = seeding.stream(cfg.seed, "bootstrap", b)
    mult = persona_multiplicity(world.population, rng)
    rep_world = world
    if plan.regenerate:
        agent = simulate_agent(cfg, world.population, world.tasks, seeding.derive_seed(cfg.seed, "bootstrap", b, "agent"))
        rep_world = RegionalWorld(world.population, world.tasks, agent, world.human, world.theta,
                                  world.human_shares, world.full_shares, world.expected_shares)
    split_seed = seeding.derive_seed(cfg.seed, "bootstrap", b, "split") if plan.redraw_id else cfg.seed
    inputs, info = prepare_inputs(rep_world, cfg, split_seed)
    if plan.redraw_id:
        # the target stays the original out-of-distribution set
        base, _ = prepare_inputs(world, cfg)
        inputs.predict = rep_world.agent.subset(np.flatnonzero(_region_mask(rep_world.agent, _ids(base.predict))))
        inputs.target_regions = base.target_regions
    inputs.train, inputs.train_multiplicity = _keep(inputs.train, mult)
    inputs.val, inputs.val_multiplicity = _keep(inputs.val, mult)
    inputs.predict, inputs.predict_multiplicity = _keep(inputs.predict, mult)
    if cfg.scenario == "regional-regionwise" and plan.resample_units == "personas+regions":
        train_regions = _ids(inputs.train)
        draws = rng.integers(0, len(train_regions), size=len(train_regions))
        n = np.bincount(draws, minlength=len(train_regions))
        chosen = [z for z, c in zip(train_regions, n) if c > 0]
        inputs.train, inputs.train_multiplicity = _restrict(inputs.train, inputs.train_multiplicity, chosen)
        inputs.unit_weight = {(z, p): float(c) for z, c in zip(train_regions, n) if c > 0 for p in PERIODS}
    fit = fit_and_infer(rep_world, inputs, cfg, kind, seeding.derive_seed(cfg.seed, "bootstrap", b, "init"))
    return fit.effect


def _ids(table: TripletTable) -> list[str]:
    return [table.region_ids[i] for i in np.unique(table.region).tolist()]


def _restrict(table: TripletTable, mult: np.ndarray, ids: Sequence[str]) -> tuple[TripletTable, np.ndarray]:
    idx = np.flatnonzero(_region_mask(table, ids))
    return table.subset(idx), mult[idx]


@dataclass
class BootstrapResult:
    estimate: EffectEstimate
    replicas: list[float]
    failures: list[dict[str, Any]]
    replica_se: list[float]

    def to_record(self) -> dict[str, Any]:
        return {
            "estimate": _record(self.estimate),
            "replicas_bps": [v * 1e4 for v in self.replicas],
            "replica_se_bps": [v * 1e4 for v in self.replica_se],
            "failures": self.failures,
        }


def aggregate_replicas(effects: Sequence[EffectEstimate | None], plan: BootstrapPlan, method: str = "bootstrap",
                       failures: list[dict[str, Any]] | None = None) -> BootstrapResult:
    """t-interval over successful replicas; at least half must have succeeded."""
    failures = list(failures or [])
    ok = [e for e in effects if e is not None]
    if len(ok) < max(2, math.ceil(plan.replications / 2)):
        raise BootstrapError(f"only {len(ok)} of {plan.replications} replicas succeeded", failures)
    vals = [e.beta3 for e in ok]
    mean, lo, hi, sd = t_interval(vals, plan.confidence)
    se = sd / math.sqrt(len(vals))
    if se > 0:
        p = float(2 * stats.t.sf(abs(mean / se), len(vals) - 1))
    else:
        p = 0.0 if mean != 0 else 1.0
    est = EffectEstimate(mean, se, p, lo, hi, method=method,
                         extra={"replications": plan.replications, "succeeded": len(ok), "sd": sd})
    return BootstrapResult(est, vals, failures, [e.se for e in ok])


def bootstrap_ci(
    cfg: RunConfig,
    plan: BootstrapPlan | None = None,
    kind: str | None = None,
    world: RegionalWorld | None = None,
    replica: Callable[[int], EffectEstimate] | None = None,
) -> BootstrapResult:
    """Pipeline-wide bootstrap: B replicas seeded from (master seed, replica index).

    ``replica`` overrides the per-replica job (it receives the index); by
    default regional replicas retrain the corrector, and conjoint replicas
    resample customers and refit.
    """
    plan = bootstrap_plan(cfg) if plan is None else plan
    if replica is None:
        if cfg.scenario == "conjoint":
            replica = lambda b: conjoint_replica(cfg, b)  # noqa: E731
        else:
            world = build_world(cfg) if world is None else world
            kind = kind or cfg.corrector.kinds[0]
            replica = lambda b: regional_replica(cfg, world, plan, b, kind)  # noqa: E731
    effects: list[EffectEstimate | None] = []
    failures = []
    for b in range(plan.replications):
        try:
            effects.append(replica(b))
        except Exception as exc:
            log.warning("replica %d failed: %s", b, exc)
            failures.append({"replica": b, "error": f"{type(exc).__name__}: {exc}"})
            effects.append(None)
    return aggregate_replicas(effects, plan, f"bootstrap:{kind or cfg.scenario}", failures)


def conjoint_replica(cfg: RunConfig, b: int) -> EffectEstimate:
    """Conjoint replicas resample customers; the reported 'effect' is bias_reduction(beta_corr)."""
    data = gen.make_conjoint_dataset(conjoint_config(cfg))
    rng = seeding.stream(cfg.seed, "bootstrap", b)
    c = cfg.conjoint

    def draw(cust: np.ndarray) -> np.ndarray:
        ids = np.unique(cust)
        pick = rng.choice(ids, size=ids.size, replace=True)
        pos = {v: np.flatnonzero(cust == v) for v in ids}
        return np.concatenate([pos[v] for v in pick])

    ip, ia = draw(data.customer_primary), draw(data.customer_aux)
    model = cj.fit_correction(data.X_primary[ip], data.y_primary[ip], data.z_primary[ip], c.lam, c.tol, c.max_iter, c.interactions)
    y_hat = cj.predict_soft_choices(model, data.X_aux[ia], data.z_aux[ia])
    suite = ec.estimate_partworth_suite(data.X_primary[ip], data.y_primary[ip], data.X_aux[ia], data.z_aux[ia],
                                        y_hat, data.y_aux_hidden[ia])
    star = suite["beta_star"].beta
    br = ec.bias_reduction(ec.mape(suite["beta_corr"].beta, star), ec.mape(suite["beta_primary"].beta, star))
    return EffectEstimate(br, 0.0, 1.0, method="bias_reduction")
