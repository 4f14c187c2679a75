"""Randomized invariants across modules (1000 hypothesis cases each)."""

import dataclasses
import json
import tempfile
from pathlib import Path

import numpy as np
from hypothesis import assume, given, settings, strategies as st

from aem import generation as gen
from aem import pipeline as pl
from aem import regional as rg
from aem import storage
from aem.config import RunConfig, load_config
from aem.conjoint import FeatureLayout, correction_loss_grad, fit_correction
from aem.domain import (
    ChoiceLabel, ChoiceTask, EffectEstimate, PartWorth, Persona, Region, ShareVector, TripletRecord, TripletTable,
)
from aem.econometrics import mnl_loss_grad_hess

PROPERTY = settings(max_examples=1000, deadline=None)
seeds = st.integers(0, 2**32 - 1)


def same_value(a, b) -> bool:
    if isinstance(a, np.ndarray):
        return isinstance(b, np.ndarray) and a.dtype == b.dtype and np.array_equal(a, b)
    if isinstance(a, dict):
        return isinstance(b, dict) and a.keys() == b.keys() and all(same_value(a[k], b[k]) for k in a)
    if isinstance(a, (tuple, list)):
        return type(a) is type(b) and len(a) == len(b) and all(same_value(x, y) for x, y in zip(a, b))
    return type(a) is type(b) and a == b


def same_object(a, b) -> bool:
    return type(a) is type(b) and all(
        same_value(getattr(a, f.name), getattr(b, f.name)) for f in dataclasses.fields(a))


def random_objects(rng):
    k, q = int(rng.integers(2, 6)), int(rng.integers(1, 5))
    soft = rng.dirichlet(np.ones(k + 1))
    soft = soft / soft.sum()
    lo = float(rng.normal())
    shares = rng.dirichlet(np.ones(5))
    chosen = int(rng.integers(5))
    return [
        ChoiceTask(rng.normal(size=(k, q)) * 10.0 ** rng.integers(-3, 4), bool(rng.integers(2)), f"t{rng.integers(99)}",
                   tuple(int(c) for c in rng.integers(0, 5, k)) if rng.integers(2) else None),
        ChoiceLabel.hard(int(rng.integers(0, k + 1)), k),
        ChoiceLabel(soft) if abs(soft.sum() - 1) <= 1e-9 else ChoiceLabel.hard(0, k),
        Persona(rng.normal(size=q), tuple(int(v) for v in rng.integers(0, 6, 4)), f"P{rng.integers(999)}", "Z1"),
        Region(f"Z{rng.integers(999)}", bool(rng.integers(2)), bool(rng.integers(2)),
               tuple(f"P{i}" for i in range(int(rng.integers(1, 4)))), tuple(f"O{i}" for i in range(int(rng.integers(0, 4))))),
        TripletRecord("O1", "P2", "Z3", tuple(int(i == chosen) for i in range(5)),
                      ["pre", "post"][int(rng.integers(2))], ["treatment", "control"][int(rng.integers(2))]),
        ShareVector(shares / shares.sum(), "Z7", "control", "post"),
        PartWorth(rng.normal(size=q), bool(rng.integers(2)), float(rng.exponential()), "aux",
                  {"iterations": int(rng.integers(50)), "history": rng.normal(size=3).tolist()}),
        EffectEstimate(lo + 0.1, float(rng.exponential()), float(rng.uniform()), lo, lo + float(rng.exponential()) + 0.1,
                       "mixture", {"n": 3}),
        EffectEstimate(float(rng.normal()), 0.0, 1.0),
    ]


# ---------------------------------------------------------------------------
# Serialization round trips
# ---------------------------------------------------------------------------


@PROPERTY
@given(seeds)
def test_domain_objects_survive_file_round_trip(seed):
    objs = random_objects(np.random.default_rng(seed))
    with tempfile.TemporaryDirectory() as d:
        back = storage.read_objects(storage.write_objects(Path(d) / "objects.json", objs))
    assert len(back) == len(objs)
    assert all(same_object(a, b) for a, b in zip(objs, back))


def random_table(rng):
    n_regions, n_orders, n_personas = (int(v) for v in rng.integers(1, 6, 3))
    n = int(rng.integers(1, 60))
    return TripletTable(
        rng.integers(0, n_regions, n), rng.integers(0, n_orders, n), rng.integers(0, n_personas, n),
        rng.integers(0, 2, n), rng.integers(0, 5, n),
        tuple(f"Z{i:03d}" for i in range(n_regions)), tuple(f"O{i}" for i in range(n_orders)),
        tuple(f"P{i}" for i in range(n_personas)), rng.integers(0, 2, n_regions).astype(bool),
    )


@PROPERTY
@given(seeds)
def test_triplet_and_share_files_round_trip(seed):
    rng = np.random.default_rng(seed)
    table = random_table(rng)
    shares = {}
    for rid in table.region_ids:
        for period in ("pre", "post"):
            v = rng.dirichlet(np.full(5, 0.5))
            shares[(rid, period)] = v / v.sum()
    arms = {rid: "treatment" if t else "control" for rid, t in zip(table.region_ids, table.treatment)}
    with tempfile.TemporaryDirectory() as d:
        back = storage.read_triplets(storage.write_triplets(Path(d) / "t.csv", table))
        sh, arms_back = storage.read_shares(storage.write_shares(Path(d) / "s.csv", shares, arms))
    assert same_object(table, back)
    assert [*back.records()] == [*table.records()]
    assert sh.keys() == shares.keys() and all(np.array_equal(sh[k], shares[k]) for k in shares)
    assert arms_back == arms


@PROPERTY
@given(seeds, st.dictionaries(st.sampled_from(["seed", "regional.n_z", "corrector.lr", "bootstrap.replications",
                                                "conjoint.lam", "regional.human_days"]),
                              st.integers(2, 9), max_size=6))
def test_config_hash_survives_json_round_trip_and_key_order(seed, changes):
    scale = {"corrector.lr": 1e-4, "conjoint.lam": 1e-4}
    changes = {k: v * scale[k] if k in scale else v + 10 * (k == "regional.n_z") for k, v in changes.items()}
    cfg = RunConfig().updated(**changes)
    data = json.loads(cfg.canonical_json())
    rng = np.random.default_rng(seed)

    def shuffled(obj):
        if not isinstance(obj, dict):
            return obj
        keys = list(obj)
        return {k: shuffled(obj[k]) for k in (keys[i] for i in rng.permutation(len(keys)))}

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "c.json"
        p.write_text(json.dumps(shuffled(data)))
        again = load_config(p)
    assert again == cfg and again.config_hash() == cfg.config_hash()


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

TINY = {"regional.n_regions": 4, "regional.personas_per_region": 2, "regional.n_z": 4, "regional.n_orders": 30}


def world_bytes(cfg) -> bytes:
    world = pl.build_world(cfg)
    rids = world.tasks.region_ids
    with tempfile.TemporaryDirectory() as d:
        paths = [storage.write_triplets(Path(d) / "t.csv", world.agent)] + [
            storage.write_shares(Path(d) / f"{name}.csv", storage.shares_array_to_dict(arr, rids), world.arms)
            for name, arr in (("h", world.human_shares), ("f", world.full_shares), ("e", world.expected_shares))]
        return b"".join(p.read_bytes() for p in paths)


@PROPERTY
@given(st.integers(0, 2**31))
def test_generation_is_a_pure_function_of_config_and_seed(seed):
    cfg = RunConfig(seed=seed).updated(**TINY)
    assert world_bytes(cfg) == world_bytes(cfg)
    c = gen.ConjointConfig(n_primary=20, n_aux=30, tasks_per_customer=2, seed=seed)
    a, b = gen.make_conjoint_dataset(c), gen.make_conjoint_dataset(c)
    assert all(np.array_equal(getattr(a, f.name), getattr(b, f.name)) for f in dataclasses.fields(a))


@PROPERTY
@given(seeds)
def test_identity_agent_reproduces_human_choices_under_matched_seeds(seed):
    pop = gen.sample_population(gen.PopulationConfig(n_regions=4, personas_per_region=3, seed=seed % 1000))
    pool = gen.make_order_pool(30, seed=seed % 1000)
    tasks = gen.build_regional_tasks(pop.regions, pool, n_z=4, seed=seed % 1000)
    agent = gen.simulate_choices(gen.DistortedAgent(gen.DistortionSpec.identity(), pop.latent.mean(axis=0)),
                                 tasks, pop, seed=seed)
    human = gen.simulate_choices(gen.GroundTruthHuman(), tasks, pop, seed=seed)
    assert np.array_equal(agent.choice, human.choice)
    assert np.all(agent.onehot().sum(axis=1) == 1)


# ---------------------------------------------------------------------------
# Conjoint correction
# ---------------------------------------------------------------------------


def conjoint_rows(rng, n=40, k=3, q=2):
    X = rng.normal(size=(n, k, q))
    z = rng.integers(0, k + 1, n)
    y = np.where(rng.uniform(size=n) < 0.6, z, rng.integers(0, k + 1, n))
    return X, y, z


@PROPERTY
@given(seeds, st.booleans())
def test_correction_gradient_matches_central_differences(seed, interactions):
    rng = np.random.default_rng(seed)
    X, y, z = conjoint_rows(rng)
    D = FeatureLayout(3, 2, interactions).design(X, z)
    Y = rng.dirichlet(np.ones(4), 40)
    theta = rng.normal(size=4 * (D.shape[1] + 1))
    _, g = correction_loss_grad(theta, D, Y, 1e-2)
    h = 1e-6
    num = np.array([(correction_loss_grad(theta + h * e, D, Y, 1e-2)[0]
                     - correction_loss_grad(theta - h * e, D, Y, 1e-2)[0]) / (2 * h) for e in np.eye(theta.size)])
    assert np.linalg.norm(num - g) <= 1e-5 * max(np.linalg.norm(num), 1e-3)


@PROPERTY
@given(seeds)
def test_correction_loss_history_non_increasing(seed):
    X, y, z = conjoint_rows(np.random.default_rng(seed))
    hist = np.asarray(fit_correction(X, y, z).metadata["loss_history"])
    assert np.all(np.diff(hist) <= 1e-12 * max(1.0, hist[0]))


@PROPERTY
@given(seeds)
def test_correction_is_invariant_to_row_order(seed):
    rng = np.random.default_rng(seed)
    X, y, z = conjoint_rows(rng)
    perm = rng.permutation(len(y))
    a = fit_correction(X, y, z, lam=1e-2, tol=1e-10)
    b = fit_correction(X[perm], y[perm], z[perm], lam=1e-2, tol=1e-10)
    assert np.linalg.norm(a.coef - b.coef) + np.linalg.norm(a.intercept - b.intercept) < 1e-6


# ---------------------------------------------------------------------------
# Regional correction
# ---------------------------------------------------------------------------


def random_batch(rng, n=30, n_units=3, k=5):
    unit = np.sort(np.r_[np.arange(n_units), rng.integers(0, n_units, n - n_units)])
    return rg.UnitBatch(
        rng.normal(size=(6, 3)), rng.normal(size=(4, 3)), rng.integers(0, 6, n), rng.integers(0, 4, n),
        rng.integers(0, k, n), unit, list(range(n_units)), k, rng.integers(1, 3, n).astype(float),
        rng.dirichlet(np.ones(k), n_units), rng.uniform(0.5, 1.5, n_units),
    )


def init_params(kind, rng, seed):
    init = rg.MODELS[kind][0]
    p = init(6, seed, 5, 3) if kind == "mixture" else init(6, 5, seed, 5, 3)
    return {k: v + 0.3 * rng.normal(size=v.shape) for k, v in p.items()}


@PROPERTY
@given(seeds, st.sampled_from(["mixture", "integrated"]))
def test_regional_gradients_match_central_differences(seed, kind):
    rng = np.random.default_rng(seed)
    b = random_batch(rng)
    p = init_params(kind, rng, seed % 1000)
    if kind == "integrated":  # central differences are invalid across a ReLU kink
        z1 = rg._integrated_pass(p, b)[1][0]
        assume(np.abs(z1).min() > 1e-4)
    loss_grad = rg.MODELS[kind][1]
    _, g = loss_grad(p, b)
    h = 1e-6
    for name, v in p.items():
        num = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            up = loss_grad(p, b, need_grad=False)[0]
            v[idx] = old - h
            down = loss_grad(p, b, need_grad=False)[0]
            v[idx] = old
            num[idx] = (up - down) / (2 * h)
        assert np.linalg.norm(num - g[name]) <= 1e-4 * max(np.linalg.norm(num), 1e-4), name


@PROPERTY
@given(seeds, st.sampled_from(["mixture", "integrated"]))
def test_kl_decreases_over_first_epochs_on_realizable_targets(seed, kind):
    rng = np.random.default_rng(seed)
    b = random_batch(rng)
    teacher = init_params(kind, rng, seed % 1000 + 1)
    b = b.with_target(rg.MODELS[kind][2](teacher, b), b.unit_weight)
    res = rg.train_correction(b, None, rg.TrainConfig(kind=kind, lr=1e-5, epochs=11, seed=seed % 1000,
                                                      hidden=5, attention=3))
    curve = res.train_curve
    assert all(later <= earlier for earlier, later in zip(curve, curve[1:]))


# ---------------------------------------------------------------------------
# Econometrics
# ---------------------------------------------------------------------------


@PROPERTY
@given(seeds, st.floats(0.0, 0.1))
def test_mnl_gradient_matches_central_differences(seed, ridge):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 3, 4))
    Y = rng.dirichlet(np.ones(4), 20)
    w = rng.uniform(0.5, 2, 20)
    beta = rng.normal(size=4)
    _, g, _ = mnl_loss_grad_hess(beta, X, Y, w, ridge)
    h = 1e-6
    num = np.array([(mnl_loss_grad_hess(beta + h * e, X, Y, w, ridge)[0]
                     - mnl_loss_grad_hess(beta - h * e, X, Y, w, ridge)[0]) / (2 * h) for e in np.eye(4)])
    assert np.linalg.norm(num - g) <= 1e-5 * max(np.linalg.norm(num), 1e-3)
