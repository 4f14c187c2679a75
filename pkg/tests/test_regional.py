import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aem import pipeline as pl
from aem import regional as rg
from aem.config import RunConfig


def small_world(seed=0, n_regions=24, personas=6, n_z=8):
    cfg = RunConfig(seed=seed).updated(**{
        "regional.n_regions": n_regions, "regional.personas_per_region": personas, "regional.n_z": n_z,
    })
    return pl.build_world(cfg)


@pytest.fixture(scope="module")
def world():
    return small_world()


@pytest.fixture(scope="module")
def batch(world):
    enc = rg.fit_encoder(world.agent, world.tasks, world.population.observables)
    return rg.build_unit_batch(world.agent, world.tasks, world.population.observables, enc, world.full_shares)


def random_batch(rng, n=60, n_units=4, k=5, n_ctx=7, n_per=5, dc=3, dp=4):
    unit = np.sort(np.r_[np.arange(n_units), rng.integers(0, n_units, n - n_units)])
    return rg.UnitBatch(
        rng.normal(size=(n_ctx, dc)), rng.normal(size=(n_per, dp)), rng.integers(0, n_ctx, n),
        rng.integers(0, n_per, n), rng.integers(0, k, n), unit, list(range(n_units)), k,
        rng.integers(1, 3, n).astype(float), rng.dirichlet(np.ones(k), n_units), rng.uniform(0.5, 1.5, n_units),
    )


# ---------------------------------------------------------------------------
# KL loss
# ---------------------------------------------------------------------------


def test_kl_hand_value():
    loss = rg.kl_share_loss({"z": np.array([0.25, 0.75])}, {"z": np.array([0.5, 0.5])})
    assert loss == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-12)
    assert loss == pytest.approx(0.143841, abs=1e-6)


def test_kl_zero_on_equal_and_additive():
    a, b = np.array([0.2, 0.3, 0.5]), np.array([0.1, 0.6, 0.3])
    assert rg.kl_share_loss({1: a}, {1: a}) == 0.0
    both = rg.kl_share_loss({1: a, 2: b}, {1: b, 2: a})
    assert both == pytest.approx(rg.kl_share_loss({1: a}, {1: b}) + rg.kl_share_loss({2: b}, {2: a}))


def test_kl_support_violation_names_unit():
    with pytest.raises(rg.SupportViolation) as info:
        rg.kl_share_loss({("Z1", "pre"): np.array([1.0, 0.0])}, {("Z1", "pre"): np.array([0.5, 0.5])})
    assert info.value.unit == ("Z1", "pre") and info.value.category == 1


def test_kl_zero_human_share_contributes_nothing():
    assert rg.kl_share_loss({0: np.array([0.5, 0.5])}, {0: np.array([1.0, 0.0])}) == pytest.approx(math.log(2))


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**31))
def test_kl_nonnegative_and_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(5))
    q = rng.dirichlet(np.ones(5))
    kl = rg.kl_share_loss({0: q}, {0: p})
    assert kl >= 0
    assert rg.kl_share_loss({0: p}, {0: p}) == pytest.approx(0.0, abs=1e-15)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def test_mixture_zero_attention_is_frequency():
    rng = np.random.default_rng(0)
    params = rg.init_mixture(3, 0)
    params["U"][:] = 0
    C = np.eye(4)[[0, 0, 1, 3, 3, 3]]
    share = rg.mixture_forward(params, rng.normal(size=(6, 3)), C)
    assert np.allclose(share, [2 / 6, 1 / 6, 0, 3 / 6])


def test_mixture_single_triplet_returns_its_choice():
    params = rg.init_mixture(3, 5)
    assert np.array_equal(rg.mixture_forward(params, np.ones((1, 3)), [[0, 0, 1]]), [0.0, 0.0, 1.0])


def test_mixture_hand_evaluation():
    # hidden 2, attention 2 with identity maps: score_i = U . tanh(h_i)
    params = {"W": np.eye(2), "b": np.zeros(2), "V": np.eye(2), "U": np.array([1.0, -2.0])}
    H = [[0.5, 0.1], [-1.0, 0.3], [0.2, -0.4]]
    C = [[1, 0], [0, 1], [1, 0]]
    scores = [math.tanh(h[0]) * 1.0 + math.tanh(h[1]) * -2.0 for h in H]
    e = [math.exp(s) for s in scores]
    w = [v / sum(e) for v in e]
    expected = [w[0] + w[2], w[1]]
    assert np.allclose(rg.mixture_forward(params, H, C), expected, atol=1e-14)


def test_mixture_errors():
    params = rg.init_mixture(2, 0)
    with pytest.raises(ValueError):
        rg.mixture_forward(params, np.zeros((0, 2)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        rg.mixture_forward(params, np.zeros((2, 2)), np.zeros((3, 3)))


def test_integrated_zero_last_layer_is_uniform():
    params = rg.init_integrated(3, 4, 0)
    params["W3"][:] = 0
    params["b3"][:] = 0
    rng = np.random.default_rng(1)
    g = rg.integrated_triplet_probs(params, rng.normal(size=(5, 3)), np.eye(4)[[0, 1, 2, 3, 0]])
    assert np.allclose(g, 0.25)
    assert np.allclose(rg.aggregate_region(g), 0.25)


def test_integrated_hand_evaluation():
    P = {"W1": np.array([[1.0, -1.0], [0.5, 0.5], [0.0, 1.0]]), "b1": np.array([0.1, 0.0]),
         "W2": np.array([[1.0, 0.0], [0.0, 2.0]]), "b2": np.zeros(2),
         "W3": np.array([[1.0, -1.0], [0.5, 0.0]]), "b3": np.array([0.0, 0.2])}
    rows = [([0.3], [1, 0]), ([-0.7], [0, 1])]

    def by_hand(h, c):
        x = h + c
        z1 = [sum(x[i] * P["W1"][i][j] for i in range(3)) + P["b1"][j] for j in range(2)]
        a1 = [max(v, 0.0) for v in z1]
        a2 = [math.tanh(sum(a1[i] * P["W2"][i][j] for i in range(2))) for j in range(2)]
        z3 = [sum(a2[i] * P["W3"][i][j] for i in range(2)) + P["b3"][j] for j in range(2)]
        e = [math.exp(v) for v in z3]
        return [v / sum(e) for v in e]

    g = [by_hand(h, c) for h, c in rows]
    expected = [(g[0][j] + g[1][j]) / 2 for j in range(2)]
    H = np.array([r[0] for r in rows])
    C = np.array([r[1] for r in rows], dtype=float)
    assert np.allclose(rg.integrated_forward(P, H, C), expected, atol=1e-14)


def test_aggregate_identical_and_empty():
    g = np.tile([0.1, 0.2, 0.7], (4, 1))
    assert np.allclose(rg.aggregate_region(g), [0.1, 0.2, 0.7])
    with pytest.raises(ValueError):
        rg.aggregate_region(np.zeros((0, 3)))


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12))
def test_mixture_share_in_convex_hull_and_sums_to_one(seed, n):
    rng = np.random.default_rng(seed)
    params = {k: v * 3 for k, v in rg.init_mixture(3, seed % 97, hidden=8, attention=4).items()}
    C = np.eye(5)[rng.integers(0, 4, n)]  # category 4 never chosen
    share = rg.mixture_forward(params, rng.normal(size=(n, 3)), C)
    assert abs(share.sum() - 1) <= 1e-9
    assert share[4] == 0.0
    assert np.all(share[C.sum(axis=0) == 0] == 0)
    assert np.all(share >= 0)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 10))
def test_attention_duplication_halves_weights(seed, n):
    rng = np.random.default_rng(seed)
    params = rg.init_mixture(2, seed % 89, hidden=6, attention=3)
    H = rng.normal(size=(n, 2))
    C = np.eye(3)[rng.integers(0, 3, n)]
    w = rg.attention_weights(params, H)
    w2 = rg.attention_weights(params, np.vstack([H, H]))
    assert np.allclose(w2[:n], w / 2, atol=1e-14) and np.allclose(w2[n:], w / 2, atol=1e-14)
    assert np.allclose(rg.mixture_forward(params, np.vstack([H, H]), np.vstack([C, C])),
                       rg.mixture_forward(params, H, C), atol=1e-14)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 10))
def test_integrated_outputs_are_distributions(seed, n):
    rng = np.random.default_rng(seed)
    params = {k: v * 2 for k, v in rg.init_integrated(3, 5, seed % 83, hidden=8, attention=4).items()}
    g = rg.integrated_triplet_probs(params, rng.normal(size=(n, 3)), np.eye(5)[rng.integers(0, 5, n)])
    assert np.allclose(g.sum(axis=1), 1, atol=1e-9)
    assert abs(rg.aggregate_region(g).sum() - 1) <= 1e-9


def test_batched_shares_match_array_functions(world, batch):
    params = rg.init_mixture(batch.input_dim, 3)
    integ = rg.init_integrated(batch.input_dim, batch.n_categories, 3)
    mix = rg.mixture_shares(params, batch)
    ints = rg.integrated_shares(integ, batch)
    H, C = batch.dense(), batch.onehot()
    for u in (0, 7, batch.n_units - 1):
        rows = batch.unit == u
        assert np.allclose(mix[u], rg.mixture_forward(params, H[rows], C[rows]), atol=1e-12)
        assert np.allclose(ints[u], rg.integrated_forward(integ, H[rows], C[rows]), atol=1e-12)


def test_multiplicity_equals_duplication(world):
    obs = world.population.observables
    table = world.agent.subset(np.flatnonzero(world.agent.region < 4))
    enc = rg.fit_encoder(table, world.tasks, obs)
    mult = (table.persona % 3 + 1).astype(float)
    weighted = rg.build_unit_batch(table, world.tasks, obs, enc, None, mult)
    dup = table.subset(np.repeat(np.arange(len(table)), mult.astype(int)))
    plain = rg.build_unit_batch(dup, world.tasks, obs, enc)
    for kind in ("mixture", "integrated"):
        init, _, shares = rg.MODELS[kind]
        p = init(weighted.input_dim, 1) if kind == "mixture" else init(weighted.input_dim, 5, 1)
        assert np.allclose(shares(p, weighted), shares(p, plain), atol=1e-12)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def numeric_grad(loss_grad, params, batch, h=1e-6):
    out = {}
    for k, v in params.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            a = loss_grad(params, batch, need_grad=False)[0]
            v[idx] = old - h
            b = loss_grad(params, batch, need_grad=False)[0]
            v[idx] = old
            g[idx] = (a - b) / (2 * h)
        out[k] = g
    return out


@pytest.mark.parametrize("kind", ["mixture", "integrated"])
@pytest.mark.parametrize("point", range(10))
def test_gradients_match_central_differences(kind, point):
    rng = np.random.default_rng(1000 + point)
    b = random_batch(rng)
    init, loss_grad, _ = rg.MODELS[kind]
    p = init(7, point, 8, 4) if kind == "mixture" else init(7, 5, point, 8, 4)
    p = {k: v + 0.3 * rng.normal(size=v.shape) for k, v in p.items()}
    _, g = loss_grad(p, b)
    num = numeric_grad(loss_grad, p, b)
    for k in p:
        err = np.linalg.norm(num[k] - g[k]) / max(np.linalg.norm(num[k]), 1e-12)
        assert err <= 1e-4, (kind, k, err)


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


def test_standardized_training_features(world):
    table = world.agent
    enc = rg.fit_encoder(table, world.tasks, world.population.observables)
    b = rg.build_unit_batch(table, world.tasks, world.population.observables, enc)
    H = b.dense()
    mean = H.mean(axis=0)
    var = H.var(axis=0)
    varying = np.concatenate([enc.ctx_scale, enc.per_scale]) != 1.0
    assert np.all(np.abs(mean) < 1e-9)
    assert np.all(np.abs(var[varying] - 1) < 1e-6)


def test_encoding_is_deterministic_and_local(world):
    enc = rg.fit_encoder(world.agent, world.tasks, world.population.observables)
    feats = world.tasks.order_features(0)[0, 0]
    a = enc.encode_triplet(feats, (1, 0, 2, 1))
    assert np.array_equal(a, enc.encode_triplet(feats, (1, 0, 2, 1)))
    b = enc.encode_triplet(feats, (1, 0, 3, 1))
    diff = np.flatnonzero(a != b)
    d_ctx = enc.dims[0]
    sizes = [len(lv) + 1 for lv in enc.levels]
    income = range(d_ctx + sum(sizes[:2]), d_ctx + sum(sizes[:3]))
    assert diff.size > 0 and set(diff.tolist()) <= set(income)


def test_unseen_code_goes_to_other_bucket(world):
    enc = rg.fit_encoder(world.agent, world.tasks, world.population.observables)
    raw = enc._onehot(np.array([[99, 0, 0, 0]]))
    assert raw[0, len(enc.levels[0])] == 1.0
    with pytest.raises(ValueError):
        enc.encode_triplet(None, (0, 0, 0, 0))


# ---------------------------------------------------------------------------
# Training and prediction
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["mixture", "integrated"])
def test_kl_decreases_over_first_epochs(batch, kind):
    res = rg.train_correction(batch, None, rg.TrainConfig(kind=kind, lr=1e-5, epochs=50, seed=2))
    curve = res.train_curve
    assert all(b <= a for a, b in zip(curve[:10], curve[1:11]))
    assert curve[49] <= curve[0]


def test_zero_learning_rate_keeps_parameters(batch):
    res = rg.train_correction(batch, None, rg.TrainConfig(lr=0.0, epochs=15, seed=4))
    init = rg.init_mixture(batch.input_dim, 4)
    for k in init:
        assert np.array_equal(res.params[k], init[k])


def test_training_is_deterministic_and_early_stops(world):
    obs = world.population.observables
    train_t = world.agent.subset(np.flatnonzero(world.agent.region < 16))
    val_t = world.agent.subset(np.flatnonzero(world.agent.region >= 16))
    enc = rg.fit_encoder(train_t, world.tasks, obs)
    tb = rg.build_unit_batch(train_t, world.tasks, obs, enc, world.full_shares)
    vb = rg.build_unit_batch(val_t, world.tasks, obs, enc, world.full_shares)
    cfg = rg.TrainConfig(lr=3e-2, epochs=300, patience=5, seed=1)
    a = rg.train_correction(tb, vb, cfg)
    b = rg.train_correction(tb, vb, cfg)
    assert a.train_curve == b.train_curve
    assert a.stopped_early and len(a.val_curve) == a.best_epoch + 5
    assert min(a.val_curve) == a.val_curve[a.best_epoch - 1]


def test_training_errors(batch):
    with pytest.raises(ValueError):
        rg.train_correction(batch.with_target(None), None, rg.TrainConfig())
    with pytest.raises(ValueError):
        rg.TrainConfig(kind="other")


def test_divergence_raises_with_checkpoint(batch):
    bad = batch.with_target(batch.target)
    bad.ctx = batch.ctx.copy()
    bad.ctx[0, 0] = np.nan
    with pytest.raises(rg.TrainingDiverged) as info:
        rg.train_correction(bad, None, rg.TrainConfig(epochs=3))
    assert set(info.value.last_good) == {"W", "b", "V", "U"}


def test_prediction_matches_training_evaluation_and_checks_dims(batch):
    res = rg.train_correction(batch, None, rg.TrainConfig(lr=1e-3, epochs=5, seed=0))
    pred = rg.predict_region_shares(res.params, "mixture", batch)
    direct = rg.mixture_shares(res.params, batch)
    for i, key in enumerate(batch.unit_keys):
        assert np.array_equal(pred[key], direct[i])
        assert abs(pred[key].sum() - 1) <= 1e-9
    small = rg.init_mixture(batch.input_dim - 1, 0)
    with pytest.raises(ValueError):
        rg.predict_region_shares(small, "mixture", batch)


def test_twin_region_gets_same_prediction(world):
    # a region whose triplets are a permuted copy of a training region's
    obs = world.population.observables
    t = world.agent
    r0 = np.flatnonzero(t.region == 0)
    enc = rg.fit_encoder(t, world.tasks, obs)
    params = rg.init_mixture(enc.dims[0] + enc.dims[1], 9)
    perm = np.random.default_rng(0).permutation(r0)
    a = rg.predict_region_shares(params, "mixture", rg.build_unit_batch(t.subset(r0), world.tasks, obs, enc))
    b = rg.predict_region_shares(params, "mixture", rg.build_unit_batch(t.subset(perm), world.tasks, obs, enc))
    for k in a:
        assert np.max(np.abs(a[k] - b[k])) <= 0.02
        assert np.allclose(a[k], b[k], atol=1e-12)


@pytest.mark.parametrize("kind", ["mixture", "integrated"])
def test_model_json_round_trip(batch, kind):
    res = rg.train_correction(batch, None, rg.TrainConfig(kind=kind, lr=1e-3, epochs=2, seed=0))
    enc = rg.TripletEncoder.from_dict(json.loads(json.dumps(rg.TripletEncoder().fit(
        batch.ctx, np.ones(len(batch.ctx)), np.zeros((2, 4), dtype=int), np.ones(2)).to_dict())))
    text = rg.model_to_json(kind, res.params, enc, {"lr": 1e-3})
    k2, params, enc2, cfg = rg.model_from_json(text)
    assert k2 == kind and cfg == {"lr": 1e-3}
    for k in res.params:
        assert np.array_equal(params[k], res.params[k])
    assert np.array_equal(enc2.ctx_mean, enc.ctx_mean)
    with pytest.raises(ValueError):
        rg.model_from_json(json.dumps({"format": "other", "version": 1}))
