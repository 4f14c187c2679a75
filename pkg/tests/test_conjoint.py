import math

import numpy as np
import pytest

from aem import generation as gen
from aem.conjoint import (
    CorrectionModel, FeatureLayout, correction_loss_grad, fit_correction, predict_soft_choices,
)


def rows(n, k=3, q=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, k, q)), rng.integers(0, k + 1, n)


def test_identity_mapping_is_learned():
    X, z = rows(400)
    model = fit_correction(X, z, z, lam=1e-4)
    pred = predict_soft_choices(model, X, z)
    assert np.array_equal(pred.argmax(axis=1), z)
    assert np.allclose(pred.sum(axis=1), 1.0, atol=1e-9)


def test_no_signal_gives_uniform():
    X, z = rows(10_000, seed=1)
    y = np.random.default_rng(2).integers(0, 4, 10_000)
    pred = predict_soft_choices(fit_correction(X, y, z), X, z)
    # rows scatter around uniform from estimation noise; on average they sit within 0.02
    assert np.abs(pred - 0.25).mean() <= 0.02
    assert np.abs(pred.mean(axis=0) - 0.25).max() <= 0.02


def test_beats_predict_z_baseline_on_held_out_rows():
    cfg = gen.ConjointConfig(n_primary=300, n_aux=600, distortion=gen.DistortionSpec(scale=0.5, shift=(0.5,) * 6), seed=3)
    d = gen.make_conjoint_dataset(cfg)
    model = fit_correction(d.X_primary, d.y_primary, d.z_primary)
    pred = predict_soft_choices(model, d.X_aux, d.z_aux)
    n = len(d.z_aux)
    ll_model = -np.mean(np.log(pred[np.arange(n), d.y_aux_hidden]))
    # "predict z" baseline: the agent's choice with the smallest smoothing that keeps log-loss finite
    eps = 1e-3
    base = np.full(pred.shape, eps / 4)
    base[np.arange(n), d.z_aux] = 1 - eps
    ll_base = -np.mean(np.log(base[np.arange(n), d.y_aux_hidden]))
    assert ll_model <= ll_base


def test_duplicate_rows_and_zero_model():
    X, z = rows(5, seed=4)
    model = fit_correction(X, z, z)
    twice = predict_soft_choices(model, np.concatenate([X, X]), np.concatenate([z, z]))
    assert np.array_equal(twice[:5], twice[5:])
    layout = FeatureLayout(3, 2)
    zero = CorrectionModel(np.zeros((4, layout.dim)), np.zeros(4), layout, 1e-4)
    assert np.allclose(predict_soft_choices(zero, X, z), 0.25)


def test_two_class_logistic_closed_form():
    # one option, one attribute; classes (option, outside); only the x coefficient of class 0 is nonzero
    layout = FeatureLayout(1, 1)
    coef = np.zeros((2, layout.dim))
    coef[0, 0] = 1.5
    model = CorrectionModel(coef, np.array([0.2, 0.0]), layout, 0.0)
    x = 0.7
    p = predict_soft_choices(model, np.array([[[x]]]), np.array([1]))
    assert p[0, 0] == pytest.approx(1 / (1 + math.exp(-(1.5 * x + 0.2))), abs=1e-15)


def test_dimension_mismatch():
    X, z = rows(20)
    model = fit_correction(X, z, z)
    with pytest.raises(ValueError):
        predict_soft_choices(model, np.zeros((2, 4, 2)), np.zeros(2, dtype=int))


@pytest.mark.parametrize("point", range(10))
@pytest.mark.parametrize("interactions", [False, True])
def test_gradient_matches_finite_differences(point, interactions):
    rng = np.random.default_rng(50 + point)
    X, z = rows(40, seed=point)
    layout = FeatureLayout(3, 2, interactions)
    D = layout.design(X, z)
    Y = np.eye(4)[rng.integers(0, 4, 40)]
    theta = rng.normal(size=4 * (layout.dim + 1))
    _, g = correction_loss_grad(theta, D, Y, 1e-2)
    h = 1e-6
    num = np.array([(correction_loss_grad(theta + h * e, D, Y, 1e-2)[0] - correction_loss_grad(theta - h * e, D, Y, 1e-2)[0]) / (2 * h)
                    for e in np.eye(theta.size)])
    assert np.linalg.norm(num - g) / np.linalg.norm(num) <= 1e-5


def test_loss_history_non_increasing_and_outside_class_kept():
    X, _ = rows(300, seed=5)
    y = np.random.default_rng(6).integers(0, 3, 300)  # outside never chosen
    model = fit_correction(X, y, y)
    hist = np.asarray(model.metadata["loss_history"])
    assert np.all(np.diff(hist) <= 1e-12)
    assert model.coef.shape[0] == 4 and model.metadata["classes_seen"][3] == 0


def test_row_permutation_invariance():
    X, z = rows(500, seed=7)
    y = np.random.default_rng(8).integers(0, 4, 500)
    a = fit_correction(X, y, z, tol=1e-10)
    perm = np.random.default_rng(9).permutation(500)
    b = fit_correction(X[perm], y[perm], z[perm], tol=1e-10)
    assert np.linalg.norm(a.coef - b.coef) < 1e-6


def test_separation_is_flagged_without_regularization():
    X, z = rows(60, seed=10)
    model = fit_correction(X, z, z, lam=0.0, max_iter=200)
    assert model.metadata["separation"]


def test_json_round_trip_and_profile_flag():
    X, z = rows(50, seed=11)
    prof = np.random.default_rng(12).normal(size=(50, 2))
    model = fit_correction(X, z, z, interactions=True, profile=prof)
    back = CorrectionModel.from_json(model.to_json())
    assert np.array_equal(back.coef, model.coef) and back.layout == model.layout
    assert np.array_equal(predict_soft_choices(back, X, z, prof), predict_soft_choices(model, X, z, prof))
    with pytest.raises(ValueError):
        predict_soft_choices(model, X, z)
