import math

import numpy as np
import pytest

from reident_ens.ensemble import (EnsembleTransform, _Rank1Objective, apply_concatenation,
                                  fit_nn_triplet, fit_transform, fit_weighted_accuracy,
                                  fit_weighted_triplet, fit_zscore, majority_vote_ranking)
from reident_ens.errors import ValidationError
from reident_ens.neural import TrainConfig, dense_spec, init_network, train_siamese


def _clustered(n_subjects=10, views=5, d=8, spread=0.1, seed=0):
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(n_subjects, d))
    labels = np.repeat(np.arange(n_subjects), views)
    informative = centres[labels] + spread * rng.normal(size=(len(labels), d))
    noise = rng.normal(size=(len(labels), d))
    return informative, noise, labels


def test_zscore_population_std():
    stats = fit_zscore([np.array([[1.0], [2.0], [3.0]])])
    assert stats.means[0][0] == 2.0
    assert stats.stds[0][0] == pytest.approx(math.sqrt(2 / 3))


def test_constant_column_is_floored():
    x = np.column_stack([np.full(5, 4.0), np.arange(5.0)])
    stats = fit_zscore([x])
    assert stats.stds[0][0] == 1e-8
    assert np.all(apply_concatenation(stats, [x])[:, 0] == 0)


def test_concatenation_dims_and_centering():
    rng = np.random.default_rng(0)
    mats = [rng.normal(size=(20, d)) for d in (50, 50, 100)]
    stats = fit_zscore(mats[:2])
    assert sum(stats.dims) == 100
    stats = fit_zscore(mats)
    assert apply_concatenation(stats, [m[0] for m in mats]).shape == (200,)
    assert np.all(apply_concatenation(stats, stats.means) == 0)
    single = fit_zscore(mats[:1])
    assert np.allclose(apply_concatenation(single, mats[:1]),
                       (mats[0] - mats[0].mean(0)) / mats[0].std(0))


def test_zscore_needs_rows_and_matching_counts():
    with pytest.raises(ValidationError):
        fit_zscore([np.ones((1, 3))])
    with pytest.raises(ValidationError):
        fit_zscore([np.ones((4, 3)), np.ones((5, 3))])
    stats = fit_zscore([np.random.default_rng(0).normal(size=(4, 3))])
    with pytest.raises(ValidationError):
        apply_concatenation(stats, [np.ones(4)])


def _z(*mats):
    stats = fit_zscore(mats)
    return stats.normalize(mats)


def test_weighted_triplet_prefers_informative_model():
    inf, noise, labels = _clustered()
    w = fit_weighted_triplet(_z(inf, noise), labels, TrainConfig(learning_rate=0.01, epochs=100))
    assert w.alphas[0] > w.alphas[1]
    assert np.all(w.alphas >= 0)


def test_weighted_triplet_symmetry_and_null_update():
    inf, _, labels = _clustered()
    z = _z(inf, inf.copy())
    w = fit_weighted_triplet(z, labels, TrainConfig(learning_rate=0.01, epochs=30))
    assert abs(w.alphas[0] - w.alphas[1]) < 1e-6
    w0 = fit_weighted_triplet(z, labels, TrainConfig(learning_rate=0.0, epochs=5))
    assert w0.alphas.tolist() == [1.0, 1.0]


def test_weighted_accuracy_with_noise_model():
    inf, noise, labels = _clustered(spread=0.8, seed=2)
    z = _z(inf, noise)
    w = fit_weighted_accuracy(z, labels, budget=60, seed=1)
    assert w.alphas[1] <= w.alphas[0]
    alone = _Rank1Objective(z, labels, 1)(np.array([1.0, 0.0]))
    assert w.objective >= alone
    assert w.objective >= w.baseline_objective
    assert len(w.log) == 60


def test_weighted_accuracy_flat_objective_keeps_first_draw():
    inf, _, labels = _clustered()
    z = _z(inf, inf.copy(), inf.copy())
    w = fit_weighted_accuracy(z, labels, budget=30, seed=0)
    assert len(set(w.log)) == 1
    assert w.alphas.tolist() == [1.0, 1.0, 1.0]


def test_weighted_accuracy_budget_one():
    inf, noise, labels = _clustered()
    w = fit_weighted_accuracy(_z(inf, noise), labels, budget=1, seed=0)
    assert w.alphas.tolist() == [1.0, 1.0]
    assert w.log == [w.objective] == [w.baseline_objective]
    with pytest.raises(ValidationError):
        fit_weighted_accuracy(_z(inf), labels, budget=0)


def test_nn_triplet_zero_epochs_is_initialisation():
    inf, noise, labels = _clustered()
    cfg = TrainConfig(epochs=0, seed=3)
    model = fit_nn_triplet([inf, noise], labels, cfg, hidden=(6,), output_dim=4)
    init = init_network(dense_spec(16, (6,), 4), 3)
    assert all(np.array_equal(a, b) for a, b in zip(model.weights, init.weights))


def test_nn_triplet_single_model_is_plain_head():
    inf, _, labels = _clustered()
    cfg = TrainConfig(epochs=3, seed=1, learning_rate=0.01)
    a = fit_nn_triplet([inf], labels, cfg, hidden=(6,), output_dim=4)
    b = train_siamese(inf, labels, dense_spec(8, (6,), 4), cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))


def test_nn_triplet_loss_decreases():
    inf, noise, labels = _clustered(spread=0.5)
    model = fit_nn_triplet(_z(inf, noise), labels, TrainConfig(epochs=60, learning_rate=0.01))
    assert model.train_log[-1] < model.train_log[0]


def test_majority_vote_median_rule():
    # gallery of 10; item 0 ("A") ranked 1st, 1st, 9th; item 1 ("B") ranked 2nd everywhere
    base = np.arange(10, dtype=float)
    m1 = base.copy()
    m2 = base.copy()
    m3 = base.copy()
    m3[0], m3[8] = 8.0, 0.0  # swap A to position 9, item 8 to front
    order = majority_vote_ranking([m1, m2, m3]).tolist()
    assert order.index(0) < order.index(1)


def test_majority_vote_singleton_and_unanimity():
    d = np.random.default_rng(0).permutation(12).astype(float)
    assert majority_vote_ranking([d]).tolist() == np.argsort(d).tolist()
    assert majority_vote_ranking([d, d * 2, d + 1]).tolist() == np.argsort(d).tolist()


def test_transform_embed_and_rank_shapes():
    inf, noise, labels = _clustered()
    for kind in ("concatenation", "weighted_triplet", "weighted_accuracy", "nn_triplet",
                 "majority_vote"):
        t = fit_transform(kind, [inf, noise], labels, TrainConfig(epochs=2), budget=10)
        r = t.rank([inf[:3], noise[:3]], [inf[3:], noise[3:]])
        assert r.shape == (3, 47)
        assert all(sorted(row) == list(range(47)) for row in r.tolist())
    with pytest.raises(ValidationError):
        EnsembleTransform("majority_vote").embed([inf])
    with pytest.raises(ValidationError):
        EnsembleTransform("weighted_triplet", fit_zscore([inf]))
