import json
import math

import numpy as np
import pytest

from hemisit import ops
from hemisit.errors import ConfigurationError, InputError
from hemisit.heads import (Classifier, MetricsReport, auc_rank, classify, combine_losses, compute_metrics,
                           joint_loss)
from hemisit.tensor import Tensor

from conftest import grad_error, param


def head(seed=0):
    return Classifier(np.random.default_rng(seed))


def test_zero_head_is_uniform():
    h = head()
    for p in h.parameters():
        p.data[:] = 0
    np.testing.assert_array_equal(classify(Tensor(np.ones((3, 128))), h).data, np.full((3, 2), 0.5))


def test_probabilities_sum_to_one(rng):
    probs = classify(Tensor(rng.standard_normal((16, 128)) * 5), head()).data
    assert np.all(np.abs(probs.sum(1) - 1) < 1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_head_gradient(seed):
    rng = np.random.default_rng(seed)
    h = Classifier(rng, d_in=6, hidden=5)
    g = param(rng, 3, 6)
    fn = lambda: ops.cross_entropy(h(g), [0, 1, 1])
    assert grad_error(fn, [g] + h.parameters()) < 1e-4


def test_classify_is_token_order_invariant(rng):
    toks = rng.standard_normal((1, 10, 128))
    perm = rng.permutation(10)
    a = classify(ops.mean(Tensor(toks), axis=1), head()).data
    b = classify(ops.mean(Tensor(toks[:, perm]), axis=1), head()).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_joint_loss_uniform_logits():
    z = Tensor(np.zeros((4, 2)))
    total, parts = joint_loss(z, z, z, [0, 1, 0, 1])
    assert total.item() == pytest.approx(1.5 * math.log(2), abs=1e-12)
    assert total.item() == pytest.approx(1.0397, abs=1e-4)
    assert parts["loss_all"].item() == pytest.approx(math.log(2), abs=1e-15)


def test_zero_weights_give_main_loss_exactly(rng):
    zl, zr, za = (Tensor(rng.standard_normal((5, 2))) for _ in range(3))
    total, parts = joint_loss(zl, zr, za, [0, 1, 1, 0, 1], lam=0, gam=0)
    assert total.item() == parts["loss_all"].item()


def test_combine_is_linear(rng):
    a, b, c = (float(x) for x in rng.random(3) * 3)
    for lam, gam in [(0.25, 0.25), (1.0, 0.0), (0.3, 0.9)]:
        t = combine_losses(Tensor(np.array(a)), Tensor(np.array(b)), Tensor(np.array(c)), lam, gam).item()
        assert abs(t - (lam * a + gam * b + c)) < 1e-12


def test_negative_weight_rejected():
    z = Tensor(np.zeros((1, 2)))
    with pytest.raises(ConfigurationError):
        joint_loss(z, z, z, [0], lam=-0.1)


def test_confusion_definitions():
    scores = [0.9, 0.8, 0.7, 0.2, 0.1, 0.3, 0.4, 0.45]
    labels = [1, 1, 1, 1, 0, 0, 0, 0]
    r = compute_metrics(scores, labels)
    assert (r.tp, r.fn, r.tn, r.fp) == (3, 1, 4, 0)
    assert (r.acc, r.sen, r.spe) == (0.875, 0.75, 1.0)


def test_threshold_is_inclusive():
    r = compute_metrics([0.5, 0.49], [1, 0])
    assert (r.tp, r.tn) == (1, 1)


def test_separated_scores_auc_one():
    assert auc_rank([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def _brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    hits = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return hits / (len(pos) * len(neg))


@pytest.mark.parametrize("seed", range(50))
def test_auc_matches_pair_count(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, 20)
    labels[:2] = [0, 1]
    scores = np.round(rng.random(20), 1)  # coarse values force ties
    assert auc_rank(scores, labels) == _brute_auc(scores.tolist(), labels.tolist())


@pytest.mark.parametrize("seed", range(10))
def test_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, 30)
    labels[:2] = [0, 1]
    scores = rng.random(30)
    assert auc_rank(scores ** 3, labels) == auc_rank(scores, labels)


def test_single_class_is_nan_not_zero():
    r = compute_metrics([0.2, 0.7], [1, 1])
    assert math.isnan(r.auc) and math.isnan(r.spe)
    assert r.sen == 0.5
    d = json.loads(r.to_json())
    assert d["auc"] is None and d["spe"] is None
    back = MetricsReport.from_dict(d)
    assert math.isnan(back.auc) and back.sen == 0.5


def test_metric_input_errors():
    with pytest.raises(InputError):
        compute_metrics([0.1], [0, 1])
    with pytest.raises(InputError):
        compute_metrics([], [])
    with pytest.raises(InputError):
        compute_metrics([0.3], [2])
