import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlsn.autodiff import Graph, Tensor, grad_check
from mlsn.networks import ModelState, classify_node, feature_node
from mlsn.objectives import (
    ScheduleSpec,
    consistency_loss,
    cross_entropy,
    focal_loss,
    ramp_weight,
    similarity_loss,
    soft_cross_entropy,
    total_loss,
)
from mlsn.pseudo_labels import PairSample


def test_cross_entropy_values():
    onehot = np.eye(3)[[0, 2, 1]]
    assert cross_entropy(onehot, [0, 2, 1]) == pytest.approx(0.0, abs=1e-11)
    assert cross_entropy(np.full((4, 10), 0.1), [0, 3, 5, 9]) == pytest.approx(math.log(10), abs=1e-12)
    assert cross_entropy(np.array([[0.75, 0.25]]), [1]) == pytest.approx(1.386294361, abs=1e-9)
    with pytest.raises(ValueError):
        cross_entropy(np.full((1, 2), 0.5), [2])


def test_soft_cross_entropy_values():
    assert soft_cross_entropy(np.full((2, 4), 0.25), np.full((2, 4), 0.25)) == pytest.approx(math.log(4), abs=1e-12)
    assert soft_cross_entropy([[0.5, 0.5]], [[0.5, 0.5]]) == pytest.approx(math.log(2), abs=1e-12)
    probs = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
    assert soft_cross_entropy(probs, np.eye(3)[[1, 0]]) == cross_entropy(probs, [1, 0])
    with pytest.raises(ValueError):
        soft_cross_entropy(probs, [[0.5, 0.4, 0.0], [1.0, 0.0, 0.0]])


def test_consistency_values():
    p = np.array([[0.3, 0.7]])
    assert consistency_loss(p, p) == 0.0
    assert consistency_loss([[1.0, 0.0]], [[0.5, 0.5]]) == 0.25
    a, b = np.array([[0.9, 0.1], [0.2, 0.8]]), np.array([[0.4, 0.6], [0.5, 0.5]])
    assert consistency_loss(a, b) == consistency_loss(b, a)


def test_consistency_gradient_only_into_student():
    s = Tensor(np.array([[0.2, 0.8]]))
    teacher = np.array([[0.6, 0.4]])
    g = Graph()
    sn = g.param(s)
    tn = g.input(teacher)
    loss = consistency_loss(sn, tn)
    s.zero_grad()
    g.backward(loss)
    np.testing.assert_allclose(s.grad, (s.data - teacher) / 1.0, atol=1e-15)
    # the teacher operand is re-wrapped as a constant, so its node gets nothing
    assert tn.grad is None


def test_focal_values():
    assert focal_loss(1.0, 1, 2.0, 0.5) == pytest.approx(0.0, abs=1e-10)
    assert focal_loss(0.5, 1, 0.0, 0.5) == pytest.approx(0.5 * math.log(2), abs=1e-12)
    expected = 0.5 * 0.1**2 * -math.log(0.9)
    assert focal_loss(0.9, 1, 2.0, 0.5) == pytest.approx(expected, abs=1e-12)
    assert f"{focal_loss(0.9, 1, 2.0, 0.5):.5e}" == "5.26803e-04"
    with pytest.raises(ValueError):
        focal_loss(0.5, 1, -1.0, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.sampled_from([0, 1]))
def test_focal_gamma_zero_is_half_bce(p, t):
    bce = -(t * math.log(p) + (1 - t) * math.log(1 - p))
    assert focal_loss(p, t, 0.0, 0.5) == pytest.approx(0.5 * bce, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.98), st.floats(0.001, 0.01), st.floats(0, 4), st.floats(0.05, 0.95))
def test_focal_non_increasing_in_pt(p, dp, gamma, alpha):
    assert focal_loss(p + dp, 1, gamma, alpha) <= focal_loss(p, 1, gamma, alpha) + 1e-15
    assert focal_loss(1 - p - dp, 0, gamma, alpha) <= focal_loss(1 - p, 0, gamma, alpha) + 1e-15


@pytest.fixture
def state():
    return ModelState.initialize(3, 3, np.random.default_rng(5), feature_dim=4,
                                 h_hidden=(5,), s_hidden=(4,))


def test_similarity_loss_cases(state):
    feats = np.random.default_rng(0).uniform(0.1, 1.0, size=(4, 4))
    assert similarity_loss(state, [], feats) == 0.0
    for t in state.s_params.entries.values():
        t.data = np.zeros_like(t.data)
    one = similarity_loss(state, [PairSample(0, 1, 1)], feats, gamma=0.0, alpha_pos=0.5)
    assert one == pytest.approx(0.346574, abs=1e-6)
    with pytest.raises(IndexError):
        similarity_loss(state, [PairSample(0, 9, 1)], feats)


def test_similarity_loss_reversal_invariant(state):
    feats = np.random.default_rng(1).normal(size=(6, 4))
    pairs = [PairSample(0, 3, 1), PairSample(2, 5, 0), PairSample(1, 4, 1)]
    rev = [PairSample(p.j, p.i, p.target) for p in pairs]
    assert similarity_loss(state, pairs, feats) == similarity_loss(state, rev, feats)


def test_ramp_weight():
    spec = ScheduleSpec(2.0, 80)
    assert ramp_weight(spec, 80) == 2.0
    assert ramp_weight(spec, 500) == 2.0
    assert ramp_weight(spec, 0) == pytest.approx(2.0 * math.exp(-5), abs=1e-12)
    unit = ScheduleSpec(1.0, 80)
    vals = [ramp_weight(unit, t) for t in range(81)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(math.exp(-5) - 1e-15 <= v <= 1.0 for v in vals)


def test_total_loss():
    assert total_loss(1.5, 2, 3, 4, 0, 0, 0).total == 1.5
    assert total_loss(1, 2, 3, 4, 0.5, 0.5, 0.5).total == 5.5
    assert total_loss(0, 0, 0, 0, 1, 1, 1).total == 0.0
    a = total_loss(0.3, 0.7, 1.1, 0.2, 0.4, 0.6, 0.9)
    b = total_loss(0.3, 0.7, 1.1, 0.2, 0.4, 1.2, 0.9)
    assert b.total - a.total == pytest.approx(0.6 * 1.1, abs=1e-12)


def _network_loss(state, x, labels, teacher, pairs, targets, gamma):
    def build(g):
        f = feature_node(g, state, g.input(x))
        p = classify_node(g, state, f)
        parts = [
            cross_entropy(g.gather_rows(p, [0, 1]), labels),
            g.scalar_scale(consistency_loss(p, teacher), 0.7),
            g.scalar_scale(similarity_loss(state, pairs, f, gamma=gamma, alpha_pos=0.25), 0.9),
            g.scalar_scale(soft_cross_entropy(g.gather_rows(p, [2, 3]), targets), 0.3),
        ]
        out = parts[0]
        for part in parts[1:]:
            out = g.add(out, part)
        return out

    return build


@pytest.mark.parametrize("gamma", [0.0, 2.0])
def test_full_loss_grad_check(gamma):
    rng = np.random.default_rng(21)
    state = ModelState.initialize(3, 3, rng, feature_dim=4, h_hidden=(5,), s_hidden=(4,))
    for ps in state.param_sets().values():
        for name, t in ps.items():
            if name.startswith("b"):
                t.data = rng.uniform(0.05, 0.2, size=t.shape)
    x = rng.normal(size=(4, 3))
    teacher = rng.dirichlet(np.ones(3), size=4)
    targets = rng.dirichlet(np.ones(3), size=2)
    pairs = [PairSample(0, 1, 0), PairSample(1, 2, 1), PairSample(0, 3, 1), PairSample(2, 3, 0)]
    build = _network_loss(state, x, [0, 2], teacher, pairs, targets, gamma)
    err = grad_check(build, list(state.param_sets().values()), 1e-6)
    assert err < 1e-5
