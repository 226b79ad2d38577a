"""Finite-difference checks for every primitive and every composed loss."""
from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .autodiff import Graph, Node, ParamSet, Tensor, grad_check
from .networks import ModelState, classify_node, feature_node
from .objectives import consistency_loss, cross_entropy, similarity_loss, soft_cross_entropy
from .pseudo_labels import PairSample

TOLERANCE = 1e-5
EPSILON = 1e-6


class CheckResult(NamedTuple):
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _operands(seed: int = 7) -> tuple[Tensor, Tensor]:
    rng = np.random.default_rng(seed)

    def away(shape):
        # magnitudes in [0.2, 1.5]: clear of relu/abs kinks by far more than 1e-3
        return rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)

    return Tensor(away((3, 3))), Tensor(away((3, 3)))


PRIMITIVES: dict[str, Callable[[Graph, Node, Node], Node]] = {
    "affine": lambda g, a, b: g.affine(a, b, g.input(np.array([0.3, -0.2, 0.1]))),
    "relu": lambda g, a, b: g.relu(a),
    "sigmoid": lambda g, a, b: g.sigmoid(a),
    "softmax-rows": lambda g, a, b: g.softmax_rows(a),
    "concat-columns": lambda g, a, b: g.concat_columns(a, b),
    "elementwise-abs-diff": lambda g, a, b: g.abs_diff(a, g.scalar_add(b, 0.05)),
    "elementwise-product": lambda g, a, b: g.product(a, b),
    "add": lambda g, a, b: g.add(a, b),
    "sub": lambda g, a, b: g.sub(a, b),
    "reduce-mean": lambda g, a, b: g.reduce_mean(g.product(a, b)),
    "reduce-sum": lambda g, a, b: g.reduce_sum(g.product(a, b)),
    "log": lambda g, a, b: g.log(g.sigmoid(a)),
    "power": lambda g, a, b: g.power(g.sigmoid(a), 2.5),
    "scalar-scale": lambda g, a, b: g.scalar_scale(a, -1.7),
    "scalar-add": lambda g, a, b: g.scalar_add(a, 0.4),
    "clamp": lambda g, a, b: g.clamp(a, -5.0, 5.0),
    "gather-rows": lambda g, a, b: g.gather_rows(a, [2, 0, 2]),
}


def check_primitive(name: str, epsilon: float = EPSILON) -> CheckResult:
    a, b = _operands()
    op = PRIMITIVES[name]

    def build(g: Graph) -> Node:
        out = op(g, g.param(a), g.param(b))
        w = g.input(np.random.default_rng(11).normal(size=out.shape))
        return g.reduce_sum(g.product(out, w))

    return CheckResult(name, grad_check(build, ParamSet({"a": a, "b": b}), epsilon))


class _Fixture(NamedTuple):
    state: ModelState
    x: np.ndarray
    labels: list[int]
    teacher: np.ndarray
    pairs: list[PairSample]
    soft_targets: np.ndarray


def _fixture(seed: int = 21) -> _Fixture:
    """A 4-sample batch through a small three-network model."""
    rng = np.random.default_rng(seed)
    state = ModelState.initialize(3, 3, rng, feature_dim=4, h_hidden=(5,), s_hidden=(4,))
    for ps in state.param_sets().values():
        for name, t in ps.items():
            if name.startswith("b"):
                t.data = rng.uniform(0.05, 0.2, size=t.shape)
    return _Fixture(
        state,
        rng.normal(size=(4, 3)),
        [0, 2],
        rng.dirichlet(np.ones(3), size=4),
        [PairSample(0, 1, 0), PairSample(1, 2, 1), PairSample(0, 3, 1), PairSample(2, 3, 0)],
        rng.dirichlet(np.ones(3), size=2),
    )


def _loss_builder(fx: _Fixture, parts: tuple[str, ...], gamma: float = 2.0):
    weights = {"l_c": 1.0, "l_t": 0.7, "l_s": 0.9, "l_sc": 0.3}

    def build(g: Graph) -> Node:
        f = feature_node(g, fx.state, g.input(fx.x))
        p = classify_node(g, fx.state, f)
        terms = []
        for part in parts:
            if part == "l_c":
                t = cross_entropy(g.gather_rows(p, [0, 1]), fx.labels)
            elif part == "l_t":
                t = consistency_loss(p, fx.teacher)
            elif part == "l_s":
                t = similarity_loss(fx.state, fx.pairs, f, gamma=gamma, alpha_pos=0.25)
            else:
                t = soft_cross_entropy(g.gather_rows(p, [2, 3]), fx.soft_targets)
            terms.append(g.scalar_scale(t, weights[part]) if len(parts) > 1 else t)
        out = terms[0]
        for t in terms[1:]:
            out = g.add(out, t)
        return out

    return build


LOSS_CHECKS: dict[str, tuple[tuple[str, ...], float]] = {
    "L_C": (("l_c",), 2.0),
    "L_T": (("l_t",), 2.0),
    "L_S (gamma=0)": (("l_s",), 0.0),
    "L_S (gamma=2)": (("l_s",), 2.0),
    "L_SC": (("l_sc",), 2.0),
    "loss_total": (("l_c", "l_t", "l_s", "l_sc"), 2.0),
}


def check_loss(name: str, epsilon: float = EPSILON) -> CheckResult:
    parts, gamma = LOSS_CHECKS[name]
    fx = _fixture()
    params = list(fx.state.param_sets().values())
    return CheckResult(name, grad_check(_loss_builder(fx, parts, gamma), params, epsilon))


def run_suite(epsilon: float = EPSILON) -> list[CheckResult]:
    results = [check_primitive(name, epsilon) for name in PRIMITIVES]
    results += [check_loss(name, epsilon) for name in LOSS_CHECKS]
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  max_rel_error  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:13.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
