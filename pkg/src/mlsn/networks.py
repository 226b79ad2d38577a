"""Feature extractor h, classification head C and similarity network S.

All three are multilayer perceptrons built on the autodiff tape.  The
similarity network reads the shared features of two samples through a
symmetric encoding, so ``S(a, b) == S(b, a)`` holds bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, Node, ParamSet, ShapeError, Tensor, glorot_uniform


@dataclass(frozen=True)
class FeatureExtractorSpec:
    input_dim: int
    hidden_widths: tuple[int, ...] = (64, 64)
    feature_dim: int = 32

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("hidden_widths must be a non-empty list of positive widths")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, self.feature_dim]


@dataclass(frozen=True)
class ClassifierSpec:
    feature_dim: int
    num_classes: int
    hidden_widths: tuple[int, ...] = ()

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def widths(self) -> list[int]:
        return [self.feature_dim, *self.hidden_widths, self.num_classes]


@dataclass(frozen=True)
class SimilarityNetSpec:
    feature_dim: int
    hidden_widths: tuple[int, ...] = (32,)

    @property
    def widths(self) -> list[int]:
        return [2 * self.feature_dim, *self.hidden_widths, 1]


def _init_mlp(widths: list[int], rng: np.random.Generator) -> ParamSet:
    ps = ParamSet()
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        ps[f"W{k}"] = Tensor(glorot_uniform(rng, fan_out, fan_in))
        ps[f"b{k}"] = Tensor(np.zeros(fan_out))
    return ps


def _check_params(ps: ParamSet, widths: list[int], tag: str) -> None:
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        if ps[f"W{k}"].shape != (fan_out, fan_in) or ps[f"b{k}"].shape != (fan_out,):
            raise ShapeError(f"{tag} layer {k} parameters do not match spec widths {widths}")
    if len(ps) != 2 * (len(widths) - 1):
        raise ShapeError(f"{tag} has {len(ps)} tensors, spec expects {2 * (len(widths) - 1)}")


@dataclass
class ModelState:
    h_spec: FeatureExtractorSpec
    c_spec: ClassifierSpec
    s_spec: SimilarityNetSpec
    h_params: ParamSet = field(default_factory=ParamSet)
    c_params: ParamSet = field(default_factory=ParamSet)
    s_params: ParamSet = field(default_factory=ParamSet)

    def __post_init__(self):
        if self.c_spec.feature_dim != self.h_spec.feature_dim:
            raise ValueError("classifier feature_dim differs from extractor feature_dim")
        if self.s_spec.feature_dim != self.h_spec.feature_dim:
            raise ValueError("similarity feature_dim differs from extractor feature_dim")

    @classmethod
    def initialize(
        cls,
        input_dim: int,
        num_classes: int,
        rng: np.random.Generator,
        feature_dim: int = 32,
        h_hidden: tuple[int, ...] = (64, 64),
        c_hidden: tuple[int, ...] = (),
        s_hidden: tuple[int, ...] = (32,),
    ) -> "ModelState":
        hs = FeatureExtractorSpec(input_dim, tuple(h_hidden), feature_dim)
        cs = ClassifierSpec(feature_dim, num_classes, tuple(c_hidden))
        ss = SimilarityNetSpec(feature_dim, tuple(s_hidden))
        return cls(hs, cs, ss, _init_mlp(hs.widths, rng), _init_mlp(cs.widths, rng),
                   _init_mlp(ss.widths, rng))

    def validate(self) -> None:
        _check_params(self.h_params, self.h_spec.widths, "feature extractor")
        _check_params(self.c_params, self.c_spec.widths, "classifier")
        _check_params(self.s_params, self.s_spec.widths, "similarity net")

    @property
    def num_classes(self) -> int:
        return self.c_spec.num_classes

    def param_sets(self) -> dict[str, ParamSet]:
        return {"h": self.h_params, "c": self.c_params, "s": self.s_params}

    def named_tensors(self):
        for group, ps in self.param_sets().items():
            for name, t in ps.items():
                yield f"{group}.{name}", t

    def zero_grad(self) -> None:
        for ps in self.param_sets().values():
            ps.zero_grad()

    def copy(self) -> "ModelState":
        return ModelState(self.h_spec, self.c_spec, self.s_spec, self.h_params.copy(),
                          self.c_params.copy(), self.s_params.copy())


def _mlp(g: Graph, ps: ParamSet, x: Node, n_layers: int, final_relu: bool) -> Node:
    out = x
    for k in range(n_layers):
        out = g.affine(out, g.param(ps[f"W{k}"]), g.param(ps[f"b{k}"]))
        if k < n_layers - 1 or final_relu:
            out = g.relu(out)
    return out


# graph builders


def feature_node(g: Graph, state: ModelState, x: Node) -> Node:
    if x.value.ndim != 2 or x.shape[1] != state.h_spec.input_dim:
        raise ShapeError(f"input has shape {x.shape}, extractor expects (n, {state.h_spec.input_dim})")
    return _mlp(g, state.h_params, x, len(state.h_spec.widths) - 1, final_relu=True)


def logits_node(g: Graph, state: ModelState, features: Node) -> Node:
    if features.value.ndim != 2 or features.shape[1] != state.c_spec.feature_dim:
        raise ShapeError(f"features have shape {features.shape}, head expects p={state.c_spec.feature_dim}")
    return _mlp(g, state.c_params, features, len(state.c_spec.widths) - 1, final_relu=False)


def classify_node(g: Graph, state: ModelState, features: Node) -> Node:
    return g.softmax_rows(logits_node(g, state, features))


def pair_featurize_node(g: Graph, fi: Node, fj: Node) -> Node:
    return g.concat_columns(g.abs_diff(fi, fj), g.product(fi, fj))


def similarity_node(g: Graph, state: ModelState, fi: Node, fj: Node) -> Node:
    """Similarity probabilities for row-aligned feature batches, shape ``(m, 1)``."""
    if fi.shape != fj.shape or fi.value.ndim != 2 or fi.shape[1] != state.s_spec.feature_dim:
        raise ShapeError(f"pair features {fi.shape} / {fj.shape} do not match p={state.s_spec.feature_dim}")
    z = _mlp(g, state.s_params, pair_featurize_node(g, fi, fj), len(state.s_spec.widths) - 1,
             final_relu=False)
    return g.sigmoid(z)


# array-level wrappers


def _as_rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(1, -1) if a.ndim == 1 else a


def extract_features(state: ModelState, x_batch) -> np.ndarray:
    g = Graph()
    return feature_node(g, state, g.input(_as_rows(x_batch))).value


def classify(state: ModelState, features) -> np.ndarray:
    g = Graph()
    return classify_node(g, state, g.input(_as_rows(features))).value


def predict_proba(state: ModelState, x_batch) -> np.ndarray:
    g = Graph()
    return classify_node(g, state, feature_node(g, state, g.input(_as_rows(x_batch)))).value


def pair_featurize(f_i, f_j) -> np.ndarray:
    fi, fj = np.asarray(f_i, dtype=np.float64), np.asarray(f_j, dtype=np.float64)
    if fi.shape != fj.shape:
        raise ShapeError(f"pair_featurize: lengths differ, {fi.shape} vs {fj.shape}")
    g = Graph()
    out = pair_featurize_node(g, g.input(_as_rows(fi)), g.input(_as_rows(fj))).value
    return out[0] if fi.ndim == 1 else out


def similarity(state: ModelState, f_i, f_j):
    """S on one pair (returns a float) or on row-aligned batches (returns ``(m,)``)."""
    fi, fj = np.asarray(f_i, dtype=np.float64), np.asarray(f_j, dtype=np.float64)
    g = Graph()
    out = similarity_node(g, state, g.input(_as_rows(fi)), g.input(_as_rows(fj))).value[:, 0]
    return float(out[0]) if fi.ndim == 1 else out


# checkpoint file
#
# Line-oriented text.  Hex floats keep the round trip bit-exact.
#   mlsn-checkpoint 1
#   spec h <input_dim> <hidden,...> <feature_dim>
#   spec c <num_classes> <hidden,...|->
#   spec s <hidden,...|->
#   meta <key> <value>
#   tensor <name> <dim,dim,...> <hex> <hex> ...

CHECKPOINT_MAGIC = "mlsn-checkpoint 1"


def _widths_str(w) -> str:
    return ",".join(str(v) for v in w) if w else "-"


def _parse_widths(s: str) -> tuple[int, ...]:
    return () if s == "-" else tuple(int(v) for v in s.split(","))


def save_checkpoint(path, state: ModelState, extra: dict[str, ModelState] | None = None,
                    meta: dict[str, str] | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write ``state`` (prefix ``student``) plus optional mirrored states and arrays."""
    lines = [
        CHECKPOINT_MAGIC,
        f"spec h {state.h_spec.input_dim} {_widths_str(state.h_spec.hidden_widths)} {state.h_spec.feature_dim}",
        f"spec c {state.c_spec.num_classes} {_widths_str(state.c_spec.hidden_widths)}",
        f"spec s {_widths_str(state.s_spec.hidden_widths)}",
    ]
    for k, v in (meta or {}).items():
        lines.append(f"meta {k} {v}")

    def emit(name, arr):
        arr = np.asarray(arr, dtype=np.float64)
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {shape} " + " ".join(float(v).hex() for v in arr.reshape(-1)))

    models = {"student": state, **(extra or {})}
    for prefix, m in models.items():
        for name, t in m.named_tensors():
            emit(f"{prefix}.{name}", t.data)
    for name, arr in (arrays or {}).items():
        emit(f"array.{name}", arr)
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Checkpoint:
    models: dict[str, ModelState]
    meta: dict[str, str]
    arrays: dict[str, np.ndarray]


def load_checkpoint(path) -> Checkpoint:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an mlsn checkpoint")
    specs, meta, tensors = {}, {}, {}
    for lineno, line in enumerate(text[1:], start=2):
        parts = line.split(" ")
        if parts[0] == "spec":
            specs[parts[1]] = parts[2:]
        elif parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "tensor":
            shape = tuple(int(d) for d in parts[2].split(",")) if parts[2] else ()
            vals = np.array([float.fromhex(v) for v in parts[3:]], dtype=np.float64)
            if vals.size != int(np.prod(shape)):
                raise ValueError(f"{path}:{lineno}: tensor {parts[1]} has wrong value count")
            tensors[parts[1]] = vals.reshape(shape)
        elif line.strip():
            raise ValueError(f"{path}:{lineno}: unrecognised record {parts[0]!r}")
    h = specs["h"]
    hs = FeatureExtractorSpec(int(h[0]), _parse_widths(h[1]), int(h[2]))
    cs = ClassifierSpec(hs.feature_dim, int(specs["c"][0]), _parse_widths(specs["c"][1]))
    ss = SimilarityNetSpec(hs.feature_dim, _parse_widths(specs["s"][0]))
    models: dict[str, ModelState] = {}
    arrays = {}
    for name, arr in tensors.items():
        prefix, rest = name.split(".", 1)
        if prefix == "array":
            arrays[rest] = arr
            continue
        m = models.setdefault(prefix, ModelState(hs, cs, ss))
        group, pname = rest.split(".", 1)
        m.param_sets()[group][pname] = Tensor(arr)
    for m in models.values():
        m.validate()
    return Checkpoint(models, meta, arrays)
