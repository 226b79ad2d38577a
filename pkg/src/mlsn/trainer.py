"""Mini-batch MLSN training, evaluation and multi-seed experiments."""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .autodiff import Graph, Tensor
from .data import Dataset, SSLSplit, WeakPairSet, gen_weak_pairs, split_ssl, standardize
from .networks import ModelState, classify_node, extract_features, feature_node, predict_proba
from .objectives import (
    ScheduleSpec,
    consistency_loss,
    cross_entropy,
    ramp_weight,
    similarity_loss,
    soft_cross_entropy,
    total_loss,
)
from .pseudo_labels import TRUE_LABEL, PairSample, sample_pairs, select_class_centers, soft_labels
from .teacher import TeacherState, ema_update, perturb, teacher_predict

STREAMS = ("init", "bl_shuffle", "bu_shuffle", "pairs", "centers", "noise_student",
           "noise_teacher", "weak")
METHODS = ("supervised", "mt", "mlsn")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one master seed."""
    return {
        name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))
        for name in STREAMS
    }


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    labeled_batch_size: int = 32
    learning_rate: float = 0.05
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    pairs_per_batch: int = -1  # -1 means 2 * batch_size
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    tau: float = 0.95
    lambda1_max: float = 1.0
    lambda2_max: float = 1.0
    lambda3_max: float = 0.3
    ramp1_epochs: int = -1  # -1 means 40% of epochs
    ramp2_epochs: int = -1
    ramp3_epochs: int = -1
    noise_sigma: float = 0.1
    alpha_max: float = 0.99
    seed: int = 0
    eval_with: str = "teacher"
    pseudo_source: str = "teacher"
    consistency_on: str = "all"
    enable_consistency: bool = True
    enable_similarity: bool = True
    enable_cotraining: bool = True
    weak_mix_pseudo: bool = False
    feature_dim: int = 32
    h_hidden: tuple[int, ...] = (64, 64)
    c_hidden: tuple[int, ...] = ()
    s_hidden: tuple[int, ...] = (32,)

    def problems(self) -> list[str]:
        """Every violated constraint, as ``field: reason`` strings."""
        out = []
        if self.epochs < 0:
            out.append("epochs: must be >= 0")
        if self.batch_size < 1:
            out.append("batch_size: must be positive")
        if not 1 <= self.labeled_batch_size <= self.batch_size:
            out.append("labeled_batch_size: must lie in [1, batch_size]")
        if not self.learning_rate > 0:
            out.append("learning_rate: must be positive")
        if self.optimizer not in ("sgd-momentum", "sgd"):
            out.append("optimizer: must be 'sgd-momentum' or 'sgd'")
        if not 0 <= self.momentum < 1:
            out.append("momentum: must lie in [0, 1)")
        if self.pairs_per_batch < -1:
            out.append("pairs_per_batch: must be >= 0 (or -1 for 2*batch_size)")
        if self.focal_gamma < 0:
            out.append("focal_gamma: must be >= 0")
        if not 0 < self.focal_alpha < 1:
            out.append("focal_alpha: must lie in (0, 1)")
        if self.tau < 0:
            out.append("tau: must be >= 0")
        for k in ("lambda1_max", "lambda2_max", "lambda3_max", "noise_sigma"):
            if getattr(self, k) < 0:
                out.append(f"{k}: must be >= 0")
        for k in ("ramp1_epochs", "ramp2_epochs", "ramp3_epochs"):
            v = getattr(self, k)
            if v == 0 or v < -1:
                out.append(f"{k}: must be positive (or -1 for 40% of epochs)")
        if not 0 <= self.alpha_max < 1:
            out.append("alpha_max: must lie in [0, 1)")
        if self.eval_with not in ("teacher", "student"):
            out.append("eval_with: must be 'teacher' or 'student'")
        if self.pseudo_source not in ("teacher", "student"):
            out.append("pseudo_source: must be 'teacher' or 'student'")
        if self.consistency_on not in ("all", "labeled", "unlabeled"):
            out.append("consistency_on: must be 'all', 'labeled' or 'unlabeled'")
        if self.feature_dim < 2:
            out.append("feature_dim: must be >= 2")
        if not self.h_hidden or min(self.h_hidden) < 1:
            out.append("h_hidden: must be a non-empty list of positive widths")
        for k in ("c_hidden", "s_hidden"):
            if any(w < 1 for w in getattr(self, k)):
                out.append(f"{k}: widths must be positive")
        return out

    def validate(self) -> None:
        errs = self.problems()
        if errs:
            raise ValueError("invalid TrainConfig: " + "; ".join(errs))

    @property
    def pairs_m(self) -> int:
        return 2 * self.batch_size if self.pairs_per_batch == -1 else self.pairs_per_batch

    def schedules(self) -> tuple[ScheduleSpec, ScheduleSpec, ScheduleSpec]:
        default = max(1, round(0.4 * self.epochs))
        ramps = [default if r == -1 else r for r in (self.ramp1_epochs, self.ramp2_epochs, self.ramp3_epochs)]
        return (ScheduleSpec(self.lambda1_max, ramps[0]), ScheduleSpec(self.lambda2_max, ramps[1]),
                ScheduleSpec(self.lambda3_max, ramps[2]))


def method_config(config: TrainConfig, method: str) -> TrainConfig:
    """Config variant for one row of the comparison table."""
    if method == "supervised":
        return replace(config, enable_consistency=False, enable_similarity=False, enable_cotraining=False)
    if method == "mt":
        return replace(config, enable_consistency=True, enable_similarity=False, enable_cotraining=False)
    if method == "mlsn":
        return replace(config, enable_consistency=True, enable_similarity=True, enable_cotraining=True)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


class SGD:
    """SGD with optional heavy-ball momentum and a constant learning rate."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.data = p.data - self.lr * v
            else:
                p.data = p.data - self.lr * p.grad


def make_optimizer(config: TrainConfig, state: ModelState) -> SGD:
    momentum = config.momentum if config.optimizer == "sgd-momentum" else 0.0
    return SGD([t for _, t in state.named_tensors()], config.learning_rate, momentum)


@dataclass
class MetricsRow:
    epoch: int
    l_c: float
    l_t: float
    l_s: float
    l_sc: float
    total: float
    lambda1: float
    lambda2: float
    lambda3: float
    train_error: float
    test_error: float


class TrainResult(NamedTuple):
    student: ModelState
    teacher: TeacherState
    metrics: list[MetricsRow]


def labeled_batches(n: int, size: int, rng: np.random.Generator):
    """Endless stream of index batches over ``n`` rows, reshuffled each pass."""
    buf = np.zeros(0, dtype=np.intp)
    while True:
        while buf.size < size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:size]
        buf = buf[size:]


def init_model(config: TrainConfig, input_dim: int, num_classes: int,
               rng: np.random.Generator) -> ModelState:
    return ModelState.initialize(input_dim, num_classes, rng, config.feature_dim,
                                 config.h_hidden, config.c_hidden, config.s_hidden)


def _eval_model(student: ModelState, teacher: TeacherState, eval_with: str) -> ModelState:
    return teacher.params if eval_with == "teacher" else student


def evaluate(model: ModelState | TeacherState, test: Dataset) -> float:
    """Fraction of rows whose argmax prediction misses the label (no perturbation)."""
    if len(test) == 0:
        raise ValueError("evaluate needs a non-empty test set")
    if not test.labeled_mask.all():
        raise ValueError("evaluate needs a fully labeled test set")
    state = model.params if isinstance(model, TeacherState) else model
    pred = np.argmax(predict_proba(state, test.features), axis=1)
    return float(np.mean(pred != test.labels))


@dataclass
class _WeakStream:
    i: np.ndarray  # training-row indices (labeled rows first, then unlabeled)
    j: np.ndarray
    same: np.ndarray


def _weak_stream(split: SSLSplit, weak: WeakPairSet) -> _WeakStream:
    pos = {int(r): k for k, r in enumerate(split.train_rows)}
    n_src = max(pos) + 1 if pos else 0
    limit = max(n_src, int(split.test_rows.max()) + 1 if split.test_rows.size else 0)
    if len(weak) and (weak.pairs[:, :2].min() < 0 or weak.pairs[:, :2].max() >= limit):
        raise IndexError("weak pair references a row outside the dataset")
    keep = [k for k, (a, b, _) in enumerate(weak.pairs.tolist()) if a in pos and b in pos]
    p = weak.pairs[keep] if keep else np.zeros((0, 3), dtype=np.int64)
    return _WeakStream(
        np.array([pos[int(a)] for a in p[:, 0]], dtype=np.intp),
        np.array([pos[int(b)] for b in p[:, 1]], dtype=np.intp),
        p[:, 2].astype(np.int64),
    )


def _train_step(cfg: TrainConfig, student: ModelState, teacher: TeacherState, opt: SGD,
                streams, lambdas, xl, yl, xu, train_x, weak: _WeakStream | None,
                mix_pseudo: bool, num_classes: int) -> tuple[float, float, float, float]:
    lam1, lam2, lam3 = lambdas
    nl, nu = xl.shape[0], xu.shape[0]
    use_t = lam1 > 0 and nu > 0
    use_s = lam2 > 0
    use_sc = lam3 > 0 and nu > 0
    joint = use_t or use_s or use_sc
    x = np.vstack([xl, xu]) if joint else xl

    g = Graph()
    feat = feature_node(g, student, g.input(perturb(x, cfg.noise_sigma, streams["noise_student"])))
    probs = classify_node(g, student, feat)
    probs_l = g.gather_rows(probs, np.arange(nl)) if joint else probs
    l_c = cross_entropy(probs_l, yl)
    total = l_c
    l_t = l_s = l_sc = None

    t_probs = None
    if use_t or ((use_s or use_sc) and cfg.pseudo_source == "teacher" and nu > 0):
        t_probs = teacher_predict(teacher, x, streams["noise_teacher"])
    pl_probs = (t_probs if cfg.pseudo_source == "teacher" else probs.value)
    pl_u = pl_probs[nl:] if pl_probs is not None else np.zeros((0, num_classes))
    conf_u = pl_u.max(axis=1) if nu else np.zeros(0)
    yhat_u = np.argmax(pl_u, axis=1) if nu else np.zeros(0, dtype=np.int64)

    if use_t:
        rows = {"all": np.arange(nl + nu), "labeled": np.arange(nl),
                "unlabeled": np.arange(nl, nl + nu)}[cfg.consistency_on]
        l_t = consistency_loss(g.gather_rows(probs, rows), t_probs[rows])
        total = g.add(total, g.scalar_scale(l_t, lam1))

    if use_s:
        if weak is not None:
            l_s = _weak_similarity_loss(cfg, g, student, streams, train_x, weak)
            if mix_pseudo:
                pairs = sample_pairs(nl, nu, cfg.pairs_m, conf_u, cfg.tau, streams["pairs"], yl, yhat_u)
                if len(pairs):
                    lp = similarity_loss(student, pairs, feat, cfg.focal_gamma, cfg.focal_alpha)
                    mw = min(cfg.pairs_m, len(weak.i))
                    w = len(pairs) / (len(pairs) + mw)
                    l_s = g.add(g.scalar_scale(l_s, 1.0 - w), g.scalar_scale(lp, w))
        else:
            pairs = sample_pairs(nl, nu, cfg.pairs_m, conf_u, cfg.tau, streams["pairs"], yl, yhat_u)
            l_s = similarity_loss(student, pairs, feat, cfg.focal_gamma, cfg.focal_alpha)
        total = g.add(total, g.scalar_scale(l_s, lam2))

    if use_sc:
        centers = select_class_centers(enumerate(yl.tolist()), streams["centers"], num_classes)
        gated = np.flatnonzero(conf_u >= cfg.tau)
        if centers.complete and gated.size:
            fv = feat.value
            y_sc = soft_labels(student, fv[nl + gated], centers, fv[centers.indices()])
            ce = soft_cross_entropy(g.gather_rows(probs, nl + gated), y_sc)
            l_sc = g.scalar_scale(ce, gated.size / nu)
            total = g.add(total, g.scalar_scale(l_sc, lam3))

    student.zero_grad()
    g.backward(total)
    opt.step()
    ema_update(teacher, student)
    val = lambda n: 0.0 if n is None else n.item()  # noqa: E731
    return l_c.item(), val(l_t), val(l_s), val(l_sc)


def _weak_similarity_loss(cfg, g, student, streams, train_x, weak: _WeakStream):
    n = len(weak.i)
    m = min(cfg.pairs_m, n)
    if m == 0:
        return g.input(np.zeros(1))
    pick = streams["weak"].choice(n, size=m, replace=False)
    ends, inv = np.unique(np.concatenate([weak.i[pick], weak.j[pick]]), return_inverse=True)
    xw = perturb(train_x[ends], cfg.noise_sigma, streams["noise_student"])
    fw = feature_node(g, student, g.input(xw))
    pairs = [PairSample(int(a), int(b), int(s), TRUE_LABEL)
             for a, b, s in zip(inv[:m], inv[m:], weak.same[pick])]
    return similarity_loss(student, pairs, fw, cfg.focal_gamma, cfg.focal_alpha)


def train(config: TrainConfig, split: SSLSplit, weak_pairs: WeakPairSet | None = None,
          trace: list | None = None) -> TrainResult:
    """Run MLSN mini-batch training.

    Each step draws a labeled batch (cycled, reshuffled every pass) and an
    unlabeled batch (one shuffled pass per epoch), builds the weighted sum of
    supervised, consistency, similarity and co-training losses, takes one
    optimizer step and refreshes the EMA teacher.  A loss whose ramped weight
    is zero (or whose branch is disabled) is not computed at all.
    """
    config.validate()
    nl_all, nu_all = len(split.labeled), len(split.unlabeled)
    if nl_all == 0:
        raise ValueError("training needs at least one labeled row")
    k = split.num_classes
    streams = rng_streams(config.seed)
    student = init_model(config, split.labeled.dim, k, streams["init"])
    teacher = TeacherState.from_student(student, config.alpha_max, config.noise_sigma)
    opt = make_optimizer(config, student)
    xl_all, yl_all = split.labeled.features, split.labeled.labels
    xu_all = split.unlabeled.features
    train_x = np.vstack([xl_all, xu_all])
    weak = _weak_stream(split, weak_pairs) if weak_pairs is not None else None

    bl = min(config.labeled_batch_size, nl_all)
    bu = config.batch_size - config.labeled_batch_size if nu_all else 0
    steps = math.ceil(nu_all / bu) if bu > 0 else math.ceil(nl_all / bl)
    bl_stream = labeled_batches(nl_all, bl, streams["bl_shuffle"])
    sched = config.schedules()
    flags = (config.enable_consistency, config.enable_similarity, config.enable_cotraining)
    metrics: list[MetricsRow] = []

    for epoch in range(config.epochs):
        lambdas = tuple(ramp_weight(s, epoch) if on else 0.0 for s, on in zip(sched, flags))
        mix = config.weak_mix_pseudo and epoch >= sched[1].ramp_epochs
        perm = streams["bu_shuffle"].permutation(nu_all) if nu_all else np.zeros(0, dtype=np.intp)
        sums = np.zeros(4)
        for step in range(steps):
            li = next(bl_stream)
            ui = perm[step * bu:(step + 1) * bu] if bu else perm[:0]
            comps = _train_step(config, student, teacher, opt, streams, lambdas,
                                xl_all[li], yl_all[li], xu_all[ui], train_x, weak, mix, k)
            sums += comps
            if trace is not None:
                trace.append({"epoch": epoch, "step": step, "labeled": li.copy(),
                              "unlabeled": ui.copy(), "losses": comps})
        means = sums / steps
        bd = total_loss(*means, *lambdas)
        model = _eval_model(student, teacher, config.eval_with)
        metrics.append(MetricsRow(
            epoch, bd.l_c, bd.l_t, bd.l_s, bd.l_sc, bd.total, *lambdas,
            evaluate(model, split.labeled),
            evaluate(model, split.test) if len(split.test) else float("nan"),
        ))
    return TrainResult(student, teacher, metrics)


def train_weak_label_mode(config: TrainConfig, split: SSLSplit, weak_pairs: WeakPairSet,
                          trace: list | None = None) -> TrainResult:
    """Like :func:`train`, but the similarity loss consumes weak pair labels."""
    return train(config, split, weak_pairs=weak_pairs, trace=trace)


# experiments


@dataclass
class SplitSpec:
    dataset: Dataset
    n_labeled: int
    test_fraction: float = 0.2
    stratified: bool = True
    fresh_per_seed: bool = True
    standardize: bool = True
    n_weak_pairs: int = 0
    split_seed: int = 0


def make_split(spec: SplitSpec, seed: int) -> SSLSplit:
    s = seed if spec.fresh_per_seed else spec.split_seed
    rng = np.random.default_rng(np.random.SeedSequence(s, spawn_key=(zlib.crc32(b"split"),)))
    split = split_ssl(spec.dataset, spec.n_labeled, spec.test_fraction, spec.stratified, rng)
    return standardize(split) if spec.standardize else split


def make_weak_pairs(spec: SplitSpec, split: SSLSplit, seed: int) -> WeakPairSet:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(b"weak-pairs"),)))
    return gen_weak_pairs(spec.dataset, spec.n_weak_pairs, rng, rows=split.train_rows)


@dataclass
class ExperimentSummary:
    errors: list[float]
    seeds: list[int] = field(default_factory=list)
    label: str = ""

    @property
    def n_runs(self) -> int:
        return len(self.errors)

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def std(self) -> float:
        return float(np.std(self.errors, ddof=1)) if self.n_runs > 1 else 0.0

    def as_dict(self) -> dict:
        return {"label": self.label, "seeds": list(self.seeds), "errors": list(self.errors),
                "mean": self.mean, "std": self.std, "n_runs": self.n_runs}


def run_experiment(config: TrainConfig, split_spec: SplitSpec, n_seeds: int,
                   label: str = "") -> ExperimentSummary:
    """Train on seeds ``config.seed .. config.seed + n_seeds - 1`` and summarize test error."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    errors, seeds = [], []
    for s in range(config.seed, config.seed + n_seeds):
        split = make_split(split_spec, s)
        cfg = replace(config, seed=s)
        weak = make_weak_pairs(split_spec, split, s) if split_spec.n_weak_pairs else None
        res = train(cfg, split, weak_pairs=weak)
        errors.append(evaluate(_eval_model(res.student, res.teacher, cfg.eval_with), split.test))
        seeds.append(s)
    return ExperimentSummary(errors, seeds, label)


def compare_methods(config: TrainConfig, split_spec: SplitSpec, n_seeds: int,
                    methods=METHODS) -> dict[str, ExperimentSummary]:
    """Paired-seed comparison: every method sees the same splits and initializations."""
    return {m: run_experiment(method_config(config, m), split_spec, n_seeds, label=m)
            for m in methods}


def format_summary(summaries: dict[str, ExperimentSummary]) -> str:
    lines = [f"{'method':<12} {'mean_err%':>10} {'std%':>8} {'runs':>5}"]
    for name, s in summaries.items():
        lines.append(f"{name:<12} {100 * s.mean:>10.2f} {100 * s.std:>8.2f} {s.n_runs:>5d}")
    return "\n".join(lines) + "\n"


def summary_json(summaries: dict[str, ExperimentSummary]) -> str:
    return json.dumps({k: v.as_dict() for k, v in summaries.items()}, indent=2, sort_keys=True) + "\n"


# artifacts

METRICS_HEADER = [f.name for f in fields(MetricsRow)]


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else format(v, ".12e")


def metrics_csv(rows: list[MetricsRow]) -> str:
    lines = [",".join(METRICS_HEADER)]
    for r in rows:
        lines.append(",".join(_fmt(v) for v in asdict(r).values()))
    return "\n".join(lines) + "\n"


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    Path(path).write_text(metrics_csv(rows))


def pca_project(features, n_components: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Projection onto the top principal axes and the axes themselves.

    Each axis is sign-fixed so that its largest-magnitude entry is positive.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.shape[0] < 2:
        raise ValueError("PCA needs at least two rows")
    centered = f - f.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:n_components].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    proj = centered @ comps.T
    proj -= proj.mean(axis=0)
    return proj, comps


@dataclass
class FeatureExport:
    features: np.ndarray
    projection: np.ndarray
    components: np.ndarray
    labels: np.ndarray


def export_features(student: ModelState, dataset: Dataset, teacher: TeacherState | None = None,
                    use_teacher: bool = False) -> FeatureExport:
    if use_teacher and teacher is None:
        raise ValueError("use_teacher requested but no teacher given")
    state = teacher.params if use_teacher else student
    feats = extract_features(state, dataset.features)
    proj, comps = pca_project(feats)
    return FeatureExport(feats, proj, comps, dataset.labels.copy())


def write_feature_csvs(export: FeatureExport, proj_path, feat_path) -> None:
    lines = ["id,pc1,pc2,label"]
    for k, ((a, b), y) in enumerate(zip(export.projection, export.labels)):
        lines.append(f"{k},{a:.12e},{b:.12e},{int(y)}")
    Path(proj_path).write_text("\n".join(lines) + "\n")
    p = export.features.shape[1]
    lines = ["id," + ",".join(f"f{j + 1}" for j in range(p))]
    for k, row in enumerate(export.features):
        lines.append(f"{k}," + ",".join(format(v, ".12e") for v in row))
    Path(feat_path).write_text("\n".join(lines) + "\n")
