"""Training, evaluation, cross-validation and ablation grids.

A model is an optional shared encoder applied to both members of a pair,
followed by a head (the GKR network or one of the baselines). Encoder and
head are trained jointly with Adam on the class-balanced BCE loss.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from . import baselines, gkrnet
from .data import (
    RELATIONS,
    FeatureTable,
    Pair,
    PairSet,
    build_negative_set,
    pair_arrays,
)
from .diffmath import Adam, Tape, UsageError, Var, sigmoid
from .gkrnet import class_balanced_bce, mlp, uniform_fan_in

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHECKPOINT_KIND = "gkr-pair-model"
HEAD_OPTIONS = {
    "gkr": {"layer_dims", "central_init", "aggregator", "readout_hidden", "bias"},
    "cosine": set(),
    "mlp": {"hidden", "bias"},
    "metric": {"rank"},
}
MODEL_KINDS = ("gkr",) + baselines.KINDS
KIND_LABELS = {"cosine": "Cos", "mlp": "MLP", "gkr": "ours", "metric": "Metric"}
AGGREGATOR_LABELS = {"mean": "Mean", "max": "Max"}


class NumericError(RuntimeError):
    pass


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "identity"
    hidden: tuple[int, ...] = ()
    output_dim: int | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "shared_mlp"):
            raise UsageError(f"encoder kind must be identity or shared_mlp, got {self.kind!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind == "shared_mlp" and (self.output_dim is None or self.output_dim < 1):
            raise UsageError("shared_mlp encoder needs a positive output_dim")

    def out_dim(self, input_dim: int) -> int:
        return input_dim if self.kind == "identity" else int(self.output_dim)

    def to_dict(self) -> dict:
        if self.kind == "identity":
            return {"kind": "identity"}
        return {"kind": self.kind, "hidden": list(self.hidden), "output_dim": self.output_dim}


@dataclass(frozen=True)
class TrainConfig:
    """Everything needed to reproduce a run. JSON form: see :meth:`to_dict`."""

    model: dict = field(default_factory=lambda: {"kind": "gkr"})
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    lr: float = 0.0005
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    resample_negatives: bool = False
    precision: str = "float64"

    def __post_init__(self):
        kind = self.model.get("kind")
        if kind not in MODEL_KINDS:
            raise UsageError(f"model.kind must be one of {', '.join(MODEL_KINDS)}, got {kind!r}")
        if self.precision not in ("float64", "float32"):
            raise UsageError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise UsageError("batch_size must be >= 1, epochs >= 0 and lr >= 0")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_dict(self) -> dict:
        return {
            "model": dict(self.model),
            "encoder": self.encoder.to_dict(),
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "resample_negatives": self.resample_negatives,
            "precision": self.precision,
            "adam": {"beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {"model", "encoder", "lr", "batch_size", "epochs", "seed", "resample_negatives", "precision", "adam", "data"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        kw = {k: d[k] for k in known - {"encoder", "adam", "data"} if k in d}
        if "model" in kw:
            kw["model"] = _normalize_model(kw["model"])
        if "encoder" in d:
            enc = dict(d["encoder"])
            kw["encoder"] = EncoderSpec(
                kind=enc.get("kind", "identity"), hidden=tuple(enc.get("hidden", ())), output_dim=enc.get("output_dim")
            )
        return cls(**kw)

    def with_model(self, **overrides) -> "TrainConfig":
        return replace(self, model=_normalize_model({**self.model, **overrides}))


def _normalize_model(m: dict) -> dict:
    m = dict(m)
    if "central_init" in m:
        m["central_init"] = gkrnet.parse_central_init(m["central_init"])
    return m


# ------------------------------------------------------------------- model


class PairModel:
    """Shared encoder + head. Parameters live in one flat dict; encoder
    entries are prefixed ``enc.``."""

    def __init__(self, config: TrainConfig, input_dim: int):
        self.config = config
        self.input_dim = input_dim
        self.encoder = config.encoder
        self.kind = config.model["kind"]
        head_dim = self.encoder.out_dim(input_dim)
        opts = {k: v for k, v in config.model.items() if k != "kind"}
        allowed = HEAD_OPTIONS[self.kind]
        unknown = sorted(set(opts) - allowed - {"dim"})
        if unknown:
            raise UsageError(f"unknown option(s) for model kind {self.kind}: {', '.join(unknown)}")
        if "dim" in opts and opts.pop("dim") != head_dim:
            raise UsageError(
                f"model dim {config.model['dim']} does not match the encoder output dim {head_dim}"
            )
        if self.kind == "gkr":
            self.head = gkrnet.GkrConfig(dim=head_dim, **opts)
        else:
            self.head = baselines.BaselineSpec(kind=self.kind, dim=head_dim, **opts)

    @property
    def label(self) -> str:
        return KIND_LABELS[self.kind]

    def encoder_shapes(self) -> dict[str, tuple[int, int]]:
        if self.encoder.kind == "identity":
            return {}
        sizes = (self.input_dim,) + self.encoder.hidden + (self.encoder.output_dim,)
        return {f"enc.{i}.W": (sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)}

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        head = gkrnet.param_shapes(self.head) if self.kind == "gkr" else baselines.param_shapes(self.head)
        return {**self.encoder_shapes(), **head}

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        dtype = self.config.dtype
        enc_rng, head_seed = np.random.default_rng([seed, 0]), seed
        params = uniform_fan_in(enc_rng, self.encoder_shapes(), dtype)
        if self.kind == "gkr":
            params.update(gkrnet.init_params(self.head, head_seed, dtype))
        else:
            params.update(baselines.init_params(self.head, head_seed, dtype))
        return params

    def encode(self, p: dict[str, Var], f) -> Var:
        f = f if isinstance(f, Var) else Var(f)
        if self.encoder.kind == "identity":
            return f
        n = len(self.encoder.hidden) + 1
        return mlp(f, [p[f"enc.{i}.W"] for i in range(n)], [None] * n)

    def logits(self, p: dict[str, Var], fx, fy) -> Var:
        ex, ey = self.encode(p, fx), self.encode(p, fy)
        if self.kind == "gkr":
            return gkrnet.logits(ex, ey, p, self.head)
        return baselines.logits(ex, ey, p, self.head)

    def loss(self, p: dict[str, Var], fx, fy, labels) -> Var:
        return class_balanced_bce(self.logits(p, fx, fy), labels)

    def probabilities(self, params: dict[str, np.ndarray], fx, fy) -> np.ndarray:
        p = {k: Var(v) for k, v in params.items()}
        return sigmoid(self.logits(p, fx, fy).value)

    def describe(self) -> dict:
        head = self.head.to_dict()
        return {"kind": self.kind, "head": head, "encoder": self.encoder.to_dict(), "input_dim": self.input_dim}


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: PairModel, params: dict[str, np.ndarray]) -> None:
    """JSON checkpoint. Values are written with repr, so a float64 round
    trip is exact."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": CHECKPOINT_KIND,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "input_dim": model.input_dim,
        "params": {
            name: {"shape": list(v.shape), "values": [float(x) for x in v.ravel()]} for name, v in params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path) -> tuple[PairModel, dict[str, np.ndarray]]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not a JSON checkpoint ({e})") from None
    if not isinstance(doc, dict) or doc.get("kind") != CHECKPOINT_KIND:
        raise UsageError(f"{path}: not a model checkpoint (missing kind {CHECKPOINT_KIND!r})")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise UsageError(f"{path}: unsupported checkpoint schema_version {doc.get('schema_version')!r}")
    config = TrainConfig.from_dict(doc["config"])
    model = PairModel(config, int(doc["input_dim"]))
    shapes = model.param_shapes()
    params = {}
    for name, entry in doc["params"].items():
        if name not in shapes:
            raise UsageError(f"{path}: unexpected parameter {name!r}")
        arr = np.asarray(entry["values"], dtype=config.dtype).reshape(entry["shape"])
        if arr.shape != tuple(shapes[name]):
            raise UsageError(f"{path}: parameter {name} has shape {arr.shape}, expected {tuple(shapes[name])}")
        params[name] = arr
    missing = sorted(set(shapes) - set(params))
    if missing:
        raise UsageError(f"{path}: missing parameter(s) {', '.join(missing)}")
    return model, params


# ------------------------------------------------------------------ metrics


@dataclass
class Metrics:
    n: int
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    per_relation: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def score(probabilities: np.ndarray, pairs: Sequence[Pair], threshold: float = 0.5) -> Metrics:
    """Confusion counts for ``probability >= threshold`` -> kin."""
    y = np.array([p.label for p in pairs])
    pred = (np.asarray(probabilities) >= threshold).astype(int)
    rel = np.array([p.relation for p in pairs])
    per_rel = {}
    for r in _ordered_relations(rel):
        m = rel == r
        per_rel[r] = {"n": int(m.sum()), "correct": int((pred[m] == y[m]).sum())}
        per_rel[r]["accuracy"] = per_rel[r]["correct"] / per_rel[r]["n"]
    n = len(y)
    return Metrics(
        n=n,
        accuracy=float((pred == y).mean()) if n else float("nan"),
        tp=int(((pred == 1) & (y == 1)).sum()),
        fp=int(((pred == 1) & (y == 0)).sum()),
        tn=int(((pred == 0) & (y == 0)).sum()),
        fn=int(((pred == 0) & (y == 1)).sum()),
        per_relation=per_rel,
    )


def _ordered_relations(rels) -> list[str]:
    present = set(rels)
    return [r for r in RELATIONS if r in present] + sorted(present - set(RELATIONS))


def evaluate(
    model: PairModel,
    params: dict[str, np.ndarray],
    pairs: Sequence[Pair],
    features: FeatureTable,
    threshold: float = 0.5,
) -> Metrics:
    fx, fy, _ = pair_arrays(pairs, features)
    dtype = model.config.dtype
    probs = model.probabilities(params, fx.astype(dtype), fy.astype(dtype))
    return score(probs, pairs, threshold)


# ------------------------------------------------------------------ training


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainReport:
    history: list[EpochRecord]
    config: dict
    model: dict
    n_train: int
    wall_seconds: float = 0.0

    @property
    def initial_loss(self) -> float:
        return self.history[0].loss

    @property
    def final_loss(self) -> float:
        return self.history[-1].loss

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "model": self.model,
            "n_train": self.n_train,
            "history": [asdict(h) for h in self.history],
        }
        if include_timing:
            d["wall_seconds"] = self.wall_seconds
        return d


def _seed_for(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _full_loss(model: PairModel, params, fx, fy, y) -> tuple[float, float]:
    p = {k: Var(v) for k, v in params.items()}
    z = model.logits(p, fx, fy)
    loss = float(class_balanced_bce(z, y).value)
    acc = float(((sigmoid(z.value) >= 0.5).astype(int) == y).mean())
    return loss, acc


def train(
    config: TrainConfig,
    pairset: PairSet,
    features: FeatureTable,
    train_folds: Sequence[int] | None = None,
    init_seed: int | None = None,
) -> tuple[PairModel, dict[str, np.ndarray], TrainReport]:
    """Fit ``config``'s model on the pairs in ``train_folds`` (all pairs when None).

    History holds one record per epoch, plus epoch 0 before any update; each
    record is the class-balanced loss and accuracy over the full training set.
    """
    start = time.perf_counter()
    pairs = pairset.pairs if train_folds is None else pairset.in_folds(train_folds)
    if not pairs:
        raise UsageError("no training pairs")
    model = PairModel(config, features.dim)
    seed = config.seed if init_seed is None else init_seed
    params = model.init_params(seed)
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng(_seed_for(seed, 1))
    dtype = config.dtype

    positives = [p for p in pairs if p.label == 1]
    fixed_negatives = [p for p in pairs if p.label == 0]

    def arrays_for(ps):
        fx, fy, y = pair_arrays(ps, features)
        return fx.astype(dtype), fy.astype(dtype), y

    fx, fy, y = arrays_for(pairs)
    history = [EpochRecord(0, *_full_loss(model, params, fx, fy, y))]
    for epoch in range(1, config.epochs + 1):
        if config.resample_negatives and epoch > 1:
            negs = build_negative_set(positives, _seed_for(seed, 2, epoch))
            fx, fy, y = arrays_for(positives + negs)
        order = rng.permutation(len(y))
        for b, s in enumerate(range(0, len(y), config.batch_size)):
            idx = order[s : s + config.batch_size]
            tape = Tape()
            loss = model.loss(tape.params_from(params), fx[idx], fy[idx], y[idx])
            if not np.isfinite(loss.value):
                raise NumericError(f"loss became {float(loss.value)} at epoch {epoch}, batch {b + 1}")
            grads = tape.backward(loss)
            opt.step(params, grads)
        if config.resample_negatives:
            fx, fy, y = arrays_for(positives + fixed_negatives)
        loss_val, acc = _full_loss(model, params, fx, fy, y)
        if not math.isfinite(loss_val):
            raise NumericError(f"training loss became {loss_val} after epoch {epoch}")
        history.append(EpochRecord(epoch, loss_val, acc))
    report = TrainReport(
        history=history,
        config=config.to_dict(),
        model=model.describe(),
        n_train=len(pairs),
        wall_seconds=time.perf_counter() - start,
    )
    return model, params, report


# --------------------------------------------------------------- crossval


@dataclass
class FoldResult:
    fold: int
    n_train: int
    metrics: Metrics
    history: list[EpochRecord]

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "n_train": self.n_train,
            "n_test": self.metrics.n,
            "accuracy": self.metrics.accuracy,
            "confusion": {k: getattr(self.metrics, k) for k in ("tp", "fp", "tn", "fn")},
            "per_relation": self.metrics.per_relation,
            "initial_train_loss": self.history[0].loss,
            "final_train_loss": self.history[-1].loss,
            "final_train_accuracy": self.history[-1].accuracy,
            "history": [asdict(h) for h in self.history],
        }


@dataclass
class CrossvalReport:
    config: dict
    model: dict
    folds: list[FoldResult]
    relations: list[str]
    label: str = ""
    wall_seconds: float = 0.0

    @property
    def mean_accuracy(self) -> float:
        """Fold accuracies averaged with weights equal to fold test size."""
        n = sum(f.metrics.n for f in self.folds)
        return sum(f.metrics.accuracy * f.metrics.n for f in self.folds) / n

    @property
    def fold_accuracies(self) -> list[float]:
        return [f.metrics.accuracy for f in self.folds]

    def relation_accuracy(self) -> dict[str, float]:
        correct, count = defaultdict(int), defaultdict(int)
        for f in self.folds:
            for r, d in f.metrics.per_relation.items():
                correct[r] += d["correct"]
                count[r] += d["n"]
        return {r: correct[r] / count[r] for r in self.relations if count[r]}

    def columns(self) -> list[str]:
        kin = [r for r in RELATIONS if r in self.relations]
        return kin + ["Mean"] if kin else ["Mean"]

    def row(self) -> dict[str, float]:
        rel = self.relation_accuracy()
        return {c: (self.mean_accuracy if c == "Mean" else rel[c]) for c in self.columns()}

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "kind": "crossval",
            "label": self.label,
            "config": self.config,
            "model": self.model,
            "folds": [f.to_dict() for f in self.folds],
            "fold_accuracies": self.fold_accuracies,
            "mean_accuracy": self.mean_accuracy,
            "relation_accuracy": self.relation_accuracy(),
            "table": {"columns": self.columns(), "row": self.row()},
        }
        if include_timing:
            d["wall_seconds"] = self.wall_seconds
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2) + "\n"

    def render(self) -> str:
        label = self.label or KIND_LABELS.get(self.model.get("kind", ""), "model")
        text = render_table("Method", self.columns(), [(label, self.row())])
        folds = "  ".join(f"fold {f.fold}: {f.metrics.accuracy:.1%}" for f in self.folds)
        return f"{text}\n{folds}\nwall clock: {self.wall_seconds:.1f} s\n"


def assert_no_leakage(train_pairs: Sequence[Pair], test_pairs: Sequence[Pair]) -> None:
    train_keys = {p.key for p in train_pairs}
    leaked = [p.key for p in test_pairs if p.key in train_keys]
    if leaked:
        raise AssertionError(f"test pair {leaked[0]} also appears in the training folds")


def crossval(config: TrainConfig, pairset: PairSet, features: FeatureTable, label: str = "") -> CrossvalReport:
    """Train on all folds but one, test on the held-out fold, for every fold."""
    start = time.perf_counter()
    folds = pairset.folds
    if len(folds) < 2:
        raise UsageError("cross-validation needs fold ids on every pair and at least 2 folds; run make_folds first")
    if any(p.fold is None for p in pairset.pairs):
        raise UsageError("some pairs lack a fold id; run make_folds first")
    if not pairset.negatives:
        raise UsageError("pair set has no negatives; draw them with build_negative_set first")
    results = []
    model_desc = {}
    for f in folds:
        train_folds = [g for g in folds if g != f]
        test_pairs = pairset.in_folds([f])
        assert_no_leakage(pairset.in_folds(train_folds), test_pairs)
        model, params, rep = train(config, pairset, features, train_folds, init_seed=_seed_for(config.seed, f))
        model_desc = rep.model
        metrics = evaluate(model, params, test_pairs, features)
        log.info("fold %d: test accuracy %.4f (train loss %.4f -> %.4f)", f, metrics.accuracy, rep.initial_loss, rep.final_loss)
        results.append(FoldResult(f, rep.n_train, metrics, rep.history))
    return CrossvalReport(
        config=config.to_dict(),
        model=model_desc,
        folds=results,
        relations=pairset.relations,
        label=label,
        wall_seconds=time.perf_counter() - start,
    )


# ------------------------------------------------------------------ ablation


def render_table(corner: str, columns: Sequence[str], rows: Sequence[tuple[str, dict]]) -> str:
    head = [corner] + list(columns)
    body = [[name] + [f"{vals[c]:.1%}" for c in columns] for name, vals in rows]
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    fmt = lambda r: " | ".join(s.ljust(w) if i == 0 else s.rjust(w) for i, (s, w) in enumerate(zip(r, widths)))
    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(head), rule] + [fmt(r) for r in body])


AXES = ("central_init", "aggregator", "kind")


def _cell_label(axis: str, value) -> str:
    if axis == "central_init":
        return gkrnet.central_init_label(gkrnet.parse_central_init(value))
    if axis == "aggregator":
        return AGGREGATOR_LABELS[value]
    return KIND_LABELS[value]


@dataclass
class AblationTable:
    axes: list[str]
    cells: list[tuple[str, dict, CrossvalReport]]

    @property
    def labels(self) -> list[str]:
        return [label for label, _, _ in self.cells]

    def columns(self) -> list[str]:
        return self.cells[0][2].columns()

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "ablation",
            "axes": self.axes,
            "columns": self.columns(),
            "rows": [
                {"label": label, "settings": settings, "values": rep.row(), "mean_accuracy": rep.mean_accuracy}
                for label, settings, rep in self.cells
            ],
            "reports": [rep.to_dict() for _, _, rep in self.cells],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def render(self) -> str:
        if self.axes == ["central_init"]:
            # initialization strategies as columns, one row of mean accuracy
            vals = {label: rep.mean_accuracy for label, _, rep in self.cells}
            return render_table("Initialization", self.labels, [("Mean accuracy", vals)]) + "\n"
        corner = {"aggregator": "Pool", "kind": "f(.)"}.get(self.axes[0], "Setting") if len(self.axes) == 1 else "Setting"
        return render_table(corner, self.columns(), [(label, rep.row()) for label, _, rep in self.cells]) + "\n"


def ablate(
    base: TrainConfig,
    grid: dict[str, Sequence[Any]],
    pairset: PairSet,
    features: FeatureTable,
) -> AblationTable:
    """One cross-validation per cell of the grid (product over its axes).

    Axes: ``central_init`` (mean, max or a constant), ``aggregator`` (mean,
    max) and ``kind`` (gkr, cosine, mlp, metric). Baseline kinds ignore the
    GKR-only axes, so they contribute one cell each.
    """
    unknown = sorted(set(grid) - set(AXES))
    if unknown:
        raise UsageError(f"unknown ablation axis {', '.join(unknown)}; use {', '.join(AXES)}")
    axes = [a for a in AXES if a in grid]
    if not axes or any(len(grid[a]) == 0 for a in axes):
        raise UsageError("ablation grid needs at least one non-empty axis")
    cells = []
    seen = set()
    for combo in itertools.product(*(grid[a] for a in axes)):
        settings = dict(zip(axes, combo))
        kind = settings.get("kind", base.model["kind"])
        if kind not in MODEL_KINDS:
            raise UsageError(f"unknown model kind {kind!r}")
        if kind != "gkr":
            settings = {a: v for a, v in settings.items() if a == "kind"}
        key = json.dumps(settings, sort_keys=True, default=str)
        if key in seen:
            continue
        seen.add(key)
        label = " / ".join(_cell_label(a, v) for a, v in settings.items())
        config = _apply(base, settings)
        cells.append((label, settings, crossval(config, pairset, features, label=label)))
    return AblationTable(axes=axes, cells=cells)


def _apply(base: TrainConfig, settings: dict) -> TrainConfig:
    kind = settings.get("kind", base.model["kind"])
    model = dict(base.model) if kind == base.model["kind"] else {"kind": kind}
    if kind == "gkr":
        for axis in ("central_init", "aggregator"):
            if axis in settings:
                model[axis] = settings[axis]
    return replace(base, model=_normalize_model(model))
