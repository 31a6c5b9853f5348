"""Comparison heads mapping a feature pair to a kin logit.

cosine   temperature * cos(fx, fy) + bias
mlp      MLP([fx || fy])
metric   alpha * (tau - ||Wᵀ(fx - fy)||), alpha = exp(log_alpha) > 0

The metric head's decision rule is an extension over the bare distance; it is
labeled "Metric" in reports.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffmath import (
    DomainError,
    ShapeError,
    UsageError,
    Var,
    add,
    concat,
    div,
    exp,
    linear,
    mul,
    norm,
    sigmoid,
    squeeze_last,
    sub,
    sum_last,
)
from .gkrnet import class_balanced_bce, mlp, uniform_fan_in

KINDS = ("cosine", "mlp", "metric")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    dim: int
    hidden: tuple[int, ...] | None = None
    rank: int | None = None
    bias: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"baseline kind must be one of {', '.join(KINDS)}, got {self.kind!r}")
        if self.dim < 1:
            raise UsageError(f"dim must be >= 1, got {self.dim}")
        if self.hidden is not None:
            object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
            if any(h < 1 for h in self.hidden):
                raise UsageError(f"hidden sizes must be positive, got {self.hidden}")
        if self.rank is not None and not 1 <= self.rank <= self.dim:
            raise UsageError(f"projection rank must be in [1, {self.dim}], got {self.rank}")

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return self.hidden if self.hidden is not None else (self.dim,)

    @property
    def projection_rank(self) -> int:
        return self.rank if self.rank is not None else self.dim

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.kind == "mlp":
            d["hidden"] = list(self.hidden_sizes)
        else:
            d.pop("hidden")
        if self.kind == "metric":
            d["rank"] = self.projection_rank
        else:
            d.pop("rank")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineSpec":
        return cls(**{k: d[k] for k in ("kind", "dim", "hidden", "rank", "bias") if k in d})


def param_shapes(spec: BaselineSpec) -> dict[str, tuple[int, ...]]:
    if spec.kind == "cosine":
        return {"cos.temperature": (1,), "cos.bias": (1,)}
    if spec.kind == "metric":
        return {"metric.W": (spec.dim, spec.projection_rank), "metric.log_alpha": (1,), "metric.tau": (1,)}
    shapes: dict[str, tuple[int, ...]] = {}
    sizes = (2 * spec.dim,) + spec.hidden_sizes + (1,)
    for i in range(len(sizes) - 1):
        shapes[f"mlp.{i}.W"] = (sizes[i], sizes[i + 1])
        if spec.bias:
            shapes[f"mlp.{i}.b"] = (1, sizes[i + 1])
    return shapes


def init_params(spec: BaselineSpec, seed: int, dtype=np.float64) -> dict[str, np.ndarray]:
    if spec.kind == "cosine":
        return {"cos.temperature": np.ones(1, dtype), "cos.bias": np.zeros(1, dtype)}
    rng = np.random.default_rng(seed)
    if spec.kind == "metric":
        W = uniform_fan_in(rng, {"metric.W": (spec.dim, spec.projection_rank)}, dtype)["metric.W"]
        return {"metric.W": W, "metric.log_alpha": np.zeros(1, dtype), "metric.tau": np.ones(1, dtype)}
    return uniform_fan_in(rng, param_shapes(spec), dtype)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def cosine_score(fx, fy) -> Var:
    """fxᵀfy / (|fx| |fy|) over the trailing axis."""
    fx, fy = _as_var(fx), _as_var(fy)
    if fx.item_shape != fy.item_shape:
        raise ShapeError(f"cosine_score: fx has shape {fx.item_shape} but fy has shape {fy.item_shape}")
    nx, ny = norm(fx), norm(fy)
    if np.any(nx.value == 0) or np.any(ny.value == 0):
        raise DomainError("cosine similarity is undefined for a zero vector")
    return div(sum_last(mul(fx, fy)), mul(nx, ny))


def metric_distance(fx, fy, W) -> Var:
    """||Wᵀ(fx - fy)||, the distance induced by the metric W Wᵀ."""
    fx, fy, W = _as_var(fx), _as_var(fy), _as_var(W)
    if fx.item_shape != fy.item_shape:
        raise ShapeError(f"metric_distance: fx has shape {fx.item_shape} but fy has shape {fy.item_shape}")
    return norm(linear(W, sub(fx, fy)))


def mlp_fusion_logit(fx, fy, p: dict[str, Var], spec: BaselineSpec) -> Var:
    fx, fy = _as_var(fx), _as_var(fy)
    if fx.item_shape != fy.item_shape or fx.item_shape[-1] != spec.dim:
        raise ShapeError(
            f"mlp_fusion_logit: expected two (..., {spec.dim}) inputs, got {fx.item_shape} and {fy.item_shape}"
        )
    n = len(spec.hidden_sizes) + 1
    weights = [p[f"mlp.{i}.W"] for i in range(n)]
    biases = [p.get(f"mlp.{i}.b") for i in range(n)]
    return squeeze_last(mlp(concat(fx, fy), weights, biases))


def logits(fx, fy, p: dict[str, Var], spec: BaselineSpec) -> Var:
    if spec.kind == "cosine":
        return add(mul(cosine_score(fx, fy), p["cos.temperature"]), p["cos.bias"])
    if spec.kind == "metric":
        d = metric_distance(fx, fy, p["metric.W"])
        return mul(exp(p["metric.log_alpha"]), sub(p["metric.tau"], d))
    return mlp_fusion_logit(fx, fy, p, spec)


def _wrap(params: dict) -> dict[str, Var]:
    return {k: v if isinstance(v, Var) else Var(v) for k, v in params.items()}


def forward(fx, fy, params: dict, spec: BaselineSpec) -> np.ndarray:
    return sigmoid(logits(fx, fy, _wrap(params), spec).value)


def batch_loss(fx, fy, labels, params: dict, spec: BaselineSpec) -> Var:
    return class_balanced_bce(logits(fx, fy, _wrap(params), spec), labels)
