"""Graph-based kinship reasoning network on a star graph.

Each of the D feature dimensions becomes a peripheral node holding the two
values ``(fx[d], fy[d])``; one central node is wired to every peripheral node.
K layers of message passing run on that graph, and an MLP reads out a logit
from the concatenated final node features (central first).

All functions accept a leading batch axis: ``fx`` and ``fy`` may be (D,) or
(B, D), and peripheral states are then (B, D, F).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from .diffmath import (
    GradCheckReport,
    ShapeError,
    UsageError,
    Var,
    add,
    bce_with_logit,
    broadcast_nodes,
    concat,
    const,
    expand_last,
    flatten_nodes,
    grad_check,
    linear,
    mul,
    pool,
    relu,
    sigmoid,
    squeeze_last,
    total,
)

CentralInit = Union[str, float]

NODE_INPUT_DIM = 2


def parse_central_init(value) -> CentralInit:
    """Normalize a central-node init setting to "mean", "max" or a float."""
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("mean", "meanpool"):
            return "mean"
        if v in ("max", "maxpool"):
            return "max"
        try:
            return float(v.removeprefix("const:").removeprefix("const(").rstrip(")"))
        except ValueError:
            raise UsageError(f"unknown central_init {value!r}; use mean, max or a number") from None
    if isinstance(value, bool):
        raise UsageError(f"unknown central_init {value!r}")
    return float(value)


def central_init_label(value: CentralInit) -> str:
    if value == "mean":
        return "Mean"
    if value == "max":
        return "Max"
    return f"{float(value):g}"


@dataclass(frozen=True)
class GkrConfig:
    dim: int
    layer_dims: tuple[int, ...] = (512, 4)
    central_init: CentralInit = 0.5
    aggregator: str = "max"
    readout_hidden: tuple[int, ...] | None = None
    bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(f) for f in self.layer_dims))
        object.__setattr__(self, "central_init", parse_central_init(self.central_init))
        if self.readout_hidden is not None:
            object.__setattr__(self, "readout_hidden", tuple(int(h) for h in self.readout_hidden))
        if self.dim < 1:
            raise UsageError(f"dim must be >= 1, got {self.dim}")
        if not self.layer_dims or min(self.layer_dims) < 1:
            raise UsageError(f"layer_dims must be a non-empty list of positive ints, got {self.layer_dims}")
        if self.aggregator not in ("max", "mean"):
            raise UsageError(f"aggregator must be 'max' or 'mean', got {self.aggregator!r}")
        if self.readout_hidden is not None and any(h < 1 for h in self.readout_hidden):
            raise UsageError(f"readout_hidden sizes must be positive, got {self.readout_hidden}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims)

    @property
    def readout_input_dim(self) -> int:
        return (self.dim + 1) * self.layer_dims[-1]

    @property
    def readout_sizes(self) -> tuple[int, ...]:
        if self.readout_hidden is not None:
            return self.readout_hidden
        return (max(16, self.readout_input_dim // 4),)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_dims"] = list(self.layer_dims)
        d["readout_hidden"] = list(self.readout_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GkrConfig":
        known = {k: d[k] for k in ("dim", "layer_dims", "central_init", "aggregator", "readout_hidden", "bias") if k in d}
        return cls(**known)


def param_shapes(config: GkrConfig) -> dict[str, tuple[int, int]]:
    """Name -> (fan_in, fan_out) for every trainable matrix, in init order."""
    shapes: dict[str, tuple[int, int]] = {}
    dims = (NODE_INPUT_DIM,) + config.layer_dims
    for k in range(1, config.num_layers + 1):
        f_in, f_out = dims[k - 1], dims[k]
        shapes[f"layer{k}.W_mess"] = (f_in, f_out)
        shapes[f"layer{k}.W_peri"] = (2 * f_out, f_out)
        shapes[f"layer{k}.W_cen"] = (2 * f_out, f_out)
        if config.bias:
            shapes[f"layer{k}.b_mess"] = (1, f_out)
            shapes[f"layer{k}.b_peri"] = (1, f_out)
            shapes[f"layer{k}.b_cen"] = (1, f_out)
    sizes = (config.readout_input_dim,) + config.readout_sizes + (1,)
    for i in range(len(sizes) - 1):
        shapes[f"readout.{i}.W"] = (sizes[i], sizes[i + 1])
        if config.bias:
            shapes[f"readout.{i}.b"] = (1, sizes[i + 1])
    return shapes


def uniform_fan_in(rng: np.random.Generator, shapes: dict[str, tuple[int, int]], dtype=np.float64) -> dict[str, np.ndarray]:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)); a bias row uses its weight's fan-in."""
    out = {}
    fan_in = 1
    for name, (rows, cols) in shapes.items():
        if not name.rsplit(".", 1)[-1].startswith("b"):
            fan_in = rows
        bound = 1.0 / np.sqrt(fan_in)
        out[name] = rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)
    return out


def init_params(config: GkrConfig, seed: int, dtype=np.float64) -> dict[str, np.ndarray]:
    return uniform_fan_in(np.random.default_rng(seed), param_shapes(config), dtype)


def check_params(config: GkrConfig, params: dict[str, np.ndarray]) -> None:
    expected = param_shapes(config)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ShapeError(f"missing parameters: {', '.join(missing)}")
    for name, shape in expected.items():
        got = tuple(np.shape(params[name].value if isinstance(params[name], Var) else params[name]))
        if got != shape:
            raise ShapeError(f"parameter {name} has shape {got}, expected {shape}")


# ------------------------------------------------------------------ graph


@dataclass
class GraphState:
    """Node features after ``k`` layers. ``peripheral`` is (..., D, F)."""

    central: Var
    peripheral: Var
    k: int
    messages: Var | None = field(default=None, repr=False)
    central_message: Var | None = field(default=None, repr=False)
    aggregate: Var | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.peripheral.value.shape[-1]

    @property
    def num_nodes(self) -> int:
        return self.peripheral.value.shape[-2]


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else const(x)


def build_graph(fx, fy, central_init: CentralInit) -> GraphState:
    """Initial star graph: node d holds (fx[d], fy[d]); the hub per ``central_init``."""
    fx, fy = _as_var(fx), _as_var(fy)
    if fx.value.shape != fy.value.shape:
        raise ShapeError(f"build_graph: fx has shape {fx.value.shape} but fy has shape {fy.value.shape}")
    if fx.value.ndim < 1 or fx.value.shape[-1] < 1:
        raise ShapeError(f"build_graph: features must have a positive trailing dim, got {fx.value.shape}")
    peripheral = concat(expand_last(fx), expand_last(fy))
    central_init = parse_central_init(central_init)
    if central_init in ("mean", "max"):
        central = pool(peripheral, central_init, axis=-2)
    else:
        shape = fx.value.shape[:-1] + (NODE_INPUT_DIM,)
        central = Var(np.full(shape, central_init, dtype=fx.value.dtype))
    return GraphState(central=central, peripheral=peripheral, k=0)


def _dense(W: Var, x: Var, b: Var | None, rowwise: bool = False) -> Var:
    y = linear(W, x, rowwise)
    return y if b is None else add(y, b)


def gkr_layer(state: GraphState, layer: dict[str, Var], aggregator: str) -> GraphState:
    """One round of message passing on the star graph.

    ``layer`` holds W_mess, W_peri, W_cen (and b_* when biases are on).
    """
    W_mess, W_peri, W_cen = layer["W_mess"], layer["W_peri"], layer["W_cen"]
    if state.dim != W_mess.item_shape[0]:
        raise ShapeError(
            f"gkr_layer: node features have dim {state.dim} but W_mess has shape {W_mess.item_shape}"
        )
    f_out = W_mess.item_shape[1]
    for name, W in (("W_peri", W_peri), ("W_cen", W_cen)):
        if W.item_shape != (2 * f_out, f_out):
            raise ShapeError(f"gkr_layer: {name} has shape {W.item_shape}, expected {(2 * f_out, f_out)}")
    n = state.num_nodes

    # per-node products are row-exact so reordering the nodes reorders the
    # outputs without changing any bits
    m_d = relu(_dense(W_mess, state.peripheral, layer.get("b_mess"), rowwise=True))
    m_c = relu(_dense(W_mess, state.central, layer.get("b_mess")))
    h_d = relu(_dense(W_peri, concat(m_d, broadcast_nodes(m_c, n)), layer.get("b_peri"), rowwise=True))
    a = pool(m_d, aggregator, axis=-2)
    h_c = relu(_dense(W_cen, concat(m_c, a), layer.get("b_cen")))
    return GraphState(
        central=h_c,
        peripheral=h_d,
        k=state.k + 1,
        messages=m_d,
        central_message=m_c,
        aggregate=a,
    )


def mlp(x: Var, weights: list[Var], biases: list[Var | None]) -> Var:
    """ReLU hidden layers, linear final layer."""
    for i, (W, b) in enumerate(zip(weights, biases)):
        x = _dense(W, x, b)
        if i < len(weights) - 1:
            x = relu(x)
    return x


def readout(state: GraphState, weights: list[Var], biases: list[Var | None] | None = None) -> Var:
    """Logit from [h_c || h_1 || ... || h_D] through the readout MLP."""
    joined = concat(state.central, flatten_nodes(state.peripheral))
    if weights[0].item_shape[0] != joined.value.shape[-1]:
        raise ShapeError(
            f"readout: joined node features have dim {joined.value.shape[-1]} "
            f"but first readout matrix has shape {weights[0].item_shape}"
        )
    out = mlp(joined, weights, biases or [None] * len(weights))
    return squeeze_last(out)


def _layer_params(p: dict[str, Var], k: int) -> dict[str, Var]:
    prefix = f"layer{k}."
    return {name[len(prefix):]: v for name, v in p.items() if name.startswith(prefix)}


def _readout_params(p: dict[str, Var], config: GkrConfig) -> tuple[list[Var], list[Var | None]]:
    n = len(config.readout_sizes) + 1
    return [p[f"readout.{i}.W"] for i in range(n)], [p.get(f"readout.{i}.b") for i in range(n)]


def propagate(fx, fy, p: dict[str, Var], config: GkrConfig) -> list[GraphState]:
    """All graph states, from the initial graph through layer K."""
    states = [build_graph(fx, fy, config.central_init)]
    for k in range(1, config.num_layers + 1):
        states.append(gkr_layer(states[-1], _layer_params(p, k), config.aggregator))
    return states


def logits(fx, fy, p: dict[str, Var], config: GkrConfig) -> Var:
    final = propagate(fx, fy, p, config)[-1]
    return readout(final, *_readout_params(p, config))


def _wrap(params: dict) -> dict[str, Var]:
    return {k: v if isinstance(v, Var) else Var(v) for k, v in params.items()}


def forward(fx, fy, params: dict[str, np.ndarray], config: GkrConfig) -> np.ndarray:
    """Kin probability sigmoid(logit) for one pair or a batch of pairs."""
    check_params(config, params)
    fx, fy = np.asarray(fx), np.asarray(fy)
    if fx.shape[-1] != config.dim:
        raise ShapeError(f"forward: features have dim {fx.shape[-1]} but config.dim is {config.dim}")
    return sigmoid(logits(fx, fy, _wrap(params), config).value)


def class_balanced_bce(z: Var, labels) -> Var:
    """Mean BCE over positives plus mean BCE over negatives.

    A class absent from the batch contributes nothing.
    """
    y = np.asarray(labels)
    if y.size == 0:
        raise UsageError("empty batch")
    if y.shape != z.item_shape:
        raise ShapeError(f"labels have shape {y.shape} but logits have shape {z.item_shape}")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    w = np.where(y == 1, 1.0 / max(n_pos, 1), 1.0 / max(n_neg, 1)).astype(z.value.dtype)
    return total(mul(bce_with_logit(z, y), Var(w)))


def batch_loss(fx, fy, labels, params: dict, config: GkrConfig) -> Var:
    """Class-balanced BCE of the network over a batch; ``params`` may be Vars on a tape."""
    if np.asarray(labels).size == 0:
        raise UsageError("empty batch")
    return class_balanced_bce(logits(fx, fy, _wrap(params), config), labels)


CENTRAL_INIT_VARIANTS: tuple[CentralInit, ...] = ("mean", "max", 0.0, 0.5, 1.0)
AGGREGATORS = ("mean", "max")


def gradient_check(config: GkrConfig, seed: int, batch: int = 4, tolerance: float = 1e-5) -> GradCheckReport:
    """Finite-difference check of ``batch_loss`` on random inputs and mixed labels."""
    rng = np.random.default_rng([seed, 11])
    fx = rng.uniform(-1.0, 1.0, size=(batch, config.dim))
    fy = rng.uniform(-1.0, 1.0, size=(batch, config.dim))
    labels = np.arange(batch) % 2
    params = init_params(config, seed)
    return grad_check(lambda p: batch_loss(fx, fy, labels, p, config), params, tolerance=tolerance, seed=seed)


def variant_configs(dim: int, layer_dims: tuple[int, ...]) -> list[GkrConfig]:
    """Every central-init x aggregator combination for one architecture."""
    return [
        GkrConfig(dim=dim, layer_dims=layer_dims, central_init=c, aggregator=a)
        for c in CENTRAL_INIT_VARIANTS
        for a in AGGREGATORS
    ]
