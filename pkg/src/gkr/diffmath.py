"""Dense numerical core: tape-based reverse-mode gradients, Adam, and a
finite-difference gradient checker.

Values are numpy arrays. A "vector" is the trailing axis of an array, so any
leading axes act as independent copies (samples in a batch, nodes of a graph).
Every op below treats those leading axes elementwise.

A Var may also carry a leading *variant* axis (``variants=True``): a stack of
alternative values for the same quantity, e.g. one per finite-difference
perturbation. Ops propagate that axis without mixing variants, so one forward
pass evaluates all of them. Variants are forward-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class UsageError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Var:
    """A value on (or off) a tape.

    ``tape`` is None for constants; ops on constants only compute values.
    """

    __slots__ = ("value", "grad", "tape", "name", "variants")

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None, variants: bool = False):
        self.value = value if type(value) is np.ndarray else np.asarray(value)
        self.grad = None
        self.tape = tape
        self.name = name
        self.variants = variants

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def item_shape(self) -> tuple[int, ...]:
        """Shape without the variant axis."""
        return self.value.shape[1:] if self.variants else self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape})"


def const(value, dtype=np.float64) -> Var:
    return Var(np.asarray(value, dtype=dtype))


class Tape:
    """Ordered record of op applications plus a parameter registry."""

    def __init__(self, recording: bool = True, track_pattern: bool = False):
        self.records: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self.params: dict[str, Var] = {}
        self.recording = recording
        # ReLU masks and max-pool winners in op order; a change between two
        # evaluations means a kink lies between them
        self.track_pattern = track_pattern
        self.pattern: list[tuple[np.ndarray, bool]] = []

    def param(self, name: str, value, variants: bool = False) -> Var:
        if name in self.params:
            raise UsageError(f"parameter {name!r} already registered")
        v = Var(np.asarray(value), self, name, variants)
        self.params[name] = v
        return v

    def params_from(self, arrays: dict[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.param(k, a) for k, a in arrays.items()}

    def note_pattern(self, a: np.ndarray, variants: bool) -> None:
        if self.track_pattern:
            self.pattern.append((a, variants))

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Reverse-accumulate d(loss)/d(param) for every registered parameter."""
        if loss.tape is not self:
            raise UsageError("loss is not an output of this tape")
        if loss.value.size != 1:
            raise UsageError(f"loss must be a scalar, got shape {loss.value.shape}")
        if not self.recording:
            raise UsageError("tape was not recording")
        if self.params.get(loss.name) is not loss and not any(out is loss for out, _, _ in self.records):
            raise UsageError("loss is not an output of this tape")
        for p in self.params.values():
            p.grad = np.zeros_like(p.value)
        for out, _, _ in self.records:
            out.grad = None
        loss.grad = np.ones_like(loss.value)
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            for inp, g in zip(inputs, fn(out.grad)):
                if g is None or inp.tape is not self:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g
            out.grad = None
        return {k: p.grad for k, p in self.params.items()}


def _emit(value, inputs: tuple[Var, ...], backward_fn) -> Var:
    tape = None
    variants = False
    for v in inputs:
        if tape is None and v.tape is not None:
            tape = v.tape
        variants = variants or v.variants
    out = Var(value, tape, variants=variants)
    if tape is not None and tape.recording:
        if variants:
            raise UsageError("variant values cannot be recorded for backward")
        tape.records.append((out, inputs, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _aligned(*vs: Var) -> list[np.ndarray]:
    """Raw values; if any input has variants, all are lifted to a common rank
    with the variant axis first, so trailing-axis broadcasting is unchanged."""
    if not any(v.variants for v in vs):
        return [v.value for v in vs]
    lifted = [v.value if v.variants else v.value[None] for v in vs]
    rank = max(a.ndim for a in lifted)
    return [a.reshape(a.shape[:1] + (1,) * (rank - a.ndim) + a.shape[1:]) for a in lifted]


# ---------------------------------------------------------------- primitives


def linear(W: Var, v: Var, rowwise: bool = False) -> Var:
    """Wᵀv on the trailing axis of ``v``; ``W`` is (p, q).

    ``rowwise`` guarantees each output row depends only on its input row,
    bit for bit. BLAS does not: a row's rounding can change with its position
    in the matrix. It costs a slower, non-BLAS product.
    """
    w_shape = W.item_shape
    if len(w_shape) != 2 or v.value.ndim < 1 or v.value.shape[-1] != w_shape[0]:
        raise ShapeError(f"linear: W has shape {w_shape} but v has shape {v.item_shape}")
    if W.variants:
        vv = v.value if v.variants else v.value[None]
        Wb = W.value.reshape(W.value.shape[:1] + (1,) * (vv.ndim - 2) + w_shape)
        return _emit((vv[..., None, :] @ Wb)[..., 0, :], (W, v), None)
    Wv, vv = W.value, v.value
    out = np.einsum("...p,pq->...q", vv, Wv) if rowwise else vv @ Wv

    def back(g):
        p, q = Wv.shape
        return vv.reshape(-1, p).T @ g.reshape(-1, q), g @ Wv.T

    return _emit(out, (W, v), back)


def relu(v: Var) -> Var:
    x = v.value
    mask = x > 0
    if v.tape is not None:
        v.tape.note_pattern(mask, v.variants)
    return _emit(x * mask, (v,), lambda g: (g * mask,))


def concat(a: Var, b: Var) -> Var:
    """Join along the trailing axis, ``a`` first."""
    if a.item_shape[:-1] != b.item_shape[:-1]:
        raise ShapeError(f"concat: leading shapes differ, {a.item_shape} vs {b.item_shape}")
    av, bv = _aligned(a, b)
    if a.variants or b.variants:
        lead = np.broadcast_shapes(av.shape[:-1], bv.shape[:-1])
        av = np.broadcast_to(av, lead + av.shape[-1:])
        bv = np.broadcast_to(bv, lead + bv.shape[-1:])
    p = av.shape[-1]
    out = np.concatenate([av, bv], axis=-1)
    return _emit(out, (a, b), lambda g: (g[..., :p], g[..., p:]))


def stack(vs: Sequence[Var], axis: int = -2) -> Var:
    """Stack same-shape vectors into a (..., n, q) array of nodes."""
    if not vs:
        raise UsageError("stack: empty list")
    shapes = {v.item_shape for v in vs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: ragged shapes {sorted(shapes)}")
    if axis >= 0:
        raise UsageError("stack: axis must be negative")
    arrays = _aligned(*vs)
    if any(v.variants for v in vs):
        common = np.broadcast_shapes(*(a.shape for a in arrays))
        arrays = [np.broadcast_to(a, common) for a in arrays]
    out = np.stack(arrays, axis=axis)
    n = len(vs)
    return _emit(out, tuple(vs), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def pool(vs: "Var | Sequence[Var]", mode: str, axis: int = -2) -> Var:
    """Elementwise max or mean over a set of vectors.

    ``vs`` is either a list of same-shape vectors or one stacked array whose
    ``axis`` (negative) indexes the set. Max routes each coordinate's gradient
    to the lowest-index input attaining it. Mean sums the set in sorted order,
    so reordering the set cannot change a single bit of the result.
    """
    if not isinstance(vs, Var):
        if len(vs) == 0:
            raise UsageError("pool: empty list of vectors")
        vs = stack(list(vs), axis=-2)
        axis = -2
    x = vs.value
    n = x.shape[axis]
    if n == 0:
        raise UsageError("pool: empty list of vectors")
    if mode == "mean":
        out = np.sort(x, axis=axis).sum(axis=axis) / n

        def back(g):
            return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    elif mode == "max":
        out = x.max(axis=axis)
        idx = np.argmax(x, axis=axis)
        if vs.tape is not None:
            vs.tape.note_pattern(idx, vs.variants)

        def back(g):
            hit = np.arange(n).reshape((n,) + (1,) * (-axis - 1))
            return (np.where(hit == np.expand_dims(idx, axis), np.expand_dims(g, axis), 0.0),)

    else:
        raise UsageError(f"pool: unknown mode {mode!r}")
    return _emit(out, (vs,), back)


def broadcast_nodes(v: Var, n: int) -> Var:
    """Repeat a (..., q) vector as (..., n, q)."""
    out = np.repeat(v.value[..., None, :], n, axis=-2)
    return _emit(out, (v,), lambda g: (g.sum(axis=-2),))


def flatten_nodes(v: Var) -> Var:
    """(..., n, q) -> (..., n*q), node-major."""
    shape = v.value.shape
    out = v.value.reshape(shape[:-2] + (shape[-2] * shape[-1],))
    return _emit(out, (v,), lambda g: (g.reshape(shape),))


def expand_last(v: Var) -> Var:
    """(..., n) -> (..., n, 1)."""
    shape = v.value.shape
    return _emit(v.value[..., None], (v,), lambda g: (g.reshape(shape),))


def squeeze_last(v: Var) -> Var:
    """(..., 1) -> (...)."""
    shape = v.value.shape
    if shape[-1] != 1:
        raise ShapeError(f"squeeze_last: trailing dim is {shape[-1]}, not 1")
    return _emit(v.value[..., 0], (v,), lambda g: (g.reshape(shape),))


def add(a: Var, b: Var) -> Var:
    av, bv = _aligned(a, b)
    return _emit(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a: Var, b: Var) -> Var:
    av, bv = _aligned(a, b)
    return _emit(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a: Var, b: Var) -> Var:
    av, bv = _aligned(a, b)
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a: Var, b: Var) -> Var:
    av, bv = _aligned(a, b)
    out = av / bv
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def exp(v: Var) -> Var:
    out = np.exp(v.value)
    return _emit(out, (v,), lambda g: (g * out,))


def sum_last(v: Var) -> Var:
    """Sum over the trailing axis."""
    shape = v.value.shape
    return _emit(
        v.value.sum(axis=-1),
        (v,),
        lambda g: (np.broadcast_to(g[..., None], shape).copy(),),
    )


def total(v: Var) -> Var:
    """Sum of every entry (per variant, when present)."""
    x = v.value
    if v.variants:
        return _emit(x.reshape(x.shape[0], -1).sum(axis=1), (v,), None)
    return _emit(np.asarray(x.sum()), (v,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def norm(v: Var) -> Var:
    """Euclidean norm over the trailing axis; gradient is 0 where the norm is 0."""
    x = v.value
    n = np.sqrt((x * x).sum(axis=-1))

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (scale[..., None] * x,)

    return _emit(n, (v,), back)


def bce_with_logit(logit: Var, label) -> Var:
    """Per-entry binary cross-entropy of sigmoid(logit) against 0/1 labels.

    Uses max(z, 0) - z*y + log1p(exp(-|z|)), which never forms sigmoid(z).
    """
    z = logit.value
    y = np.asarray(label, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise UsageError("bce_with_logit: labels must be 0 or 1")
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return _emit(out, (logit,), lambda g: (g * (sigmoid(z) - y),))


def sigmoid(z):
    """Numerically stable logistic function on plain arrays."""
    z = np.asarray(z)
    if z.dtype.kind != "f":
        z = z.astype(np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -------------------------------------------------------------------- Adam


@dataclass
class Adam:
    """Adam with bias correction. Moments are created lazily per parameter."""

    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        for k, p in params.items():
            if k not in grads:
                raise UsageError(f"adam: no gradient for parameter {k!r}")
            if grads[k].shape != p.shape:
                raise ShapeError(f"adam: parameter {k!r} has shape {p.shape} but gradient has {grads[k].shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)

    def hyperparameters(self) -> dict[str, float]:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon}


# ------------------------------------------------------------- grad check


class NonDeterministicForward(UsageError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    n_coords: int
    kink_retries: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


LossFn = Callable[[dict[str, Var]], Var]


def analytic_grads(loss_fn: LossFn, arrays: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    loss = loss_fn(tape.params_from(arrays))
    return float(loss.value), tape.backward(loss)


def _probe(loss_fn: LossFn, arrays: dict[str, np.ndarray], varied: str | None = None, stack=None):
    """Evaluate without recording; ``stack`` replaces ``arrays[varied]`` by a
    variant stack. Returns losses and the kink pattern."""
    tape = Tape(recording=False, track_pattern=True)
    p = {}
    for k, a in arrays.items():
        p[k] = tape.param(k, stack, variants=True) if k == varied else tape.param(k, a)
    loss = loss_fn(p)
    return loss.value, tape.pattern


def _same_pattern(base: list, probe: list, n_variants: int) -> np.ndarray:
    """Per-variant flag: every ReLU mask and max-pool winner matches ``base``."""
    ok = np.ones(n_variants, dtype=bool)
    if len(base) != len(probe):
        return ~ok
    for (b, _), (p, variants) in zip(base, probe):
        if variants:
            ok &= (p == b[None]).reshape(n_variants, -1).all(axis=1)
        elif not np.array_equal(p, b):
            return ~ok
    return ok


def grad_check(
    loss_fn: LossFn,
    params: dict[str, np.ndarray],
    tolerance: float = 1e-5,
    step: float = 1e-5,
    kink_shift: float = 1e-3,
    max_kink_retries: int = 20,
    seed: int = 0,
    chunk: int = 256,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    Reports max over coordinates of |g_ad - g_fd| / max(1, |g_ad| + |g_fd|).
    If a finite-difference probe flips any ReLU mask or max-pool winner, a kink
    lies inside the stencil: every parameter is shifted by uniform noise of
    size ``kink_shift`` and the whole check restarts.

    ``loss_fn`` must be built from this module's ops so that one call can
    evaluate many perturbations at once.
    """
    arrays = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    rng = np.random.default_rng(seed)
    retries = 0
    while True:
        base, pattern = _probe(loss_fn, arrays)
        again, pattern_again = _probe(loss_fn, arrays)
        if not np.array_equal(base, again) or not _same_pattern(pattern, pattern_again, 1).all():
            raise NonDeterministicForward("forward gave different results for identical parameters")
        _, grads = analytic_grads(loss_fn, arrays)
        result = _sweep(loss_fn, arrays, grads, step, pattern, chunk)
        if result is not None:
            break
        if retries >= max_kink_retries:
            raise UsageError(f"could not move parameters away from a kink after {retries} shifts")
        retries += 1
        for a in arrays.values():
            a += rng.uniform(-kink_shift, kink_shift, size=a.shape)
    (err, name, index), n = result
    return GradCheckReport(
        max_rel_error=float(err),
        worst_param=name,
        worst_index=tuple(int(j) for j in index),
        n_coords=n,
        kink_retries=retries,
        tolerance=tolerance,
    )


def _sweep(loss_fn, arrays, grads, step, pattern, chunk):
    worst = (-1.0, "", ())
    n = 0
    for name, a in arrays.items():
        g_ad = grads[name].reshape(-1)
        for start in range(0, a.size, chunk):
            idx = np.arange(start, min(start + chunk, a.size))
            # variant 2j is +step on coordinate idx[j], variant 2j+1 is -step
            stack = np.repeat(a.reshape(1, -1), 2 * idx.size, axis=0)
            rows = np.arange(idx.size)
            stack[2 * rows, idx] += step
            stack[2 * rows + 1, idx] -= step
            losses, probe_pattern = _probe(loss_fn, arrays, name, stack.reshape((-1,) + a.shape))
            if not _same_pattern(pattern, probe_pattern, 2 * idx.size).all():
                return None
            g_fd = (losses[0::2] - losses[1::2]) / (2 * step)
            err = np.abs(g_ad[idx] - g_fd) / np.maximum(1.0, np.abs(g_ad[idx]) + np.abs(g_fd))
            n += idx.size
            j = int(np.argmax(err))
            if err[j] > worst[0]:
                worst = (float(err[j]), name, np.unravel_index(idx[j], a.shape))
    return worst, n
