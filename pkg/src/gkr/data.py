"""Pair sets, fold assignment, CSV I/O and the synthetic heritable-trait task.

File formats (UTF-8, comma separated, LF line endings):

features CSV   ``id,role,f0,f1,...,f{D-1}``; role is ``parent`` or ``child``.
pairs CSV      ``parent_id,child_id,label,fold,relation``; label is 0 or 1,
               fold is an integer in [1, 5], relation is free text
               (F-S, F-D, M-S, M-D for kinship data). ``relation`` may be
               omitted and defaults to ``synthetic``.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .diffmath import UsageError

RELATIONS = ("F-S", "F-D", "M-S", "M-D")
DEFAULT_RELATION = "synthetic"
MAX_FOLDS = 5
ROLES = ("parent", "child")


class ParseError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else f"{path}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


class PairSetError(ValueError):
    pass


# --------------------------------------------------------------- features


@dataclass
class FeatureTable:
    ids: list[str]
    roles: list[str]
    values: np.ndarray
    _index: dict[str, int] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids) or len(self.roles) != len(self.ids):
            raise UsageError(
                f"feature table needs one role and one row per id: {len(self.ids)} ids, "
                f"{len(self.roles)} roles, values {self.values.shape}"
            )
        self._index = {}
        for i, ident in enumerate(self.ids):
            if ident in self._index:
                raise UsageError(f"duplicate feature id {ident!r}")
            self._index[ident] = i

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, ident: str) -> bool:
        return ident in self._index

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureTable):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.roles == other.roles
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return self.values[[self._index[i] for i in ids]]
        except KeyError as e:
            raise UsageError(f"unknown feature id {e.args[0]!r}") from None


def write_features(path, table: FeatureTable) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "role"] + [f"f{j}" for j in range(table.dim)])
        for ident, role, row in zip(table.ids, table.roles, table.values):
            # repr gives the shortest string that round-trips a float64
            w.writerow([ident, role] + [repr(float(x)) for x in row])


def read_features(path) -> FeatureTable:
    ids: list[str] = []
    roles: list[str] = []
    rows: list[list[float]] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(path, 1, "empty file; expected header id,role,f0,...")
        if header[:2] != ["id", "role"] or len(header) < 3:
            raise ParseError(path, 1, f"header must start with id,role,f0 ... got {','.join(header)}")
        dim = len(header) - 2
        expected = [f"f{j}" for j in range(dim)]
        if header[2:] != expected:
            raise ParseError(path, 1, f"feature columns must be f0..f{dim - 1} in order")
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != dim + 2:
                raise ParseError(path, line_no, f"expected {dim + 2} columns (header has D={dim}), got {len(rec)}")
            ident, role = rec[0], rec[1]
            if not ident:
                raise ParseError(path, line_no, "empty id")
            if ident in seen:
                raise ParseError(path, line_no, f"duplicate id {ident!r} (first seen on line {seen[ident]})")
            if role not in ROLES:
                raise ParseError(path, line_no, f"role must be parent or child, got {role!r}")
            try:
                vals = [float(x) for x in rec[2:]]
            except ValueError:
                bad = next(x for x in rec[2:] if not _is_float(x))
                raise ParseError(path, line_no, f"non-numeric feature value {bad!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(path, line_no, "feature values must be finite")
            seen[ident] = line_no
            ids.append(ident)
            roles.append(role)
            rows.append(vals)
    if not ids:
        raise ParseError(path, None, "no feature rows")
    return FeatureTable(ids, roles, np.array(rows, dtype=np.float64).reshape(len(ids), dim))


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


# ------------------------------------------------------------------ pairs


@dataclass(frozen=True)
class Pair:
    parent_id: str
    child_id: str
    label: int
    fold: int | None = None
    relation: str = DEFAULT_RELATION

    @property
    def key(self) -> tuple[str, str]:
        return (self.parent_id, self.child_id)


@dataclass
class PairSet:
    """Positive (kin) pairs plus a balanced set of negative pairs."""

    pairs: list[Pair]

    @property
    def positives(self) -> list[Pair]:
        return [p for p in self.pairs if p.label == 1]

    @property
    def negatives(self) -> list[Pair]:
        return [p for p in self.pairs if p.label == 0]

    @property
    def folds(self) -> list[int]:
        return sorted({p.fold for p in self.pairs if p.fold is not None})

    @property
    def relations(self) -> list[str]:
        present = {p.relation for p in self.pairs}
        ordered = [r for r in RELATIONS if r in present]
        return ordered + sorted(present - set(RELATIONS))

    @property
    def has_kin_relations(self) -> bool:
        return any(p.relation in RELATIONS for p in self.pairs)

    def in_folds(self, folds: Iterable[int]) -> list[Pair]:
        keep = set(folds)
        return [p for p in self.pairs if p.fold in keep]

    def validate(self, features: FeatureTable | None = None) -> None:
        """Raise PairSetError unless every PairSet invariant holds."""
        validate_pairs(self.pairs, features)


def validate_pairs(pairs: Sequence[Pair], features: FeatureTable | None = None) -> None:
    pos = [p for p in pairs if p.label == 1]
    neg = [p for p in pairs if p.label == 0]
    bad = [p for p in pairs if p.label not in (0, 1)]
    if bad:
        raise PairSetError(f"label must be 0 or 1, got {bad[0].label!r}")
    kin = {p.key for p in pos}
    for p in neg:
        if p.key in kin:
            raise PairSetError(f"negative pair {p.key} pairs a parent with its own child")
    keys = [p.key for p in pairs]
    if len(set(keys)) != len(keys):
        dup = next(k for k in keys if keys.count(k) > 1)
        raise PairSetError(f"pair {dup} listed more than once")
    if features is not None:
        for p in pairs:
            for ident in p.key:
                if ident not in features:
                    raise PairSetError(f"pair {p.key} references unknown id {ident!r}")
    with_fold = [p.fold is not None for p in pairs]
    if any(with_fold) and not all(with_fold):
        raise PairSetError("either every pair carries a fold id or none does")
    if neg:
        if len(neg) != len(pos):
            raise PairSetError(f"negatives ({len(neg)}) must balance positives ({len(pos)})")
        if all(with_fold):
            parent_folds = defaultdict(set)
            for p in pos:
                parent_folds[p.parent_id].add(p.fold)
            for p in neg:
                if parent_folds.get(p.parent_id) and p.fold not in parent_folds[p.parent_id]:
                    raise PairSetError(
                        f"negative pair {p.key} is in fold {p.fold} but its parent is in fold(s) "
                        f"{sorted(parent_folds[p.parent_id])}"
                    )
            count = defaultdict(int)
            for p in pairs:
                count[p.fold] += 1 if p.label == 1 else -1
            unbalanced = sorted(f for f, c in count.items() if c)
            if unbalanced:
                raise PairSetError(f"positives and negatives differ in count in fold(s) {unbalanced}")


def build_negative_set(positives: Sequence[Pair], seed: int) -> list[Pair]:
    """Draw one non-kin pair per positive pair.

    Positives are grouped by (fold, relation). Within a group of n positives,
    n distinct (parent_i, child_j), i != j, are drawn uniformly without
    replacement, skipping any combination that is itself a kin pair. A
    relation with a single pair in some fold joins the other such pairs of
    that fold, or, if it is the only one, takes its child from the whole fold.
    Each negative inherits the fold and relation of its parent's pair, so no
    individual crosses a fold boundary.
    """
    positives = list(positives)
    if len(positives) < 2:
        raise UsageError(f"need at least 2 positive pairs to form negatives, got {len(positives)}")
    kin = {p.key for p in positives}
    by_fold: dict[int, list[Pair]] = defaultdict(list)
    groups: dict[tuple, list[Pair]] = defaultdict(list)
    for p in positives:
        fold = p.fold if p.fold is not None else 0
        by_fold[fold].append(p)
        groups[(fold, p.relation)].append(p)
    plan: list[tuple[str, list[Pair], list[Pair]]] = []  # (label, parents, child pool)
    for fold in sorted(by_fold):
        keys = sorted(k for k in groups if k[0] == fold)
        singles = [groups[k][0] for k in keys if len(groups[k]) == 1]
        for k in keys:
            if len(groups[k]) > 1:
                plan.append((f"fold {fold}, relation {k[1]}", groups[k], groups[k]))
        if len(singles) > 1:
            plan.append((f"fold {fold}, small relations", singles, singles))
        elif singles:
            if len(by_fold[fold]) < 2:
                raise UsageError(f"fold {fold} has 1 positive pair; at least 2 are needed to form negatives")
            plan.append((f"fold {fold}, relation {singles[0].relation}", singles, by_fold[fold]))
    rng = np.random.default_rng(seed)
    out: list[Pair] = []
    for label, parents, pool in plan:
        candidates = [
            (i, j)
            for i, pi in enumerate(parents)
            for j, pj in enumerate(pool)
            if pi is not pj and (pi.parent_id, pj.child_id) not in kin
        ]
        n = len(parents)
        if len(candidates) < n:
            raise UsageError(f"{label}: only {len(candidates)} non-kin combinations for {n} positives")
        chosen = rng.choice(len(candidates), size=n, replace=False)
        for c in np.sort(chosen):
            i, j = candidates[c]
            out.append(Pair(parents[i].parent_id, pool[j].child_id, 0, parents[i].fold, parents[i].relation))
    return out


def make_folds(positives: Sequence[Pair], k: int = MAX_FOLDS, seed: int = 0) -> list[Pair]:
    """Assign fold ids 1..k to positive pairs.

    If every pair already carries a fold id those are validated and kept.
    Otherwise pairs are shuffled within each relation and dealt round-robin,
    so fold sizes differ by at most one and relations spread evenly.
    """
    positives = list(positives)
    if k < 2:
        raise UsageError(f"need at least 2 folds, got {k}")
    if len(positives) < k:
        raise UsageError(f"{len(positives)} positive pairs cannot fill {k} folds")
    if all(p.fold is not None for p in positives):
        used = {p.fold for p in positives}
        if not used <= set(range(1, k + 1)):
            raise UsageError(f"preassigned fold ids {sorted(used)} fall outside 1..{k}")
        if len(used) != k:
            raise UsageError(f"preassigned folds leave fold(s) {sorted(set(range(1, k + 1)) - used)} empty")
        return positives
    rng = np.random.default_rng(seed)
    by_rel: dict[str, list[int]] = defaultdict(list)
    for i, p in enumerate(positives):
        by_rel[p.relation].append(i)
    order: list[int] = []
    for rel in sorted(by_rel):
        idx = by_rel[rel]
        order.extend(idx[j] for j in rng.permutation(len(idx)))
    folds = [0] * len(positives)
    for pos, i in enumerate(order):
        folds[i] = pos % k + 1
    return [replace(p, fold=f) for p, f in zip(positives, folds)]


def complete_pairset(pairset: PairSet, seed: int, k: int = MAX_FOLDS) -> PairSet:
    """Fill in missing folds and negatives for a positives-only manifest."""
    pos = pairset.positives
    neg = pairset.negatives
    if any(p.fold is None for p in pairset.pairs):
        if neg:
            raise UsageError("negatives without fold ids; supply folds for every pair or omit the negatives")
        pos = make_folds(pos, k=k, seed=seed)
    if not neg:
        neg = build_negative_set(pos, seed)
    out = PairSet(pos + neg)
    out.validate()
    return out


PAIR_COLUMNS = ("parent_id", "child_id", "label", "fold", "relation")


def write_pairs(path, pairset: PairSet) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIR_COLUMNS)
        for p in pairset.pairs:
            w.writerow([p.parent_id, p.child_id, p.label, "" if p.fold is None else p.fold, p.relation])


def read_pairs(path, features: FeatureTable | None = None, allow_missing_folds: bool = False) -> PairSet:
    """Parse a pairs manifest and check every PairSet invariant.

    A manifest may list positives only; negatives are then drawn later by
    :func:`complete_pairset`.
    """
    pairs: list[Pair] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(path, 1, f"empty file; expected header {','.join(PAIR_COLUMNS)}")
        col = {name: i for i, name in enumerate(header)}
        for name in ("parent_id", "child_id", "label"):
            if name not in col:
                raise ParseError(path, 1, f"missing column {name!r}; header must be {','.join(PAIR_COLUMNS)}")
        if "fold" not in col and not allow_missing_folds:
            raise ParseError(
                path,
                1,
                "missing column 'fold'; assign folds first with make_folds "
                "(CLI: pass --assign-folds to generate them from the seed)",
            )
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(path, line_no, f"expected {len(header)} columns, got {len(rec)}")
            parent, child = rec[col["parent_id"]], rec[col["child_id"]]
            if features is not None:
                for ident in (parent, child):
                    if ident not in features:
                        raise ParseError(path, line_no, f"unresolved id {ident!r}")
            label_s = rec[col["label"]].strip()
            if label_s not in ("0", "1"):
                raise ParseError(path, line_no, f"label must be 0 or 1, got {label_s!r}")
            fold = None
            if "fold" in col:
                fold_s = rec[col["fold"]].strip()
                if fold_s == "" and allow_missing_folds:
                    fold = None
                else:
                    try:
                        fold = int(fold_s)
                    except ValueError:
                        raise ParseError(path, line_no, f"fold must be an integer in [1, {MAX_FOLDS}], got {fold_s!r}") from None
                    if not 1 <= fold <= MAX_FOLDS:
                        raise ParseError(path, line_no, f"fold must be in [1, {MAX_FOLDS}], got {fold}")
            relation = rec[col["relation"]].strip() if "relation" in col else DEFAULT_RELATION
            pairs.append(Pair(parent, child, int(label_s), fold, relation or DEFAULT_RELATION))
    if not pairs:
        raise ParseError(path, None, "no pair rows")
    out = PairSet(pairs)
    try:
        out.validate(features)
    except PairSetError as e:
        raise ParseError(path, None, str(e)) from None
    return out


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class SynthSpec:
    """Heritable-trait generator.

    Each family has a latent genome g ~ N(0, I_G). The parent observes
    tanh(M_p g + sigma eps); the child inherits rho g + sqrt(1 - rho^2) g'
    (fresh g') and observes tanh(M_c (...) + sigma eps').

    M_c is M_p (``map_coupling`` = 1) or a blend with an independent map,
    with the rows of ``flip_fraction`` of the dimensions negated: those
    traits are expressed with opposite sign in the child.
    """

    families: int = 500
    genome_dim: int = 8
    dim: int = 16
    rho: float = 0.8
    sigma: float = 0.3
    seed: int = 0
    mixing_seed: int | None = None
    map_coupling: float = 1.0
    flip_fraction: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise UsageError(f"rho must be in [0, 1], got {self.rho}")
        if self.dim < 1 or self.genome_dim < 1:
            raise UsageError("dim and genome_dim must be >= 1")
        if self.families < 2:
            raise UsageError("need at least 2 families")
        if self.sigma < 0:
            raise UsageError(f"sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.map_coupling <= 1.0:
            raise UsageError(f"map_coupling must be in [0, 1], got {self.map_coupling}")
        if not 0.0 <= self.flip_fraction <= 1.0:
            raise UsageError(f"flip_fraction must be in [0, 1], got {self.flip_fraction}")


def mixing_maps(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Parent and child G -> D maps. ``map_coupling`` = 1 and
    ``flip_fraction`` = 0 make them equal."""
    rng = np.random.default_rng(spec.seed if spec.mixing_seed is None else spec.mixing_seed)
    scale = 1.0 / math.sqrt(spec.genome_dim)
    Mp = rng.normal(0.0, scale, size=(spec.dim, spec.genome_dim))
    other = rng.normal(0.0, scale, size=(spec.dim, spec.genome_dim))
    c = spec.map_coupling
    Mc = c * Mp + math.sqrt(1.0 - c * c) * other
    flipped = rng.permutation(spec.dim)[: int(round(spec.flip_fraction * spec.dim))]
    Mc[flipped] *= -1.0
    return Mp, Mc


def gen_synthetic(spec: SynthSpec, folds: int = MAX_FOLDS) -> tuple[FeatureTable, PairSet]:
    """Features and a balanced, fold-assigned pair set for ``spec.families``
    parent/child families. Family i is tagged with relation i mod 4."""
    Mp, Mc = mixing_maps(spec)
    rng = np.random.default_rng([spec.seed, 1])
    n, G = spec.families, spec.genome_dim
    g = rng.normal(size=(n, G))
    g_new = rng.normal(size=(n, G))
    eps_p = rng.normal(size=(n, spec.dim))
    eps_c = rng.normal(size=(n, spec.dim))
    parent = np.tanh(g @ Mp.T + spec.sigma * eps_p)
    child_genome = spec.rho * g + math.sqrt(max(0.0, 1.0 - spec.rho**2)) * g_new
    child = np.tanh(child_genome @ Mc.T + spec.sigma * eps_c)

    width = len(str(n - 1))
    pids = [f"p{i:0{width}d}" for i in range(n)]
    cids = [f"c{i:0{width}d}" for i in range(n)]
    table = FeatureTable(
        ids=[x for pair in zip(pids, cids) for x in pair],
        roles=["parent", "child"] * n,
        values=np.stack([parent, child], axis=1).reshape(2 * n, spec.dim),
    )
    positives = [Pair(pids[i], cids[i], 1, None, RELATIONS[i % len(RELATIONS)]) for i in range(n)]
    positives = make_folds(positives, k=folds, seed=spec.seed)
    negatives = build_negative_set(positives, seed=spec.seed)
    pairset = PairSet(positives + negatives)
    pairset.validate(table)
    return table, pairset


def pair_arrays(pairs: Sequence[Pair], features: FeatureTable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(parent features, child features, labels) for a list of pairs."""
    fx = features.rows([p.parent_id for p in pairs])
    fy = features.rows([p.child_id for p in pairs])
    y = np.array([p.label for p in pairs], dtype=np.int64)
    return fx, fy, y
