from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gkr.data import (
    RELATIONS,
    FeatureTable,
    Pair,
    PairSet,
    PairSetError,
    ParseError,
    SynthSpec,
    build_negative_set,
    complete_pairset,
    gen_synthetic,
    make_folds,
    mixing_maps,
    pair_arrays,
    read_features,
    read_pairs,
    write_features,
    write_pairs,
)
from gkr.diffmath import UsageError


def positives(n, relations=("synthetic",)):
    return [Pair(f"p{i}", f"c{i}", 1, None, relations[i % len(relations)]) for i in range(n)]


def table_for(pairs, dim=3, seed=0):
    ids = sorted({p.parent_id for p in pairs} | {p.child_id for p in pairs})
    roles = ["parent" if i.startswith("p") else "child" for i in ids]
    return FeatureTable(ids, roles, np.random.default_rng(seed).normal(size=(len(ids), dim)))


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestFeatureFiles:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        vals = np.concatenate([rng.normal(size=(4, 3)) * 10.0 ** rng.integers(-300, 300, size=(4, 1)), [[0.1, 1 / 3, -0.0]]])
        t = FeatureTable([f"x{i}" for i in range(5)], ["parent", "child"] * 2 + ["parent"], vals)
        write_features(tmp_path / "f.csv", t)
        back = read_features(tmp_path / "f.csv")
        assert back == t
        assert back.values.tobytes() == t.values.tobytes()

    def test_header(self, tmp_path):
        assert (tmp_path / "f.csv").exists() is False
        write_features(tmp_path / "f.csv", FeatureTable(["a"], ["child"], [[1.5, 2.0]]))
        assert (tmp_path / "f.csv").read_text().splitlines()[0] == "id,role,f0,f1"

    @pytest.mark.parametrize(
        "body, line, fragment",
        [
            ("id,role,f0\na,parent,1\na,child,2\n", 3, "duplicate id"),
            ("id,role,f0\na,uncle,1\n", 2, "role"),
            ("id,role,f0,f1\na,parent,1\n", 2, "columns"),
            ("id,role,f0\na,parent,abc\n", 2, "non-numeric"),
            ("id,role,f0\na,parent,nan\n", 2, "finite"),
            ("name,role,f0\n", 1, "header"),
        ],
    )
    def test_errors_name_line(self, tmp_path, body, line, fragment):
        with pytest.raises(ParseError, match=fragment) as e:
            read_features(write(tmp_path / "f.csv", body))
        assert e.value.line == line
        assert f":{line}:" in str(e.value)

    def test_duplicate_ids_in_table(self):
        with pytest.raises(UsageError):
            FeatureTable(["a", "a"], ["parent", "child"], np.zeros((2, 2)))


class TestPairFiles:
    def test_round_trip(self, tmp_path):
        table, ps = gen_synthetic(SynthSpec(families=30, seed=2))
        write_pairs(tmp_path / "p.csv", ps)
        assert read_pairs(tmp_path / "p.csv", table).pairs == ps.pairs

    def test_missing_fold_column_points_to_make_folds(self, tmp_path):
        path = write(tmp_path / "p.csv", "parent_id,child_id,label\np0,c0,1\np1,c1,1\n")
        with pytest.raises(ParseError, match="make_folds"):
            read_pairs(path)
        assert len(read_pairs(path, allow_missing_folds=True).positives) == 2

    @pytest.mark.parametrize(
        "row, fragment",
        [
            ("p0,c0,2,1", "label"),
            ("p0,c0,1,6", "fold"),
            ("p0,c0,1,x", "fold"),
            ("p0,zz,1,1", "unresolved"),
        ],
    )
    def test_row_errors(self, tmp_path, row, fragment):
        table = FeatureTable(["p0", "c0"], ["parent", "child"], np.zeros((2, 2)))
        path = write(tmp_path / "p.csv", f"parent_id,child_id,label,fold\n{row}\n")
        with pytest.raises(ParseError, match=fragment) as e:
            read_pairs(path, table)
        assert e.value.line == 2

    def test_relation_column_optional(self, tmp_path):
        path = write(tmp_path / "p.csv", "parent_id,child_id,label,fold\np0,c0,1,1\n")
        assert read_pairs(path).pairs[0].relation == "synthetic"

    def test_invariant_violation_reported(self, tmp_path):
        path = write(tmp_path / "p.csv", "parent_id,child_id,label,fold\np0,c0,1,1\np1,c1,1,1\np0,c0,0,1\n")
        with pytest.raises(ParseError):
            read_pairs(path)


class TestFolds:
    def test_sizes_differ_by_at_most_one(self):
        sizes = sorted(Counter(p.fold for p in make_folds(positives(11), 5, seed=0)).values(), reverse=True)
        assert sizes == [3, 2, 2, 2, 2]

    def test_preassigned_passthrough(self):
        pos = [Pair(f"p{i}", f"c{i}", 1, i % 5 + 1) for i in range(10)]
        assert make_folds(pos, 5) == pos

    def test_preassigned_out_of_range(self):
        with pytest.raises(UsageError):
            make_folds([Pair(f"p{i}", f"c{i}", 1, 6) for i in range(10)], 5)

    def test_too_few(self):
        with pytest.raises(UsageError):
            make_folds(positives(3), 5)

    def test_relations_spread(self):
        folds = make_folds(positives(40, RELATIONS), 5, seed=1)
        for f in range(1, 6):
            assert Counter(p.relation for p in folds if p.fold == f) == {r: 2 for r in RELATIONS}

    def test_deterministic(self):
        assert make_folds(positives(23), 5, seed=4) == make_folds(positives(23), 5, seed=4)


class TestNegatives:
    def test_balanced_and_non_kin(self):
        pos = make_folds(positives(50, RELATIONS), 5, seed=0)
        neg = build_negative_set(pos, seed=0)
        assert len(neg) == len(pos)
        kin = {p.key for p in pos}
        assert not any(n.key in kin for n in neg)
        assert len({n.key for n in neg}) == len(neg)
        PairSet(pos + neg).validate()

    def test_negatives_stay_in_fold(self):
        pos = make_folds(positives(50, RELATIONS), 5, seed=0)
        fold_of = {p.parent_id: p.fold for p in pos} | {p.child_id: p.fold for p in pos}
        for n in build_negative_set(pos, seed=3):
            assert fold_of[n.parent_id] == fold_of[n.child_id] == n.fold

    def test_small_relation_groups(self):
        # 7 F-S pairs over 5 folds leaves single pairs in some folds
        pos = make_folds(positives(7, ("F-S",)) + [Pair(f"q{i}", f"d{i}", 1, None, "M-D") for i in range(13)], 5, seed=0)
        neg = build_negative_set(pos, seed=1)
        PairSet(pos + neg).validate()

    def test_needs_two(self):
        with pytest.raises(UsageError):
            build_negative_set(positives(1), seed=0)

    def test_deterministic(self):
        pos = make_folds(positives(30), 5, seed=0)
        assert build_negative_set(pos, 5) == build_negative_set(pos, 5)
        assert build_negative_set(pos, 5) != build_negative_set(pos, 6)

    @given(
        st.integers(10, 80),
        st.lists(st.sampled_from(RELATIONS + ("synthetic",)), min_size=1, max_size=5),
        st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_complete_pairset_invariants(self, n, rels, seed):
        ps = complete_pairset(PairSet(positives(n, tuple(rels))), seed)
        assert len(ps.negatives) == len(ps.positives) == n
        kin = {p.key for p in ps.positives}
        assert all(p.key not in kin and p.parent_id[1:] != p.child_id[1:] for p in ps.negatives)
        for f in ps.folds:
            in_fold = ps.in_folds([f])
            assert sum(p.label for p in in_fold) * 2 == len(in_fold)

    def test_validate_rejects_kin_negative(self):
        with pytest.raises(PairSetError, match="own child"):
            PairSet([Pair("p0", "c0", 1, 1), Pair("p1", "c1", 1, 1), Pair("p0", "c0", 0, 1)]).validate()

    def test_validate_rejects_imbalance(self):
        with pytest.raises(PairSetError, match="balance"):
            PairSet([Pair("p0", "c0", 1, 1), Pair("p1", "c1", 1, 1), Pair("p0", "c1", 0, 1)]).validate()

    def test_validate_rejects_cross_fold_negative(self):
        pairs = [Pair("p0", "c0", 1, 1), Pair("p1", "c1", 1, 2), Pair("p0", "c1", 0, 2), Pair("p1", "c0", 0, 1)]
        with pytest.raises(PairSetError, match="fold"):
            PairSet(pairs).validate()


class TestSynthetic:
    def test_identical_when_fully_heritable(self):
        spec = SynthSpec(families=40, rho=1.0, sigma=0.0, flip_fraction=0.0, seed=3)
        table, ps = gen_synthetic(spec)
        fx, fy, y = pair_arrays(ps.positives, table)
        np.testing.assert_array_equal(fx, fy)

    def test_cosine_separates_degenerate_case(self):
        table, ps = gen_synthetic(SynthSpec(families=40, rho=1.0, sigma=0.0, flip_fraction=0.0, seed=3))
        fx, fy, y = pair_arrays(ps.pairs, table)
        cos = (fx * fy).sum(1) / np.linalg.norm(fx, axis=1) / np.linalg.norm(fy, axis=1)
        assert cos[y == 1].min() > cos[y == 0].max()

    def test_deterministic(self):
        a = gen_synthetic(SynthSpec(families=30, seed=5))
        b = gen_synthetic(SynthSpec(families=30, seed=5))
        assert a[0] == b[0] and a[1].pairs == b[1].pairs

    def test_shapes_and_tags(self):
        table, ps = gen_synthetic(SynthSpec(families=20, dim=7))
        assert table.dim == 7 and len(table) == 40
        assert ps.relations == list(RELATIONS)
        assert ps.folds == [1, 2, 3, 4, 5]
        assert np.all(np.abs(table.values) < 1)

    def test_flip_fraction(self):
        Mp, Mc = mixing_maps(SynthSpec(dim=16, flip_fraction=0.25))
        assert int(np.all(np.isclose(Mc, -Mp), axis=1).sum()) == 4
        assert int(np.all(np.isclose(Mc, Mp), axis=1).sum()) == 12

    @pytest.mark.parametrize("field, value", [("rho", 1.5), ("dim", 0), ("genome_dim", 0), ("sigma", -1), ("families", 1)])
    def test_invalid_spec(self, field, value):
        with pytest.raises(UsageError):
            SynthSpec(**{field: value})
