import io

import numpy as np
import pytest

from ontolabel.ontology import (
    Label,
    LabelOntology,
    LabelSet,
    OntologyError,
    OntologyFormatError,
    load_ontology,
    parse_ontology,
)

from oracles import (
    closure_oracle,
    expand_oracle,
    make_ontology,
    random_consistent_ontology,
    random_dag,
)


class TestLabelSet:
    def test_from_ids_roundtrip(self):
        ls = LabelSet.from_ids(10, [0, 3, 9])
        assert ls.ids() == [0, 3, 9]
        assert len(ls) == 3
        assert 3 in ls and 4 not in ls

    def test_set_algebra(self):
        a = LabelSet.from_ids(8, [0, 1, 2])
        b = LabelSet.from_ids(8, [2, 3])
        assert (a | b).ids() == [0, 1, 2, 3]
        assert (a & b).ids() == [2]
        assert (a - b).ids() == [0, 1]
        assert not a.isdisjoint(b)
        assert a.isdisjoint(LabelSet.from_ids(8, [5]))

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            LabelSet.from_ids(4, [0]) | LabelSet.from_ids(5, [0])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            LabelSet.from_ids(4, [4])

    def test_array_roundtrip(self):
        ls = LabelSet.from_ids(6, [1, 4])
        arr = ls.to_array()
        assert arr.tolist() == [0, 1, 0, 0, 1, 0]
        assert LabelSet.from_array(arr) == ls


class TestValidate:
    def test_two_node_cycle_reported(self):
        ont = make_ontology(2, edges=[(0, 1), (1, 0)])
        report = ont.validate()
        cycles = [v for v in report.violations if v.kind == "cycle"]
        assert len(cycles) == 1
        assert set(cycles[0].ids) == {0, 1}

    def test_self_exclusive_pair_reported(self):
        ont = make_ontology(2, exclusive=[(0, 0)])
        report = ont.validate()
        assert report.kinds() == {"self-exclusive"}

    def test_ancestor_exclusive_reported(self):
        ont = make_ontology(3, edges=[(0, 1), (1, 2)], exclusive=[(0, 2)])
        report = ont.validate()
        assert report.kinds() == {"ancestor-exclusive"}

    def test_duplicate_synonym_reported(self):
        labels = [Label(0, "a", "type"), Label(1, "b", "type")]
        ont = LabelOntology(labels, synonym_entries=[("shared", 0), ("Shared", 1)])
        report = ont.validate()
        assert report.kinds() == {"duplicate-synonym"}

    def test_sample_fixture_is_clean(self, sample_ontology):
        assert sample_ontology.validate().ok

    def test_bench_fixture_is_clean(self, bench_ontology):
        assert bench_ontology.validate().ok

    def test_non_dense_ids_rejected_at_construction(self):
        with pytest.raises(OntologyError):
            LabelOntology([Label(1, "a", "type")])


class TestAncestors:
    def test_chain_from_fixture(self, sample_ontology):
        ont = sample_ontology
        anc = ont.ancestors(ont.resolve_name("right mid lung"))
        assert {ont.name_of(i) for i in anc} == {"right lung", "lung", "chest"}

    def test_root_has_no_ancestors(self, sample_ontology):
        assert not sample_ontology.ancestors(sample_ontology.resolve_name("chest"))

    def test_diamond(self):
        # d -> b -> a, d -> c -> a
        ont = make_ontology(4, edges=[(1, 0), (2, 0), (3, 1), (3, 2)])
        assert set(ont.ancestors(3).ids()) == {0, 1, 2}
        assert set(ont.ancestors(3).ids()) == expand_oracle(4, ont.parent_edges, [3]) - {3}

    def test_out_of_range(self, sample_ontology):
        with pytest.raises(ValueError):
            sample_ontology.ancestors(sample_ontology.n_labels)


class TestExpand:
    def test_fixture_chain(self, sample_ontology):
        ont = sample_ontology
        expanded = ont.expand(ont.label_set_by_names(["right mid lung"]))
        assert {ont.name_of(i) for i in expanded} == {
            "right mid lung", "right lung", "lung", "chest",
        }

    def test_empty_set(self, sample_ontology):
        ont = sample_ontology
        assert not ont.expand(ont.label_set())

    def test_matches_reachability_oracle_on_random_dags(self):
        rng = np.random.default_rng(20240)
        for _ in range(30):
            n = int(rng.integers(2, 31))
            edges = random_dag(rng, n, 40)
            ont = make_ontology(n, edges)
            ids = [int(i) for i in rng.choice(n, size=rng.integers(0, n + 1), replace=False)]
            expanded = ont.expand(LabelSet.from_ids(n, ids))
            assert set(expanded.ids()) == expand_oracle(n, edges, ids)

    def test_idempotent_and_monotone(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n = int(rng.integers(2, 31))
            ont = make_ontology(n, random_dag(rng, n, 40))
            ids = [int(i) for i in rng.choice(n, size=rng.integers(0, n + 1), replace=False)]
            labels = LabelSet.from_ids(n, ids)
            once = ont.expand(labels)
            assert labels.issubset(once)
            assert ont.expand(once) == once
            assert len(once) <= n


class TestExclusivityClosure:
    def test_descendants_inherit_exclusivity(self, sample_ontology):
        ont = sample_ontology
        pair = tuple(sorted((ont.resolve_name("left lower lobe"), ont.resolve_name("right mid lung"))))
        assert pair in ont.exclusivity_closure()

    def test_no_authored_pairs_empty_closure(self):
        ont = make_ontology(4, edges=[(1, 0)])
        assert ont.exclusivity_closure() == frozenset()

    def test_leaf_pair_closure_is_identity(self):
        ont = make_ontology(3, exclusive=[(0, 1)])
        assert ont.exclusivity_closure() == frozenset({(0, 1)})

    def test_matches_double_loop_oracle_on_random_ontologies(self):
        rng = np.random.default_rng(99)
        for _ in range(30):
            n = int(rng.integers(2, 25))
            ont, edges, exclusive = random_consistent_ontology(rng, n, 30, 6)
            assert set(ont.exclusivity_closure()) == closure_oracle(n, edges, exclusive)

    def test_symmetric_irreflexive_and_superset(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(3, 20))
            ont, _, exclusive = random_consistent_ontology(rng, n, 20, 5)
            closure = ont.exclusivity_closure()
            for a, b in closure:
                assert a < b  # stored as sorted pairs: symmetric by construction
                assert a != b
            for a, b in exclusive:
                assert tuple(sorted((a, b))) in closure
            for x in range(n):
                partners = ont.exclusive_partners(x)
                assert x not in partners
                for y in partners:
                    assert x in ont.exclusive_partners(y)

    def test_shared_descendant_rejected(self):
        # c sits under both sides of an exclusive pair
        ont = make_ontology(3, edges=[(2, 0), (2, 1)], exclusive=[(0, 1)])
        assert ont.validate().ok  # authored pairs alone look fine
        with pytest.raises(OntologyError):
            ont.exclusivity_closure()

    def test_ancestor_descendant_closure_pair_rejected(self):
        # a~b, x under a, y under b and under x: closure would pair x with its child y
        ont = make_ontology(
            4, edges=[(2, 0), (3, 1), (3, 2)], exclusive=[(0, 1)]
        )
        assert ont.validate().ok
        with pytest.raises(OntologyError):
            ont.exclusivity_closure()


class TestReliableNegatives:
    def test_fixture_expansion_excludes_other_side(self, sample_ontology):
        ont = sample_ontology
        positives = ont.expand(ont.label_set_by_names(["right mid lung"]))
        negatives = {ont.name_of(i) for i in ont.reliable_negatives(positives)}
        assert "left lung" in negatives
        assert "left lower lobe" in negatives  # every descendant comes along

    def test_no_exclusive_partners(self):
        ont = make_ontology(4, edges=[(1, 0)])
        assert not ont.reliable_negatives(LabelSet.from_ids(4, [0, 1]))

    def test_chest_abdomen_fixture(self, sample_ontology):
        ont = sample_ontology
        negatives = {
            ont.name_of(i)
            for i in ont.reliable_negatives(ont.label_set_by_names(["chest"]))
        }
        assert {"abdomen", "liver", "hemangioma"} <= negatives

    def test_disjoint_from_positives(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = int(rng.integers(3, 20))
            ont, _, _ = random_consistent_ontology(rng, n, 20, 5)
            leaves = [i for i in range(n) if not ont.children_of(i)]
            picked = ont.label_set()
            for lid in rng.permutation(leaves):
                trial = ont.expand(picked | ont.label_set([int(lid)]))
                if not ont.has_exclusive_conflict(trial):
                    picked = trial
            assert ont.reliable_negatives(picked).isdisjoint(picked)


class TestLoader:
    def test_loads_fixture_and_resolves_synonyms(self, sample_ontology):
        ont = sample_ontology
        assert ont.resolve_name("Right Middle Lobe") == ont.resolve_name("right mid lung")
        assert ont.labels[0].name == "chest"

    def test_report_goes_to_stream_and_load_fails(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text(
            "[labels]\n0 | a | type |\n1 | b | type |\n"
            "[parents]\na -> b\nb -> a\n",
            encoding="utf-8",
        )
        stream = io.StringIO()
        with pytest.raises(OntologyError):
            load_ontology(bad, report_stream=stream)
        assert "cycle" in stream.getvalue()

    def test_malformed_line_reports_line_number(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("[labels]\n0 | a | type |\nnot a label line\n", encoding="utf-8")
        with pytest.raises(OntologyFormatError) as err:
            parse_ontology(bad)
        assert ":3:" in str(err.value)

    def test_unknown_parent_name_reports_line_number(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("[labels]\n0 | a | type |\n[parents]\na -> ghost\n", encoding="utf-8")
        with pytest.raises(OntologyFormatError) as err:
            parse_ontology(bad)
        assert ":4:" in str(err.value) and "ghost" in str(err.value)

    def test_inconsistent_closure_rejected_at_load(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text(
            "[labels]\n0 | a | type |\n1 | b | type |\n2 | c | type |\n"
            "[parents]\nc -> a\nc -> b\n[exclusive]\na ~ b\n",
            encoding="utf-8",
        )
        stream = io.StringIO()
        with pytest.raises(OntologyError):
            load_ontology(bad, report_stream=stream)
        assert "closure" in stream.getvalue()
