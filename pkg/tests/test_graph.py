import numpy as np
import pytest

from kdcn.errors import CapacityError, IngestionError, ParseError, SchemaError
from kdcn.graph import (
    RELATIONS,
    Graph,
    TripleSet,
    ingest_events,
    load_triples,
    load_vocab,
    normalized_adjacency,
    prune_triples,
    sample_neighbors,
    save_triples,
    save_vocab,
)
from kdcn.rng import RngStream


def two_node_graph():
    ts = TripleSet()
    ts.add("u1", "user-has-tag", "female")
    return Graph(ts)


class TestIngest:
    def test_user_profile_tag_triple(self):
        ts = ingest_events([{"type": "user_profile", "user": "u1", "tags": ["female"]}])
        assert len(ts) == 1
        tr = ts.triples[0]
        assert ts.name_of(tr.head) == "u1"
        assert RELATIONS[tr.relation] == "user-has-tag"
        assert ts.name_of(tr.tail) == "female"

    def test_empty_stream(self):
        ts = ingest_events([])
        assert len(ts) == 0 and ts.n_entities == 0

    def test_session_log_emits_four_triples(self):
        ts = ingest_events(
            [
                {
                    "type": "session_log",
                    "user": "u1",
                    "session": "s1",
                    "seller": "sh1",
                    "intention": "i1",
                    "keywords": ["dress"],
                }
            ]
        )
        rels = [RELATIONS[t.relation] for t in ts.triples]
        assert rels == [
            "user-created-session",
            "session-relates-to-seller",
            "session-has-intention",
            "intention-has-keyword",
        ]

    def test_item_listing_triples(self):
        ts = ingest_events(
            [
                {
                    "type": "item_listing",
                    "item": "i1",
                    "category": "c1",
                    "seller": "s1",
                    "properties": [{"property": "color", "value": "red"}],
                }
            ]
        )
        rels = [RELATIONS[t.relation] for t in ts.triples]
        assert rels == [
            "item-belongs-to-category",
            "seller-has-item",
            "item-has-value",
            "property-has-value",
        ]

    def test_extra_fields_ignored(self):
        ts = ingest_events(
            [
                {
                    "type": "item_listing",
                    "item": "i1",
                    "category": "c1",
                    "seller": "s1",
                    "title": "red dress",
                    "dense": [1.0],
                }
            ]
        )
        assert len(ts) == 2

    def test_unknown_event_kind(self):
        with pytest.raises(IngestionError, match="record 2"):
            ingest_events(
                [
                    {"type": "user_profile", "user": "u1", "tags": []},
                    {"type": "bogus"},
                ]
            )

    def test_missing_field(self):
        with pytest.raises(IngestionError, match="record 1"):
            ingest_events([{"type": "session_log", "user": "u1"}])

    def test_idempotent(self):
        events = [
            {"type": "user_profile", "user": "u1", "tags": ["a", "b"]},
            {"type": "user_profile", "user": "u1", "tags": ["a", "b"]},
        ]
        once = ingest_events(events[:1])
        twice = ingest_events(events)
        assert once == twice

    def test_unknown_relation_rejected(self):
        ts = TripleSet()
        with pytest.raises(SchemaError):
            ts.add("a", "not-a-relation", "b")

    def test_unknown_kind_rejected(self):
        ts = TripleSet()
        with pytest.raises(SchemaError):
            ts.entity_id("martian", "x", create=True)


class TestNormalizedAdjacency:
    def test_two_nodes_one_edge_self_loops(self):
        g = two_node_graph()
        assert np.allclose(
            normalized_adjacency(g, self_loops=True), [[0.5, 0.5], [0.5, 0.5]], atol=1e-15
        )

    def test_single_node_self_loop(self):
        ts = TripleSet()
        ts.entity_id("user", "only", create=True)
        assert np.array_equal(normalized_adjacency(Graph(ts), self_loops=True), [[1.0]])

    def test_isolated_nodes_no_self_loops(self):
        ts = TripleSet()
        ts.entity_id("user", "a", create=True)
        ts.entity_id("user", "b", create=True)
        assert np.array_equal(
            normalized_adjacency(Graph(ts), self_loops=False), np.zeros((2, 2))
        )

    def test_symmetric_and_bounded(self):
        rng = RngStream(5)
        ts = TripleSet()
        for i in range(40):
            ts.add(f"u{int(rng.integers(0, 10))}", "user-has-tag", f"t{int(rng.integers(0, 8))}")
        for self_loops in (True, False):
            a = normalized_adjacency(Graph(ts), self_loops=self_loops)
            assert np.abs(a - a.T).max() < 1e-12
            assert a.min() >= 0.0 and a.max() <= 1.0

    def test_uniform_degree_entries(self):
        # a 4-cycle: every node has degree 2; with self-loops entries are 1/3
        ts = TripleSet()
        ts.add("u0", "user-has-tag", "t0")
        ts.add("u1", "user-has-tag", "t0")
        ts.add("u1", "user-has-tag", "t1")
        ts.add("u0", "user-has-tag", "t1")
        a = normalized_adjacency(Graph(ts), self_loops=True)
        nz = a[a > 0]
        assert np.allclose(nz, 1.0 / 3.0, atol=1e-12)

    def test_capacity_guard(self):
        ts = TripleSet()
        for i in range(10_001):
            ts.entity_id("user", f"u{i}", create=True)
        with pytest.raises(CapacityError):
            normalized_adjacency(Graph(ts))


class TestSampleNeighbors:
    def test_isolated_falls_back_to_self(self):
        ts = TripleSet()
        ts.entity_id("user", "a", create=True)
        out = sample_neighbors(Graph(ts), 0, 3, RngStream(0))
        assert np.array_equal(out, [0, 0, 0])

    def test_exhaustive_when_degree_equals_fanout(self):
        ts = TripleSet()
        for t in ("a", "b", "c"):
            ts.add("u", "user-has-tag", t)
        g = Graph(ts)
        out = sample_neighbors(g, 0, 3, RngStream(1))
        assert sorted(out.tolist()) == [1, 2, 3]

    def test_without_replacement_distinct(self):
        ts = TripleSet()
        for i in range(20):
            ts.add("u", "user-has-tag", f"t{i}")
        g = Graph(ts)
        out = sample_neighbors(g, 0, 10, RngStream(2))
        assert len(set(out.tolist())) == 10
        assert all(x in g.adjacency[0] for x in out)

    def test_fixed_seed_replays(self):
        ts = TripleSet()
        for i in range(20):
            ts.add("u", "user-has-tag", f"t{i}")
        g = Graph(ts)
        a = sample_neighbors(g, 0, 10, RngStream(42))
        b = sample_neighbors(g, 0, 10, RngStream(42))
        assert np.array_equal(a, b)

    def test_small_degree_fills_with_replacement(self):
        g = two_node_graph()
        out = sample_neighbors(g, 0, 5, RngStream(3))
        assert len(out) == 5 and set(out.tolist()) == {1}

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            sample_neighbors(two_node_graph(), 7, 3, RngStream(0))


class TestTriplesRoundTrip:
    def test_empty_set(self, tmp_path):
        path = tmp_path / "t.tsv"
        save_triples(TripleSet(), path)
        assert path.read_text() == "head\trelation\ttail\n"

    def test_single_triple_format(self, tmp_path):
        ts = TripleSet()
        ts.add("u1", "user-has-tag", "female")
        path = tmp_path / "t.tsv"
        save_triples(ts, path)
        assert path.read_text().splitlines()[1] == "u1\tuser-has-tag\tfemale"

    def test_thousand_random_triples_round_trip(self, tmp_path):
        rng = RngStream(7)
        ts = TripleSet()
        relations = list(RELATIONS)
        for _ in range(1000):
            rel = relations[int(rng.integers(0, len(relations)))]
            ts.add(f"h{int(rng.integers(0, 100))}", rel, f"t{int(rng.integers(0, 100))}")
        path = tmp_path / "t.tsv"
        save_triples(ts, path)
        loaded = load_triples(path)
        assert loaded == ts  # includes entity ids

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("head\trelation\ttail\na\tuser-has-tag\tb\nbroken line\n")
        with pytest.raises(ParseError, match=":3"):
            load_triples(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("nope\n")
        with pytest.raises(ParseError, match=":1"):
            load_triples(path)

    def test_unknown_relation_line(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("head\trelation\ttail\na\tbogus-rel\tb\n")
        with pytest.raises(ParseError, match="bogus-rel"):
            load_triples(path)

    def test_vocab_round_trip(self, tmp_path):
        ts = TripleSet()
        ts.add("u1", "user-has-tag", "female")
        path = tmp_path / "v.tsv"
        save_vocab(ts, path)
        assert load_vocab(path) == ts.entities


class TestGraphStructure:
    def test_adjacency_symmetric(self):
        ts = ingest_events(
            [
                {"type": "user_profile", "user": "u1", "tags": ["a", "b"]},
                {"type": "user_profile", "user": "u2", "tags": ["a"]},
            ]
        )
        g = Graph(ts)
        for i in range(g.n_entities):
            for j in g.adjacency[i]:
                assert i in g.adjacency[j]
            assert g.degrees[i] == len(g.adjacency[i])

    def test_prune_drops_rare_entities(self):
        ts = TripleSet()
        ts.add("u1", "user-has-tag", "common")
        ts.add("u2", "user-has-tag", "common")
        ts.add("u3", "user-has-tag", "rare")
        pruned = prune_triples(ts, min_count=2)
        names = {pruned.name_of(t.tail) for t in pruned.triples}
        assert names == {"common"}
