import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import kdcn.pretrain as pt
from kdcn.datagen import WorldConfig, generate_world
from kdcn.errors import DimensionError, FormatError, SamplingError
from kdcn.graph import Graph, Triple, TripleSet, normalized_adjacency
from kdcn.numeric import finite_diff_check, sigmoid
from kdcn.rng import RngStream


def small_world(seed=2, **overrides):
    cfg = dict(
        n_users=6, n_items=10, n_categories=3, n_sellers=3, n_tags=3,
        n_keywords=12, n_sessions=8, seed=seed,
    )
    cfg.update(overrides)
    return generate_world(WorldConfig(**cfg))


class TestGcnLayer:
    def test_zero_row_gives_half(self):
        out = pt.gcn_layer(np.zeros((1, 3)), np.array([[1.0]]), np.eye(3))
        assert np.allclose(out, 0.5, atol=1e-15)

    def test_identical_rows_stay_identical(self):
        x = np.array([[0.3, -0.7], [0.3, -0.7]])
        a = np.array([[0.5, 0.5], [0.5, 0.5]])
        out = pt.gcn_layer(x, a, RngStream(0).uniform(-1, 1, (2, 2)))
        assert np.allclose(out[0], out[1], atol=1e-15)

    def test_hand_product(self):
        x = np.eye(2)
        a = np.array([[0.5, 0.5], [0.5, 0.5]])
        out = pt.gcn_layer(x, a, np.eye(2))
        assert np.allclose(out, sigmoid(np.full((2, 2), 0.5)), atol=1e-15)
        assert out[0, 0] == pytest.approx(0.62245933, abs=1e-7)

    def test_shape_checks(self):
        with pytest.raises(DimensionError):
            pt.gcn_layer(np.zeros((2, 3)), np.zeros((3, 3)), np.eye(3))


class TestEncode:
    def test_single_layer_matches_gcn_layer(self):
        w = small_world()
        g = Graph(w.tset)
        cfg = pt.PretrainConfig(dim=4, layers=1)
        params = pt.init_params(g.n_entities, 9, cfg, RngStream(1))
        out = pt.encode_entities(params, g, cfg)
        dense = normalized_adjacency(g, self_loops=True, kind="sym")
        expected = pt.gcn_layer(params.entity_table, dense, params.gcn_weights[0])
        assert np.abs(out - expected).max() < 1e-12

    def test_isolated_nodes_no_mixing(self):
        ts = TripleSet()
        for i in range(3):
            ts.entity_id("user", f"u{i}", create=True)
        g = Graph(ts)
        cfg = pt.PretrainConfig(dim=4, layers=1)
        params = pt.init_params(3, 9, cfg, RngStream(2))
        out = pt.encode_entities(params, g, cfg)
        expected = sigmoid(params.entity_table @ params.gcn_weights[0])
        assert np.abs(out - expected).max() < 1e-12

    def test_sparse_normalization_matches_dense_op(self):
        w = small_world(seed=9)
        g = Graph(w.tset)
        for kind in ("sym", "mean"):
            for self_loops in (True, False):
                sparse, sparse_t = pt._sparse_norm_adjacency(g, self_loops, kind)
                dense = normalized_adjacency(g, self_loops=self_loops, kind=kind)
                assert np.abs(sparse.toarray() - dense).max() < 1e-14
                assert np.abs(sparse_t.toarray() - dense.T).max() < 1e-14

    def test_full_mode_respects_dense_guard(self):
        from kdcn.errors import CapacityError

        ts = TripleSet()
        for i in range(10_001):
            ts.entity_id("user", f"u{i}", create=True)
        g = Graph(ts)
        cfg = pt.PretrainConfig(dim=2, layers=1)
        params = pt.init_params(g.n_entities, 9, cfg, RngStream(0))
        with pytest.raises(CapacityError):
            pt.encode_entities(params, g, cfg)

    def test_sampled_equals_full_mean_at_covering_fanout(self):
        w = small_world(seed=5)
        g = Graph(w.tset)
        fanout = max(g.max_degree(), 1)
        cfg_full = pt.PretrainConfig(dim=6, layers=2, aggregation="mean", mode="full")
        cfg_samp = pt.PretrainConfig(
            dim=6, layers=2, aggregation="mean", mode="sampled", fanout=fanout
        )
        params = pt.init_params(g.n_entities, 9, cfg_full, RngStream(3))
        full = pt.encode_entities(params, g, cfg_full)
        samp = pt.encode_entities(params, g, cfg_samp, RngStream(4))
        assert np.abs(full - samp).max() < 1e-9


class TestTranseScore:
    def test_exact_translation(self):
        assert pt.transe_score([1.0, 0.0], [0.0, 1.0], [1.0, 1.0]) == 0.0

    def test_hand_norm(self):
        assert pt.transe_score([1.0, 2.0], [3.0, 4.0], [0.0, 0.0]) == pytest.approx(
            np.sqrt(52.0), rel=1e-12
        )

    def test_reversal_symmetry(self):
        h, r, t = (RngStream(6).uniform(-1, 1, 3) for _ in range(3))
        assert pt.transe_score(h, r, t) == pytest.approx(pt.transe_score(t, -r, h), rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            pt.transe_score([1.0], [1.0, 2.0], [1.0])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=4))
    def test_translation_invariance(self, c):
        rng = RngStream(7)
        h, r, t = (rng.uniform(-1, 1, len(c)) for _ in range(3))
        shift = np.array(c)
        assert pt.transe_score(h + shift, r, t + shift) == pytest.approx(
            pt.transe_score(h, r, t), abs=1e-9
        )


class TestNegativeSample:
    def test_two_entity_enumeration(self):
        ts = TripleSet()
        ts.add("a", "user-has-tag", "b")
        g = Graph(ts)
        seen = set()
        for seed in range(50):
            c = pt.negative_sample(ts.triples[0], g, RngStream(seed))
            seen.add((c.head, c.relation, c.tail))
        assert seen == {(1, 0, 1), (0, 0, 0)}

    def test_relation_preserved(self):
        w = small_world()
        g = Graph(w.tset)
        rng = RngStream(8)
        for tr in w.tset.triples[:20]:
            assert pt.negative_sample(tr, g, rng).relation == tr.relation

    def test_fixed_seed_replays(self):
        w = small_world()
        g = Graph(w.tset)
        tr = w.tset.triples[0]
        assert pt.negative_sample(tr, g, RngStream(9)) == pt.negative_sample(
            tr, g, RngStream(9)
        )

    def test_saturated_graph_raises(self):
        ts = TripleSet()
        ts.add("a", "user-has-tag", "b")
        # make every corruption a known triple
        for h in range(2):
            for t in range(2):
                ts._triple_keys.add((h, 0, t))
        g = Graph(ts)
        with pytest.raises(SamplingError):
            pt.negative_sample(ts.triples[0], g, RngStream(10))


class TestMarginLoss:
    def test_margin_satisfied(self):
        assert pt.margin_loss([0.5], [2.0], 1.0) == 0.0

    def test_margin_violated(self):
        assert pt.margin_loss([2.0], [1.0], 1.0) == 2.0

    def test_boundary(self):
        assert pt.margin_loss([1.3, 0.2], [1.3, 0.2], 1.0) == pytest.approx(2.0)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            pt.margin_loss([1.0], [1.0, 2.0], 1.0)

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(st.floats(0, 5), min_size=1, max_size=6),
        st.floats(0.1, 3),
    )
    def test_nonnegative_and_zero_iff_satisfied(self, pos, gamma):
        neg = [p + gamma + 0.1 for p in pos]
        assert pt.margin_loss(pos, neg, gamma) == 0.0
        neg_bad = [p + gamma - 0.05 for p in pos]
        assert pt.margin_loss(pos, neg_bad, gamma) > 0.0


class TestGradients:
    @pytest.mark.parametrize("seed", range(10))
    def test_loss_matches_finite_differences(self, seed):
        w = small_world(seed=seed)
        g = Graph(w.tset)
        mode = "full" if seed % 2 == 0 else "sampled"
        cfg = pt.PretrainConfig(dim=4, layers=2, mode=mode, fanout=3)
        rng = RngStream(seed)
        params = pt.init_params(g.n_entities, 9, cfg, rng.child("init"))
        triples = np.array([[t.head, t.relation, t.tail] for t in w.tset.triples])
        pos = triples[:8]
        rng_neg = rng.child("neg")
        neg = np.array(
            [
                [c.head, c.relation, c.tail]
                for c in (pt.negative_sample(Triple(*r), g, rng_neg) for r in pos)
            ]
        )
        draws = pt.sample_layer_draws(g, cfg, rng.child("draws")) if mode == "sampled" else None
        params.store.zero_grads()
        pt.pretrain_loss_grads(params, g, cfg, pos, neg, draws)
        for name in params.store.names():
            err = finite_diff_check(
                lambda: pt.pretrain_loss(params, g, cfg, pos, neg, draws),
                params.store,
                name,
            )
            assert err < 1e-4, f"seed {seed} slot {name}: {err}"


class TestPretrainLoop:
    def test_zero_epochs_returns_initial_encoding(self):
        w = small_world()
        g = Graph(w.tset)
        cfg = pt.PretrainConfig(dim=6, epochs=0)
        rng = RngStream(11)
        result = pt.pretrain(w.tset, g, cfg, rng)
        fresh = pt.init_params(w.tset.n_entities, 9, cfg, RngStream(11).child("init"))
        expected = pt.encode_entities(fresh, g, cfg)
        assert np.array_equal(result.checkpoint.entity_table, expected)
        assert np.array_equal(result.checkpoint.relation_table, fresh.relation_table)
        assert result.epoch_losses == []

    def test_same_seed_byte_identical_checkpoints(self, tmp_path):
        w = small_world()
        g = Graph(w.tset)
        cfg = pt.PretrainConfig(dim=6, epochs=2, batch_size=64, lr=0.01)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        pt.export_checkpoint(pt.pretrain(w.tset, g, cfg, RngStream(12)).checkpoint, p1)
        pt.export_checkpoint(pt.pretrain(w.tset, g, cfg, RngStream(12)).checkpoint, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loss_nonincreasing_early_epochs(self):
        w = generate_world(
            WorldConfig(
                n_users=40, n_items=60, n_categories=5, n_sellers=8, n_tags=6,
                n_keywords=30, n_sessions=40, seed=3,
            )
        )
        assert 150 <= w.tset.n_entities <= 260
        g = Graph(w.tset)
        ok = 0
        for seed in range(5):
            cfg = pt.PretrainConfig(dim=16, epochs=5, batch_size=128, lr=0.01)
            losses = pt.pretrain(w.tset, g, cfg, RngStream(seed)).epoch_losses
            diffs = np.diff(losses)
            if np.all(diffs <= 1e-9):
                ok += 1
        assert ok >= 4


class TestCheckpointFormat:
    def make(self):
        rng = RngStream(13)
        return pt.PretrainCheckpoint(rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, (9, 4)))

    def test_round_trip_within_f32(self, tmp_path):
        ckpt = self.make()
        path = tmp_path / "c.bin"
        pt.export_checkpoint(ckpt, path)
        loaded = pt.load_checkpoint(path)
        assert np.array_equal(loaded.entity_table, ckpt.entity_table.astype(np.float32))
        assert np.array_equal(loaded.relation_table, ckpt.relation_table.astype(np.float32))

    def test_file_size_matches_layout(self, tmp_path):
        # magic(4) + version u32 + n_e u64 + n_r u64 + dim u32 = 28 header bytes
        ckpt = self.make()
        path = tmp_path / "c.bin"
        pt.export_checkpoint(ckpt, path)
        assert path.stat().st_size == 28 + 4 * 4 * (5 + 9)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "c.bin"
        pt.export_checkpoint(self.make(), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            pt.load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "c.bin"
        pt.export_checkpoint(self.make(), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError):
            pt.load_checkpoint(path)
