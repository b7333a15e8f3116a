import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import classic_gat
from sigatnet.checks import model_check
from sigatnet.gat import (
    GatLayerParams,
    ModelConfig,
    attention_coefficients,
    forward_batch,
    global_avg_pool,
    head_update,
    init_params,
    model_forward,
    multi_head_layer,
    predict_proba,
)
from sigatnet.graph import BrainGraph, build_graph
from sigatnet.numeric import ConfigError, ParamTensor, RngStream


def random_graph(seed, n=6, f=4, label=0):
    rng = RngStream(seed)
    return build_graph(rng.child(0).normal(size=(n, 30)), rng.child(1).normal(size=(n, f)), label)


class TestAttention:
    def setup_method(self):
        rng = RngStream(11)
        self.n, self.f, self.fo = 6, 4, 3
        self.H = rng.child(0).normal(size=(self.n, self.f))
        self.W = rng.child(1).normal(size=(self.f, self.fo))
        self.a = rng.child(2).normal(size=2 * self.fo)
        self.A = (rng.child(3).uniform(0, 1, (self.n, self.n)) > 0.4).astype(float)
        np.fill_diagonal(self.A, 0.0)
        self.E_s = self.A * rng.child(4).uniform(0.1, 1, (self.n, self.n))

    def test_rows_sum_to_one_on_support(self):
        alpha = attention_coefficients(self.H, self.W, self.a, self.E_s, self.A)
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(alpha >= 0)
        outside = (self.A == 0) & ~np.eye(self.n, dtype=bool)
        assert not alpha[outside].any()

    def test_zero_attention_vector_is_uniform(self):
        alpha = attention_coefficients(self.H, self.W, np.zeros(2 * self.fo), self.E_s, self.A)
        sizes = self.A.sum(axis=1) + 1
        for i in range(self.n):
            support = (self.A[i] > 0) | (np.arange(self.n) == i)
            np.testing.assert_allclose(alpha[i, support], 1 / sizes[i], atol=1e-15)

    def test_isolated_node(self):
        A = self.A.copy()
        A[2, :] = 0
        alpha = attention_coefficients(self.H, self.W, self.a, self.E_s * A, A)
        assert alpha[2, 2] == 1.0

    def test_two_logit_oracle(self):
        H = np.array([[0.0], [math.log(2)]])
        A = np.array([[0.0, 1.0], [0.0, 0.0]])
        alpha = attention_coefficients(H, np.eye(1), np.array([0.0, 1.0]), A.copy(), A)
        np.testing.assert_allclose(alpha[0], [1 / 3, 2 / 3], atol=1e-15)

    def test_edge_weights_scale_logits(self):
        H = np.array([[0.0], [math.log(2)]])
        A = np.array([[0.0, 1.0], [0.0, 0.0]])
        alpha = attention_coefficients(H, np.eye(1), np.array([0.0, 1.0]), 0.5 * A, A)
        w = np.exp([0.0, 0.5 * math.log(2)])
        np.testing.assert_allclose(alpha[0], w / w.sum(), atol=1e-15)

    def test_edge_ablation_matches_classic(self):
        alpha = attention_coefficients(self.H, self.W, self.a, self.E_s, self.A, edge_features=False)
        np.testing.assert_allclose(alpha, classic_gat(self.H, self.W, self.a, self.A), atol=1e-12)

    @settings(max_examples=40)
    @given(st.integers(0, 10_000))
    def test_rows_sum_to_one_random(self, seed):
        rng = RngStream(seed)
        n = 2 + int(rng.generator.integers(0, 10))
        A = (rng.child(0).uniform(0, 1, (n, n)) > 0.5).astype(float)
        alpha = attention_coefficients(
            rng.child(1).normal(size=(n, 3)), rng.child(2).normal(size=(3, 2)), rng.child(3).normal(size=4),
            A * rng.child(4).uniform(0, 1, (n, n)), A,
        )
        assert np.all(np.abs(alpha.sum(axis=1) - 1) <= 1e-12)


class TestHeadUpdate:
    def test_single_node_identity(self):
        h = np.array([[0.5, 2.0]])
        np.testing.assert_array_equal(head_update(h, np.eye(2), np.ones((1, 1))), h)

    def test_uniform_over_identical_neighbours(self):
        h = np.tile([[1.0, -2.0, 0.5]], (4, 1))
        W = RngStream(0).normal(size=(3, 2))
        out = head_update(h, W, np.full((4, 4), 0.25))
        np.testing.assert_allclose(out, np.tile(np.maximum(h[0] @ W, 0), (4, 1)), atol=1e-15)

    def test_path_graph_loop_oracle(self):
        rng = RngStream(3)
        H = rng.child(0).normal(size=(3, 2))
        W = rng.child(1).normal(size=(2, 2))
        a = rng.child(2).normal(size=4)
        A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
        E_s = 0.7 * A
        alpha = attention_coefficients(H, W, a, E_s, A)
        out = head_update(H, W, alpha)
        for i in range(3):
            acc = alpha[i, i] * (W.T @ H[i])
            for j in range(3):
                if A[i, j]:
                    acc = acc + alpha[i, j] * (W.T @ H[j])
            np.testing.assert_allclose(out[i], np.maximum(acc, 0), atol=1e-12)


class TestMultiHead:
    def layer(self, T, fin, fo, seed=0):
        rng = RngStream(seed)
        return GatLayerParams(ParamTensor("W", rng.child(0).normal(size=(T, fin, fo))),
                              ParamTensor("a", rng.child(1).normal(size=(T, 2 * fo))))

    def test_single_head(self):
        g = random_graph(0)
        layer = self.layer(1, 4, 3)
        W, a = layer.head(0)
        want = head_update(g.X, W, attention_coefficients(g.X, W, a, g.A * 0.5, g.A))
        np.testing.assert_array_equal(multi_head_layer(g.X, layer, g.A * 0.5, g.A), want)

    def test_width_and_symmetry(self):
        g = random_graph(1)
        layer = self.layer(2, 4, 4)
        assert multi_head_layer(g.X, layer, g.A, g.A).shape == (6, 8)
        layer.W.value[1] = layer.W.value[0]
        layer.a.value[1] = layer.a.value[0]
        out = multi_head_layer(g.X, layer, g.A, g.A)
        np.testing.assert_array_equal(out[:, :4], out[:, 4:])


class TestPool:
    def test_examples(self):
        np.testing.assert_array_equal(global_avg_pool(np.tile([[1.0, 2.0]], (3, 1))), [1.0, 2.0])
        np.testing.assert_array_equal(global_avg_pool(np.array([[1.0, 3.0], [3.0, 1.0]])), [2.0, 2.0])
        np.testing.assert_array_equal(global_avg_pool(np.array([[4.0, 5.0]])), [4.0, 5.0])

    def test_empty(self):
        with pytest.raises(ConfigError):
            global_avg_pool(np.zeros((0, 3)))


class TestModel:
    def test_probabilities_normalized(self):
        params = init_params(ModelConfig(n_features=4), RngStream(0))
        probs = predict_proba([random_graph(s) for s in range(10)], params)
        assert probs.shape == (10, 2)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((probs >= 0) & (probs <= 1))

    def test_layer_widths_chain(self):
        cfg = ModelConfig(n_features=4, heads=3, hidden=(5, 6, 7))
        params = init_params(cfg, RngStream(0))
        dims = [(l.W.shape[1], l.heads * l.out_dim) for l in params.layers]
        assert dims == [(4, 15), (15, 18), (18, 21)]
        assert params.fc_W.shape == (21, 2)

    def test_feature_mismatch(self):
        params = init_params(ModelConfig(n_features=3), RngStream(0))
        with pytest.raises(ConfigError):
            model_forward(random_graph(0, f=4), params)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_features=4, heads=0)
        with pytest.raises(ConfigError):
            ModelConfig(n_features=4, xi=1.5)

    @pytest.mark.parametrize("edges", [False, True])
    def test_permutation_invariance(self, edges):
        cfg = ModelConfig(n_features=4, heads=2, sparse_interaction_enabled=False, edge_features_enabled=edges)
        params = init_params(cfg, RngStream(1))
        g = random_graph(2, n=9)
        base = model_forward(g, params)
        rng = RngStream(3)
        for k in range(100):
            perm = rng.child(k).permutation(9)
            pg = BrainGraph(g.X[perm], g.E[np.ix_(perm, perm)], g.A[np.ix_(perm, perm)], g.label)
            np.testing.assert_allclose(model_forward(pg, params), base, atol=1e-10, rtol=0)

    def test_edges_off_ignores_edge_values(self):
        cfg = ModelConfig(n_features=4, edge_features_enabled=False)
        params = init_params(cfg, RngStream(0))
        g = random_graph(4)
        other = BrainGraph(g.X, -3 * g.E, g.A, g.label)
        np.testing.assert_array_equal(model_forward(g, params), model_forward(other, params))

    def test_isolated_nodes_match_per_node_mlp(self):
        cfg = ModelConfig(n_features=4, heads=2, hidden=(3, 3, 3), xi=1.0)
        params = init_params(cfg, RngStream(5))
        g = random_graph(6)
        h = g.X
        for layer in params.layers:
            h = np.concatenate([np.maximum(h @ layer.W.value[t], 0) for t in range(layer.heads)], axis=1)
        logits = h.mean(axis=0) @ params.fc_W.value + params.fc_b.value[0]
        want = np.exp(logits - logits.max())
        np.testing.assert_allclose(model_forward(g, params), want / want.sum(), atol=1e-12)
        # edges cannot matter once every node is isolated
        other = BrainGraph(g.X, g.E[::-1, ::-1].copy(), g.A, g.label)
        np.testing.assert_allclose(model_forward(other, params), model_forward(g, params), atol=1e-15)

    def test_mean_final_heads_and_no_self_term(self):
        cfg = ModelConfig(n_features=4, heads=3, final_heads="mean", self_attention=False)
        params = init_params(cfg, RngStream(0))
        assert params.fc_W.shape == (16, 2)
        np.testing.assert_allclose(model_forward(random_graph(0), params).sum(), 1.0, atol=1e-12)

    def test_batched_equals_single(self):
        params = init_params(ModelConfig(n_features=4), RngStream(0))
        graphs = [random_graph(s) for s in range(4)]
        X = np.stack([g.X for g in graphs])
        E = np.stack([g.E for g in graphs])
        A = np.stack([g.A for g in graphs])
        batched = forward_batch(X, E, A, params)
        for b, g in enumerate(graphs):
            np.testing.assert_allclose(batched[b], model_forward(g, params), atol=1e-14)

    def test_copy_is_independent(self):
        params = init_params(ModelConfig(n_features=4), RngStream(0))
        clone = params.copy()
        clone.fc_W.value += 1.0
        assert not np.array_equal(clone.fc_W.value, params.fc_W.value)
        assert np.array_equal(replace(params).layers[0].W.value, params.layers[0].W.value)

    def test_full_model_gradient(self):
        result = model_check(0)
        assert result.max_rel_error <= 1e-4
