"""Routing, expert pooling, vote integration, task embeddings."""

import math

import numpy as np
import pytest

from moce import autodiff as ad
from moce.autodiff import Tape, Tensor
from moce.encoder import EmptyGraph, global_mean_pool
from moce.experts import (
    BadK,
    ExpertParams,
    IntegratorParams,
    MissingTaskEmbedding,
    RouterParams,
    TaskEmbeddingError,
    fallback_embedding,
    fnv1a_64,
    gamma_mask,
    integrate_outputs,
    layer_forward,
    load_task_embeddings,
    resolve_tasks,
    route,
    route_batch,
    sag_project,
    sag_project_batch,
    topk_indices,
)


def zero_router(e_f: int, e_t: int, m: int, k_s: int, k_t: int) -> RouterParams:
    z = lambda r, c: Tensor(np.zeros((r, c)), requires_grad=True)
    return RouterParams(w_mu1=z(e_f, m), w_mu2=z(e_t, m),
                        w_sigma1=z(e_f, m), w_sigma2=z(e_t, m),
                        k_s=k_s, k_t=k_t)


def constant_expert(dim: int, logit: float, pool_ratio: float = 1.0) -> ExpertParams:
    """Expert whose MLP ignores its input and votes ``logit``."""
    return ExpertParams(
        theta_att=Tensor(np.zeros((dim, 1)), requires_grad=True),
        w1=Tensor(np.zeros((dim, dim)), requires_grad=True),
        b1=Tensor(np.zeros(dim), requires_grad=True),
        w2=Tensor(np.zeros((dim, 1)), requires_grad=True),
        b2=Tensor(np.array([logit]), requires_grad=True),
        pool_ratio=pool_ratio,
    )


class TestGammaMask:
    def test_excluded_entry_already_at_minimum(self):
        out = gamma_mask(Tensor(np.array([3.0, 1.0, 2.0])), 2)
        np.testing.assert_array_equal(out.data, [3.0, 1.0, 2.0])

    def test_fills_below_top_k_with_minimum(self):
        out = gamma_mask(Tensor(np.array([3.0, 1.0, 2.0])), 1)
        np.testing.assert_array_equal(out.data, [3.0, 1.0, 1.0])

    def test_k_equal_m_is_identity(self):
        v = np.array([0.3, -1.2, 0.0, 5.0])
        out = gamma_mask(Tensor(v), 4)
        np.testing.assert_array_equal(out.data, v)

    def test_batched_rows_independent(self):
        v = Tensor(np.array([[3.0, 1.0, 2.0], [1.0, 2.0, 3.0]]))
        out = gamma_mask(v, 1)
        np.testing.assert_array_equal(out.data, [[3.0, 1.0, 1.0], [1.0, 1.0, 3.0]])

    def test_bad_k_rejected(self):
        with pytest.raises(BadK):
            gamma_mask(Tensor(np.zeros(3)), 0)
        with pytest.raises(BadK):
            gamma_mask(Tensor(np.zeros(3)), 4)

    def test_preserves_top_values_and_argmax(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            m = int(rng.integers(2, 9))
            k = int(rng.integers(1, m + 1))
            v = rng.normal(size=m)
            out = gamma_mask(Tensor(v), k).data
            top = np.sort(v)[-k:]
            assert np.array_equal(np.sort(out)[-k:], top)
            assert np.argmax(out) == np.argmax(v)
            low = np.min(v)
            kept = topk_indices(v, k)
            for j in range(m):
                expected = v[j] if j in kept else low
                assert out[j] == expected

    def test_fill_gradient_goes_to_argmin(self):
        v = Tensor(np.array([3.0, 1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            out = gamma_mask(v, 1)
            loss = ad.reduce_sum(out)
            tape.backward(loss)
        # out = [v0, v1, v1]: slot 2 was filled from the argmin slot 1
        np.testing.assert_array_equal(v.grad, [1.0, 2.0, 0.0])


class TestRoute:
    def test_zero_weights_tie_break_to_first_indices(self):
        r = zero_router(4, 3, m=5, k_s=2, k_t=3)
        g = route(Tensor(np.zeros(4)), Tensor(np.zeros(3)), r, noise_on=False)
        np.testing.assert_array_equal(g.selected, [0, 1])
        np.testing.assert_array_equal(g.gates.data, [0.5, 0.5, 0.0, 0.0, 0.0])
        np.testing.assert_array_equal(g.mu.data, np.zeros(5))

    def test_zero_weights_half_selection_probability(self):
        # mu equals the competing threshold everywhere, so Phi(0) = 1/2
        r = zero_router(4, 3, m=5, k_s=2, k_t=3)
        g = route(Tensor(np.zeros(4)), Tensor(np.zeros(3)), r, noise_on=False)
        np.testing.assert_array_equal(g.p_choose.data, np.full(5, 0.5))

    def test_softmax_over_selected_pair(self):
        # h = [0.5, 0.3, 0.1] via the task head; third gate exactly zero
        r = zero_router(2, 3, m=3, k_s=2, k_t=3)
        r.w_mu2.data[:] = np.eye(3)
        g = route(Tensor(np.zeros(2)), Tensor(np.array([0.5, 0.3, 0.1])),
                  r, noise_on=False)
        np.testing.assert_allclose(
            g.gates.data, [0.549833997312478, 0.450166002687522, 0.0],
            rtol=0, atol=1e-15)
        assert g.gates.data[2] == 0.0

    def test_gate_invariants_random(self):
        rng = np.random.default_rng(33)
        for trial in range(200):
            e_f, e_t = 3, 4
            m = int(rng.integers(2, 7))
            k_t = int(rng.integers(1, m + 1))
            k_s = int(rng.integers(1, k_t + 1))
            r = RouterParams.create(rng, e_f, e_t, m, k_s, k_t)
            g = route(Tensor(rng.normal(size=e_f)), Tensor(rng.normal(size=e_t)),
                      r, noise_on=trial % 2 == 0, rng=rng)
            assert np.sum(g.gates.data > 0) == k_s
            assert abs(g.gates.data.sum() - 1.0) < 1e-12
            assert set(np.nonzero(g.gates.data)[0]) == set(g.selected)
            np.testing.assert_array_equal(g.selected, topk_indices(g.h.data, k_s))
            assert np.all(g.p_choose.data >= 0) and np.all(g.p_choose.data <= 1)
            assert np.all(g.sigma.data >= 1e-3)

    def test_tied_scores_select_lower_index(self):
        r = zero_router(2, 3, m=3, k_s=1, k_t=3)
        r.w_mu2.data[:] = np.eye(3)
        g = route(Tensor(np.zeros(2)), Tensor(np.array([1.0, 1.0, 0.0])),
                  r, noise_on=False)
        np.testing.assert_array_equal(g.selected, [0])
        assert g.gates.data[0] == 1.0

    def test_single_kept_gate_is_exactly_one(self):
        rng = np.random.default_rng(5)
        r = RouterParams.create(rng, 3, 3, num_experts=4, k_s=1, k_t=2)
        g = route(Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3)),
                  r, noise_on=False)
        assert g.gates.data[g.selected[0]] == 1.0
        assert g.gates.data.sum() == 1.0

    def test_mu_shift_leaves_gates_unchanged(self):
        rng = np.random.default_rng(6)
        r = zero_router(2, 4, m=4, k_s=2, k_t=4)
        r.w_mu2.data[:] = rng.normal(size=(4, 4))
        t = Tensor(rng.normal(size=4))
        base = route(Tensor(np.zeros(2)), t, r, noise_on=False)
        r.w_mu2.data += rng.normal()  # shifts every mu by the same constant? no
        # a constant added to mu directly: bias through w_mu2 with a fresh
        # component would change direction; instead shift via sigma-free path
        shifted_mu = base.mu.data + 3.7
        # recompute gates from the shifted scores by hand
        keep = np.zeros(4, dtype=bool)
        keep[topk_indices(shifted_mu, 2)] = True
        masked = np.where(keep, shifted_mu, -np.inf)
        e = np.exp(masked - masked.max())
        np.testing.assert_allclose(e / e.sum(), base.gates.data, rtol=1e-12)

    def test_noise_reproducible_under_seed(self):
        rng_params = np.random.default_rng(7)
        r = RouterParams.create(rng_params, 3, 3, num_experts=4, k_s=2, k_t=3)
        x, t = Tensor(np.ones(3)), Tensor(np.ones(3))
        a = route(x, t, r, noise_on=True, rng=np.random.default_rng(99))
        b = route(x, t, r, noise_on=True, rng=np.random.default_rng(99))
        c = route(x, t, r, noise_on=True, rng=np.random.default_rng(100))
        np.testing.assert_array_equal(a.h.data, b.h.data)
        np.testing.assert_array_equal(a.gates.data, b.gates.data)
        assert not np.array_equal(a.h.data, c.h.data)

    def test_noise_off_uses_mu_exactly(self):
        rng = np.random.default_rng(8)
        r = RouterParams.create(rng, 3, 3, num_experts=4, k_s=2, k_t=3)
        g = route(Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3)),
                  r, noise_on=False)
        np.testing.assert_array_equal(g.h.data, g.mu.data)

    def test_k_s_equal_m_selects_everyone(self):
        rng = np.random.default_rng(9)
        r = RouterParams.create(rng, 3, 3, num_experts=3, k_s=3, k_t=3)
        g = route(Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3)),
                  r, noise_on=False)
        np.testing.assert_array_equal(np.sort(g.selected), [0, 1, 2])
        np.testing.assert_array_equal(g.p_choose.data, np.ones(3))
        assert abs(g.gates.data.sum() - 1.0) < 1e-12

    def test_bad_k_combinations_rejected(self):
        rng = np.random.default_rng(10)
        with pytest.raises(BadK):
            RouterParams.create(rng, 3, 3, num_experts=4, k_s=0, k_t=2)
        with pytest.raises(BadK):
            RouterParams.create(rng, 3, 3, num_experts=4, k_s=3, k_t=2)
        with pytest.raises(BadK):
            RouterParams.create(rng, 3, 3, num_experts=4, k_s=2, k_t=5)

    def test_gate_gradient_matches_softmax_jacobian(self):
        r = zero_router(2, 3, m=3, k_s=2, k_t=3)
        r.w_mu2.data[:] = np.eye(3)
        t = Tensor(np.array([0.5, 0.3, 0.1]))
        with Tape() as tape:
            g = route(Tensor(np.zeros(2)), t, r, noise_on=False)
            loss = ad.reduce_sum(ad.mul(g.gates, Tensor(np.array([1.0, 0.0, 0.0]))))
            tape.backward(loss)
        g0, g1 = 0.549833997312478, 0.450166002687522
        # mu_b = sum_a t_a W[a,b], so dW = outer(t, dL/dmu); the third score
        # is masked out of the softmax and gets no gradient
        dmu = np.array([g0 * (1 - g0), -g0 * g1, 0.0])
        expected = np.outer(t.data, dmu)
        np.testing.assert_allclose(r.w_mu2.grad, expected, rtol=1e-12, atol=1e-15)

    def test_batch_matches_single_sample_routing(self):
        rng = np.random.default_rng(11)
        r = RouterParams.create(rng, 3, 4, num_experts=5, k_s=2, k_t=4)
        xs = rng.normal(size=(3, 3))
        ts = rng.normal(size=(3, 4))
        rb = route_batch(Tensor(xs), Tensor(ts), r, noise_on=False)
        for i in range(3):
            gi = route(Tensor(xs[i]), Tensor(ts[i]), r, noise_on=False)
            np.testing.assert_allclose(rb.gates.data[i], gi.gates.data, rtol=1e-12)
            np.testing.assert_array_equal(rb.selected[i], gi.selected)
            np.testing.assert_allclose(rb.p_choose.data[i], gi.p_choose.data,
                                       rtol=1e-12)


class TestSagProject:
    def test_single_node_closed_form(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(1, 4))
        e = ExpertParams.create(rng, 4, pool_ratio=1.0)
        out = sag_project(Tensor(x), np.zeros((0, 2), dtype=np.int64), e)
        z = (x @ e.theta_att.data).item()
        np.testing.assert_allclose(out.data, np.tanh(z) * x[0], rtol=1e-14)

    def test_zero_attention_gives_zero_vector(self):
        rng = np.random.default_rng(13)
        e = constant_expert(3, 0.0, pool_ratio=1.0)
        nodes = Tensor(rng.normal(size=(5, 3)))
        edge_index = np.array([[0, 1], [1, 0], [1, 2], [2, 1]])
        out = sag_project(nodes, edge_index, e)
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_half_ratio_keeps_two_of_four(self):
        rng = np.random.default_rng(14)
        e = ExpertParams.create(rng, 2, pool_ratio=0.5)
        e.theta_att.data[:] = [[1.0], [0.0]]
        # no edges: z~ = tanh(first feature); rows 2 and 0 score highest
        nodes = Tensor(np.array([[1.0, 5.0], [0.1, 6.0], [2.0, 7.0], [0.2, 8.0]]))
        out = sag_project(nodes, np.zeros((0, 2), dtype=np.int64), e)
        expected = (np.tanh(1.0) * np.array([1.0, 5.0])
                    + np.tanh(2.0) * np.array([2.0, 7.0])) / 2
        np.testing.assert_allclose(out.data, expected, rtol=1e-14)

    def test_uniform_scores_scale_global_mean(self):
        # identical node rows make every score equal; with kappa=1 the output
        # is that common score times the plain mean readout
        rng = np.random.default_rng(15)
        row = rng.normal(size=4)
        nodes = Tensor(np.tile(row, (3, 1)))
        edge_index = np.array([[0, 1], [1, 0], [1, 2], [2, 1], [0, 2], [2, 0]])
        e = ExpertParams.create(rng, 4, pool_ratio=1.0)
        out = sag_project(nodes, edge_index, e)
        z = float(row @ e.theta_att.data[:, 0])
        # complete triangle: deg 2 everywhere, propagation sums three equal
        # normalized scores
        score = np.tanh((z / np.sqrt(3.0) * 3) / np.sqrt(3.0))
        mean = global_mean_pool(nodes).data
        np.testing.assert_allclose(out.data, score * mean, rtol=1e-12)

    def test_path_graph_hand_computation(self):
        e = ExpertParams.create(np.random.default_rng(16), 2, pool_ratio=1.0)
        e.theta_att.data[:] = [[1.0], [-1.0]]
        nodes = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
        edge_index = np.array([[0, 1], [1, 0]])
        out = sag_project(nodes, edge_index, e)
        # z = [1, -2]; D~ = diag(2, 2); both scores tanh((z0+z1)/2) = tanh(-1/2)
        s = np.tanh(-0.5)
        expected = (s * nodes.data[0] + s * nodes.data[1]) / 2
        np.testing.assert_allclose(out.data, expected, rtol=1e-14)

    def test_score_tie_keeps_lower_node_index(self):
        e = constant_expert(2, 0.0, pool_ratio=0.5)
        e.theta_att.data[:] = [[1.0], [0.0]]
        # equal projections (both rows start with 1) but distinct features
        nodes = Tensor(np.array([[1.0, 5.0], [1.0, 9.0]]))
        out = sag_project(nodes, np.zeros((0, 2), dtype=np.int64), e)
        np.testing.assert_allclose(out.data, np.tanh(1.0) * np.array([1.0, 5.0]),
                                   rtol=1e-14)

    def test_empty_graph_rejected(self):
        e = constant_expert(2, 0.0)
        with pytest.raises(EmptyGraph):
            sag_project(Tensor(np.zeros((0, 2))), np.zeros((0, 2), np.int64), e)

    def test_batched_matches_per_graph(self):
        rng = np.random.default_rng(17)
        e = ExpertParams.create(rng, 3, pool_ratio=0.6)
        n1, n2 = 4, 3
        x = rng.normal(size=(n1 + n2, 3))
        ei1 = np.array([[0, 1], [1, 0], [2, 3], [3, 2]])
        ei2 = np.array([[0, 1], [1, 0], [1, 2], [2, 1]])
        batch_ei = np.vstack([ei1, ei2 + n1])
        ids = np.array([0] * n1 + [1] * n2)
        pooled = sag_project_batch(Tensor(x), batch_ei, ids, 2, e)
        solo1 = sag_project(Tensor(x[:n1]), ei1, e)
        solo2 = sag_project(Tensor(x[n1:]), ei2, e)
        np.testing.assert_allclose(pooled.data[0], solo1.data, rtol=1e-12)
        np.testing.assert_allclose(pooled.data[1], solo2.data, rtol=1e-12)


class TestLayerForward:
    def _one_graph_batch(self, dim: int):
        rng = np.random.default_rng(18)
        nodes = Tensor(rng.normal(size=(3, dim)))
        edge_index = np.array([[0, 1], [1, 0], [1, 2], [2, 1]])
        ids = np.zeros(3, dtype=np.int64)
        return nodes, edge_index, ids

    def test_weighted_vote(self):
        # gates [0.6, 0.4] on constant experts voting 1 and 2
        nodes, edge_index, ids = self._one_graph_batch(2)
        r = zero_router(2, 2, m=2, k_s=2, k_t=2)
        r.w_mu2.data[:] = np.eye(2)
        t = Tensor(np.log(np.array([[0.6, 0.4]])))
        experts = [constant_expert(2, 1.0), constant_expert(2, 2.0)]
        res = layer_forward(nodes, edge_index, ids, 1, t, experts, r,
                            noise_on=False)
        np.testing.assert_allclose(res.output.data, [1.4], rtol=1e-12)
        np.testing.assert_allclose(res.route.gates.data, [[0.6, 0.4]], rtol=1e-12)

    def test_single_selection_passes_logit_through(self):
        nodes, edge_index, ids = self._one_graph_batch(2)
        r = zero_router(2, 2, m=2, k_s=1, k_t=2)
        r.w_mu2.data[:] = np.eye(2)
        t = Tensor(np.array([[0.0, 1.0]]))  # expert 1 wins
        experts = [constant_expert(2, -3.0), constant_expert(2, 7.5)]
        res = layer_forward(nodes, edge_index, ids, 1, t, experts, r,
                            noise_on=False)
        assert res.output.data[0] == 7.5
        np.testing.assert_array_equal(res.route.selected, [[1]])

    def test_all_expert_logits_retained(self):
        nodes, edge_index, ids = self._one_graph_batch(3)
        rng = np.random.default_rng(19)
        r = RouterParams.create(rng, 3, 2, num_experts=4, k_s=1, k_t=2)
        experts = [ExpertParams.create(rng, 3) for _ in range(4)]
        res = layer_forward(nodes, edge_index, ids, 1,
                            Tensor(rng.normal(size=(1, 2))), experts, r,
                            noise_on=False)
        assert res.expert_logits.shape == (1, 4)
        assert np.all(np.isfinite(res.expert_logits.data))

    def test_unselected_expert_gets_no_output_gradient(self):
        nodes, edge_index, ids = self._one_graph_batch(2)
        r = zero_router(2, 2, m=2, k_s=1, k_t=2)
        r.w_mu2.data[:] = np.eye(2)
        t = Tensor(np.array([[1.0, 0.0]]))  # expert 0 wins
        experts = [constant_expert(2, 1.0), constant_expert(2, 2.0)]
        with Tape() as tape:
            res = layer_forward(nodes, edge_index, ids, 1, t, experts, r,
                                noise_on=False)
            loss = ad.reduce_sum(res.output)
            tape.backward(loss)
        assert experts[0].b2.grad is not None and experts[0].b2.grad[0] == 1.0
        # expert 1's gate is exactly zero, so its vote cannot move the output
        assert experts[1].b2.grad is None or experts[1].b2.grad[0] == 0.0


class TestIntegrateOutputs:
    def test_zero_map_averages_layers(self):
        p = IntegratorParams(map_w=Tensor(np.zeros((3, 2)), requires_grad=True),
                             bias=Tensor(np.zeros(2), requires_grad=True))
        r, w = integrate_outputs(Tensor(np.array([1.0, 3.0])),
                                 Tensor(np.zeros(3)), p)
        assert r.data == pytest.approx(2.0, abs=1e-15)
        np.testing.assert_array_equal(w.data, [0.5, 0.5])

    def test_single_layer_passthrough(self):
        rng = np.random.default_rng(20)
        p = IntegratorParams.create(rng, task_dim=4, num_layers=1)
        r, w = integrate_outputs(Tensor(np.array([2.5])),
                                 Tensor(rng.normal(size=4)), p)
        assert r.data == 2.5
        assert w.data[0] == 1.0

    def test_quarter_three_quarter_blend(self):
        p = IntegratorParams(map_w=Tensor(np.zeros((2, 2)), requires_grad=True),
                             bias=Tensor(np.log(np.array([1.0, 3.0])),
                                         requires_grad=True))
        r, w = integrate_outputs(Tensor(np.array([0.0, 4.0])),
                                 Tensor(np.zeros(2)), p)
        np.testing.assert_allclose(w.data, [0.25, 0.75], rtol=1e-15)
        assert r.data == pytest.approx(3.0, abs=1e-12)

    def test_weights_are_probabilities_batched(self):
        rng = np.random.default_rng(22)
        p = IntegratorParams.create(rng, task_dim=3, num_layers=4)
        r, w = integrate_outputs(Tensor(rng.normal(size=(5, 4))),
                                 Tensor(rng.normal(size=(5, 3))), p)
        assert r.shape == (5,)
        assert np.all(w.data >= 0)
        np.testing.assert_allclose(w.data.sum(axis=1), np.ones(5), rtol=1e-12)


class TestTaskEmbeddings:
    def test_fnv1a_known_vectors(self):
        assert fnv1a_64("") == 0xCBF29CE484222325
        assert fnv1a_64("a") == 0xAF63DC4C8601EC8C

    def test_fallback_is_deterministic_unit_vector(self):
        a = fallback_embedding("solubility")
        b = fallback_embedding("solubility")
        c = fallback_embedding("toxicity")
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert a.shape == (64,)
        assert abs(np.linalg.norm(a) - 1.0) < 1e-12

    def test_fallback_dimension_configurable(self):
        assert fallback_embedding("x", dim=16).shape == (16,)

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "tasks.tsv"
        path.write_text("tox\t0.5,-1.0,2.0\nsol\t1.0,2.0,3.0\n")
        table = load_task_embeddings(path)
        np.testing.assert_array_equal(table["tox"], [0.5, -1.0, 2.0])
        np.testing.assert_array_equal(table["sol"], [1.0, 2.0, 3.0])

    def test_unequal_lengths_rejected(self, tmp_path):
        path = tmp_path / "tasks.tsv"
        path.write_text("a\t1.0,2.0\nb\t1.0,2.0,3.0\n")
        with pytest.raises(TaskEmbeddingError, match="length"):
            load_task_embeddings(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "tasks.tsv"
        path.write_text("a\t1.0,zebra\n")
        with pytest.raises(TaskEmbeddingError):
            load_task_embeddings(path)

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "tasks.tsv"
        path.write_text("a\t1.0\na\t2.0\n")
        with pytest.raises(TaskEmbeddingError, match="duplicate"):
            load_task_embeddings(path)

    def test_resolve_prefers_file_then_fallback(self):
        table = {"a": np.zeros(64)}
        out = resolve_tasks(["a", "b"], table, allow_fallback=True)
        np.testing.assert_array_equal(out["a"].embedding, np.zeros(64))
        np.testing.assert_array_equal(out["b"].embedding, fallback_embedding("b"))
        assert out["b"].description == "b"

    def test_resolve_without_fallback_raises(self):
        with pytest.raises(MissingTaskEmbedding):
            resolve_tasks(["a"], {}, allow_fallback=False)

    def test_resolve_uses_description_for_fallback(self):
        out = resolve_tasks(["t1"], {}, descriptions={"t1": "binding affinity"})
        np.testing.assert_array_equal(out["t1"].embedding,
                                      fallback_embedding("binding affinity"))

    def test_mixed_dimensions_rejected(self):
        table = {"a": np.zeros(8), "b": np.zeros(16)}
        with pytest.raises(TaskEmbeddingError, match="mixed"):
            resolve_tasks(["a", "b"], table)
