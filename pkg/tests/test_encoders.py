import numpy as np
import numpy.testing as npt
import pytest

from stockfuse import autodiff as ad
from stockfuse.autodiff import Parameter, Tensor, grad_check
from stockfuse.data import build_graph
from stockfuse.encoders import (
    DocEncoderParams,
    GatParams,
    IndicatorEncoderParams,
    LEAKY_SLOPE,
    block_gat_encode,
    encode_documents,
    encode_indicators,
    gat_attention_coefficients,
    gat_encode_graph,
)
from stockfuse.errors import DataError, ShapeError


def P(name, values):
    return Parameter(name, Tensor(np.asarray(values, dtype=np.float64), requires_grad=True))


def make_indicator_params(d, rng=None, zero_bias=False):
    rng = rng or np.random.default_rng(0)
    b = lambda: np.zeros((1, d)) if zero_bias else rng.normal(size=(1, d)) * 0.1
    return IndicatorEncoderParams(
        w_close=P("wc", rng.normal(size=(1, d))), b_close=P("bc", b()),
        w_open=P("wo", rng.normal(size=(1, d))), b_open=P("bo", b()),
        w_high=P("wh", rng.normal(size=(1, d))), b_high=P("bh", b()),
        w_mix=P("wm", rng.normal(size=(3 * d, d))), b_mix=P("bm", b()),
    )


def make_gat_params(d, heads=2, layers=1, rng=None):
    rng = rng or np.random.default_rng(1)
    return GatParams(
        layers=[
            [(P(f"w{li}{k}", rng.normal(size=(d, d)) * 0.5),
              P(f"a{li}{k}", rng.normal(size=(2 * d, 1)) * 0.5))
             for k in range(heads)]
            for li in range(layers)
        ]
    )


class TestIndicatorEncoder:
    def test_zero_input_zero_bias(self):
        params = make_indicator_params(4, zero_bias=True)
        out = encode_indicators(Tensor(np.zeros((3, 3))), params)
        npt.assert_array_equal(out.values, np.zeros((3, 4)))

    def test_hand_computation(self):
        d = 2
        params = IndicatorEncoderParams(
            w_close=P("wc", [[1.0, 2.0]]), b_close=P("bc", [[0.1, 0.2]]),
            w_open=P("wo", [[3.0, 4.0]]), b_open=P("bo", [[0.0, 0.0]]),
            w_high=P("wh", [[-1.0, 0.5]]), b_high=P("bh", [[0.5, -0.5]]),
            w_mix=P("wm", np.arange(12, dtype=float).reshape(6, 2) / 10.0),
            b_mix=P("bm", [[1.0, -1.0]]),
        )
        x = np.array([[2.0, 3.0, 4.0]])  # close, open, high
        lifted = np.concatenate(
            [
                x[:, 0:1] @ params.w_close.values + params.b_close.values,
                x[:, 1:2] @ params.w_open.values + params.b_open.values,
                x[:, 2:3] @ params.w_high.values + params.b_high.values,
            ],
            axis=1,
        )
        expected = lifted @ params.w_mix.values + params.b_mix.values
        out = encode_indicators(Tensor(x), params)
        npt.assert_allclose(out.values, expected, atol=1e-14)

    def test_homogeneity(self, rng):
        params = make_indicator_params(5, rng, zero_bias=True)
        x = rng.normal(size=(6, 3))
        one = encode_indicators(Tensor(x), params).values
        two = encode_indicators(Tensor(2.0 * x), params).values
        npt.assert_allclose(two, 2.0 * one, atol=1e-12)

    def test_nonfinite_rejected(self):
        params = make_indicator_params(2)
        bad = np.array([[1.0, np.nan, 2.0]])
        with pytest.raises(DataError):
            encode_indicators(Tensor(bad), params)

    def test_output_shape(self, rng):
        params = make_indicator_params(7, rng)
        assert encode_indicators(Tensor(rng.normal(size=(9, 3))), params).shape == (9, 7)

    def test_gradients(self, rng):
        params = make_indicator_params(3, rng)
        x = Tensor(rng.normal(size=(4, 3)))

        def f():
            out = encode_indicators(x, params)
            return ad.sum_all(ad.mul(out, out))

        assert grad_check(f, params.all(), eps=1e-5) < 1e-4


class TestDocEncoder:
    def make(self, dim, d, rng):
        return DocEncoderParams(
            w=P("w", rng.normal(size=(dim, d))), b=P("b", rng.normal(size=(1, d)))
        )

    def test_all_masked_zero_output(self, rng):
        params = self.make(6, 4, rng)
        out = encode_documents(Tensor(np.zeros((5, 6))), np.zeros(5), params)
        npt.assert_array_equal(out.values, np.zeros((5, 4)))

    def test_bias_suppressed_on_masked_rows(self, rng):
        params = self.make(6, 4, rng)
        assert np.abs(params.b.values).sum() > 0
        doc = np.vstack([rng.normal(size=(1, 6)), np.zeros((1, 6))])
        out = encode_documents(Tensor(doc), np.array([1, 0]), params)
        assert np.abs(out.values[0]).sum() > 0
        npt.assert_array_equal(out.values[1], np.zeros(4))

    def test_full_mask_affine_oracle(self, rng):
        params = self.make(8, 3, rng)
        doc = rng.normal(size=(5, 8))
        expected = doc @ params.w.values + params.b.values
        out = encode_documents(Tensor(doc), np.ones(5), params)
        npt.assert_allclose(out.values, expected, atol=1e-13)

    def test_mask_length_mismatch(self, rng):
        params = self.make(4, 2, rng)
        with pytest.raises(ShapeError):
            encode_documents(Tensor(np.zeros((3, 4))), np.zeros(5), params)

    def test_gradients(self, rng):
        params = self.make(5, 3, rng)
        doc = rng.normal(size=(4, 5))
        doc[2] = 0.0
        mask = np.array([1, 1, 0, 1])

        def f():
            out = encode_documents(Tensor(doc), mask, params)
            return ad.sum_all(ad.mul(out, out))

        assert grad_check(f, params.all(), eps=1e-5) < 1e-4


def dense_gat_oracle(h, neighbors, params):
    """Brute-force per-entry attention, heads averaged, ELU."""
    x = h.copy()
    for layer in params.layers:
        heads = []
        for w, a in layer:
            hw = x @ w.values
            d = w.values.shape[0]
            n = x.shape[0]
            alpha = np.zeros((n, n))
            for i in range(n):
                scores = []
                for j in range(n):
                    if not neighbors[i, j]:
                        continue
                    s = float((hw[i] @ a.values[:d] + hw[j] @ a.values[d:]).item())
                    scores.append((j, s if s > 0 else LEAKY_SLOPE * s))
                mx = max(s for _, s in scores)
                zsum = sum(np.exp(s - mx) for _, s in scores)
                for j, s in scores:
                    alpha[i, j] = np.exp(s - mx) / zsum
            heads.append(alpha @ hw)
        avg = np.mean(heads, axis=0)
        x = np.where(avg > 0, avg, np.expm1(np.minimum(avg, 0)))
    return x


class TestGraphEncoder:
    def test_single_isolated_node(self, rng):
        params = make_gat_params(3, heads=2)
        h = rng.normal(size=(1, 3))
        out = gat_encode_graph(Tensor(h), np.array([[True]]), params)
        expected = np.mean([h @ w.values for w, _ in params.layers[0]], axis=0)
        expected = np.where(expected > 0, expected, np.expm1(expected))
        npt.assert_allclose(out.values, expected, atol=1e-12)

    def test_identical_nodes_identical_outputs(self, rng):
        params = make_gat_params(4)
        row = rng.normal(size=4)
        h = np.vstack([row, row])
        out = gat_encode_graph(Tensor(h), np.ones((2, 2), dtype=bool), params)
        npt.assert_allclose(out.values[0], out.values[1], atol=1e-12)

    def test_dense_oracle_four_nodes(self, rng):
        params = make_gat_params(5, heads=2)
        h = rng.normal(size=(4, 5))
        neighbors = np.array(
            [
                [1, 1, 0, 0],
                [1, 1, 1, 0],
                [0, 1, 1, 1],
                [0, 0, 1, 1],
            ],
            dtype=bool,
        )
        out = gat_encode_graph(Tensor(h), neighbors, params)
        npt.assert_allclose(out.values, dense_gat_oracle(h, neighbors, params), atol=1e-10)

    def test_attention_rows_sum_to_one(self, rng):
        params = make_gat_params(4, heads=3)
        h = rng.normal(size=(6, 4)) * 3
        neighbors = np.eye(6, dtype=bool) | (rng.random((6, 6)) < 0.4)
        neighbors |= neighbors.T
        for alpha in gat_attention_coefficients(Tensor(h), neighbors, params):
            npt.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-6)
            assert np.all(alpha[~neighbors] == 0)

    def test_permutation_equivariance(self, rng):
        params = make_gat_params(4)
        h = rng.normal(size=(5, 4))
        neighbors = np.eye(5, dtype=bool) | (rng.random((5, 5)) < 0.5)
        neighbors |= neighbors.T
        out = gat_encode_graph(Tensor(h), neighbors, params).values
        perm = rng.permutation(5)
        out_p = gat_encode_graph(
            Tensor(h[perm]), neighbors[np.ix_(perm, perm)], params
        ).values
        npt.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_relational_graph_input(self, rng):
        graph = build_graph([("A", "s", "x"), ("B", "s", "x")], stocks=["A", "B", "C"])
        params = make_gat_params(3)
        h = rng.normal(size=(3, 3))
        out = gat_encode_graph(Tensor(h), graph, params, symbols=["A", "B", "C"])
        mask = graph.neighbor_mask(["A", "B", "C"])
        expected = gat_encode_graph(Tensor(h), mask, params)
        npt.assert_array_equal(out.values, expected.values)

    def test_two_layer_stack(self, rng):
        params = make_gat_params(3, heads=2, layers=2)
        h = rng.normal(size=(4, 3))
        neighbors = np.ones((4, 4), dtype=bool)
        out = gat_encode_graph(Tensor(h), neighbors, params)
        npt.assert_allclose(out.values, dense_gat_oracle(h, neighbors, params), atol=1e-10)

    def test_gradients(self, rng):
        params = make_gat_params(3, heads=2)
        h = Tensor(rng.normal(size=(4, 3)))
        neighbors = np.eye(4, dtype=bool)
        neighbors[0, 1] = neighbors[1, 0] = True

        def f():
            out = gat_encode_graph(h, neighbors, params)
            return ad.sum_all(ad.mul(out, out))

        assert grad_check(f, params.all(), eps=1e-5) < 1e-4


class TestBlockGat:
    def test_matches_per_timestamp_loop(self, rng):
        params = make_gat_params(4, heads=2, layers=2)
        n, T = 5, 7
        h = rng.normal(size=(T * n, 4))
        neighbors = np.eye(n, dtype=bool) | (rng.random((n, n)) < 0.4)
        neighbors |= neighbors.T
        fused = block_gat_encode(Tensor(h), neighbors, params)
        for tau in range(T):
            single = gat_encode_graph(Tensor(h[tau * n : (tau + 1) * n]), neighbors, params)
            npt.assert_allclose(
                fused.values[tau * n : (tau + 1) * n], single.values, atol=1e-12
            )

    def test_block_gradients(self, rng):
        params = make_gat_params(3, heads=2)
        h = Tensor(rng.normal(size=(6, 3)))  # 2 timestamps x 3 nodes
        neighbors = np.ones((3, 3), dtype=bool)

        def f():
            out = block_gat_encode(h, neighbors, params)
            return ad.sum_all(ad.mul(out, out))

        assert grad_check(f, params.all(), eps=1e-5) < 1e-4
