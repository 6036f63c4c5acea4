import numpy as np
import numpy.testing as npt
import pytest

from clapping_sim import stages as st
from clapping_sim.errors import ConfigurationError, ContractViolation
from clapping_sim.rng import named_stream


def fd_input(spec, y, w, v, h=1e-5):
    g = np.zeros_like(y)
    for i in range(len(y)):
        up, dn = y.copy(), y.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (st.stage_forward(spec, up, w) - st.stage_forward(spec, dn, w)) @ v / (2 * h)
    return g


def fd_weight(spec, y, w, v, h=1e-5):
    g = np.zeros_like(w)
    for i in range(len(w)):
        up, dn = w.copy(), w.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (st.stage_forward(spec, y, up) - st.stage_forward(spec, y, dn)) @ v / (2 * h)
    return g


class TestStageForward:
    def test_linear_identity(self):
        spec = st.StageSpec(st.LINEAR, 2, 2)
        out = st.stage_forward(spec, np.array([3.0, -2.0]), np.eye(2).ravel())
        npt.assert_array_equal(out, [3.0, -2.0])

    def test_logistic_head_at_zero(self):
        spec = st.StageSpec(st.LOGISTIC_LOSS, 1, 1)
        out = st.stage_forward(spec, np.array([0.0]), np.zeros(0))
        npt.assert_allclose(out, [np.log(2.0)], rtol=0, atol=1e-15)

    def test_regularized_head_hand_value(self):
        # ln(1 + e^1) + 0.005 * 4 computed by hand
        spec = st.StageSpec(st.REG_LOGISTIC_LOSS, 2, 1, {"c_r": 0.005})
        out = st.stage_forward(spec, np.array([1.0, 4.0]), np.zeros(0))
        npt.assert_allclose(out, [np.log1p(np.e) + 0.02], rtol=1e-15)

    def test_relu_subgradient_zero_is_zero(self):
        spec = st.StageSpec(st.RELU, 3, 3)
        out = st.stage_backward_input(spec, np.array([0.0, -1.0, 2.0]), np.zeros(0),
                                      np.ones(3))
        npt.assert_array_equal(out, [0.0, 0.0, 1.0])

    def test_dimension_mismatch_raises(self):
        spec = st.StageSpec(st.LINEAR, 3, 2)
        with pytest.raises(ContractViolation):
            st.stage_forward(spec, np.zeros(4), np.zeros(6))
        with pytest.raises(ContractViolation):
            st.stage_forward(spec, np.zeros(3), np.zeros(5))

    def test_forward_is_pure_and_deterministic(self):
        spec = st.StageSpec(st.AFFINE_BIAS, 4, 3)
        rng = named_stream(0, "purity")
        y, w = rng.standard_normal(4), rng.standard_normal(spec.param_dim)
        a = st.stage_forward(spec, y, w)
        b = st.stage_forward(spec, y, w)
        assert a.tobytes() == b.tobytes()

    def test_batched_rows_match_single(self):
        spec = st.StageSpec(st.AFFINE_BIAS, 3, 2)
        rng = named_stream(1, "batch")
        Y, w = rng.standard_normal((5, 3)), rng.standard_normal(spec.param_dim)
        batched = st.stage_forward(spec, Y, w)
        for i in range(5):
            # batched and single-row paths may differ by BLAS accumulation order
            npt.assert_allclose(batched[i], st.stage_forward(spec, Y[i], w),
                                rtol=1e-14, atol=1e-15)


class TestStageBackward:
    def test_linear_identity_input_adjoint(self):
        spec = st.StageSpec(st.LINEAR, 2, 2)
        out = st.stage_backward_input(spec, np.zeros(2), np.eye(2).ravel(), np.ones(2))
        npt.assert_array_equal(out, [1.0, 1.0])

    def test_tanh_prime_at_zero(self):
        spec = st.StageSpec(st.TANH, 1, 1)
        out = st.stage_backward_input(spec, np.array([0.0]), np.zeros(0), np.array([1.0]))
        npt.assert_array_equal(out, [1.0])

    def test_random_linear_matches_finite_differences(self):
        spec = st.StageSpec(st.LINEAR, 3, 2)
        rng = named_stream(2, "fd")
        y, w = rng.standard_normal(3), rng.standard_normal(6)
        v = rng.standard_normal(2)
        bp = st.stage_backward_input(spec, y, w, v)
        fd = fd_input(spec, y, w, v)
        assert np.linalg.norm(bp - fd) / np.linalg.norm(fd) < 1e-6

    def test_tanh_weight_adjoint_is_empty(self):
        spec = st.StageSpec(st.TANH, 3, 3)
        out = st.stage_backward_weight(spec, np.ones(3), np.zeros(0), np.ones(3))
        assert out.shape == (0,)

    def test_linear_1x1_weight_adjoint(self):
        spec = st.StageSpec(st.LINEAR, 1, 1)
        out = st.stage_backward_weight(spec, np.array([3.0]), np.array([2.0]), np.array([1.0]))
        npt.assert_array_equal(out, [3.0])

    def test_affine_bias_weight_matches_finite_differences(self):
        spec = st.StageSpec(st.AFFINE_BIAS, 4, 3)
        rng = named_stream(3, "fd-w")
        y, w = rng.standard_normal(4), rng.standard_normal(spec.param_dim)
        v = rng.standard_normal(3)
        bp = st.stage_backward_weight(spec, y, w, v)
        fd = fd_weight(spec, y, w, v)
        assert np.linalg.norm(bp - fd) / np.linalg.norm(fd) < 1e-6

    @pytest.mark.parametrize("kind", st.STAGE_KINDS)
    def test_every_kind_matches_finite_differences(self, kind):
        rng = named_stream(4, f"fd-{kind}")
        for _ in range(25):
            if kind == st.LINEAR:
                spec = st.StageSpec(kind, 3, 3, {"append_sq_norm": True})
            elif kind == st.AFFINE_BIAS:
                spec = st.StageSpec(kind, 3, 2)
            elif kind in (st.TANH, st.RELU):
                spec = st.StageSpec(kind, 3, 3)
            elif kind == st.LOGISTIC_LOSS:
                spec = st.StageSpec(kind, 1, 1)
            else:
                spec = st.StageSpec(kind, 2, 1, {"c_r": 0.01})
            y = rng.standard_normal(spec.input_dim)
            if kind == st.RELU:
                y = np.where(np.abs(y) < 0.05, 0.5, y)
            w = rng.standard_normal(spec.param_dim)
            v = rng.standard_normal(spec.output_dim)
            fd_in = fd_input(spec, y, w, v)
            bp_in = st.stage_backward_input(spec, y, w, v)
            assert np.linalg.norm(bp_in - fd_in) <= 1e-6 * max(np.linalg.norm(fd_in), 1e-3)
            if spec.param_dim:
                fd_w = fd_weight(spec, y, w, v)
                bp_w = st.stage_backward_weight(spec, y, w, v)
                assert np.linalg.norm(bp_w - fd_w) <= 1e-6 * max(np.linalg.norm(fd_w), 1e-3)


class TestModelChain:
    def test_adjacent_dims_must_match(self):
        with pytest.raises(ConfigurationError):
            st.ModelChain((st.StageSpec(st.LINEAR, 2, 3), st.StageSpec(st.TANH, 2, 2)))

    def test_final_stage_must_be_scalar(self):
        with pytest.raises(ConfigurationError):
            st.ModelChain((st.StageSpec(st.LINEAR, 2, 3),))

    def test_boundaries_strictly_increasing(self):
        stages = st.tanh_mlp_chain((3, 3, 3), boundaries=(2,)).stages
        with pytest.raises(ConfigurationError):
            st.ModelChain(stages, boundaries=(2, 2))

    def test_worker_partition(self):
        chain = st.tanh_mlp_chain((4, 5, 3), boundaries=(2, 4))
        assert chain.num_workers == 3
        assert sum(len(chain.worker_stages(e)) for e in (1, 2, 3)) == len(chain.stages)
        assert chain.boundary_dim(0) == 5
        assert chain.boundary_dim(1) == 3

    def test_two_stage_chain_loss_at_zero(self):
        chain = st.ModelChain(
            (st.StageSpec(st.LINEAR, 2, 1), st.StageSpec(st.LOGISTIC_LOSS, 1, 1)),
            boundaries=(1,),
        )
        loss = st.chain_loss(chain, np.zeros(2), [np.array([1.0, 0.0]), np.zeros(0)])
        npt.assert_allclose(loss, np.log(2.0), rtol=1e-15)

    def test_logistic_chain_matches_scalar_oracle(self):
        # margin stage plus regularized head against a direct scalar
        # computation of ln(1+e^{-zeta(xi.w+b)}) + c_r(|w|^2 + b^2)
        c_r = 0.005
        chain = st.logistic_chain(4, c_r)
        rng = named_stream(5, "oracle")
        w, b = rng.standard_normal(4), float(rng.standard_normal())
        xi, zeta = rng.standard_normal(4), -1.0
        x = np.concatenate([-zeta * xi, [-zeta]])
        loss = st.chain_loss(chain, x, [np.concatenate([w, [b]]), np.zeros(0)])
        expected = np.log1p(np.exp(-zeta * (xi @ w + b))) + c_r * (w @ w + b * b)
        npt.assert_allclose(loss, expected, rtol=1e-14)

    def test_mlp_chain_matches_flat_reimplementation(self):
        # independently coded flat loss for affine+tanh blocks and a
        # softplus head, same weights
        chain = st.tanh_mlp_chain((3, 4), boundaries=(1,))
        rng = named_stream(6, "flat")
        w_all = [rng.standard_normal(s.param_dim) for s in chain.stages]
        x = rng.standard_normal(3)

        def flat_loss(x, w_all):
            W1 = w_all[0][:12].reshape(4, 3)
            b1 = w_all[0][12:]
            h = np.tanh(W1 @ x + b1)
            W2 = w_all[2][:4].reshape(1, 4)
            b2 = w_all[2][4:]
            z = W2 @ h + b2
            return float(np.logaddexp(0.0, z)[0])

        assert abs(st.chain_loss(chain, x, w_all) - flat_loss(x, w_all)) <= 1e-12

    def test_full_chain_backprop_matches_loss_finite_differences(self):
        chain = st.tanh_mlp_chain((4, 6, 3), boundaries=(2,))
        rng = named_stream(7, "chain-fd")
        w_all = [0.7 * rng.standard_normal(s.param_dim) for s in chain.stages]
        x = rng.standard_normal(4)
        _, u_all, _ = st.chain_gradients(chain, x, w_all)
        h = 1e-5
        for si, w in enumerate(w_all):
            if not len(w):
                continue
            fd = np.zeros_like(w)
            for i in range(len(w)):
                up = [p.copy() for p in w_all]
                dn = [p.copy() for p in w_all]
                up[si][i] += h
                dn[si][i] -= h
                fd[i] = (st.chain_loss(chain, x, up) - st.chain_loss(chain, x, dn)) / (2 * h)
            assert np.linalg.norm(u_all[si] - fd) / max(np.linalg.norm(fd), 1e-8) < 1e-6

    def test_batched_loss_is_mean_of_rows(self):
        chain = st.logistic_chain(3, 0.01)
        rng = named_stream(8, "mean")
        w_all = [rng.standard_normal(s.param_dim) for s in chain.stages]
        X = rng.standard_normal((6, 4))
        per_row = [st.chain_loss(chain, X[i], w_all) for i in range(6)]
        npt.assert_allclose(st.chain_loss(chain, X, w_all), np.mean(per_row), rtol=1e-14)
