import math

import numpy as np
import pytest

from rstd.nn import (
    BatchNorm2d,
    Conv2d,
    FactorizedConv2d,
    LayerCompression,
    Linear,
    Network,
    batchnorm_backward,
    batchnorm_forward,
    build_table1_network,
    conv2d_backward,
    conv2d_forward,
    fully_connected,
    fully_connected_backward,
    global_average_pool,
    global_average_pool_backward,
    relu,
    relu_backward,
    softmax_cross_entropy,
    softmax_cross_entropy_backward,
)
from rstd.shuffle import identity_permutation, permutation_from_seed
from rstd.tdmodel import build_topology

from helpers import assert_norm_close, conv2d_oracle, finite_difference


class TestConvForward:
    def test_one_by_one_kernel_scales_input(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 4, 4))
        kernel = np.full((1, 1, 1, 1), 2.0)
        y = conv2d_forward(x, kernel)
        np.testing.assert_allclose(y, 2.0 * x, rtol=1e-12)

    def test_all_ones_3x3_on_all_ones_input(self):
        y = conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 3, 3, 1)))
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == 9.0

    def test_strided_output_shape(self):
        x = np.zeros((1, 3, 32, 32))
        k = np.zeros((3, 3, 3, 8))
        y = conv2d_forward(x, k, stride=2, padding=1)
        assert y.shape == (1, 8, 16, 16)

    def test_bias_added_per_channel(self):
        x = np.zeros((1, 1, 2, 2))
        k = np.zeros((1, 1, 1, 3))
        y = conv2d_forward(x, k, bias=np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(y[0, :, 0, 0], [1, 2, 3])

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="2 channels.*expects 3"):
            conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((3, 3, 3, 1)))

    def test_empty_output_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            conv2d_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 3, 3, 1)))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_matches_nested_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.normal(size=(2, 3, 6, 5))
        k = rng.normal(size=(3, 3, 3, 4))
        b = rng.normal(size=4)
        y = conv2d_forward(x, k, b, stride=stride, padding=padding)
        assert_norm_close(y, conv2d_oracle(x, k, b, stride, padding), 1e-12)


class TestConvBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 2, 4, 4))
        k = rng.normal(size=(2, 3, 3, 3))
        y = conv2d_forward(x, k, padding=1)
        dx, dk, db = conv2d_backward(x, k, np.zeros_like(y), padding=1)
        assert not dx.any() and not dk.any() and not db.any()

    def test_dbias_is_channel_sum(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 2, 4, 4))
        k = rng.normal(size=(2, 3, 3, 3))
        dy = rng.normal(size=(2, 3, 4, 4))
        _, _, db = conv2d_backward(x, k, dy, padding=1)
        np.testing.assert_allclose(db, dy.sum(axis=(0, 2, 3)), rtol=1e-6)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 0), (2, 1)])
    def test_matches_finite_differences(self, stride, padding):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 2, 5, 5))
        k = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=3)
        y = conv2d_forward(x, k, b, stride=stride, padding=padding)
        dy = rng.normal(size=y.shape)
        dx, dk, db = conv2d_backward(x, k, dy, stride=stride, padding=padding)

        def loss_x(xv):
            return float(np.sum(dy * conv2d_forward(xv, k, b, stride=stride,
                                                    padding=padding)))

        def loss_k(kv):
            return float(np.sum(dy * conv2d_forward(x, kv, b, stride=stride,
                                                    padding=padding)))

        def loss_b(bv):
            return float(np.sum(dy * conv2d_forward(x, k, bv, stride=stride,
                                                    padding=padding)))

        assert_norm_close(dx, finite_difference(loss_x, x), 1e-5, "dx")
        assert_norm_close(dk, finite_difference(loss_k, k), 1e-5, "dk")
        assert_norm_close(db, finite_difference(loss_b, b), 1e-5, "db")


class TestBatchNorm:
    def test_constant_channel_maps_to_zero(self):
        x = np.full((4, 2, 3, 3), 7.0)
        y, *_ = batchnorm_forward(x, np.ones(2), np.zeros(2),
                                  np.zeros(2), np.ones(2), train=True)
        np.testing.assert_allclose(y, 0.0, atol=1e-6)

    def test_shift_sets_output_mean(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 3, 4, 4))
        beta = np.array([1.0, -2.0, 0.5])
        y, *_ = batchnorm_forward(x, np.ones(3), beta,
                                  np.zeros(3), np.ones(3), train=True)
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), beta, atol=1e-7)

    def test_running_stats_update(self):
        rng = np.random.default_rng(1)
        x = rng.normal(loc=3.0, scale=2.0, size=(16, 1, 8, 8))
        _, _, rm, rv = batchnorm_forward(x, np.ones(1), np.zeros(1),
                                         np.zeros(1), np.ones(1),
                                         train=True, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(), rtol=1e-6)
        n = x.size
        unbiased = x.var() * n / (n - 1)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * unbiased, rtol=1e-6)

    def test_eval_mode_uses_running_stats(self):
        x = np.zeros((2, 1, 2, 2))
        y, *_ = batchnorm_forward(x, np.ones(1), np.zeros(1),
                                  np.array([2.0]), np.array([4.0]),
                                  train=False, eps=0.0)
        np.testing.assert_allclose(y, -1.0, rtol=1e-12)

    def test_empty_batch_rejected_in_train(self):
        with pytest.raises(ValueError, match="batch size 0"):
            batchnorm_forward(np.zeros((0, 1, 2, 2)), np.ones(1), np.zeros(1),
                              np.zeros(1), np.ones(1), train=True)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 2, 4, 4))
        gamma = rng.normal(size=2)
        beta = rng.normal(size=2)
        dy = rng.normal(size=x.shape)

        def loss(xv, gv, bv):
            y, *_ = batchnorm_forward(xv, gv, bv, np.zeros(2), np.ones(2),
                                      train=True)
            return float(np.sum(dy * y))

        y, cache, _, _ = batchnorm_forward(x, gamma, beta, np.zeros(2),
                                           np.ones(2), train=True)
        dx, dgamma, dbeta = batchnorm_backward(cache, dy)
        assert_norm_close(dx, finite_difference(lambda v: loss(v, gamma, beta), x),
                          1e-4, "bn dx")
        assert_norm_close(dgamma,
                          finite_difference(lambda v: loss(x, v, beta), gamma),
                          1e-4, "bn dgamma")
        assert_norm_close(dbeta,
                          finite_difference(lambda v: loss(x, gamma, v), beta),
                          1e-4, "bn dbeta")


class TestHeadOps:
    def test_relu_values(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 2.0])), [0.0, 2.0])

    def test_relu_backward(self):
        x = np.array([-1.0, 0.5, 2.0])
        dy = np.ones(3)
        np.testing.assert_array_equal(relu_backward(x, dy), [0, 1, 1])

    def test_gap_of_constant_map(self):
        x = np.full((2, 3, 4, 4), 2.5)
        np.testing.assert_allclose(global_average_pool(x), 2.5)

    def test_gap_backward_matches_fd(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 2, 3, 3))
        dy = rng.normal(size=(2, 2))
        dx = global_average_pool_backward(dy, (3, 3))
        fd = finite_difference(
            lambda v: float(np.sum(dy * global_average_pool(v))), x)
        assert_norm_close(dx, fd, 1e-6)

    def test_fully_connected_backward_matches_fd(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(5, 3))
        b = rng.normal(size=3)
        dy = rng.normal(size=(4, 3))
        dx, dw, db = fully_connected_backward(x, w, dy)
        assert_norm_close(
            dx, finite_difference(lambda v: float(np.sum(dy * fully_connected(v, w, b))), x),
            1e-6)
        assert_norm_close(
            dw, finite_difference(lambda v: float(np.sum(dy * fully_connected(x, v, b))), w),
            1e-6)
        assert_norm_close(
            db, finite_difference(lambda v: float(np.sum(dy * fully_connected(x, w, v))), b),
            1e-6)

    def test_equal_logits_loss_is_log_num_classes(self):
        logits = np.zeros((5, 10))
        labels = np.arange(5)
        assert softmax_cross_entropy(logits, labels) == pytest.approx(math.log(10))

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError, match=r"\[0, 10\)"):
            softmax_cross_entropy(np.zeros((1, 10)), np.array([10]))
        with pytest.raises(ValueError):
            softmax_cross_entropy_backward(np.zeros((1, 10)), np.array([-1]))

    def test_softmax_gradient_matches_fd(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(6, 10))
        labels = rng.integers(0, 10, size=6)
        dl = softmax_cross_entropy_backward(logits, labels)
        fd = finite_difference(lambda v: softmax_cross_entropy(v, labels), logits)
        assert_norm_close(dl, fd, 1e-5)


def make_factorized(shuffled, seed=0, kind="tt", ranks=(2, 2, 2), dtype=np.float64,
                    in_ch=3, out_ch=4):
    return FactorizedConv2d(in_ch, out_ch, 3, stride=1, padding=1, kind=kind,
                            ranks=ranks, shuffled=shuffled,
                            permutation_seed=99 if shuffled else None,
                            seed=seed, dtype=dtype)


class TestFactorizedConv:
    def test_identity_shuffle_equals_unshuffled_bit_exact(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 5, 5))
        plain = make_factorized(False)
        twin = make_factorized(False)
        twin.permutation = identity_permutation(3 * 3 * 3 * 4)
        np.testing.assert_array_equal(plain.forward(x), twin.forward(x))

    def test_matches_explicit_two_step_path(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 5, 5))
        layer = make_factorized(True, seed=3)
        kernel = layer.reconstruct_kernel()
        expected = conv2d_forward(x, kernel, layer.bias, stride=1, padding=1)
        np.testing.assert_allclose(layer.forward(x), expected, rtol=1e-12)

    def test_rank1_ring_channels_proportional(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 6, 6))
        layer = make_factorized(False, kind="tr", ranks=(1, 1, 1, 1))
        y = np.array(layer.forward(x)) - layer.bias.reshape(1, -1, 1, 1)
        ref = y[:, 0]
        for o in range(1, y.shape[1]):
            c = float(np.sum(y[:, o] * ref) / np.sum(ref * ref))
            np.testing.assert_allclose(y[:, o], c * ref, atol=1e-10)

    def test_shuffled_twin_same_value_multiset_and_count(self):
        plain = make_factorized(False, seed=5)
        twin = make_factorized(True, seed=5)
        k1 = plain.reconstruct_kernel()
        k2 = twin.reconstruct_kernel()
        np.testing.assert_array_equal(np.sort(k1.ravel()), np.sort(k2.ravel()))
        assert plain.ratio_param_counts() == twin.ratio_param_counts()

    @pytest.mark.parametrize("shuffled", [False, True])
    def test_backward_matches_finite_differences(self, shuffled):
        rng = np.random.default_rng(3)
        layer = make_factorized(shuffled, seed=4, ranks=(2, 2, 2))
        x = rng.normal(size=(2, 3, 4, 4))
        y = layer.forward(x)
        dy = rng.normal(size=y.shape)
        dx = layer.backward(dy).copy()
        grads = {k: v.copy() for k, v in layer.grads().items()}

        def loss_with(name, value):
            saved = None
            if name == "x":
                return float(np.sum(dy * layer.forward(value)))
            if name == "bias":
                saved, layer.bias = layer.bias, value
                out = float(np.sum(dy * layer.forward(x)))
                layer.bias = saved
                return out
            i = int(name[4:])
            cores = list(layer.cores.cores)
            saved = cores[i]
            cores[i] = value
            object.__setattr__(layer.cores, "cores", tuple(cores))
            out = float(np.sum(dy * layer.forward(x)))
            cores[i] = saved
            object.__setattr__(layer.cores, "cores", tuple(cores))
            return out

        assert_norm_close(dx, finite_difference(lambda v: loss_with("x", v), x),
                          1e-5, "dx")
        for i in range(len(layer.cores)):
            fd = finite_difference(lambda v: loss_with(f"core{i}", v),
                                   np.asarray(layer.cores[i]))
            assert_norm_close(grads[f"core{i}"], fd, 1e-5, f"core{i}")
        fd_b = finite_difference(lambda v: loss_with("bias", v), layer.bias)
        assert_norm_close(grads["bias"], fd_b, 1e-5, "bias")

    def test_shuffle_needs_seed(self):
        with pytest.raises(ValueError, match="permutation seed"):
            FactorizedConv2d(3, 4, 3, shuffled=True)

    def test_topology_kernel_shape_checked(self):
        topo = build_topology("tt", (3, 3, 3, 5), (1, 1, 1))
        with pytest.raises(ValueError, match="topology"):
            FactorizedConv2d(3, 4, 3, topology=topo)


class TestWholeNetworkGradient:
    def test_miniature_network_matches_finite_differences(self):
        from rstd.nn import (GlobalAvgPool, ReLU)
        rng = np.random.default_rng(0)
        conv = FactorizedConv2d(2, 3, 3, stride=1, padding=1, kind="tr",
                                ranks=(2, 1, 2, 1), shuffled=True,
                                permutation_seed=5, seed=1, dtype=np.float64)
        net = Network([
            ("conv", conv),
            ("bn", BatchNorm2d(3, dtype=np.float64)),
            ("relu", ReLU()),
            ("pool", GlobalAvgPool()),
            ("fc", Linear(3, 10, seed=2, dtype=np.float64)),
        ])
        x = rng.normal(size=(4, 2, 5, 5))
        labels = rng.integers(0, 10, size=4)

        def total_loss():
            logits = net.forward(x, train=True)
            return softmax_cross_entropy(logits, labels)

        logits = net.forward(x, train=True)
        net.backward(softmax_cross_entropy_backward(logits, labels))
        grads = {k: v.copy() for k, v in net.gradients().items()}

        for name, param in net.parameters().items():
            def loss_of(value, param=param):
                saved = param.copy()
                np.copyto(param, value)
                out = total_loss()
                np.copyto(param, saved)
                return out

            fd = finite_difference(loss_of, param.copy(), step=1e-5)
            assert_norm_close(grads[name], fd, 1e-4, name)


class TestTable1Network:
    def test_uncompressed_parameter_count_closed_form(self):
        net = build_table1_network(channels=16, seed=0)
        total = sum(p.size for p in net.parameters().values())
        # conv1 + 6 convs + 7 batchnorms + fc, each with biases
        expected = (3 * 9 * 16 + 16) + 6 * (16 * 9 * 16 + 16) \
            + 7 * (2 * 16) + (16 * 10 + 10)
        assert total == expected

    def test_compression_accounting_at_256_channels(self):
        comp = {i: LayerCompression("tr", (1, 1, 1, 1)) for i in range(2, 8)}
        net = build_table1_network(channels=256, compression=comp, seed=0)
        stored, dense = net.compression_accounting()
        assert dense == (3 * 9 * 256 + 256) + 6 * (256 * 9 * 256 + 256) \
            + (256 * 10 + 10)
        assert stored == (3 * 9 * 256 + 256) + 6 * (518 + 256) + (256 * 10 + 10)
        assert 0.003 < net.compression_ratio() < 0.006

    def test_layer_one_compression_rejected(self):
        with pytest.raises(ValueError, match="first convolution"):
            build_table1_network(
                channels=8, compression={1: LayerCompression("tt", (1, 1, 1))})

    def test_shape_chain_at_desk_scale(self):
        net = build_table1_network(channels=32, seed=1)
        trace = dict(net.forward_trace(np.zeros((2, 3, 32, 32), np.float32)))
        assert trace["relu1"] == (2, 32, 32, 32)
        assert trace["relu2"] == (2, 32, 32, 32)
        assert trace["relu3"] == (2, 32, 16, 16)
        assert trace["relu5"] == (2, 32, 16, 16)
        assert trace["relu6"] == (2, 32, 8, 8)
        assert trace["relu7"] == (2, 32, 8, 8)
        assert trace["pool"] == (2, 32)
        assert trace["fc"] == (2, 10)

    def test_forward_deterministic_in_eval(self):
        net = build_table1_network(channels=4, seed=3)
        x = np.random.default_rng(0).normal(size=(2, 3, 32, 32)).astype(np.float32)
        a = np.array(net.forward(x, train=False))
        b = np.array(net.forward(x, train=False))
        np.testing.assert_array_equal(a, b)

    def test_same_seed_same_parameters(self):
        n1 = build_table1_network(channels=4, seed=9)
        n2 = build_table1_network(channels=4, seed=9)
        for (k1, v1), (k2, v2) in zip(n1.parameters().items(),
                                      n2.parameters().items()):
            assert k1 == k2
            np.testing.assert_array_equal(v1, v2)

    def test_compressed_layers_swap_in(self):
        comp = {2: LayerCompression("tt", (2, 2, 2)),
                5: LayerCompression("tr", (1, 1, 1, 1), shuffled=True)}
        net = build_table1_network(channels=8, compression=comp, seed=2)
        layers = dict(net.layers)
        assert isinstance(layers["conv2"], FactorizedConv2d)
        assert isinstance(layers["conv5"], FactorizedConv2d)
        assert layers["conv5"].permutation is not None
        assert isinstance(layers["conv3"], Conv2d)
        assert set(net.permutations()) == {"conv5"}
