import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynsel.autodiff import ShapeError, Tensor, ops
from dynsel.dsf import DynamicSpatialFilter, apply_dsf, masked_covariance
from dynsel.msfbcnn import MSFBCNN, ClassifierConfig, log_power, param_count_closed_form

from .gradcheck import rel_err


def _set_filter(dsf, w, b):
    m = dsf.n_channels
    dsf.mlp.fc2.weight.data[...] = 0.0
    dsf.mlp.fc2.bias.data[...] = np.concatenate([np.asarray(w, float).reshape(-1),
                                                 np.broadcast_to(b, (m,))])


class TestCovariance:
    def test_hand_example(self):
        out = masked_covariance(np.array([[1.0, -1.0], [1.0, -1.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 1.0], [1.0, 1.0]])

    def test_masked_channel_zero_row_col(self):
        x = np.random.default_rng(0).standard_normal((4, 20))
        x[2] = 0.0
        c = masked_covariance(x).data
        assert not c[2].any() and not c[:, 2].any()

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), m=st.integers(1, 6), L=st.integers(1, 30))
    def test_symmetric_psd(self, seed, m, L):
        c = masked_covariance(np.random.default_rng(seed).standard_normal((3, m, L))).data
        assert np.array_equal(c, np.transpose(c, (0, 2, 1)))
        assert np.linalg.eigvalsh(c).min() > -1e-10


class TestDsf:
    def test_starts_as_identity(self):
        dsf = DynamicSpatialFilter(3, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((3, 16))
        np.testing.assert_array_equal(apply_dsf(x, dsf).data, x)

    def test_identity_filter(self):
        dsf = DynamicSpatialFilter(3, np.random.default_rng(0))
        _set_filter(dsf, np.eye(3), 0.0)
        x = np.random.default_rng(2).standard_normal((2, 3, 10))
        np.testing.assert_array_equal(apply_dsf(x, dsf).data, x)

    def test_constant_output(self):
        dsf = DynamicSpatialFilter(3, np.random.default_rng(0))
        _set_filter(dsf, np.zeros((3, 3)), 1.7)
        out = apply_dsf(np.random.default_rng(3).standard_normal((3, 10)), dsf).data
        np.testing.assert_array_equal(out, 1.7)

    def test_output_channel_count(self):
        dsf = DynamicSpatialFilter(5, np.random.default_rng(0))
        assert apply_dsf(np.zeros((2, 5, 7)), dsf).shape == (2, 5, 7)
        with pytest.raises(ShapeError):
            apply_dsf(np.zeros((2, 4, 7)), dsf)

    def test_composite_is_not_linear(self):
        rng = np.random.default_rng(4)
        dsf = DynamicSpatialFilter(3, rng)
        for p in dsf.named_parameters().values():
            p.data += 0.3 * rng.standard_normal(p.shape)
        x = rng.standard_normal((3, 12))
        y = rng.standard_normal((3, 12))
        f = lambda v: apply_dsf(v, dsf).data  # noqa: E731
        assert not np.allclose(f(x + y), f(x) + f(y), atol=1e-6)
        # for fixed (W, b) the map is affine in the input
        w, b = dsf.filters(x[None])
        np.testing.assert_allclose(f(x), w.data[0] @ x + b.data[0][:, None], atol=1e-12)

    def test_gradient_wrt_mlp_weights(self):
        rng = np.random.default_rng(5)
        dsf = DynamicSpatialFilter(3, rng, hidden=6)
        for p in dsf.named_parameters().values():
            p.data += 0.2 * rng.standard_normal(p.shape)
        x = rng.standard_normal((2, 3, 8))
        wt = rng.standard_normal((2, 3, 8))

        def loss():
            return ops.sum(ops.mul(dsf(x), wt))

        loss().backward()
        params = dsf.named_parameters()
        grads = {n: p.grad.copy() for n, p in params.items()}
        errs = []
        for n, p in params.items():
            for _ in range(25):
                idx = tuple(rng.integers(0, s) for s in p.shape)
                old = p.data[idx]
                p.data[idx] = old + 1e-5
                hi = loss().item()
                p.data[idx] = old - 1e-5
                lo = loss().item()
                p.data[idx] = old
                errs.append(rel_err(grads[n][idx], (hi - lo) / 2e-5))
        assert len(errs) >= 100 and max(errs) < 1e-4


class TestLogPower:
    def test_constant_signal(self):
        out = log_power(Tensor(np.full(8, 1.5)), 4, 4).data
        np.testing.assert_allclose(out, np.log(1.5**2 + 1e-8), rtol=1e-14)

    def test_zero_channel_floor(self):
        out = log_power(Tensor(np.zeros(8)), 4, 4).data
        np.testing.assert_allclose(out, np.log(1e-8))
        assert out[0] == pytest.approx(-18.42, abs=0.01)

    def test_doubling_adds_log4(self):
        x = np.random.default_rng(0).standard_normal(40) + 3.0
        a = log_power(Tensor(x), 8, 4).data
        b = log_power(Tensor(2 * x), 8, 4).data
        np.testing.assert_allclose(b - a, np.log(4.0), atol=1e-7)


AUDIT_CONFIGS = [
    ClassifierConfig.full_size(),
    ClassifierConfig(n_channels=4, n_samples=256, n_temporal=4, n_spatial=8, n_classes=4),
    ClassifierConfig(n_channels=8, n_samples=64, n_temporal=3, n_spatial=5,
                     kernels=(16, 10, 7, 4), pool_kernel=16, pool_stride=8, n_classes=2),
]


class TestClassifier:
    @pytest.mark.parametrize("cfg", AUDIT_CONFIGS, ids=["full", "desk", "small"])
    def test_parameter_audit(self, cfg):
        net = MSFBCNN(cfg, np.random.default_rng(0))
        ft, fs, c, nc = cfg.n_temporal, cfg.n_spatial, cfg.n_channels, cfg.n_classes
        t = cfg.pooled_len
        k = cfg.kernels
        table = k[0] * ft + k[1] * ft + k[2] * ft + k[3] * ft + 2 * ft + 4 * c * ft * fs + 2 * fs + fs * t * nc
        assert param_count_closed_form(cfg) == table
        assert net.num_parameters() == table

    def test_full_size_pooled_length(self):
        cfg = ClassifierConfig.full_size()
        assert cfg.pooled_len == 71

    def test_layer_shapes(self):
        cfg = ClassifierConfig(n_channels=4, n_samples=256, n_temporal=4, n_spatial=8, n_classes=4)
        net = MSFBCNN(cfg, np.random.default_rng(0)).eval()
        out = net(np.zeros((2, 4, 256)))
        assert out.shape == (2, 4)
        sh = net.trunk.last_shapes
        p = (256 - 75) // 15 + 1
        assert sh["timeconv"] == (2, 4, 256, 4)
        assert sh["concat"] == (2, 16, 256, 4)
        assert sh["spatialconv"] == (2, 8, 256, 1)
        assert sh["pool"] == (2, 8, p, 1)

    def test_wrong_input_shape(self):
        net = MSFBCNN(AUDIT_CONFIGS[2], np.random.default_rng(0))
        with pytest.raises(ShapeError):
            net(np.zeros((1, 7, 64)))

    def test_zero_dense_gives_uniform_softmax(self):
        cfg = AUDIT_CONFIGS[2]
        net = MSFBCNN(cfg, np.random.default_rng(0)).eval()
        net.dense.data[...] = 0.0
        x = np.random.default_rng(1).standard_normal((3, 8, 64))
        p = ops.softmax(net(x), axis=1).data
        np.testing.assert_allclose(p, 1.0 / cfg.n_classes, atol=1e-15)

    def test_finite_differences_desk_config(self):
        cfg = ClassifierConfig(n_channels=4, n_samples=256, n_temporal=4, n_spatial=8,
                               n_classes=4, dropout=0.0)
        rng = np.random.default_rng(2)
        net = MSFBCNN(cfg, rng).train()
        x = rng.standard_normal((3, 4, 256))
        y = np.array([0, 1, 3])

        def loss():
            # running statistics are updated in training mode; snapshot and restore
            bufs = {n: b.copy() for n, b in net.named_buffers().items()}
            out = ops.cross_entropy(net(x), y)
            for n, b in net.named_buffers().items():
                b[...] = bufs[n]
            return out

        loss().backward()
        params = net.named_parameters()
        names = sorted(params)
        errs = []
        for i in range(5):
            p = params[names[int(rng.integers(0, len(names)))]]
            idx = tuple(rng.integers(0, s) for s in p.shape)
            g = p.grad[idx]
            old = p.data[idx]
            p.data[idx] = old + 1e-5
            hi = loss().item()
            p.data[idx] = old - 1e-5
            lo = loss().item()
            p.data[idx] = old
            errs.append(rel_err(g, (hi - lo) / 2e-5))
        assert max(errs) < 1e-3

    def test_masked_channel_neutral_through_identity_dsf(self):
        # a fresh filter is the identity, so zeroing a channel affects logits
        # exactly as it does without the filter
        cfg = AUDIT_CONFIGS[2]
        rng = np.random.default_rng(3)
        net = MSFBCNN(cfg, rng).eval()
        dsf = DynamicSpatialFilter(cfg.n_channels, rng)
        x = rng.standard_normal((2, 8, 64))
        x[:, 3] = 0.0
        np.testing.assert_array_equal(net(apply_dsf(x, dsf)).data, net(x).data)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ClassifierConfig(n_samples=50, pool_kernel=75)
        with pytest.raises(ValueError):
            ClassifierConfig(n_temporal=0)
