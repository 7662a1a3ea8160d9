"""Tensor engine: primitives against nested-loop oracles, gradients against finite differences."""

import numpy as np
import pytest

from gridloc.errors import BlobFormatError, ChecksumError, InputError, NumericError, ShapeError
from gridloc.numkit import (
    ComputeTape,
    Parameter,
    SgdState,
    Tensor,
    check_gradients,
    get_default_dtype,
    he_init,
    make_rng,
    precision,
    set_default_dtype,
    sgd_step,
)
from gridloc.numkit import ops
from gridloc.numkit.blob import load_blob, read_manifest, save_blob
from gridloc.numkit.reference import bilinear_point, conv2d_loops, conv_transpose2d_loops

GRAD_TOL = 1e-5


def _project(t: Tensor, seed: int = 0) -> Tensor:
    """Scalar <t, r> for a fixed random r, so every output element gets a distinct gradient."""
    r = make_rng(seed).standard_normal((1, t.size))
    flat = ops.reshape(t, (1, t.size))
    return ops.linear(flat, Tensor(r), Tensor(np.zeros(1)))


def _randn(*shape, seed=0) -> Tensor:
    return Tensor(make_rng(seed).standard_normal(shape))


# =============================================================================
# TAPE AND PRECISION
# =============================================================================

class TestTape:
    def test_reused_tensor_accumulates(self, f64):
        """d(x + x)/dx = 2 for every element."""
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with ComputeTape() as tape:
            loss = _project(ops.add(x, x))
        tape.backward(loss)
        r = make_rng(0).standard_normal((1, 6)).reshape(2, 3)
        np.testing.assert_allclose(x.grad, 2 * r, rtol=1e-12)

    def test_records_only_with_grad(self):
        """Constant inputs leave nothing on the tape."""
        with ComputeTape() as tape:
            ops.relu(Tensor(np.ones(3)))
        assert len(tape) == 0

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with ComputeTape() as tape:
            y = ops.scale(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_non_finite_forward_raises(self):
        with pytest.raises(NumericError, match="scale"):
            ops.scale(Tensor(np.array([1.0, np.inf])), 1.0)


class TestPrecision:
    def test_default_is_f32(self):
        assert get_default_dtype() == np.float32
        assert Tensor([1.0]).dtype == np.float32

    def test_precision_context_restores(self):
        with precision("f64"):
            assert Tensor([1.0]).dtype == np.float64
        assert get_default_dtype() == np.float32

    def test_unknown_dtype(self):
        with pytest.raises(InputError):
            set_default_dtype("f16")


# =============================================================================
# CONVOLUTIONS
# =============================================================================

CONV_CASES = [
    # (N, C, H, W, O, k, stride, padding, dilation)
    (1, 1, 5, 5, 1, 3, 1, 0, 1),
    (2, 3, 7, 6, 4, 3, 1, 1, 1),
    (1, 2, 8, 8, 3, 3, 2, 1, 1),
    (2, 2, 9, 9, 2, 3, 1, 2, 2),
    (1, 3, 10, 7, 2, 5, 2, 2, 1),
    (1, 2, 6, 6, 2, 1, 1, 0, 1),
]


class TestConv2d:
    @pytest.mark.parametrize("n,c,h,w,o,k,s,p,d", CONV_CASES)
    def test_matches_loops(self, f64, n, c, h, w, o, k, s, p, d):
        """Fast path equals the nested-loop oracle."""
        rng = make_rng(n * 1000 + c * 100 + h + k)
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((o, c, k, k))
        b = rng.standard_normal(o)
        out = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), s, p, d)
        np.testing.assert_allclose(out.data, conv2d_loops(x, wt, b, s, p, d), atol=1e-10)

    @pytest.mark.parametrize("n,c,h,w,o,k,s,p,d", CONV_CASES)
    def test_integer_inputs_match_loops_exactly(self, f64, n, c, h, w, o, k, s, p, d):
        """Integer-valued sums are exact, so the summation order cannot show."""
        rng = make_rng(n * 1000 + c * 100 + h + k)
        x = rng.integers(-3, 4, (n, c, h, w)).astype(np.float64)
        wt = rng.integers(-3, 4, (o, c, k, k)).astype(np.float64)
        b = rng.integers(-3, 4, o).astype(np.float64)
        out = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), s, p, d)
        np.testing.assert_array_equal(out.data, conv2d_loops(x, wt, b, s, p, d))

    def test_output_size(self):
        """floor((H + 2p - d(k-1) - 1)/s) + 1 on each axis."""
        out = ops.conv2d(Tensor(np.zeros((1, 1, 14, 14))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)),
                         padding=2, dilation=2)
        assert out.shape == (1, 1, 14, 14)
        out = ops.conv2d(Tensor(np.zeros((1, 1, 64, 64))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)),
                         stride=2, padding=1)
        assert out.shape == (1, 1, 32, 32)

    def test_channel_mismatch_names_dim(self):
        with pytest.raises(ShapeError, match="dim 1"):
            ops.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 2, 3, 3))), Tensor(np.zeros(2)))

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)))

    def test_all_ones_center(self):
        out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_identity_kernel(self, f64, k):
        x = make_rng(k).standard_normal((1, 1, 6, 7))
        w = np.zeros((1, 1, k, k))
        w[0, 0, k // 2, k // 2] = 1.0
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), padding=(k - 1) // 2)
        np.testing.assert_array_equal(out.data, x)


class TestConvTranspose2d:
    @pytest.mark.parametrize("n,cin,h,cout,k,s,p", [
        (1, 1, 3, 1, 3, 1, 0),
        (2, 3, 4, 2, 4, 2, 1),
        (1, 2, 5, 3, 3, 2, 1),
        (1, 2, 7, 2, 4, 2, 1),
    ])
    def test_matches_loops(self, f64, n, cin, h, cout, k, s, p):
        rng = make_rng(h * 10 + k)
        x = rng.standard_normal((n, cin, h, h))
        wt = rng.standard_normal((cin, cout, k, k))
        b = rng.standard_normal(cout)
        out = ops.conv_transpose2d(Tensor(x), Tensor(wt), Tensor(b), s, p)
        np.testing.assert_allclose(out.data, conv_transpose2d_loops(x, wt, b, s, p), atol=1e-10)

    def test_integer_inputs_match_loops_exactly(self, f64):
        rng = make_rng(5)
        x = rng.integers(-3, 4, (2, 3, 4, 4)).astype(np.float64)
        wt = rng.integers(-3, 4, (3, 2, 4, 4)).astype(np.float64)
        b = rng.integers(-3, 4, 2).astype(np.float64)
        out = ops.conv_transpose2d(Tensor(x), Tensor(wt), Tensor(b), 2, 1)
        np.testing.assert_array_equal(out.data, conv_transpose2d_loops(x, wt, b, 2, 1))

    def test_doubles_resolution(self):
        """k=4, s=2, p=1: 14 -> 28 -> 56."""
        x = Tensor(np.zeros((1, 2, 14, 14)))
        w = Tensor(np.zeros((2, 2, 4, 4)))
        b = Tensor(np.zeros(2))
        once = ops.conv_transpose2d(x, w, b, 2, 1)
        assert once.shape == (1, 2, 28, 28)
        assert ops.conv_transpose2d(once, w, b, 2, 1).shape == (1, 2, 56, 56)

    def test_is_adjoint_of_conv(self, f64):
        """<conv(x), y> = <x, conv_transpose(y)> with shared weights and no bias."""
        rng = make_rng(11)
        x = rng.standard_normal((1, 3, 8, 8))
        y = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((2, 3, 4, 4))
        forward = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(2)), stride=2, padding=1).data
        backward = ops.conv_transpose2d(Tensor(y), Tensor(w), Tensor(np.zeros(3)), stride=2, padding=1).data
        assert backward.shape == x.shape
        np.testing.assert_allclose(np.sum(forward * y), np.sum(x * backward), rtol=1e-10)

    def test_unit_kernel_is_identity(self, f64):
        x = make_rng(12).standard_normal((1, 1, 5, 5))
        out = ops.conv_transpose2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1, 0)
        np.testing.assert_array_equal(out.data, x)

    def test_stride_limited(self):
        with pytest.raises(InputError):
            ops.conv_transpose2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 3, 3))),
                                 Tensor(np.zeros(1)), stride=3)


# =============================================================================
# BILINEAR SAMPLING
# =============================================================================

class TestBilinearSample:
    def test_integer_points_read_pixels(self, f64):
        feature = make_rng(1).standard_normal((2, 4, 5))
        out = ops.bilinear_sample(Tensor(feature), [(3.0, 1.0), (0.0, 0.0)])
        np.testing.assert_allclose(out.data[:, 0], feature[:, 1, 3])
        np.testing.assert_allclose(out.data[:, 1], feature[:, 0, 0])

    def test_matches_point_oracle(self, f64):
        """Random points, some partly or fully outside the map."""
        rng = make_rng(2)
        feature = rng.standard_normal((3, 6, 7))
        points = rng.uniform(-2.0, 8.0, size=(40, 2))
        out = ops.bilinear_sample(Tensor(feature), points).data
        for k, (x, y) in enumerate(points):
            np.testing.assert_allclose(out[:, k], bilinear_point(feature, x, y), atol=1e-12)

    def test_center_of_four_is_mean(self, f64):
        feature = np.array([[[1.0, 2.0], [3.0, 5.0]]])
        assert ops.bilinear_sample(Tensor(feature), [(0.5, 0.5)]).data[0, 0] == pytest.approx(2.75)

    def test_far_outside_is_zero(self):
        out = ops.bilinear_sample(Tensor(np.ones((1, 4, 4))), [(-5.0, -5.0), (10.0, 1.0)])
        np.testing.assert_array_equal(out.data, 0.0)


class TestRoiAlign:
    def test_constant_map(self):
        """Every bin of a box well inside a constant map reads the constant."""
        features = Tensor(np.full((1, 2, 16, 16), 3.0))
        out = ops.roi_align(features, np.array([[0, 8.0, 8.0, 40.0, 32.0]]), 4, stride=4)
        assert out.shape == (1, 2, 4, 4)
        np.testing.assert_allclose(out.data, 3.0)

    def test_bin_centers(self, f64):
        """A ramp f(x) = x samples exactly at (bin center / stride - 0.5)."""
        ramp = np.tile(np.arange(16.0), (16, 1))[None, None]
        out = ops.roi_align(Tensor(ramp), np.array([[0, 8.0, 8.0, 40.0, 40.0]]), 4, stride=4)
        expected = (8.0 + (np.arange(4) + 0.5) * 8.0) / 4 - 0.5
        np.testing.assert_allclose(out.data[0, 0, 0], expected, atol=1e-12)

    def test_box_over_one_cell_reads_that_cell(self, f64):
        features = make_rng(9).standard_normal((1, 1, 6, 6))
        out = ops.roi_align(Tensor(features), np.array([[0, 8.0, 4.0, 12.0, 8.0]]), 1, stride=4)
        assert out.data[0, 0, 0, 0] == pytest.approx(features[0, 0, 1, 2])

    def test_batch_index_checked(self):
        with pytest.raises(ShapeError, match="dim 0"):
            ops.roi_align(Tensor(np.zeros((1, 1, 4, 4))), np.array([[1, 0, 0, 4, 4]]), 2, stride=4)


# =============================================================================
# LOSSES
# =============================================================================

class TestLosses:
    def test_bce_value(self, f64):
        """BCE(0, 1) = log 2."""
        out = ops.sigmoid_bce(Tensor(np.zeros(4)), np.ones(4))
        assert out.item() == pytest.approx(np.log(2.0), rel=1e-12)

    def test_bce_rejects_soft_targets(self):
        with pytest.raises(InputError):
            ops.sigmoid_bce(Tensor(np.zeros(2)), np.array([0.5, 1.0]))

    def test_bce_stable_for_large_logits(self, f64):
        out = ops.sigmoid_bce(Tensor(np.array([800.0, -800.0])), np.array([1.0, 0.0]))
        assert out.item() == pytest.approx(0.0, abs=1e-300)

    def test_smooth_l1_branches(self, f64):
        """0.5 d^2 below 1, |d| - 0.5 above, summed per row and averaged over rows."""
        pred = Tensor(np.array([[0.5, 2.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]))
        out = ops.smooth_l1(pred, np.zeros((2, 4)))
        assert out.item() == pytest.approx((0.125 + 1.5) / 2)


# =============================================================================
# GRADIENTS
# =============================================================================

class TestGradients:
    """Every primitive: tape gradient vs central differences, rel. error <= 1e-5 in f64."""

    @pytest.mark.parametrize("s,p,d", [(1, 1, 1), (2, 1, 1), (1, 2, 2)])
    def test_conv2d(self, f64, s, p, d):
        x, w, b = _randn(1, 2, 6, 6, seed=1), _randn(3, 2, 3, 3, seed=2), _randn(3, seed=3)
        err = check_gradients(lambda: _project(ops.conv2d(x, w, b, s, p, d)), [x, w, b])
        assert err <= GRAD_TOL

    def test_conv_transpose2d(self, f64):
        x, w, b = _randn(1, 2, 3, 3, seed=4), _randn(2, 3, 4, 4, seed=5), _randn(3, seed=6)
        err = check_gradients(lambda: _project(ops.conv_transpose2d(x, w, b, 2, 1)), [x, w, b])
        assert err <= GRAD_TOL

    def test_bilinear_sample(self, f64):
        feature = _randn(2, 5, 5, seed=7)
        points = make_rng(8).uniform(-0.7, 4.7, size=(9, 2))
        err = check_gradients(lambda: _project(ops.bilinear_sample(feature, points)), [feature])
        assert err <= GRAD_TOL

    def test_roi_align(self, f64):
        features = _randn(2, 2, 6, 6, seed=9)
        rois = np.array([[0, 2.0, 3.0, 17.0, 21.0], [1, -3.0, 0.5, 12.0, 9.0], [0, 5.0, 5.0, 9.0, 22.0]])
        err = check_gradients(lambda: _project(ops.roi_align(features, rois, 3, 4)), [features])
        assert err <= GRAD_TOL

    def test_linear_and_relu(self, f64):
        x, w, b = _randn(3, 5, seed=10), _randn(4, 5, seed=11), _randn(4, seed=12)
        err = check_gradients(lambda: _project(ops.relu(ops.linear(x, w, b))), [x, w, b])
        assert err <= GRAD_TOL

    def test_grouped_pointwise(self, f64):
        x, w, b = _randn(2, 3, 2, 4, 4, seed=13), _randn(3, 2, seed=14), _randn(3, seed=15)
        err = check_gradients(lambda: _project(ops.grouped_pointwise(x, w, b)), [x, w, b])
        assert err <= GRAD_TOL

    def test_structural_ops(self, f64):
        x = _randn(2, 6, 3, 3, seed=16)
        y = _randn(2, 2, 3, 3, seed=17)

        def loss():
            parts = [ops.take_channels(x, 0, 2), ops.scale(ops.take_channels(x, 2, 4), -1.5), y]
            return _project(ops.reshape(ops.concat(parts, axis=1), (2, 2, 3, 3, 3)))

        assert check_gradients(loss, [x, y]) <= GRAD_TOL

    def test_sigmoid_bce(self, f64):
        logits = _randn(3, 4, seed=18)
        targets = (make_rng(19).random((3, 4)) > 0.5).astype(np.float64)
        assert check_gradients(lambda: ops.sigmoid_bce(logits, targets), [logits]) <= GRAD_TOL

    def test_weighted_sigmoid_bce(self, f64):
        logits = _randn(2, 3, 4, seed=20)
        targets = (make_rng(21).random((2, 3, 4)) > 0.5).astype(np.float64)
        weights = make_rng(22).random((2, 3, 1))
        err = check_gradients(lambda: ops.weighted_sigmoid_bce(logits, targets, weights), [logits])
        assert err <= GRAD_TOL

    def test_smooth_l1(self, f64):
        pred = Tensor(np.array([[0.3, -2.0, 1.7, -0.4], [2.5, 0.1, -0.8, -3.0]]))
        assert check_gradients(lambda: ops.smooth_l1(pred, np.zeros((2, 4))), [pred]) <= GRAD_TOL

    def test_requires_f64(self):
        x = Tensor(np.ones(3))
        with pytest.raises(InputError):
            check_gradients(lambda: _project(x), [x])


# =============================================================================
# OPTIMIZATION AND INIT
# =============================================================================

class TestOptim:
    def test_rng_is_deterministic(self):
        np.testing.assert_array_equal(make_rng(42).random(5), make_rng(42).random(5))
        assert not np.array_equal(make_rng(42).random(5), make_rng(43).random(5))

    def test_he_init(self):
        """Identical seeds give identical weights; std ~ sqrt(2 / fan_in)."""
        a = he_init((64, 32, 3, 3), 32 * 9, seed=5)
        b = he_init((64, 32, 3, 3), 32 * 9, seed=5)
        np.testing.assert_array_equal(a.data, b.data)
        assert a.data.std() == pytest.approx(np.sqrt(2.0 / 288), rel=0.05)

    def test_he_init_rejects_zero_fan_in(self):
        with pytest.raises(InputError):
            he_init((2, 2), 0, seed=0)

    def test_sgd_momentum_by_hand(self, f64):
        """Two steps with constant gradient 1: v = 1 + wd*w, then v = mu*v + 1 + wd*w'."""
        p = Parameter("w", np.array([1.0]))
        state = SgdState(lr=0.1, momentum=0.9, weight_decay=0.01)
        p.grad = np.array([1.0])
        sgd_step([p], state)
        v1 = 1.0 + 0.01 * 1.0
        w1 = 1.0 - 0.1 * v1
        assert p.data[0] == pytest.approx(w1)
        p.grad = np.array([1.0])
        sgd_step([p], state)
        v2 = 0.9 * v1 + 1.0 + 0.01 * w1
        assert p.data[0] == pytest.approx(w1 - 0.1 * v2)
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_he_init_sample_std(self):
        assert he_init((100_000,), 50, seed=1).data.std() == pytest.approx(0.2, rel=0.02)
        assert he_init((100_000,), 2, seed=2).data.std() == pytest.approx(1.0, rel=0.02)

    @pytest.mark.parametrize("w0,grads,mu,wd,lr,expected", [
        (1.0, [1.0], 0.0, 0.0, 0.1, 0.9),
        (0.0, [1.0, 1.0], 0.9, 0.0, 0.1, -0.29),
        (1.0, [0.0], 0.0, 0.0001, 0.02, 0.999998),
    ])
    def test_sgd_steps(self, f64, w0, grads, mu, wd, lr, expected):
        p = Parameter("w", np.array([w0]))
        state = SgdState(lr=lr, momentum=mu, weight_decay=wd)
        for g in grads:
            p.grad = np.array([g])
            sgd_step([p], state)
        assert p.data[0] == pytest.approx(expected, abs=1e-12)

    def test_sgd_needs_gradient(self):
        with pytest.raises(InputError, match="no gradient"):
            sgd_step([Parameter("w", np.ones(2))], SgdState(lr=0.1))


# =============================================================================
# BLOBS
# =============================================================================

class TestBlob:
    def test_round_trip_is_f32(self, tmp_path):
        tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([0.5])}
        save_blob(tmp_path / "model", tensors, {"note": "x"})
        loaded, meta = load_blob(tmp_path / "model")
        assert meta == {"note": "x"}
        assert loaded["a"].dtype == np.float32
        np.testing.assert_array_equal(loaded["a"], tensors["a"])
        assert read_manifest(tmp_path / "model.json")["tensors"]["b"]["byte_offset"] == 24

    def test_corrupt_payload(self, tmp_path):
        save_blob(tmp_path / "m", {"a": np.ones(4)})
        payload = tmp_path / "m.bin"
        data = bytearray(payload.read_bytes())
        data[0] ^= 0xFF
        payload.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            load_blob(tmp_path / "m")

    def test_wrong_format(self, tmp_path):
        save_blob(tmp_path / "m", {"a": np.ones(4)})
        manifest = tmp_path / "m.json"
        manifest.write_text(manifest.read_text().replace("gridloc-blob", "other"))
        with pytest.raises(BlobFormatError):
            load_blob(tmp_path / "m")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_blob(tmp_path / "absent")
