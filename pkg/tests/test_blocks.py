import numpy as np
import pytest

from csod.blocks import (
    ISFCREM,
    BlockParamCount,
    Fire,
    FireConfig,
    PlainBlock,
    PlainDecoderLevel,
    SEConfig,
    SqueezeExcite,
    TopDownFusion,
    count_params,
    fire_param_count,
    init_truncated_normal,
    plain_param_count,
    se_param_count,
)
from csod.engine import ShapeError
from csod.gradcheck import check_layer

from oracles import fire_count, plain_count, se_count


def _randomize(layer, rng, scale=0.5):
    for p in layer.parameters():
        p.value[...] = scale * rng.standard_normal(p.shape)
    return layer


def _assert_grads(results):
    bad = {k: r for k, r in results.items() if not r.passed}
    assert not bad, bad


class TestConfigs:
    def test_fire_invariants(self):
        with pytest.raises(ValueError):
            FireConfig(8, 0, 4, 4)
        with pytest.raises(ValueError):
            FireConfig(8, 9, 4, 4)
        with pytest.raises(ValueError):
            FireConfig(8, 2, 4, 6)
        assert FireConfig(8, 2, 4, 4).c_out == 8

    def test_fire_for_channels(self):
        assert FireConfig.for_channels(64, 64) == FireConfig(64, 16, 32, 32)
        assert FireConfig.for_channels(4, 4) == FireConfig(4, 1, 2, 2)

    def test_se_invariants(self):
        with pytest.raises(ValueError):
            SEConfig(4, 0)
        with pytest.raises(ValueError):
            SEConfig(3, 4)
        assert SEConfig(64, 16).hidden == 4


class TestCounts:
    def test_fire_spec_example(self):
        c = count_params(Fire(FireConfig(128, 16, 64, 64)))
        assert c.total == 2064 + 1088 + 9280 == 12432
        assert c == fire_param_count(FireConfig(128, 16, 64, 64))

    def test_se_spec_example(self):
        c = count_params(SqueezeExcite(SEConfig(64, 16)))
        assert c.total == (64 * 4 + 4) + (4 * 64 + 64) == 580
        assert c == se_param_count(SEConfig(64, 16))

    def test_plain_spec_example(self):
        assert count_params(PlainBlock(128, 128)).total == 147584 == plain_param_count(128, 128).total

    def test_empty_block(self):
        assert count_params(None).total == 0
        assert BlockParamCount(0, 0).total == 0

    @pytest.mark.parametrize("c_in,s,e", [(8, 2, 4), (16, 4, 8), (32, 3, 16), (5, 5, 1)])
    def test_fire_runtime_equals_formula(self, c_in, s, e):
        cnt = count_params(Fire(FireConfig(c_in, s, e, e)))
        assert cnt.total == fire_count(c_in, s, e, e)
        assert cnt.total == cnt.weights + cnt.biases

    @pytest.mark.parametrize("c,r", [(4, 2), (16, 4), (64, 16), (7, 3)])
    def test_se_runtime_equals_formula(self, c, r):
        assert count_params(SqueezeExcite(SEConfig(c, r))).total == se_count(c, r)

    def test_fire_ratio_vs_plain(self):
        assert 12432 / 147584 < 0.09

    @pytest.mark.parametrize("c", [16, 32, 64, 128, 256])
    def test_fire_under_35_percent_sweep(self, c):
        fire = count_params(Fire(FireConfig(c, c // 8, c // 2, c // 2))).total
        assert fire / count_params(PlainBlock(c, c)).total < 0.35
        assert fire / plain_count(c, c) < 0.35


class TestFire:
    def test_shapes(self, rng):
        fire = _randomize(Fire(FireConfig(6, 2, 3, 3)), rng)
        out = fire(rng.standard_normal((2, 6, 5, 7)))
        assert out.shape == (2, 6, 5, 7)
        assert np.all(out >= 0)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            Fire(FireConfig(6, 2, 3, 3))(np.zeros((1, 5, 4, 4)))

    def test_gradients_fd(self, rng):
        fire = _randomize(Fire(FireConfig(8, 2, 4, 4)), rng)
        _assert_grads(check_layer(fire, [rng.standard_normal((1, 8, 4, 4))], rng))

    def test_batch_permutation_equivariance(self, rng):
        fire = _randomize(Fire(FireConfig(4, 2, 2, 2)), rng)
        x = rng.standard_normal((4, 4, 3, 3))
        perm = np.array([2, 0, 3, 1])
        np.testing.assert_array_equal(fire(x)[perm], fire(x[perm]))


class TestSE:
    def test_zero_params_scale_by_one_and_a_half(self, rng):
        se = SqueezeExcite(SEConfig(4, 2))
        x = rng.standard_normal((2, 4, 3, 3))
        np.testing.assert_array_equal(se(x), 1.5 * x)

    def test_pure_scaling_mode(self, rng):
        se = SqueezeExcite(SEConfig(4, 2), residual=False)
        x = rng.standard_normal((2, 4, 3, 3))
        np.testing.assert_array_equal(se(x), 0.5 * x)

    def test_zero_input(self, rng):
        se = _randomize(SqueezeExcite(SEConfig(4, 2)), rng)
        assert not se(np.zeros((1, 4, 3, 3))).any()

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            SqueezeExcite(SEConfig(4, 2))(np.zeros((1, 3, 3, 3)))

    @pytest.mark.parametrize("residual", [True, False])
    def test_gradients_fd(self, rng, residual):
        se = _randomize(SqueezeExcite(SEConfig(4, 2), residual=residual), rng)
        _assert_grads(check_layer(se, [rng.standard_normal((1, 4, 3, 3))], rng))


class TestPlainBlock:
    def test_zero_weights_zero_output(self, rng):
        assert not PlainBlock(3, 4)(rng.standard_normal((1, 3, 5, 5))).any()

    def test_shape_and_mismatch(self, rng):
        assert PlainBlock(3, 4)(np.zeros((2, 3, 5, 6))).shape == (2, 4, 5, 6)
        with pytest.raises(ShapeError):
            PlainBlock(3, 4)(np.zeros((2, 2, 5, 6)))

    def test_gradients_fd(self, rng):
        block = _randomize(PlainBlock(3, 4), rng)
        _assert_grads(check_layer(block, [rng.standard_normal((2, 3, 4, 4))], rng))


class TestISFCREM:
    def _block(self, rng, c_below=6):
        block = ISFCREM(FireConfig(4, 2, 2, 2), SEConfig(4, 2), c_below=c_below)
        return _randomize(block, rng)

    def test_output_shape(self, rng):
        out = self._block(rng)(rng.standard_normal((2, 4, 6, 6)), rng.standard_normal((2, 6, 3, 3)))
        assert out.shape == (2, 4, 6, 6)

    def test_spatial_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            self._block(rng)(np.zeros((1, 4, 6, 6)), np.zeros((1, 6, 2, 2)))

    def test_equals_composition(self, rng):
        block = self._block(rng)
        skip, below = rng.standard_normal((1, 4, 4, 4)), rng.standard_normal((1, 6, 2, 2))
        fused = block.fusion(skip, below)
        np.testing.assert_array_equal(block(skip, below), block.se(block.fire(fused)))

    def test_gradients_fd(self, rng):
        block = self._block(rng)
        _assert_grads(check_layer(block, [rng.standard_normal((1, 4, 4, 4)), rng.standard_normal((1, 6, 2, 2))], rng))

    def test_coarsest_level_gradients_fd(self, rng):
        block = self._block(rng, c_below=None)
        _assert_grads(check_layer(block, [rng.standard_normal((1, 4, 4, 4))], rng))

    def test_without_se(self, rng):
        block = _randomize(ISFCREM(FireConfig(4, 2, 2, 2), None, c_below=6), rng)
        assert block.se is None
        _assert_grads(check_layer(block, [rng.standard_normal((1, 4, 4, 4)), rng.standard_normal((1, 6, 2, 2))], rng))

    def test_se_channels_must_match_fire(self):
        with pytest.raises(ValueError):
            ISFCREM(FireConfig(4, 2, 2, 2), SEConfig(8, 2))

    def test_plain_level_gradients_fd(self, rng):
        block = _randomize(PlainDecoderLevel(4, 4, c_below=6), rng)
        _assert_grads(check_layer(block, [rng.standard_normal((1, 4, 4, 4)), rng.standard_normal((1, 6, 2, 2))], rng))

    def test_fusion_gradients_fd(self, rng):
        fusion = _randomize(TopDownFusion(6, 4), rng)
        _assert_grads(check_layer(fusion, [rng.standard_normal((1, 4, 4, 4)), rng.standard_normal((1, 6, 2, 2))], rng))


class TestInit:
    def test_truncated_normal(self):
        block = Fire(FireConfig(64, 16, 32, 32))
        init_truncated_normal(block, np.random.default_rng(0), std=0.01)
        weights = np.concatenate([p.value.ravel() for p in block.parameters() if p.kind == "weight"])
        biases = np.concatenate([p.value.ravel() for p in block.parameters() if p.kind == "bias"])
        assert np.abs(weights).max() <= 0.02
        assert abs(weights.std() - 0.01 * 0.8796) < 5e-4  # std of N(0,1) truncated at 2 sigma
        assert not biases.any()
