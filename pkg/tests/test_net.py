import struct

import numpy as np
import pytest

from csod.blocks import count_params
from csod.engine import ShapeError
from csod.gradcheck import compare, sampled_check
from csod.net import (
    BadMagicError,
    CheckpointError,
    ForwardOutputs,
    NetConfig,
    ParamShapeError,
    SODNet,
    TotalLoss,
    TruncatedCheckpointError,
    VersionMismatchError,
    build_network,
    checkpoint_size,
    decoder_param_ratio,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    total_loss,
)

from oracles import decoder_count

SMALL = NetConfig(stages=3, stage_channels=(4, 8, 16), input_size=16)


def _batch(rng, n, size):
    images = rng.uniform(0, 1, (n, 3, size, size))
    mask = (rng.uniform(size=(n, 1, size, size)) > 0.5).astype(float)
    return images, mask, (rng.uniform(size=mask.shape) > 0.8).astype(float)


class TestNetConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(stages=1, stage_channels=(4,)),
        dict(stage_channels=(16, 32, 32, 64)),
        dict(stage_channels=(16, 32, 64)),
        dict(input_size=60),
        dict(decoder="dense"),
        dict(squeeze_ratio=0.0),
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            NetConfig(**kwargs)

    def test_lines_round_trip(self):
        cfg = NetConfig(stages=3, stage_channels=(8, 16, 32), se_enabled=False, input_size=32)
        values = dict(line.split("=", 1) for line in cfg.to_lines())
        assert NetConfig.from_mapping(values) == cfg

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            NetConfig.from_mapping({"depth": "3"})


class TestForward:
    def test_output_shapes_default(self, rng):
        out = build_network(NetConfig())(rng.uniform(0, 1, (2, 3, 64, 64)))
        assert len(out.side_maps) == 3
        for m in out.maps():
            assert m.shape == (2, 1, 64, 64)
            assert np.all((m > 0) & (m < 1))

    def test_two_stage_single_side_map(self, rng):
        cfg = NetConfig(stages=2, stage_channels=(4, 8), input_size=16)
        out = build_network(cfg)(rng.uniform(0, 1, (1, 3, 16, 16)))
        assert len(out.side_maps) == 1 and out.edge_map.shape == (1, 1, 16, 16)

    def test_wrong_input_shape(self):
        with pytest.raises(ShapeError):
            build_network(SMALL)(np.zeros((1, 3, 32, 32)))
        with pytest.raises(ShapeError):
            build_network(SMALL)(np.zeros((1, 1, 16, 16)))

    def test_duplicated_batch_items_identical(self, rng):
        net = build_network(SMALL, init_std=0.3)
        x = rng.uniform(0, 1, (1, 3, 16, 16))
        out = net(np.concatenate([x, x]))
        for m in out.maps():
            np.testing.assert_array_equal(m[0], m[1])

    def test_build_and_forward_deterministic(self, rng):
        x = rng.uniform(0, 1, (1, 3, 16, 16))
        a, b = build_network(SMALL, seed=3)(x), build_network(SMALL, seed=3)(x)
        for ma, mb in zip(a.maps(), b.maps()):
            np.testing.assert_array_equal(ma, mb)

    def test_edge_branch_optional(self, rng):
        out = build_network(SMALL.replace(edge_branch=False))(rng.uniform(0, 1, (1, 3, 16, 16)))
        assert out.edge_map is None and len(out.maps()) == 3

    def test_init_statistics(self):
        net = build_network(NetConfig(), seed=0)
        weights = np.concatenate([p.value.ravel() for p in net.parameters() if p.kind == "weight"])
        assert np.abs(weights).max() <= 0.02
        assert abs(weights.std() - 0.008796) < 2e-4
        assert not any(p.value.any() for p in net.parameters() if p.kind == "bias")


class TestTotalLoss:
    def _outputs(self, value, n_side=3, edge=True, shape=(1, 1, 8, 8)):
        side = [np.full(shape, value) if np.isscalar(value) else value.copy() for _ in range(n_side)]
        final = side[0].copy()
        return ForwardOutputs(side, final, final.copy() if edge else None)

    def test_perfect_prediction(self, rng):
        mask = (rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(float)
        out = self._outputs(np.clip(mask, 1e-7, 1 - 1e-7))
        assert total_loss(out, mask, mask) <= 5 * 1e-6

    def test_half_everywhere(self, rng):
        mask = (rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(float)
        assert total_loss(self._outputs(0.5), mask, mask) == pytest.approx(5 * np.log(2), abs=1e-12)

    def test_edge_term_removed(self, rng):
        mask = (rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(float)
        with_edge = total_loss(self._outputs(0.5), mask, mask)
        without = total_loss(self._outputs(0.5, edge=False), mask)
        assert with_edge - without == pytest.approx(np.log(2), abs=1e-12)

    def test_resolution_mismatch(self):
        with pytest.raises(ShapeError):
            total_loss(self._outputs(0.5), np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 8, 8)))

    def test_non_negative(self, rng):
        mask = (rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(float)
        assert total_loss(self._outputs(rng.uniform(0, 1, (1, 1, 8, 8))), mask, mask) > 0


class TestGradients:
    def test_sampled_parameters_fd(self):
        cfg = NetConfig(input_size=16)
        # wide enough init that no sigmoid saturates past the BCE clamp and
        # every parameter receives a live gradient
        net = build_network(cfg, seed=1, init_std=0.15)
        rng = np.random.default_rng(5)
        images, mask, edge = _batch(rng, 1, 16)
        net.zero_grad()
        loss_and_grad(net, images, mask, edge)
        entries = [(p.value, p.grad) for p in net.parameters()]
        result, analytic, skipped = sampled_check(lambda: total_loss(net(images), mask, edge), entries, rng, 20)
        assert skipped <= 5
        assert sum(abs(a) > 1e-6 for a in analytic) >= 15
        assert result.passed, result

    def test_input_gradient_fd(self):
        net = build_network(SMALL, seed=2, init_std=0.3)  # small net: no saturation at this scale
        rng = np.random.default_rng(9)
        images, mask, edge = _batch(rng, 1, 16)
        loss = TotalLoss()
        loss(net(images), mask, edge)
        g = net.backward(loss.backward())
        idx = rng.choice(images.size, 15, replace=False)
        flat = images.reshape(-1)
        numeric = []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + 1e-5
            fp = total_loss(net(images), mask, edge)
            flat[i] = orig - 1e-5
            fm = total_loss(net(images), mask, edge)
            flat[i] = orig
            numeric.append((fp - fm) / 2e-5)
        assert compare(g.reshape(-1)[idx], numeric, rtol=1e-3).passed


class TestAccounting:
    def test_default_ratio(self):
        assert decoder_param_ratio(NetConfig()) <= 0.35

    def test_plain_ratio_is_one(self):
        assert decoder_param_ratio(NetConfig(decoder="plain")) == 1.0

    def test_se_disabled_lowers_ratio(self):
        assert decoder_param_ratio(NetConfig(se_enabled=False)) < decoder_param_ratio(NetConfig())

    def test_decoder_matches_closed_form(self):
        for cfg in (NetConfig(), NetConfig(decoder="plain"), NetConfig(se_enabled=False), SMALL):
            net = SODNet(cfg)
            assert net.decoder_params().total == decoder_count(
                cfg.stage_channels, cfg.decoder, cfg.se_enabled, cfg.squeeze_ratio, cfg.se_reduction
            )

    def test_encoder_invariant_across_decoders(self):
        assert SODNet(NetConfig()).encoder_params() == SODNet(NetConfig(decoder="plain")).encoder_params()

    def test_block_table_covers_everything(self):
        net = SODNet(NetConfig())
        assert sum(c.total for _, c in net.block_table()) == count_params(net).total
        assert sum(p.size for p in net.parameters()) == count_params(net).total


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        net = build_network(SMALL, seed=4, init_std=0.2)
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, path)
        assert path.stat().st_size == checkpoint_size(net)
        back = load_checkpoint(path)
        assert back.cfg == net.cfg
        x = rng.uniform(0, 1, (2, 3, 16, 16))
        for a, b in zip(net(x).maps(), back(x).maps()):
            np.testing.assert_array_equal(a, b)

    def test_default_config_counts_survive(self, tmp_path):
        net = build_network(NetConfig())
        save_checkpoint(net, tmp_path / "d.ckpt")
        back = load_checkpoint(tmp_path / "d.ckpt")
        assert count_params(back) == count_params(net)

    def test_bad_magic(self, tmp_path):
        save_checkpoint(build_network(SMALL), tmp_path / "m.ckpt")
        data = bytearray((tmp_path / "m.ckpt").read_bytes())
        data[:4] = b"XXXX"
        (tmp_path / "m.ckpt").write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(build_network(SMALL), tmp_path / "m.ckpt")
        data = bytearray((tmp_path / "m.ckpt").read_bytes())
        data[4:6] = struct.pack("<H", 9)
        (tmp_path / "m.ckpt").write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(build_network(SMALL), tmp_path / "m.ckpt")
        data = (tmp_path / "m.ckpt").read_bytes()
        for cut in (3, 7, 40, len(data) - 1):
            (tmp_path / "t.ckpt").write_bytes(data[:cut])
            with pytest.raises((TruncatedCheckpointError, BadMagicError)):
                load_checkpoint(tmp_path / "t.ckpt")
        (tmp_path / "t.ckpt").write_bytes(data[:-1])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_shape_mismatch(self, tmp_path):
        # same-length config edit: the stored tensors no longer fit the config
        save_checkpoint(build_network(SMALL), tmp_path / "m.ckpt")
        data = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "s.ckpt").write_bytes(data.replace(b"stage_channels=4,8,16", b"stage_channels=4,8,24"))
        with pytest.raises(ParamShapeError):
            load_checkpoint(tmp_path / "s.ckpt")

    def test_trailing_bytes(self, tmp_path):
        save_checkpoint(build_network(SMALL), tmp_path / "m.ckpt")
        (tmp_path / "x.ckpt").write_bytes((tmp_path / "m.ckpt").read_bytes() + b"\0")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_errors_are_distinct(self):
        kinds = {BadMagicError, VersionMismatchError, ParamShapeError, TruncatedCheckpointError}
        assert len(kinds) == 4 and all(issubclass(k, CheckpointError) for k in kinds)
