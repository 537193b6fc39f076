import dataclasses

import numpy as np
import pytest

from bicubicpp import tensor_ops as T
from bicubicpp.errors import ConfigError, FormatError, ShapeError
from bicubicpp.model import (
    Checkpoint,
    Model,
    ModelConfig,
    layer_inventory,
    load_checkpoint,
    load_partial,
    save_checkpoint,
)


def small_config(**kw):
    base = dict(ch=4, m=2, R=1, bias=True)
    base.update(kw)
    return ModelConfig(**base)


class TestBuild:
    def test_paper_parameter_count(self):
        cfg = ModelConfig(ch=32, m=2, R=1, bias=False)
        model = Model.build(cfg, seed=0)
        assert model.num_params() == 3 * 32 * 9 + 2 * 32 * 32 * 9 + 32 * 108 * 9
        assert model.num_params() == 50_400

    def test_bias_adds_output_channel_counts(self):
        no_bias = Model.build(ModelConfig(ch=32, m=2, R=1, bias=False), 0)
        with_bias = Model.build(ModelConfig(ch=32, m=2, R=1, bias=True), 0)
        assert with_bias.num_params() - no_bias.num_params() == 32 + 32 + 32 + 108 == 204

    def test_same_seed_bitwise_identical(self):
        a = Model.build(small_config(), seed=7)
        b = Model.build(small_config(), seed=7)
        for name in a.layers:
            assert np.array_equal(a.layers[name].weight, b.layers[name].weight)

    def test_different_seed_differs(self):
        a = Model.build(small_config(), seed=1)
        b = Model.build(small_config(), seed=2)
        assert not np.array_equal(a.layers["ds"].weight, b.layers["ds"].weight)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            Model.build(ModelConfig(ch=0), 0)
        with pytest.raises(ConfigError):
            Model.build(ModelConfig(ds_kind="maxpool"), 0)
        with pytest.raises(ConfigError):
            Model.build(ModelConfig(net_scale=4), 0)

    @pytest.mark.parametrize("ch,m,R", [(3, 1, 1), (4, 2, 1), (5, 3, 2), (8, 1, 3)])
    def test_count_formula_grid(self, ch, m, R):
        model = Model.build(ModelConfig(ch=ch, m=m, R=R, bias=False), 0)
        expect = 3 * ch * 9 + R * m * ch * ch * 9 + ch * 108 * 9
        assert model.num_params() == expect

    @pytest.mark.parametrize("ds", ["space_to_depth", "haar_dwt"])
    def test_alternative_heads_have_1x1_conv(self, ds):
        model = Model.build(small_config(ds_kind=ds), 0)
        assert model.layers["ds"].weight.shape == (4, 12, 1, 1)


class TestForward:
    def test_x3_shape_contract(self):
        model = Model.build(small_config(), 0)
        x = np.random.default_rng(0).random((1, 3, 240, 426), dtype=np.float32)
        assert model.forward(x).shape == (1, 3, 720, 1278)

    def test_all_zero_params_give_zero(self):
        model = Model.build(small_config(bias=False), 0)
        for p in model.layers.values():
            p.weight[:] = 0.0
        x = np.random.default_rng(1).random((2, 3, 8, 8), dtype=np.float32)
        y, _ = model.forward(x, train_mode=True)  # pre-clamp output
        assert not y.any()

    def test_odd_dims_rejected(self):
        model = Model.build(small_config(), 0)
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 3, 7, 8), dtype=np.float32))

    def test_eval_output_clamped(self):
        model = Model.build(small_config(), 3)
        for p in model.layers.values():
            p.weight *= 50.0
        x = np.random.default_rng(2).random((1, 3, 8, 8), dtype=np.float32)
        y = model.forward(x)
        assert y.min() >= 0.0 and y.max() <= 1.0

    @pytest.mark.parametrize("ds", ["strided_conv", "space_to_depth", "haar_dwt"])
    def test_matches_manual_composition(self, ds):
        cfg = ModelConfig(ch=5, m=3, R=2, ds_kind=ds, bias=True)
        model = Model.build(cfg, 11)
        x = np.random.default_rng(3).random((2, 3, 12, 10), dtype=np.float32)

        act = lambda v: T.activation(v, cfg.act, cfg.lrelu_slope)
        if ds == "space_to_depth":
            t = T.space_to_depth(x, 2)
        elif ds == "haar_dwt":
            t = T.haar_dwt_down(x)
        else:
            t = x
        h = act(T.conv2d_forward(t, model.layers["ds"]))
        for r in range(cfg.R):
            u = h
            for i in range(cfg.m - 1):
                u = act(T.conv2d_forward(u, model.layers[f"block{r}.conv{i}"]))
            u = T.conv2d_forward(u, model.layers[f"block{r}.conv{cfg.m - 1}"])
            h = act(h + u)
        ref = T.depth_to_space(T.conv2d_forward(h, model.layers["tail"]), 6)
        ref = np.clip(ref, 0.0, 1.0)

        np.testing.assert_allclose(model.forward(x), ref, atol=1e-6)

    def test_forward_deterministic(self):
        model = Model.build(small_config(), 5)
        x = np.random.default_rng(4).random((1, 3, 10, 10), dtype=np.float32)
        assert np.array_equal(model.forward(x), model.forward(x))


class TestBackward:
    @pytest.mark.parametrize("m,R,bias", [(1, 1, True), (2, 1, False), (2, 2, True)])
    def test_parameter_grads_match_finite_differences(self, m, R, bias):
        from helpers import central_diff, rel_err

        cfg = ModelConfig(ch=3, m=m, R=R, bias=bias)
        model = Model.build(cfg, 21)
        # float64 parameters for the numeric check
        bias_rng = np.random.default_rng(20)
        for p in model.layers.values():
            p.weight = p.weight.astype(np.float64)
            if p.bias is not None:
                p.bias = bias_rng.standard_normal(p.bias.size) * 0.05
        rng = np.random.default_rng(22)
        x = rng.random((1, 3, 4, 4))
        gy = rng.standard_normal((1, 3, 12, 12))

        def objective():
            y, _ = model.forward(x, train_mode=True)
            return float(np.sum(y * gy))

        _, cache = model.forward(x, train_mode=True)
        grads = model.backward(cache, gy)
        for name, (gw, gb) in grads.items():
            fd_w = central_diff(objective, model.layers[name].weight)
            assert rel_err(gw, fd_w) < 1e-6, name
            if gb is not None:
                fd_b = central_diff(objective, model.layers[name].bias)
                assert rel_err(gb, fd_b) < 1e-6, name


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = Model.build(small_config(), 9)
        ckpt = model.to_checkpoint({"stage": "stage1", "seed": 9, "epochs_trained": 0})
        p1, p2 = tmp_path / "a.bpp", tmp_path / "b.bpp"
        save_checkpoint(ckpt, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for name in ckpt.tensors:
            assert np.array_equal(ckpt.tensors[name], loaded.tensors[name])
        assert loaded.config == ckpt.config
        assert loaded.meta == ckpt.meta

    def test_tensor_count_matches_inventory(self, tmp_path):
        with_bias = Model.build(ModelConfig(ch=32, m=2, R=1, bias=True), 0)
        assert len(with_bias.tensors()) == 8  # 4 weights + 4 biases
        no_bias = Model.build(ModelConfig(ch=32, m=2, R=1, bias=False), 0)
        assert len(no_bias.tensors()) == 4

    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "c.bpp"
        save_checkpoint(Model.build(small_config(), 0).to_checkpoint(), path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as exc:
            load_checkpoint(path)
        assert exc.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.bpp"
        save_checkpoint(Model.build(small_config(), 0).to_checkpoint(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(FormatError) as exc:
            load_checkpoint(path)
        assert exc.value.offset == len(raw) - 10

    def test_mismatched_inventory_rejected(self):
        model = Model.build(small_config(), 0)
        tensors = model.tensors()
        del tensors["tail.weight"]
        with pytest.raises(ConfigError):
            Checkpoint(model.config, tensors).validate()

    def test_from_checkpoint_forward_identical(self):
        model = Model.build(small_config(), 13)
        restored = Model.from_checkpoint(model.to_checkpoint())
        x = np.random.default_rng(5).random((1, 3, 8, 8), dtype=np.float32)
        assert np.array_equal(model.forward(x), restored.forward(x))


class TestLoadPartial:
    def test_identical_config_copies_everything(self):
        model = Model.build(small_config(), 1)
        ckpt = model.to_checkpoint()
        loaded, report = load_partial(ckpt, small_config(), seed=2)
        assert not report.initialized and not report.dropped
        assert set(report.copied) == set(ckpt.tensors)
        x = np.random.default_rng(6).random((1, 3, 8, 8), dtype=np.float32)
        assert np.array_equal(model.forward(x), loaded.forward(x))

    def test_m4_into_m2(self):
        ckpt = Model.build(small_config(m=4), 1).to_checkpoint()
        _, report = load_partial(ckpt, small_config(m=2), seed=2)
        assert "block0.conv0.weight" in report.copied
        assert "tail.weight" in report.copied
        assert not report.initialized
        dropped = {n for n in report.dropped}
        assert dropped == {
            "block0.conv2.weight", "block0.conv2.bias",
            "block0.conv3.weight", "block0.conv3.bias",
        }

    def test_r2_into_r1(self):
        ckpt = Model.build(small_config(R=2), 1).to_checkpoint()
        _, report = load_partial(ckpt, small_config(R=1), seed=2)
        assert all(n.startswith("block1.") for n in report.dropped)
        assert len(report.dropped) == 4

    def test_width_change_reinitializes(self):
        ckpt = Model.build(small_config(ch=4), 1).to_checkpoint()
        _, report = load_partial(ckpt, small_config(ch=6), seed=2)
        # tail.bias is (108,) regardless of ch, so it still matches
        assert report.copied == ["tail.bias"]
        assert len(report.initialized) == 7


def test_inventory_order_is_graph_order():
    inv = list(layer_inventory(ModelConfig(ch=4, m=2, R=2)))
    assert inv == ["ds", "block0.conv0", "block0.conv1", "block1.conv0", "block1.conv1", "tail"]
