"""Backbone, attention, head, and checkpoint behaviour."""

import numpy as np
import pytest

from maskdepth import tensor as T
from maskdepth.attention import cross_attention, scaled_dot_attention
from maskdepth.config import Config
from maskdepth.head import squeeze_excite
from maskdepth.model import (Model, count_parameters, expected_param_count,
                             init_model, load_checkpoint, named_parameters,
                             run_model, save_checkpoint)
from maskdepth.unet import stack_input, unet_forward


def micro_config(**overrides) -> Config:
    base = dict(height=16, width=32, base_channels=2, depth_channels=4,
                attention_channels=8, fusion_channels=16, head_channels=8,
                se_reduction=2, attention_height=16, attention_width=32,
                dtype="float64")
    base.update(overrides)
    return Config(**base).validate()


@pytest.fixture
def model():
    return init_model(micro_config(), seed=3)


@pytest.fixture
def batch(model):
    rng = np.random.default_rng(0)
    cfg = model.config
    x5 = T.Tensor(rng.uniform(0, 1, (2, 5, cfg.height, cfg.width)))
    m = T.Tensor((rng.random((2, 1, cfg.height, cfg.width)) < 0.3).astype(float))
    return x5, m


class TestStackInput:
    def test_channel_layout_and_depth_scaling(self):
        rgb = T.Tensor(np.full((1, 3, 16, 16), 0.5))
        depth = T.Tensor(np.full((1, 1, 16, 16), 40.0))
        valid = T.Tensor(np.ones((1, 1, 16, 16)))
        x = stack_input(rgb, depth, valid, max_depth=80.0)
        assert x.shape == (1, 5, 16, 16)
        assert np.all(x.data[:, :3] == 0.5)
        assert np.all(x.data[:, 3] == 0.5)  # 40 / 80
        assert np.all(x.data[:, 4] == 1.0)

    def test_shape_validation(self):
        rgb = T.Tensor(np.zeros((1, 3, 16, 16)))
        with pytest.raises(ValueError, match="depth_sparse"):
            stack_input(rgb, T.Tensor(np.zeros((1, 2, 16, 16))),
                        T.Tensor(np.zeros((1, 1, 16, 16))), 80.0)


class TestUNet:
    def test_output_shapes(self, model, batch):
        x5, _ = batch
        f_depth, d_init = unet_forward(x5, model.unet, "train")
        cfg = model.config
        assert f_depth.shape == (2, cfg.depth_channels, cfg.height, cfg.width)
        assert d_init.shape == (2, 1, cfg.height, cfg.width)

    def test_rejects_indivisible_sizes(self, model):
        x = T.Tensor(np.zeros((1, 5, 24, 32)))
        with pytest.raises(ValueError, match="divisible by 16"):
            unet_forward(x, model.unet, "train")

    def test_rejects_wrong_channel_count(self, model):
        x = T.Tensor(np.zeros((1, 4, 16, 32)))
        with pytest.raises(ValueError, match="B, 5"):
            unet_forward(x, model.unet, "train")

    def test_d_init_reaches_metric_scale(self, model, batch):
        # the 1x1 head output is multiplied by the depth range, so unit
        # feature activations land on tens of meters, not unit scale
        x5, _ = batch
        _, d_init = unet_forward(x5, model.unet, "train")
        assert np.abs(d_init.data).max() > 1.0


class TestAttention:
    def test_rows_are_distributions(self, model, batch):
        x5, m = batch
        f_depth, _ = unet_forward(x5, model.unet, "train")
        collected = []
        cross_attention(m, f_depth, model.attention, collect_weights=collected)
        assert len(collected) == 2
        n = model.config.attention_height * model.config.attention_width
        for w in collected:
            assert w.shape == (n, n)
            np.testing.assert_allclose(w.sum(axis=1), np.ones(n), atol=1e-6)
            assert w.min() >= 0.0

    def test_single_location_attention_returns_value_exactly(self):
        # with N = 1 the softmax is the constant 1, so output == v
        q = T.Tensor([[0.3, -2.0]])
        k = T.Tensor([[5.0, 1.0]])
        v = T.Tensor([[7.25, -3.5]])
        weights, out = scaled_dot_attention(q, k, v)
        np.testing.assert_array_equal(weights.data, [[1.0]])
        np.testing.assert_array_equal(out.data, v.data)

    def test_identical_keys_give_uniform_weights(self):
        n, c = 6, 4
        q = T.Tensor(np.random.default_rng(0).standard_normal((n, c)))
        k = T.Tensor(np.ones((n, c)))
        v = T.Tensor(np.random.default_rng(1).standard_normal((n, c)))
        weights, out = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(weights.data, np.full((n, n), 1.0 / n), atol=1e-12)
        np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (n, 1)),
                                   atol=1e-12)

    def test_output_resolution_matches_input(self, batch):
        cfg = micro_config(attention_height=8, attention_width=16)
        model = init_model(cfg, seed=1)
        x5, m = batch
        f_depth, _ = unet_forward(x5, model.unet, "train")
        out = cross_attention(m, f_depth, model.attention)
        assert out.shape == f_depth.shape

    def test_gradient_flows_to_query_projection(self, model, batch):
        x5, m = batch
        with T.GradTape():
            f_depth, _ = unet_forward(x5, model.unet, "train")
            out = cross_attention(m, f_depth, model.attention)
            T.backward(T.sum_all(out))
        assert model.attention.wq.w.grad is not None
        assert np.abs(model.attention.wq.w.grad).sum() > 0


class TestHead:
    def test_squeeze_excite_gates_channels(self):
        f = T.Tensor(np.ones((2, 4, 3, 3)))
        w1 = T.Tensor(np.zeros((2, 4)))
        w2 = T.Tensor(np.zeros((4, 2)))
        out = squeeze_excite(f, w1, w2)
        # zero weights give sigmoid(0) = 0.5 on every channel
        np.testing.assert_allclose(out.data, 0.5 * f.data, atol=1e-12)

    def test_gate_is_per_channel_not_per_pixel(self):
        rng = np.random.default_rng(2)
        f = rng.standard_normal((1, 3, 4, 4))
        w1 = T.Tensor(rng.standard_normal((2, 3)))
        w2 = T.Tensor(rng.standard_normal((3, 2)))
        out = squeeze_excite(T.Tensor(f), w1, w2).data
        ratio = out / f
        for c in range(3):
            vals = ratio[0, c]
            np.testing.assert_allclose(vals, vals.flat[0], rtol=1e-10)
            assert 0.0 < vals.flat[0] < 1.0

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="incompatible"):
            squeeze_excite(T.Tensor(np.ones((1, 4, 2, 2))),
                           T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))


class TestModel:
    def test_pipeline_output_shapes(self, model, batch):
        x5, m = batch
        out = run_model(model, x5, m, "train")
        assert out.d_init.shape == (2, 1, 16, 32)
        assert out.d_final.shape == (2, 1, 16, 32)

    def test_no_output_activation(self, model, batch):
        # negative final depths are possible by design pre-export
        x5, m = batch
        outs = [run_model(init_model(micro_config(), seed=s), x5, m, "train").d_final.data
                for s in range(4)]
        assert min(o.min() for o in outs) < 0

    def test_same_seed_same_weights(self):
        a = init_model(micro_config(), seed=11)
        b = init_model(micro_config(), seed=11)
        for (na, ta), (nb, tb) in zip(named_parameters(a).items(),
                                      named_parameters(b).items()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_different_seed_different_weights(self):
        a = init_model(micro_config(), seed=1)
        b = init_model(micro_config(), seed=2)
        assert not np.array_equal(a.unet.encoder[0].conv1.w.data,
                                  b.unet.encoder[0].conv1.w.data)

    def test_parameter_count_matches_closed_form(self):
        for cfg in (micro_config(), Config(height=64, width=128).validate()):
            model = init_model(cfg, seed=0)
            assert count_parameters(model) == expected_param_count(cfg)

    def test_attention_disabled_keeps_shapes_and_changes_output(self, batch):
        x5, m = batch
        on = init_model(micro_config(), seed=5)
        off = init_model(micro_config(attention_enabled=False), seed=5)
        out_on = run_model(on, x5, m, "eval")
        out_off = run_model(off, x5, m, "eval")
        assert out_off.d_final.shape == out_on.d_final.shape
        assert not np.array_equal(out_on.d_final.data, out_off.d_final.data)
        # the backbone path is untouched by the ablation
        np.testing.assert_array_equal(out_on.d_init.data, out_off.d_init.data)

    def test_gradients_reach_every_parameter(self, model, batch):
        x5, m = batch
        gt = T.Tensor(np.random.default_rng(3).uniform(1, 70, (2, 1, 16, 32)))
        from maskdepth.losses import LossWeights, total_loss
        with T.GradTape():
            out = run_model(model, x5, m, "train")
            breakdown = total_loss(out.d_init, out.d_final, gt, m,
                                   m.data[:, 0], LossWeights())
            T.backward(breakdown.total)
        missing = [n for n, p in named_parameters(model).items() if p.grad is None]
        assert not missing, f"no gradient for: {missing}"


class TestCheckpoint:
    def test_round_trip_restores_everything(self, tmp_path, model, batch):
        x5, m = batch
        run_model(model, x5, m, "train")  # move BN running stats off init
        path = tmp_path / "model.ckpt"
        opt_state = {"t": 7,
                     "m": {n: np.full_like(p.data, 0.25)
                           for n, p in named_parameters(model).items()},
                     "v": {n: np.full_like(p.data, 0.5)
                           for n, p in named_parameters(model).items()}}
        save_checkpoint(path, model, opt_state, step=123)
        back, opt_back, step = load_checkpoint(path)
        assert step == 123
        assert opt_back["t"] == 7
        for (n, a), (_, b) in zip(named_parameters(model).items(),
                                  named_parameters(back).items()):
            np.testing.assert_array_equal(a.data, b.data)
            np.testing.assert_array_equal(opt_back["m"][n], 0.25)
        from maskdepth.model import named_bn_states
        for name, st in named_bn_states(model).items():
            st2 = named_bn_states(back)[name]
            np.testing.assert_array_equal(st.running_mean, st2.running_mean)
            np.testing.assert_array_equal(st.running_var, st2.running_var)

    def test_same_model_saves_identical_bytes(self, tmp_path, model):
        save_checkpoint(tmp_path / "a.ckpt", model, None, step=1)
        save_checkpoint(tmp_path / "b.ckpt", model, None, step=1)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_checkpoint_restores_config(self, tmp_path):
        cfg = micro_config(fusion_channels=24)
        save_checkpoint(tmp_path / "c.ckpt", init_model(cfg, 0), None, 0)
        back, _, _ = load_checkpoint(tmp_path / "c.ckpt")
        assert back.config.fusion_channels == 24
        assert back.config.dtype == "float64"

    def test_corrupt_magic_rejected(self, tmp_path, model):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, model, None, 0)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        from maskdepth.netpbm import FormatError
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)
