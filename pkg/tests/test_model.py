import numpy as np
import pytest

from r2aunet.model import (CheckpointError, ModelConfig, R2AUNet, build,
                           load_checkpoint, predict_mask, save_checkpoint)
from r2aunet.tensor import ShapeError, Tensor, tsum

SMALL = ModelConfig(depth=2, base_channels=2, timesteps=2)


def small_model(seed=0, dtype=np.float64):
    return build(SMALL, seed=seed, dtype=dtype)


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.depth == 4 and cfg.base_channels == 16
        assert cfg.timesteps == 2 and cfg.use_attention and cfg.use_residual

    def test_variant_names(self):
        assert ModelConfig().variant_name() == "Recurrent Residual UNET + Attention"
        assert ModelConfig(use_attention=False).variant_name() == \
            "Recurrent Residual UNET"
        assert ModelConfig(use_residual=False).variant_name() == \
            "Recurrent UNET + Attention"

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            ModelConfig(depth=0)
        with pytest.raises(ValueError):
            ModelConfig(timesteps=0)


class TestForward:
    def test_output_shape_and_range(self):
        model = small_model()
        x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 16, 16)))
        out = model(x, mode="train")
        assert out.shape == (2, 1, 16, 16)
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_channel_ladder(self):
        cfg = ModelConfig(depth=3, base_channels=8)
        model = build(cfg)
        enc_out = [s.unit.out_ch for s in model.encoders]
        assert enc_out == [8, 16, 32]
        assert model.bottleneck.unit.out_ch == 64
        dec_out = [s.unit.out_ch for s in model.decoders]
        assert dec_out == [32, 16, 8]

    def test_indivisible_spatial_dims_rejected(self):
        model = small_model()
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((1, 1, 10, 10))))

    def test_wrong_input_channels_rejected(self):
        model = small_model()
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((1, 3, 16, 16))))

    def test_shallowest_skip_ungated(self):
        model = build(ModelConfig(depth=3, base_channels=4))
        # decoder order is deepest-first, so the last gate covers depth 0
        assert model.gates[-1] is None
        assert all(g is not None for g in model.gates[:-1])

    def test_attend_first_skip_gates_everything(self):
        model = build(ModelConfig(depth=2, base_channels=2,
                                  attend_first_skip=True))
        assert all(g is not None for g in model.gates)

    def test_no_attention_variant(self):
        model = build(ModelConfig(depth=2, base_channels=2, use_attention=False))
        assert all(g is None for g in model.gates)
        assert not any(n.startswith("gate") for n in model.parameters())

    def test_no_residual_variant(self):
        model = build(ModelConfig(depth=2, base_channels=2, use_residual=False))
        assert all(s.proj is None for s in model.encoders)
        x = Tensor(np.random.default_rng(1).normal(size=(1, 1, 8, 8)))
        assert model(x).shape == (1, 1, 8, 8)

    def test_deterministic_given_seed(self):
        x = np.random.default_rng(2).normal(size=(1, 1, 16, 16))
        a = small_model(seed=5)(Tensor(x.copy()), mode="eval").data
        b = small_model(seed=5)(Tensor(x.copy()), mode="eval").data
        np.testing.assert_array_equal(a, b)


class TestParameters:
    @pytest.mark.parametrize("cfg,count", [
        (ModelConfig(depth=2, base_channels=2), 2000),
        (ModelConfig(depth=2, base_channels=4), 7822),
        (ModelConfig(depth=3, base_channels=8), 127515),
        (ModelConfig(depth=2, base_channels=4, use_attention=False), 7749),
        (ModelConfig(depth=2, base_channels=4, use_residual=False), 7498),
    ])
    def test_param_counts(self, cfg, count):
        assert build(cfg).param_count() == count

    def test_gradient_reaches_every_parameter(self):
        model = small_model(seed=3)
        x = Tensor(np.random.default_rng(4).normal(size=(2, 1, 8, 8)))
        tsum(model(x, mode="train")).backward()
        for name, t in model.parameters().items():
            assert t.grad is not None, name
            assert np.any(t.grad != 0.0), name

    def test_zero_grad(self):
        model = small_model()
        x = Tensor(np.random.default_rng(5).normal(size=(1, 1, 8, 8)))
        tsum(model(x)).backward()
        model.zero_grad()
        assert all(t.grad is None for t in model.parameters().values())

    def test_named_arrays_include_bn_buffers(self):
        arrays = small_model().named_arrays()
        assert any(n.endswith("running_mean") for n in arrays)
        assert any(n.endswith("running_var") for n in arrays)


class TestPredictMask:
    def test_binary_output(self):
        model = small_model()
        x = Tensor(np.random.default_rng(6).normal(size=(1, 1, 16, 16)))
        mask = predict_mask(model, x)
        assert mask.dtype == np.uint8
        assert set(np.unique(mask)) <= {0, 1}

    def test_threshold_monotone(self):
        model = small_model()
        x = Tensor(np.random.default_rng(7).normal(size=(1, 1, 16, 16)))
        lo = predict_mask(model, x, threshold=0.2).sum()
        hi = predict_mask(model, x, threshold=0.8).sum()
        assert lo >= hi

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            predict_mask(small_model(), Tensor(np.zeros((1, 1, 8, 8))), 1.5)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        model = build(SMALL, seed=9, dtype=np.float32)
        # run a train step so running stats differ from init
        x = Tensor(np.random.default_rng(8).normal(size=(2, 1, 8, 8)).astype(np.float32))
        model(x, mode="train")
        path = tmp_path / "m.r2au"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        orig = model.named_arrays()
        back = loaded.named_arrays()
        assert list(orig) == list(back)
        for name in orig:
            np.testing.assert_array_equal(
                np.asarray(orig[name], dtype=np.float32),
                np.asarray(back[name], dtype=np.float32), err_msg=name)

    def test_round_trip_same_predictions(self, tmp_path):
        model = build(SMALL, seed=10, dtype=np.float32)
        path = tmp_path / "m.r2au"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        x = Tensor(np.random.default_rng(9).normal(size=(1, 1, 16, 16)).astype(np.float32))
        a = model(Tensor(x.data.copy()), mode="eval").data
        b = loaded(Tensor(x.data.copy()), mode="eval").data
        np.testing.assert_array_equal(a, b)

    def test_config_restored(self, tmp_path):
        cfg = ModelConfig(depth=3, base_channels=4, use_attention=False)
        path = tmp_path / "m.r2au"
        save_checkpoint(path, build(cfg, dtype=np.float32))
        assert load_checkpoint(path).config == cfg

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.r2au"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        model = build(SMALL, dtype=np.float32)
        path = tmp_path / "m.r2au"
        save_checkpoint(path, model)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
