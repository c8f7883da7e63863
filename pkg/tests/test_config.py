"""Config dataclasses, validation, YAML round-trip."""
import pytest

from sparsepose.config import (
    FullConfig,
    ModelConfig,
    SamplingConfig,
    TrainConfig,
    config_from_dict,
    load_config,
    save_config,
)
from sparsepose.kcl import GatingConfig


class TestModelConfig:
    def test_attention_resolutions(self):
        cfg = ModelConfig(image_size=64)
        assert cfg.attention_resolution("enc.0") == 64
        assert cfg.attention_resolution("enc.1") == 32
        assert cfg.attention_resolution("enc.2") == 16
        assert cfg.attention_resolution("mid") == 16

    def test_unknown_block(self):
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig().attention_resolution("dec.0")

    def test_width_group_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(widths=(7, 12, 16))

    def test_cond_resolution_ratio(self):
        ModelConfig(image_size=64, cond_resolution=128)
        with pytest.raises(ValueError, match="cond_resolution"):
            ModelConfig(image_size=64, cond_resolution=96)

    def test_attention_source_values(self):
        with pytest.raises(ValueError, match="attention_source"):
            ModelConfig(attention_source="both")


class TestFullConfig:
    def test_mixed_resolution_gate_rejected(self):
        with pytest.raises(ValueError, match="share one attention resolution"):
            FullConfig(gating=GatingConfig(blocks=("enc.0", "enc.2")))

    def test_same_resolution_gate_ok(self):
        cfg = FullConfig(gating=GatingConfig(blocks=("enc.2", "mid")))
        assert cfg.heatmap_size() == (16, 16)

    def test_gate_must_fit_schedule(self):
        with pytest.raises(ValueError, match="gate window"):
            FullConfig(gating=GatingConfig(t_low=250, t_high=2000))

    def test_train_validation(self):
        with pytest.raises(ValueError, match="eta"):
            TrainConfig(eta=-0.1)
        with pytest.raises(ValueError, match="prompt_drop_prob"):
            TrainConfig(prompt_drop_prob=1.5)
        with pytest.raises(ValueError, match="lr"):
            TrainConfig(lr=0.0)

    def test_sampling_validation(self):
        with pytest.raises(ValueError, match="steps"):
            SamplingConfig(steps=0)
        with pytest.raises(ValueError, match="scales"):
            SamplingConfig(cfg_scale=-1.0)


class TestYamlRoundTrip:
    def test_round_trip(self, tmp_path):
        cfg = FullConfig(
            model=ModelConfig(image_size=32, widths=(8, 12, 16),
                              cond_resolution=32),
            gating=GatingConfig(t_low=100, t_high=300, blocks=("enc.2", "mid")),
            train=TrainConfig(eta=0.2, max_steps=50),
        )
        path = tmp_path / "cfg.yaml"
        save_config(cfg, path)
        again = load_config(path)
        assert again == cfg

    def test_defaults_from_empty_dict(self):
        cfg = config_from_dict({})
        assert cfg.model.image_size == 64
        assert cfg.train.eta == 0.1
        assert cfg.train.lr == 1e-5
        assert cfg.train.prompt_drop_prob == 0.5
        assert cfg.sampling.steps == 50
        assert cfg.sampling.cfg_scale == 7.5
        assert cfg.sampling.cond_scale == 1.0
        assert cfg.gating.t_low == 250 and cfg.gating.t_high == 500
