import pytest
import yaml

from emcot_vla.config.configurations import (
    AnnotatorConfig,
    EvalConfig,
    ModelConfig,
    RunConfig,
    TokenConfig,
    config_from_dict,
    config_hash,
    load_config,
)
from emcot_vla.utils.errors import ConfigurationError


def test_defaults_are_consistent():
    config = RunConfig()
    assert config.rollout.chunk == config.model.chunk
    assert config.pretrain.loss_weights == (0.25, 0.5, 1.0)
    assert config.finetune.loss_weights == (1.0, 1.0, 1.0)
    assert config.model.n_latents == 64
    assert config.model.n_patches == 64


def test_yaml_file_and_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"env": {"step_limit": 50}, "pretrain": {"total_steps": 10}}))
    config = load_config(path, ["thresholds.theta_vel=0.2", "--tokens.isolate_noise_groups=false"])
    assert config.env.step_limit == 50
    assert config.pretrain.total_steps == 10
    assert config.pretrain.stage == "pretrain"
    assert config.thresholds.theta_vel == 0.2
    assert config.tokens.isolate_noise_groups is False


@pytest.mark.parametrize(
    "data",
    [
        {"optimizer": {}},
        {"env": {"colour": "red"}},
        {"model": {"d_model": 100}},
        {"rollout": {"chunk": 8}},
        {"eval": {"levels": ["medium"]}},
        {"pretrain": {"mixture": {"emcot": 1.0}}},
        {"finetune": {"loss_weights": [1.0, 0.0, 1.0]}},
    ],
)
def test_invalid_configs_rejected(data):
    with pytest.raises(ConfigurationError):
        config_from_dict(data)


@pytest.mark.parametrize("override", ["env.step_limit", "step_limit=5", "bogus.key=1"])
def test_malformed_overrides(override):
    with pytest.raises(ConfigurationError):
        load_config(None, [override])


def test_yaml_must_hold_sections(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("- just\n- a list\n")
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_config_hash_tracks_values():
    base = config_hash(RunConfig())
    assert base == config_hash(RunConfig())
    assert base != config_hash(load_config(None, ["env.step_limit=100"]))


def test_api_key_kept_out_of_artifacts(monkeypatch):
    monkeypatch.setenv("EMCOT_ANNOTATOR_API_KEY", "secret")
    config = RunConfig(annotator=AnnotatorConfig())
    assert config.annotator.api_key == "secret"
    assert "api_key" not in config.to_dict()["annotator"]


def test_section_validation():
    with pytest.raises(ConfigurationError):
        AnnotatorConfig(subgoal_keys="index")
    with pytest.raises(ConfigurationError):
        AnnotatorConfig(subgoal_shift=1)
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=1024)
    with pytest.raises(ConfigurationError):
        TokenConfig(max_len=0)
    with pytest.raises(ConfigurationError):
        EvalConfig(episodes=0)
