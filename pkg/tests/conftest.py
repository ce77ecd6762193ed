import numpy as np
import pytest

from emcot_vla.config.configurations import EnvConfig, ModelConfig, RunConfig, TokenConfig, config_from_dict
from emcot_vla.envsim.collect import collect_trajectory
from emcot_vla.envsim.tasks import make_task
from emcot_vla.processing.annotator import annotate_trajectory
from emcot_vla.tokenstream.assemble import SequenceBuilder
from emcot_vla.tokenstream.vocab import Vocabulary


@pytest.fixture(scope="session")
def env_config() -> EnvConfig:
    return EnvConfig()


@pytest.fixture(scope="session")
def stack_trajectory(env_config):
    traj = collect_trajectory(make_task("stack_two", "easy"), 0, env_config)
    assert traj is not None
    return traj


@pytest.fixture(scope="session")
def handover_trajectory(env_config):
    traj = collect_trajectory(make_task("handover_block", "easy"), 0, env_config)
    assert traj is not None
    return traj


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        d_model=32,
        n_layers=2,
        n_heads=2,
        head_dim=16,
        ffn_mult=2,
        image_size=64,
        patch_size=16,
        latent_grid=4,
        latent_channels=4,
        codec_downsample=16,
        chunk=4,
        context_frames=2,
        flow_steps=3,
    )


@pytest.fixture
def tiny_run_config() -> RunConfig:
    return config_from_dict(
        {
            "model": {
                "d_model": 32,
                "n_layers": 2,
                "n_heads": 2,
                "head_dim": 16,
                "ffn_mult": 2,
                "patch_size": 16,
                "latent_grid": 4,
                "latent_channels": 4,
                "codec_downsample": 16,
                "chunk": 4,
                "context_frames": 2,
                "flow_steps": 2,
            },
            "rollout": {"chunk": 4, "context": 2, "flow_steps": 2, "max_text_tokens": 3, "step_limit": 8},
            "pretrain": {"batch_size": 2, "total_steps": 4, "warmup_steps": 2, "checkpoint_every": 0},
            "finetune": {"batch_size": 2, "total_steps": 4, "warmup_steps": 2, "checkpoint_every": 0},
            "eval": {"episodes": 1, "tasks": ["press_button"], "levels": ["easy"]},
        }
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


def fake_latents(config: ModelConfig):
    """
    Латенты-заглушки: постоянная сетка со средней яркостью кадра.
    """

    def encode(image):
        value = float(np.asarray(image, dtype=np.float32).mean()) / 255.0
        return np.full((config.n_latents, config.latent_channels), value, dtype=np.float32)

    return encode


@pytest.fixture
def builder(tiny_model_config, env_config) -> SequenceBuilder:
    return SequenceBuilder(Vocabulary(), fake_latents(tiny_model_config), tiny_model_config, TokenConfig(), env_config)


@pytest.fixture(scope="session")
def stack_record(stack_trajectory):
    return annotate_trajectory(stack_trajectory)
