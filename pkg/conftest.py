import pytest

from models import EnvConfig, EvalConfig, NetworkConfig, PpoConfig, RunConfig


def make_tiny_config(**ppo_overrides) -> RunConfig:
    """Small networks and short episodes so full training loops run in seconds"""
    ppo = dict(n_envs=2, t_roll=8, total_iterations=2, epochs=2, minibatches=2)
    ppo.update(ppo_overrides)
    return RunConfig(
        seed=7,
        network=NetworkConfig(estimator_hidden=[16], heightmap_hidden=[8], actor_hidden=[16], critic_hidden=[16]),
        ppo=PpoConfig(**ppo),
        env=EnvConfig(max_episode_steps=30),
        eval=EvalConfig(trials=1),
    )


@pytest.fixture
def tiny_config():
    return make_tiny_config()
