"""Named run profiles bundling model, training, and simulator constants.

``sht`` and ``ucf`` carry the published training hyperparameters for the two
surveillance benchmarks; ``sim`` is the desk-scale profile used by the
synthetic benchmark, the ablation harness, and the gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .curation import GenerationDefaults
from .losses import LossWeights
from .model import ModelConfig
from .simulate import SimConfig
from .training import TrainConfig


@dataclass
class RunProfile:
    name: str
    model: ModelConfig
    train: TrainConfig
    sim: SimConfig
    generation: GenerationDefaults


def _sht() -> RunProfile:
    return RunProfile(
        name="sht",
        model=ModelConfig(feature_dim=1024, model_dim=128, heads=4,
                          slots_abnormal=100, slots_normal=100, tau=0.1),
        train=TrainConfig(
            steps=1000,
            learning_rate=1e-4,
            weight_decay=1e-5,
            batch_videos_per_stream=4,
            segment_number=5,
            loss_weights=LossWeights(lambda1=1.0, lambda2=0.1, lambda_da=0.2,
                                     lambda_dist=0.01, beta=1.0, epsilon=1e-6, topk=5),
        ),
        sim=SimConfig(),
        generation=GenerationDefaults(guidance=(3.5, 3.5)),
    )


def _ucf() -> RunProfile:
    return RunProfile(
        name="ucf",
        model=ModelConfig(feature_dim=1024, model_dim=128, heads=4,
                          slots_abnormal=60, slots_normal=60, tau=0.1),
        train=TrainConfig(
            steps=1000,
            learning_rate=1e-5,
            weight_decay=1e-5,
            batch_videos_per_stream=4,
            segment_number=64,
            loss_weights=LossWeights(lambda1=1.0, lambda2=0.1, lambda_da=0.1,
                                     lambda_dist=0.01, beta=1.0, epsilon=1e-6, topk=64),
        ),
        sim=SimConfig(),
        generation=GenerationDefaults(guidance=(6.5, 4.5)),
    )


def _sim() -> RunProfile:
    return RunProfile(
        name="sim",
        model=ModelConfig(feature_dim=32, model_dim=32, heads=4,
                          slots_abnormal=8, slots_normal=8, tau=0.1, input_scale=0.05),
        train=TrainConfig(
            steps=300,
            learning_rate=1e-3,
            weight_decay=1e-5,
            batch_videos_per_stream=4,
            segment_number=16,
            loss_weights=LossWeights(lambda1=1.0, lambda2=0.1, lambda_da=0.2,
                                     lambda_dist=0.01, beta=1.0, epsilon=1e-6, topk=4),
        ),
        sim=SimConfig(),
        generation=GenerationDefaults(guidance=(3.5, 3.5)),
    )


_BUILDERS = {"sht": _sht, "ucf": _ucf, "sim": _sim}

PROFILE_NAMES = tuple(sorted(_BUILDERS))


def get_profile(name: str) -> RunProfile:
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {PROFILE_NAMES}") from None


def profile_with(profile: RunProfile, **train_overrides) -> RunProfile:
    """Profile copy with TrainConfig / LossWeights fields overridden."""
    from .training import config_with

    return replace(profile, train=config_with(profile.train, **train_overrides))
