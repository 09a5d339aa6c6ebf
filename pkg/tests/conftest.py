import pytest
import torch

from sdconet.config import (DetectorConfig, EncoderConfig, FilterConfig, RunConfig, SaliencyConfig,
                            SRDecoderConfig, TrainerConfig, DataConfig)

torch.set_num_threads(1)


def tiny_config(**trainer) -> RunConfig:
    """Small enough for per-test training runs on one CPU core."""
    return RunConfig(
        seed=0,
        encoder=EncoderConfig(window_size=4, stage_depths=[1, 1, 1, 1], stage_channels=[8, 16, 32, 64],
                              num_heads=[1, 2, 2, 4]),
        decoder_sr=SRDecoderConfig(window_size=4, recon_channels=4),
        saliency=SaliencyConfig(hidden_dim=8),
        filter=FilterConfig(),
        detector=DetectorConfig(d_model=16, num_queries=10, num_decoder_layers=2, dim_feedforward=32),
        trainer=TrainerConfig(**{"T_det": 1, "T_tot": 3, "milestones": [2], "batch_size": 2, **trainer}),
        data=DataConfig(count=4, canvas=64, min_objects=1, max_objects=3, min_size=8, max_size=20),
    )


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
