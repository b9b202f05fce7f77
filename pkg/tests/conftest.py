import pytest

from sure_lab.configuration import DatasetConfig, RunConfig


@pytest.fixture
def tiny_config() -> RunConfig:
    """A run small enough to train end to end in a couple of seconds."""
    dataset = DatasetConfig(
        n_modalities=3,
        modality_dims=[4, 4, 4],
        latent_dim=3,
        noise_scales=[0.1, 0.2, 0.3],
        task="classification",
        n_classes=3,
        n_samples=200,
        n_finetune=120,
        n_test=40,
        seed=3,
    )
    return RunConfig(
        dataset=dataset,
        mask_fraction=0.3,
        seed=3,
        latent_dim=4,
        fusion_dim=6,
        head_hidden=6,
        batch_size=16,
        pretrain_epochs=2,
        phase1_epochs=2,
        phase2_epochs=3,
        mc_passes=3,
        ensemble_members=2,
    )
