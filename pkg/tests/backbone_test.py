import numpy as np
import pytest

from sure_lab.backbone import (
    VARIANCE_FLOOR,
    build_backbone,
    build_head,
    fuse,
    fuse_predict,
    prediction_fn,
    pretrain,
    project,
)
from sure_lab.configuration import DatasetConfig
from sure_lab.errors import ContractError, ShapeError
from sure_lab.evaluation import task_metrics
from sure_lab.synth_data import apply_masks, generate
from sure_lab.tensor import Graph


@pytest.fixture
def splits():
    cfg = DatasetConfig(
        modality_dims=[4, 5, 6], latent_dim=3, n_classes=3, n_samples=200, n_finetune=40, n_test=20, seed=0
    )
    return generate(cfg)


def test_shapes_and_positive_variance(splits):
    backbone = build_backbone([4, 5, 6], 4, 7, seed=0)
    head = build_head(7, 5, 3, seed=1)
    latents = project(backbone, splits.test)
    assert [z.shape for z in latents] == [(20, 4)] * 3
    g = Graph()
    y, sigma2 = fuse_predict(backbone, head, g, [g.constant(z) for z in latents])
    assert y.shape == (20, 3)
    assert sigma2.shape == (20,)
    assert np.all(sigma2.value >= VARIANCE_FLOOR)


def test_project_leaves_absent_rows_zero(splits):
    backbone = build_backbone([4, 5, 6], 4, 7, seed=0)
    masked = apply_masks(splits.test, 0.5, seed=0)
    latents = project(backbone, masked)
    for i, z in enumerate(latents):
        assert np.all(z[~masked.presence[:, i]] == 0.0)


def test_fusion_needs_every_latent():
    backbone = build_backbone([2, 2], 3, 4, seed=0)
    g = Graph()
    with pytest.raises(ContractError):
        fuse(backbone, g, [g.constant(np.zeros((1, 3))), None])
    with pytest.raises(ContractError):
        fuse(backbone, g, [g.constant(np.zeros((1, 3)))])


def test_fusion_input_width_checked():
    backbone = build_backbone([2, 2], 3, 4, seed=0)
    g = Graph()
    with pytest.raises(ShapeError):
        fuse(backbone, g, [g.constant(np.zeros((1, 3))), g.constant(np.zeros((1, 2)))])


def test_deterministic_forward_is_pure(splits):
    backbone = build_backbone([4, 5, 6], 4, 7, seed=0)
    head = build_head(7, 5, 3, seed=1)
    latents = project(backbone, splits.test)
    predict = prediction_fn(backbone, head)
    g1, g2 = Graph(), Graph()
    a = predict(g1, [g1.constant(z) for z in latents]).value
    b = predict(g2, [g2.constant(z) for z in latents]).value
    assert a.tobytes() == b.tobytes()


def test_fusion_depends_on_modality_order():
    backbone = build_backbone([4, 4], 3, 6, seed=2)
    head = build_head(6, 5, 2, seed=3)
    rng = np.random.default_rng(0)
    z0, z1 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    g = Graph()
    y, _ = fuse_predict(backbone, head, g, [g.constant(z0), g.constant(z1)])
    swapped, _ = fuse_predict(backbone, head, g, [g.constant(z1), g.constant(z0)])
    assert not np.allclose(y.value, swapped.value)


def test_pretrain_reduces_loss_and_freezes(splits):
    backbone = build_backbone([4, 5, 6], 4, 8, seed=0)
    head = build_head(8, 8, 3, seed=1)
    history = pretrain(backbone, head, splits.train, epochs=30, lr=1e-2, batch_size=32, seed=0)
    assert len(history) == 30
    assert history[-1] < history[0]
    assert backbone.frozen
    assert not any(p.frozen for p in head.parameters())


def test_pretrain_rejects_missing_modalities(splits):
    backbone = build_backbone([4, 5, 6], 4, 8, seed=0)
    head = build_head(8, 8, 3, seed=1)
    with pytest.raises(ContractError):
        pretrain(backbone, head, apply_masks(splits.train, 0.2, seed=0), epochs=1)


@pytest.mark.slow
def test_pretrained_regression_reaches_low_mae():
    cfg = DatasetConfig(task="regression", noise_scales=[0.1, 0.1, 0.1], n_samples=10_000, n_test=1_000, seed=0)
    data = generate(cfg)
    backbone = build_backbone(cfg.modality_dims, cfg.latent_dim, 32, seed=0)
    head = build_head(32, 32, 1, seed=1)
    pretrain(backbone, head, data.train, epochs=30, lr=2e-3, batch_size=64, seed=0)
    g = Graph()
    y = prediction_fn(backbone, head)(g, [g.constant(z) for z in project(backbone, data.test)])
    assert task_metrics("regression", y.value, data.test.labels)["mae"] < 0.2
