import numpy as np
import pytest
import torch

from pcrobust.classifier import (
    ClassifierConfig,
    PointCloudClassifier,
    Trainer,
    accuracy,
    forward,
    input_gradient,
    load_checkpoint,
    save_checkpoint,
    to_tensor,
)
from pcrobust.data import PointCloud, SyntheticDatasetSpec, generate_dataset
from pcrobust.errors import CheckpointMismatchError


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(
        SyntheticDatasetSpec(
            classes=["sphere", "cube", "cylinder"],
            points_per_cloud=128,
            clouds_per_class=100,
            noise_sigma=0.01,
            seed=3,
        )
    )


@pytest.fixture
def model():
    return PointCloudClassifier(
        ClassifierConfig(encoder_widths=[32, 64], num_classes=3, head_width=32, seed=0)
    )


def test_deterministic_init():
    cfg = ClassifierConfig(encoder_widths=[16, 32], num_classes=3, seed=5)
    a = PointCloudClassifier(cfg)
    b = PointCloudClassifier(cfg)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_permutation_invariance(model, dataset):
    cloud = dataset[0]
    rng = np.random.default_rng(0)
    permuted = PointCloud(points=cloud.points[rng.permutation(cloud.n_points)], label=cloud.label)
    assert np.allclose(forward(model, cloud), forward(model, permuted), atol=1e-5)


def test_untrained_model_near_chance(model, dataset):
    assert abs(accuracy(model, dataset) - 1 / 3) <= 0.1


def test_zero_weight_head_uniform_softmax(model, dataset):
    with torch.no_grad():
        model.head[1].weight.zero_()
        model.head[1].bias.zero_()
    logits = forward(model, dataset[0])
    probs = np.exp(logits) / np.exp(logits).sum()
    assert np.allclose(probs, 1 / 3)


def test_input_gradient_matches_finite_differences(model, dataset):
    cloud = dataset[0]
    grad = input_gradient(model, cloud, cloud.label)
    assert grad.shape == cloud.points.shape
    rng = np.random.default_rng(1)
    h = 1e-4
    label = torch.tensor([cloud.label])
    for _ in range(10):
        i, j = rng.integers(cloud.n_points), rng.integers(3)
        if abs(grad[i, j]) < 1e-8:
            continue
        losses = []
        for delta in (h, -h):
            pts = cloud.points.copy()
            pts[i, j] += delta
            t = to_tensor(PointCloud(points=pts, label=cloud.label)).unsqueeze(0)
            with torch.no_grad():
                losses.append(float(torch.nn.functional.cross_entropy(model(t), label)))
        fd = (losses[0] - losses[1]) / (2 * h)
        assert abs(fd - grad[i, j]) <= 1e-3 * max(abs(fd), abs(grad[i, j]))


def test_gradient_of_constant_model_is_zero(model, dataset):
    with torch.no_grad():
        for layer in model.encoder:
            layer.weight.zero_()
            layer.bias.zero_()
    grad = input_gradient(model, dataset[0], dataset[0].label)
    assert np.allclose(grad, 0.0)


def test_training_reaches_accuracy(model, dataset):
    trainer = Trainer(model, lr=1e-3)
    rng = np.random.default_rng(0)
    for _ in range(200):
        idx = rng.choice(len(dataset), size=16, replace=False)
        trainer.step([dataset[i] for i in idx])
    assert accuracy(model, dataset) >= 0.9


def test_zero_learning_rate_leaves_parameters(model, dataset):
    trainer = Trainer(model, lr=0.0)
    before = [p.clone() for p in model.parameters()]
    trainer.step(dataset[:8])
    for p, b in zip(model.parameters(), before):
        assert torch.equal(p, b)


def test_repeated_batch_loss_non_increasing(model, dataset):
    trainer = Trainer(model, lr=1e-3)
    batch = dataset[:16]
    losses = [trainer.step(batch) for _ in range(20)]
    for earlier, later in zip(losses, losses[1:]):
        assert later <= earlier + 1e-3


def test_misclassified_cloud_has_positive_gradient_norm(model, dataset):
    trainer = Trainer(model, lr=1e-3)
    for _ in range(50):
        trainer.step(dataset[:32])
    for cloud in dataset:
        logits = forward(model, cloud)
        if int(np.argmax(logits)) != cloud.label:
            assert np.linalg.norm(input_gradient(model, cloud, cloud.label)) > 0
            return
    # all correct: gradient of a wrong-label loss must still be positive
    assert np.linalg.norm(input_gradient(model, dataset[0], (dataset[0].label + 1) % 3)) > 0


class TestCheckpoint:
    def test_round_trip(self, model, dataset, tmp_path):
        path = tmp_path / "ck.pt"
        save_checkpoint(model, path)
        restored = load_checkpoint(path, model.config)
        assert np.allclose(forward(model, dataset[0]), forward(restored, dataset[0]))

    def test_config_mismatch_rejected(self, model, tmp_path):
        path = tmp_path / "ck.pt"
        save_checkpoint(model, path)
        other = ClassifierConfig(encoder_widths=[8], num_classes=3, seed=0)
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path, other)
