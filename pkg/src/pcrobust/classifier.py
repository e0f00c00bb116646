"""Minimal point-cloud classifier: shared per-point MLP, max pooling, dense head.

All tensors are float64 so input gradients check cleanly against central
finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PointCloud
from .errors import (
    CheckpointMismatchError,
    ConfigurationError,
    DivergenceError,
    NumericalFailureError,
)

_LOSS_CAP = 1e6
CHECKPOINT_VERSION = 1


@dataclass
class ClassifierConfig:
    encoder_widths: list = field(default_factory=lambda: [64, 128, 256])
    num_classes: int = 3
    head_width: int = 128
    seed: int = 0

    @property
    def pooled_dim(self):
        return self.encoder_widths[-1]

    def validate(self):
        if not self.encoder_widths:
            raise ConfigurationError("encoder_widths must be non-empty", field="encoder_widths")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2", field="num_classes")


class PointCloudClassifier(nn.Module):
    """Per-point shared encoder + symmetric max pooling + 2-layer head.

    Max pooling over the point axis makes the logits invariant to any
    permutation of the input points.
    """

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        config.validate()
        self.config = config
        torch.manual_seed(config.seed)
        dims = [3] + list(config.encoder_widths)
        self.encoder = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1)
        )
        self.head = nn.ModuleList(
            [
                nn.Linear(config.pooled_dim, config.head_width),
                nn.Linear(config.head_width, config.num_classes),
            ]
        )
        self.double()

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        """points: (B, N, 3) -> logits (B, C). Raises NumericalFailureError
        (with the failing layer index) if any activation goes non-finite."""
        x = points
        layer_index = 0
        for lin in self.encoder:
            x = F.relu(lin(x))
            if not torch.isfinite(x).all():
                raise NumericalFailureError(
                    f"non-finite activation in encoder layer {layer_index}",
                    layer_index=layer_index,
                )
            layer_index += 1
        x = x.max(dim=1).values  # symmetric pooling over points
        x = F.relu(self.head[0](x))
        if not torch.isfinite(x).all():
            raise NumericalFailureError(
                f"non-finite activation in head layer {layer_index}", layer_index=layer_index
            )
        logits = self.head[1](x)
        if not torch.isfinite(logits).all():
            raise NumericalFailureError(
                f"non-finite logits in head layer {layer_index + 1}",
                layer_index=layer_index + 1,
            )
        return logits


def to_tensor(cloud: PointCloud) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(cloud.points))


def batch_tensor(clouds) -> tuple[torch.Tensor, torch.Tensor]:
    pts = torch.stack([to_tensor(c) for c in clouds])
    labels = torch.tensor([c.label for c in clouds], dtype=torch.long)
    return pts, labels


def forward(model: PointCloudClassifier, cloud: PointCloud) -> np.ndarray:
    """Logits for a single cloud."""
    with torch.no_grad():
        return model(to_tensor(cloud).unsqueeze(0))[0].numpy()


def predict(model: PointCloudClassifier, cloud: PointCloud) -> int:
    return int(np.argmax(forward(model, cloud)))


def accuracy(model: PointCloudClassifier, clouds) -> float:
    if not clouds:
        raise ConfigurationError("empty evaluation set")
    pts, labels = batch_tensor(clouds)
    with torch.no_grad():
        pred = model(pts).argmax(dim=1)
    return float((pred == labels).double().mean())


def input_gradient(model: PointCloudClassifier, cloud: PointCloud, label: int) -> np.ndarray:
    """Gradient of the cross-entropy loss w.r.t. the input coordinates, (N, 3)."""
    pts = to_tensor(cloud).unsqueeze(0).requires_grad_(True)
    loss = F.cross_entropy(model(pts), torch.tensor([label]))
    (grad,) = torch.autograd.grad(loss, pts)
    return grad[0].numpy()


class Trainer:
    """Single-writer training wrapper holding the optimizer state."""

    def __init__(self, model: PointCloudClassifier, lr: float = 1e-3):
        self.model = model
        self.optimizer = torch.optim.Adam(model.parameters(), lr=lr)

    def step(self, clouds, loss_tensor: torch.Tensor | None = None) -> float:
        """One optimizer step. With no explicit loss, minimizes batch
        cross-entropy on `clouds`."""
        if not clouds and loss_tensor is None:
            raise ConfigurationError("empty training batch")
        if loss_tensor is None:
            pts, labels = batch_tensor(clouds)
            loss_tensor = F.cross_entropy(self.model(pts), labels)
        value = float(loss_tensor.detach())
        if not np.isfinite(value) or value > _LOSS_CAP:
            raise DivergenceError(f"training loss diverged: {value}")
        self.optimizer.zero_grad()
        loss_tensor.backward()
        self.optimizer.step()
        return value


def save_checkpoint(model: PointCloudClassifier, path) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "state": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path, config: ClassifierConfig | None = None) -> PointCloudClassifier:
    """Load a checkpoint; rejects it if the stored config disagrees with the
    one supplied."""
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"unsupported checkpoint version {blob.get('version')}")
    stored = ClassifierConfig(**blob["config"])
    if config is not None and asdict(config) != asdict(stored):
        raise CheckpointMismatchError("checkpoint config does not match requested config")
    model = PointCloudClassifier(stored)
    model.load_state_dict(blob["state"])
    return model
