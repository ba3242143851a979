"""Small CNN benign/malignant classifier (conv-relu-pool x3, dense, sigmoid)."""

from __future__ import annotations

import numpy as np

from . import nn
from .params import ParamSet
from .rng import stream

INIT_SEED = 0


def build_classifier(seed: int = INIT_SEED, side: int = 32) -> nn.Sequential:
    rng = stream(seed, "classifier-init")
    flat = 32 * (side // 8) ** 2
    return nn.Sequential(
        [
            ("conv1", nn.Conv2d(1, 8, 3, rng, padding=1)),
            ("relu1", nn.ReLU()),
            ("pool1", nn.AvgPool2d(2)),
            ("conv2", nn.Conv2d(8, 16, 3, rng, padding=1)),
            ("relu2", nn.ReLU()),
            ("pool2", nn.AvgPool2d(2)),
            ("conv3", nn.Conv2d(16, 32, 3, rng, padding=1)),
            ("relu3", nn.ReLU()),
            ("pool3", nn.AvgPool2d(2)),
            ("flat", nn.Flatten()),
            ("head", nn.Dense(flat, 1, rng)),
            ("prob", nn.Sigmoid()),
        ]
    )


def classifier_with(params: ParamSet) -> nn.Sequential:
    model = build_classifier()
    model.load(params)
    return model


def predict(model: nn.Sequential, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Malignancy probabilities, shape (N,)."""
    if len(x) == 0:
        return np.zeros(0, np.float32)
    return np.concatenate([model(x[i : i + batch])[:, 0] for i in range(0, len(x), batch)])


def loss_and_grads(model: nn.Sequential, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    prob, inputs = model.forward(x, keep=True)
    loss, g = nn.bce_loss(prob, y.reshape(-1, 1))
    _, grads = model.backward(inputs, g)
    return loss, grads
