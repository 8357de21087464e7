"""Plain cross-entropy training, shared by teacher fitting and the ERM baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError, TrainingError


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    learning_rate: float = 1e-3
    batch_size: int = 128
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InputError("epochs/batch_size must be >=1 and learning_rate > 0")


def _as_tensor(images, labels):
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    if x.dim() != 4 or x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise InputError("need matching non-empty (N,C,H,W) images and N labels")
    return x, y


def train_classifier(net, images, labels, cfg: TrainConfig,
                     val_images=None, val_labels=None) -> dict:
    """Fit `net` in place with Adam on cross-entropy; returns a history dict."""
    x, y = _as_tensor(images, labels)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate,
                           weight_decay=cfg.weight_decay)
    history = {"epoch_loss": [], "val_accuracy": []}
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        net.train()
        perm = torch.randperm(n, generator=gen)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(net(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history["epoch_loss"].append(float(np.mean(losses)))
        if val_images is not None:
            history["val_accuracy"].append(
                eval_accuracy(net, val_images, val_labels)
            )
    net.eval()
    return history


def eval_accuracy(net, images, labels, batch_size: int = 512) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    x, y = _as_tensor(images, labels)
    net.eval()
    hits = 0
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            logits = net(x[start:start + batch_size]).numpy()
            preds = np.argmax(logits, axis=1)
            hits += int((preds == y[start:start + batch_size].numpy()).sum())
    return hits / x.shape[0]
