"""Supervised steps and batched inference shared by the train and distill commands."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import SGD, no_grad
from .autodiff import functional as F
from .model import GMViT, StageTimer


def train_step(model: GMViT, images, positions, labels, optimizer: SGD, epoch: float,
               literal_label_softmax: bool = False) -> dict[str, float]:
    """Hard-label cross-entropy step."""
    model.train()
    out = model(images, positions)
    loss = F.cross_entropy(out.logits, labels, literal_label_softmax)
    loss.backward()
    lr = optimizer.step(epoch)
    acc = float((out.logits.data.argmax(axis=1) == np.asarray(labels)).mean())
    return {"hard": float(loss.data), "total": float(loss.data), "lr": lr, "acc": acc}


@dataclass
class Predictions:
    logits: np.ndarray
    retrieval: np.ndarray
    global_: np.ndarray


def predict(model: GMViT, images, positions, batch_size: int = 8,
            timer: StageTimer | None = None) -> Predictions:
    """Eval-mode outputs for a whole split, in order."""
    if model.training:
        raise ValueError("predict needs the model in eval mode")
    logits, retr, glob = [], [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out = model(images[i:i + batch_size], positions, timer=timer)
            logits.append(out.logits.data)
            retr.append(out.f_retrieval.data)
            glob.append(out.f_global.data)
    return Predictions(np.concatenate(logits), np.concatenate(retr), np.concatenate(glob))


def accuracy(model: GMViT, images, positions, labels, batch_size: int = 40) -> float:
    was = model.training
    model.eval()
    p = predict(model, images, positions, batch_size)
    model.train(was)
    return float((p.logits.argmax(axis=1) == np.asarray(labels)).mean())
