"""Pretraining of the frozen branch networks.

Attribute classifiers use cross-entropy with AdamW; the attribute-agnostic
encoder uses SimCLR-style NT-Xent over two embedding-space augmented views
with momentum SGD. Both anneal the learning rate with a per-epoch cosine schedule.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from mass.embedding import AttributeSpec, DatasetSplit, label_array, stack_vectors
from mass.errors import ConfigError, DataError
from mass.losses import ntxent_batch
from mass.nets import (
    ClassifierNet,
    ContrastiveNet,
    OptimizerState,
    cosine_lr,
    gradients,
    normalize_rows,
    optimizer_step,
)


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class ClassifierHyper:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 0.01
    weight_decay: float = 0.05
    hidden: tuple[int, ...] = (512, 256)

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")

    from_dict = classmethod(_from_dict)


@dataclass
class ContrastiveHyper:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.05
    weight_decay: float = 1e-4
    momentum: float = 0.9
    temperature: float = 0.07
    dropout: float = 0.3
    noise: float = 0.1
    proj_dim: int = 128

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("contrastive batch_size must be >= 2 (no negatives otherwise)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    from_dict = classmethod(_from_dict)


def batch_indices(n: int, batch_size: int, generator: torch.Generator, min_size: int = 1) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=generator)
    chunks = list(torch.split(perm, batch_size))
    if len(chunks) > 1 and len(chunks[-1]) < min_size:
        chunks.pop()
    return chunks


def augment_view(x, dropout: float = 0.3, noise: float = 0.1, generator: torch.Generator | None = None) -> torch.Tensor:
    """Embedding-space view: coordinate dropout, additive Gaussian noise, renormalization.

    Works on a single vector or a ``[B, D]`` batch.
    """
    if not 0 <= dropout < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {dropout}")
    if noise < 0:
        raise ConfigError(f"noise scale must be >= 0, got {noise}")
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.double()
    if dropout == 0 and noise == 0:
        return x.clone()
    out = x
    if dropout > 0:
        keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= dropout
        out = out * keep
    if noise > 0:
        out = out + noise * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return normalize_rows(out)


def _accuracy(net, X: torch.Tensor, y: torch.Tensor) -> float:
    net.eval()
    with torch.no_grad():
        pred = net(X).argmax(dim=1)
    return float((pred == y).float().mean())


def train_classifier(split: DatasetSplit, attr: AttributeSpec, hyper: ClassifierHyper | None = None,
                     seed: int = 0, features: Callable[[torch.Tensor], torch.Tensor] | None = None):
    """Train an attribute head and return ``(best-validation net, per-epoch log)``.

    ``features`` maps raw vectors to the classifier input (used for probing a frozen encoder).
    """
    hyper = hyper or ClassifierHyper()
    if not split.train:
        raise DataError("empty training split")
    X = torch.from_numpy(stack_vectors(split.train))
    y = torch.from_numpy(label_array(split.train, attr.name))
    eval_records = split.validation or split.train
    Xv = torch.from_numpy(stack_vectors(eval_records))
    yv = torch.from_numpy(label_array(eval_records, attr.name))
    missing = sorted(set(range(attr.num_classes)) - set(y.tolist()))
    if missing:
        raise DataError(f"attribute {attr.name!r}: classes {missing} missing from training data")
    if features is not None:
        with torch.no_grad():
            X, Xv = features(X).float(), features(Xv).float()

    net = ClassifierNet(X.shape[1], attr.num_classes, attr.name, hyper.hidden, seed=seed)
    params = dict(net.named_parameters())
    opt = OptimizerState("adamw", lr=hyper.lr, weight_decay=hyper.weight_decay)
    gen = torch.Generator().manual_seed(seed)

    best_acc = _accuracy(net, Xv, yv)
    best_state = copy.deepcopy(net.state_dict())
    log = []
    for epoch in range(hyper.epochs):
        lr = cosine_lr(epoch, hyper.epochs, hyper.lr)
        losses, sizes = [], []
        for idx in batch_indices(len(X), hyper.batch_size, gen, min_size=2):
            xb, yb = X[idx], y[idx]
            net.train()
            g = gradients(lambda: F.cross_entropy(net(xb), yb), net)
            optimizer_step(opt, params, g.params, lr)
            losses.append(g.loss)
            sizes.append(len(idx))
        acc = _accuracy(net, Xv, yv)
        log.append({"epoch": epoch, "lr": lr, "train_loss": float(np.average(losses, weights=sizes)),
                    "val_metric": acc})
        if acc > best_acc or epoch == 0:
            best_acc = acc
            best_state = copy.deepcopy(net.state_dict())
    net.load_state_dict(best_state)
    net.eval()
    return net, log


def train_contrastive(split: DatasetSplit, hyper: ContrastiveHyper | None = None, seed: int = 0):
    """Train encoder + projector on two augmented views per record.

    Returns the final-epoch network and a log whose ``val_metric`` is the
    validation NT-Xent under a fixed augmentation stream.
    """
    hyper = hyper or ContrastiveHyper()
    if not split.train:
        raise DataError("empty training split")
    X = torch.from_numpy(stack_vectors(split.train))
    Xv = torch.from_numpy(stack_vectors(split.validation)) if split.validation else None

    net = ContrastiveNet(X.shape[1], hyper.proj_dim, seed=seed)
    params = dict(net.named_parameters())
    opt = OptimizerState("sgd", lr=hyper.lr, weight_decay=hyper.weight_decay, momentum=hyper.momentum)
    gen = torch.Generator().manual_seed(seed)

    def pair_loss(xb, g):
        v = torch.cat([augment_view(xb, hyper.dropout, hyper.noise, g),
                       augment_view(xb, hyper.dropout, hyper.noise, g)])
        p = net(v)
        return ntxent_batch(p[:len(xb)], p[len(xb):], hyper.temperature)

    log = []
    for epoch in range(hyper.epochs):
        lr = cosine_lr(epoch, hyper.epochs, hyper.lr)
        losses, sizes = [], []
        for idx in batch_indices(len(X), hyper.batch_size, gen, min_size=2):
            xb = X[idx]
            net.train()
            g = gradients(lambda: pair_loss(xb, gen), net)
            optimizer_step(opt, params, g.params, lr)
            losses.append(g.loss)
            sizes.append(len(idx))
        val = None
        if Xv is not None and len(Xv) >= 2:
            net.eval()
            with torch.no_grad():
                val = float(pair_loss(Xv, torch.Generator().manual_seed(seed + 1)))
        log.append({"epoch": epoch, "lr": lr, "train_loss": float(np.average(losses, weights=sizes)),
                    "val_metric": val})
    net.eval()
    return net, log


def hyper_to_dict(hyper) -> dict:
    d = asdict(hyper)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
