"""Training the data modifier against frozen branch networks, and applying it to datasets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from mass.embedding import DatasetManifest, DatasetSplit, EmbeddingRecord, label_array, stack_vectors
from mass.errors import ConfigError, DataError, NumericalError
from mass.losses import Branches, LossWeights, PreserveTerm, SuppressTerm, check_branches, sim_cosine, total_loss
from mass.nets import (
    ClassifierNet,
    ContrastiveNet,
    ModifierNet,
    OptimizerState,
    adamw_step,
    cosine_lr,
    freeze,
    gradients,
    load_checkpoint,
)
from mass.pretrain import batch_indices

RUN_KEYS = {"manifest", "suppress", "preserve", "w_rec", "w_agnostic", "temperature",
            "optimizer", "seed", "modifier_hidden", "checkpoints"}


@dataclass
class OptimHyper:
    lr: float = 1e-3
    weight_decay: float = 0.05
    epochs: int = 100
    batch_size: int = 256

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("optimizer lr must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class RunConfig:
    """One modifier-training run. ``suppress`` must be nonempty and disjoint from ``preserve``."""

    weights: LossWeights
    optimizer: OptimHyper = field(default_factory=OptimHyper)
    seed: int = 0
    modifier_hidden: list[int] | None = None
    manifest: str | None = None
    classifier_paths: dict[str, str] = field(default_factory=dict)
    contrastive_path: str | None = None
    base_dir: Path | None = None

    def __post_init__(self):
        if not self.weights.suppress:
            raise ConfigError("run config must suppress at least one attribute")

    @property
    def suppressed(self) -> list[str]:
        return list(self.weights.suppress)

    @property
    def preserved(self) -> list[str]:
        return list(self.weights.preserve)

    def validate(self, manifest: DatasetManifest) -> None:
        for name in (*self.weights.suppress, *self.weights.preserve):
            manifest.attribute(name)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        return path

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "RunConfig":
        unknown = set(d) - RUN_KEYS
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        try:
            suppress = {}
            for name, t in d.get("suppress", {}).items():
                _strict(t, {"w", "h", "sim"}, f"suppress.{name}")
                suppress[name] = SuppressTerm(t.get("w", 1.0), t.get("h", 1.0), t.get("sim", "cosine"))
            preserve = {}
            for name, t in d.get("preserve", {}).items():
                _strict(t, {"w", "sim"}, f"preserve.{name}")
                preserve[name] = PreserveTerm(t.get("w", 1.0), t.get("sim", "neg_kl"))
            weights = LossWeights(suppress, preserve, d.get("w_rec", 1.0), d.get("w_agnostic", 10.0),
                                  d.get("temperature", 0.07))
            opt = d.get("optimizer", {})
            _strict(opt, {"lr", "weight_decay", "epochs", "batch_size"}, "optimizer")
            ck = d.get("checkpoints", {})
            _strict(ck, {"classifiers", "contrastive"}, "checkpoints")
            return cls(
                weights=weights,
                optimizer=OptimHyper(**opt),
                seed=int(d.get("seed", 0)),
                modifier_hidden=d.get("modifier_hidden"),
                manifest=d.get("manifest"),
                classifier_paths=dict(ck.get("classifiers", {})),
                contrastive_path=ck.get("contrastive"),
                base_dir=Path(base_dir) if base_dir is not None else None,
            )
        except TypeError as e:
            raise ConfigError(f"invalid run config: {e}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"run config not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg})") from None
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        w = self.weights.to_dict()
        out = {
            "suppress": w["suppress"],
            "preserve": w["preserve"],
            "w_rec": w["w_rec"],
            "w_agnostic": w["w_agnostic"],
            "temperature": w["temperature"],
            "optimizer": {"lr": self.optimizer.lr, "weight_decay": self.optimizer.weight_decay,
                          "epochs": self.optimizer.epochs, "batch_size": self.optimizer.batch_size},
            "seed": self.seed,
            "checkpoints": {"classifiers": dict(self.classifier_paths), "contrastive": self.contrastive_path},
        }
        if self.manifest is not None:
            out["manifest"] = self.manifest
        if self.modifier_hidden is not None:
            out["modifier_hidden"] = list(self.modifier_hidden)
        return out


def _strict(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def required_checkpoints(config: RunConfig) -> list[Path]:
    """Every frozen checkpoint the run needs; raises if one is not configured or missing."""
    paths = []
    for name in (*config.weights.suppress, *config.weights.preserve):
        if name not in config.classifier_paths:
            raise ConfigError(f"no classifier checkpoint configured for attribute {name!r}")
        paths.append(config.resolve(config.classifier_paths[name]))
    if config.weights.w_agnostic > 0:
        if not config.contrastive_path:
            raise ConfigError("w_agnostic > 0 but no contrastive checkpoint configured")
        paths.append(config.resolve(config.contrastive_path))
    for p in paths:
        if not p.exists():
            raise ConfigError(f"frozen checkpoint not found: {p}")
    return paths


def load_branches(config: RunConfig, manifest: DatasetManifest) -> Branches:
    required_checkpoints(config)
    classifiers = {}
    for name in (*config.weights.suppress, *config.weights.preserve):
        net, _, _ = load_checkpoint(config.resolve(config.classifier_paths[name]), manifest)
        if not isinstance(net, ClassifierNet):
            raise ConfigError(f"checkpoint for {name!r} is not a classifier")
        if net.num_classes != manifest.attribute(name).num_classes:
            raise ConfigError(f"classifier for {name!r} has {net.num_classes} classes, manifest says "
                              f"{manifest.attribute(name).num_classes}")
        classifiers[name] = net
    contrastive = None
    if config.weights.w_agnostic > 0:
        contrastive, _, _ = load_checkpoint(config.resolve(config.contrastive_path), manifest)
        if not isinstance(contrastive, ContrastiveNet):
            raise ConfigError("contrastive checkpoint holds a different network kind")
    return Branches(classifiers, contrastive)


def _labels(records, names) -> dict[str, torch.Tensor]:
    return {n: torch.from_numpy(label_array(records, n)) for n in names}


def train_modifier(config: RunConfig, split: DatasetSplit, manifest: DatasetManifest,
                   branches: Branches | None = None):
    """Minimize the total loss over the modifier alone; returns ``(modifier, epoch log)``."""
    config.validate(manifest)
    if branches is None:
        branches = load_branches(config, manifest)
    check_branches(config.weights, branches)
    for net in branches.classifiers.values():
        freeze(net)
    if branches.contrastive is not None:
        freeze(branches.contrastive)
    watch = [*branches.classifiers.values(), *([branches.contrastive] if branches.contrastive else [])]

    X = torch.from_numpy(stack_vectors(split.train))
    if X.shape[1] != manifest.dimension:
        raise DataError(f"data dimension {X.shape[1]} != manifest dimension {manifest.dimension}")
    label_names = [n for n in (*config.weights.suppress, *config.weights.preserve)]
    Y = _labels(split.train, label_names)
    Xv = torch.from_numpy(stack_vectors(split.validation)) if split.validation else None

    hyper = config.optimizer
    g_net = ModifierNet(manifest.dimension, config.modifier_hidden, seed=config.seed)
    params = dict(g_net.named_parameters())
    opt = OptimizerState("adamw", lr=hyper.lr, weight_decay=hyper.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)

    log = []
    for epoch in range(hyper.epochs):
        lr = cosine_lr(epoch, hyper.epochs, hyper.lr)
        sums: dict[str, float] = {}
        seen = 0
        for b, idx in enumerate(batch_indices(len(X), hyper.batch_size, gen)):
            xb = X[idx]
            yb = {k: v[idx] for k, v in Y.items()}
            holder = {}

            def loss_fn():
                g_net.train()
                holder["bd"] = total_loss(xb, yb, g_net, branches, config.weights)
                return holder["bd"].total

            try:
                grads = gradients(loss_fn, g_net, watch=watch)
            except NumericalError as e:
                raise NumericalError(f"epoch {epoch} batch {b}: {e}") from None
            adamw_step(opt, params, grads.params, lr)
            for k, v in holder["bd"].to_dict().items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            seen += len(idx)
        entry = {"epoch": epoch, "lr": lr}
        entry.update({k: v / seen for k, v in sums.items() if k != "total"})
        entry["total"] = sums["total"] / seen
        if Xv is not None:
            entry["val_suppressed_cosine"] = suppressed_feature_cosine(g_net, branches, config.suppressed, Xv)
        log.append(entry)
    g_net.eval()
    return g_net, log


def suppressed_feature_cosine(g_net: ModifierNet, branches: Branches, names: Sequence[str],
                              X: torch.Tensor) -> dict[str, float]:
    """Mean cosine between classifier features of ``x`` and ``G(x)`` per suppressed attribute."""
    g_net.eval()
    out = {}
    with torch.no_grad():
        Xp = g_net(X)
        for n in names:
            clf = branches.classifiers[n]
            clf.eval()
            out[n] = float(sim_cosine(clf.heads(Xp)[0], clf.heads(X)[0]).mean())
    return out


def transform_dataset(g_net: ModifierNet, records: Sequence[EmbeddingRecord],
                      batch_size: int = 4096) -> list[EmbeddingRecord]:
    """Replace every vector by ``G(x)`` in eval mode; ids and labels are carried over."""
    if not records:
        return []
    X = torch.from_numpy(stack_vectors(records))
    if X.shape[1] != g_net.dim:
        raise DataError(f"records have dimension {X.shape[1]}, modifier expects {g_net.dim}")
    g_net.eval()
    parts = []
    with torch.no_grad():
        for chunk in torch.split(X.to(next(g_net.parameters()).dtype), batch_size):
            parts.append(g_net(chunk).float().numpy())
    Xp = np.concatenate(parts)
    return [EmbeddingRecord(r.id, Xp[i].copy(), dict(r.labels)) for i, r in enumerate(records)]


def check_log_additivity(log: list[dict], tol: float = 1e-9) -> bool:
    for entry in log:
        parts = [v for k, v in entry.items() if "/" in k or k in ("reconstruction", "agnostic")]
        if not math.isclose(sum(parts), entry["total"], abs_tol=tol):
            return False
    return True
