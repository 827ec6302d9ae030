"""End-to-end pipeline helpers: pretraining all branches, run + evaluate, ablation grids, noise tuning."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

from mass.embedding import DatasetManifest, DatasetSplit, EmbeddingRecord
from mass.errors import ConfigError
from mass.evaluation import MetricsReport, evaluate, gaussian_noise_baseline, top1_accuracy
from mass.losses import SIMILARITIES, Branches, LossWeights, PreserveTerm, SuppressTerm
from mass.nets import ClassifierNet, ModifierNet, file_sha256, save_checkpoint
from mass.pretrain import ClassifierHyper, ContrastiveHyper, train_classifier, train_contrastive
from mass.training import OptimHyper, RunConfig, train_modifier, transform_dataset

SUITES = ("targets", "weights", "sims")
AGNOSTIC_WEIGHT_GRID = (1.0, 10.0, 40.0, 160.0)


def pretrain_branches(split: DatasetSplit, manifest: DatasetManifest, seed: int = 0,
                      classifier_hyper: ClassifierHyper | None = None,
                      contrastive_hyper: ContrastiveHyper | None = None,
                      attributes: Sequence[str] | None = None) -> tuple[Branches, dict]:
    """One classifier per attribute plus the contrastive encoder; returns ``(branches, logs)``."""
    names = list(attributes or manifest.names)
    classifiers, logs = {}, {}
    for name in names:
        net, log = train_classifier(split, manifest.attribute(name), classifier_hyper, seed)
        classifiers[name] = net
        logs[name] = log
    contrastive, logs["contrastive"] = train_contrastive(split, contrastive_hyper, seed)
    return Branches(classifiers, contrastive), logs


def save_branches(branches: Branches, out_dir, manifest: DatasetManifest) -> dict:
    """Write ``classifiers/<attr>.ckpt`` and ``contrastive.ckpt``; returns the run-config checkpoint block."""
    out_dir = Path(out_dir)
    (out_dir / "classifiers").mkdir(parents=True, exist_ok=True)
    block = {"classifiers": {}, "contrastive": None}
    for name, net in branches.classifiers.items():
        path = out_dir / "classifiers" / f"{name}.ckpt"
        save_checkpoint(path, net, metadata={"manifest_hash": manifest.fingerprint(), "attribute": name})
        block["classifiers"][name] = str(path)
    if branches.contrastive is not None:
        path = out_dir / "contrastive.ckpt"
        save_checkpoint(path, branches.contrastive, metadata={"manifest_hash": manifest.fingerprint()})
        block["contrastive"] = str(path)
    return block


def config_hash(config: RunConfig) -> str:
    d = config.to_dict()
    d.pop("checkpoints", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def provenance(config: RunConfig) -> dict:
    out = {"config_sha256": config_hash(config), "seed": config.seed, "checkpoints": {}}
    paths = dict(config.classifier_paths)
    if config.contrastive_path:
        paths["contrastive"] = config.contrastive_path
    for name, p in sorted(paths.items()):
        path = config.resolve(p)
        if path.exists():
            out["checkpoints"][name] = file_sha256(path)
    return out


@dataclass
class RunResult:
    modifier: ModifierNet
    log: list
    report: MetricsReport
    transformed: list


def run_and_evaluate(config: RunConfig, split: DatasetSplit, manifest: DatasetManifest, branches: Branches,
                     which: str = "validation", cmap_group=None) -> RunResult:
    """Train a modifier, transform the ``which`` split and evaluate it with every available classifier."""
    g, log = train_modifier(config, split, manifest, branches)
    records = split[which]
    transformed = transform_dataset(g, records)
    report = evaluate(manifest, branches.classifiers, records, transformed, cmap_group, provenance(config))
    return RunResult(g, log, report, transformed)


def _with_weights(base: RunConfig, weights: LossWeights) -> RunConfig:
    return replace(base, weights=weights)


def _default_preserve(base: RunConfig) -> PreserveTerm:
    return copy.copy(next(iter(base.weights.preserve.values()), PreserveTerm()))


def ablation_grid(base: RunConfig, suite: str, manifest: DatasetManifest) -> list[tuple[str, RunConfig]]:
    """Expand ``base`` into the labelled configurations of one ablation suite.

    targets: each attribute in turn is the sole suppression target; attributes that
    the base run suppressed or preserved by label are preserved by label, the rest
    are left to the agnostic branch. weights: the agnostic weight over
    ``AGNOSTIC_WEIGHT_GRID``. sims: every suppression term switched to each similarity.
    """
    w = base.weights
    if suite == "targets":
        term = copy.copy(next(iter(w.suppress.values())))
        labelled = set(w.suppress) | set(w.preserve)
        out = []
        for name in manifest.names:
            preserve = {}
            for other in manifest.names:
                if other == name or other not in labelled:
                    continue
                preserve[other] = copy.copy(w.preserve.get(other, _default_preserve(base)))
            weights = replace(w, suppress={name: copy.copy(w.suppress.get(name, term))}, preserve=preserve)
            out.append((f"target={name}", _with_weights(base, weights)))
        return out
    if suite == "weights":
        return [(f"w_agnostic={v:g}", _with_weights(base, replace(w, w_agnostic=v))) for v in AGNOSTIC_WEIGHT_GRID]
    if suite == "sims":
        return [(f"sim={s}", _with_weights(base, replace(w, suppress={k: replace(t, sim=s) for k, t in w.suppress.items()})))
                for s in SIMILARITIES]
    raise ConfigError(f"unknown ablation suite {suite!r}; choose from {SUITES}")


def loss_ablation(base: RunConfig) -> list[tuple[str, RunConfig]]:
    """Suppression only, then + agnostic preservation, then + attribute-specific preservation."""
    w = base.weights
    return [
        ("suppression", _with_weights(base, replace(w, w_agnostic=0.0, preserve={}))),
        ("+agnostic", _with_weights(base, replace(w, preserve={}))),
        ("+agnostic+specific", base),
    ]


DEFAULT_SIGMA_GRID = (0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0, 10.0)


def tune_sigma(accuracy: Callable[[float], float], target: float, tol: float = 0.03,
               grid=DEFAULT_SIGMA_GRID, max_bisect: int = 30) -> tuple[float, float]:
    """Noise level whose ``accuracy(sigma)`` lands within ``tol`` of ``target``.

    Grid search for a bracketing pair, then bisection. Returns ``(sigma, accuracy)``;
    when no grid value brackets the target the closest grid point is returned.
    """
    points = [(0.0, accuracy(0.0))] + [(s, accuracy(s)) for s in grid]
    for s, a in points:
        if abs(a - target) <= tol:
            return s, a
    for (lo, a_lo), (hi, a_hi) in zip(points, points[1:]):
        if a_lo > target > a_hi:
            for _ in range(max_bisect):
                mid = (lo + hi) / 2
                a_mid = accuracy(mid)
                if abs(a_mid - target) <= tol:
                    return mid, a_mid
                if a_mid > target:
                    lo = mid
                else:
                    hi = mid
            return mid, a_mid
    return min(points, key=lambda p: abs(p[1] - target))


def tune_noise_sigma(records: Sequence[EmbeddingRecord], classifier: ClassifierNet, target: float,
                     tol: float = 0.03, seed: int = 0, grid=DEFAULT_SIGMA_GRID,
                     max_bisect: int = 30) -> tuple[float, float]:
    """``tune_sigma`` for the noise baseline's accuracy on ``classifier.attribute``."""
    def acc(sigma):
        return top1_accuracy(classifier, gaussian_noise_baseline(records, sigma, seed))

    return tune_sigma(acc, target, tol, grid, max_bisect)


def reference_run(seed: int = 0, epochs: int = 100) -> RunConfig:
    """Loss weights used for the synthetic reference experiments (A0 suppressed, A1 preserved by label)."""
    weights = LossWeights(
        suppress={"A0": SuppressTerm(1.0, 1.0, "neg_kl")},
        preserve={"A1": PreserveTerm(1.0, "neg_kl")},
        w_rec=0.1,
        w_agnostic=2.0,
        temperature=0.07,
    )
    return RunConfig(weights, OptimHyper(epochs=epochs), seed)
