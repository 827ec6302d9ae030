"""Evaluation: top-1 accuracy, cMAP, prediction entropy, suppression ratios, noise baseline."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np
import torch

from mass.embedding import DatasetManifest, EmbeddingRecord, label_array, stack_vectors
from mass.errors import ConfigError, DataError
from mass.losses import entropy
from mass.nets import ClassifierNet

# above this many positives AP falls back to float accumulation (rational sums get slow)
EXACT_AP_LIMIT = 5000
AP_CONVENTION = "precision averaged at the rank of each positive; no interpolation; ties keep input order"


def predict_logits(classifier: ClassifierNet, records: Sequence[EmbeddingRecord]) -> torch.Tensor:
    if not records:
        raise DataError("cannot evaluate on an empty record set")
    X = torch.from_numpy(stack_vectors(records))
    classifier.eval()
    with torch.no_grad():
        return classifier(X.to(next(classifier.parameters()).dtype))


def top1_accuracy(classifier: ClassifierNet, records: Sequence[EmbeddingRecord], attribute: str | None = None) -> float:
    """Fraction of records whose argmax logit equals the label (ties go to the lowest class)."""
    attribute = attribute or classifier.attribute
    logits = predict_logits(classifier, records).numpy()
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == label_array(records, attribute)))


def prediction_entropy_stats(classifier: ClassifierNet, records: Sequence[EmbeddingRecord]) -> tuple[float, float, float]:
    h = entropy(predict_logits(classifier, records).double()).numpy()
    return float(h.mean()), float(h.min()), float(h.max())


def average_precision(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.sum() == 0:
        raise DataError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    if len(ranks) <= EXACT_AP_LIMIT:
        # rational accumulation, so the result is the correctly rounded AP
        total = sum((Fraction(i, int(r)) for i, r in enumerate(ranks, 1)), Fraction(0))
        return float(total / len(ranks))
    precision_at_hits = np.arange(1, len(ranks) + 1) / ranks
    return math.fsum(precision_at_hits) / len(ranks)


@dataclass
class CmapResult:
    value: float | None
    per_attribute: list[float | None]
    excluded: list[int] = field(default_factory=list)


def cmap(scores: Sequence, labels: Sequence) -> CmapResult:
    """Macro-average of per-attribute average precision over binary attributes.

    Attributes without a positive are excluded and listed in ``excluded``.
    """
    if len(scores) != len(labels):
        raise DataError("scores and labels must cover the same attributes")
    aps, excluded = [], []
    for k, (s, y) in enumerate(zip(scores, labels)):
        y = np.asarray(y)
        if len(s) != len(y):
            raise DataError(f"attribute {k}: {len(s)} scores vs {len(y)} labels")
        if not np.isin(y, (0, 1)).all():
            raise DataError(f"attribute {k}: cMAP labels must be binary")
        if y.sum() == 0:
            excluded.append(k)
            aps.append(None)
            continue
        aps.append(average_precision(s, y))
    valid = [a for a in aps if a is not None]
    value = float(sum(map(Fraction, valid), Fraction(0)) / len(valid)) if valid else None
    return CmapResult(value, aps, excluded)


def gaussian_noise_baseline(records: Sequence[EmbeddingRecord], sigma: float, seed: int = 0) -> list[EmbeddingRecord]:
    """``x' = normalize(x + sigma * eps)`` with per-coordinate standard normal ``eps``."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if not records:
        return []
    X = stack_vectors(records).astype(np.float64)
    if sigma > 0:
        X = X + sigma * np.random.default_rng(seed).standard_normal(X.shape)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    X = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0).astype(np.float32)
    if sigma == 0:
        X = stack_vectors(records)
    return [EmbeddingRecord(r.id, X[i].copy(), dict(r.labels)) for i, r in enumerate(records)]


def suppression_ratio(original: float, transformed: float) -> float | None:
    """Relative drop ``(original - transformed) / original``; ``None`` when ``original`` is 0."""
    if original <= 0:
        return None
    return (original - transformed) / original


@dataclass
class AttributeMetrics:
    original_accuracy: float
    transformed_accuracy: float
    chance: float
    suppression_ratio: float | None
    mean_prediction_entropy: float
    min_prediction_entropy: float
    max_prediction_entropy: float
    original_mean_prediction_entropy: float
    flags: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    attributes: dict[str, AttributeMetrics]
    unreported: list[str]
    reconstruction: dict[str, float]
    cmap: dict | None = None
    provenance: dict = field(default_factory=dict)
    conventions: dict = field(default_factory=lambda: {
        "average_precision": AP_CONVENTION,
        "suppression_ratio": "(original - transformed) / original; null when original accuracy is 0",
    })

    def accuracy(self, name: str, which: str = "transformed") -> float:
        m = self.attributes[name]
        return m.transformed_accuracy if which == "transformed" else m.original_accuracy

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        attrs = {k: AttributeMetrics(**v) for k, v in d["attributes"].items()}
        return cls(attrs, d["unreported"], d["reconstruction"], d.get("cmap"), d.get("provenance", {}),
                   d.get("conventions", {}))


def _pair(original, transformed) -> list[EmbeddingRecord]:
    by_id = {r.id: r for r in transformed}
    if len(by_id) != len(original) or any(r.id not in by_id for r in original):
        raise DataError("original and transformed record sets do not cover the same ids")
    return [by_id[r.id] for r in original]


def evaluate(manifest: DatasetManifest, classifiers: Mapping[str, ClassifierNet],
             original: Sequence[EmbeddingRecord], transformed: Sequence[EmbeddingRecord],
             cmap_group: Sequence[str] | None = None, provenance: dict | None = None) -> MetricsReport:
    """Run the same frozen classifiers over original and transformed records."""
    if not original:
        raise DataError("cannot evaluate an empty record set")
    transformed = _pair(original, transformed)
    attrs, unreported = {}, []
    for spec in manifest.attributes:
        clf = classifiers.get(spec.name)
        if clf is None:
            unreported.append(spec.name)
            continue
        if clf.num_classes != spec.num_classes:
            raise ConfigError(f"classifier for {spec.name!r} has {clf.num_classes} classes, "
                              f"manifest says {spec.num_classes}")
        orig = top1_accuracy(clf, original, spec.name)
        new = top1_accuracy(clf, transformed, spec.name)
        h_mean, h_min, h_max = prediction_entropy_stats(clf, transformed)
        ratio = suppression_ratio(orig, new)
        attrs[spec.name] = AttributeMetrics(
            original_accuracy=orig,
            transformed_accuracy=new,
            chance=spec.chance,
            suppression_ratio=ratio,
            mean_prediction_entropy=h_mean,
            min_prediction_entropy=h_min,
            max_prediction_entropy=h_max,
            original_mean_prediction_entropy=prediction_entropy_stats(clf, original)[0],
            flags=[] if ratio is not None else ["suppression_ratio undefined: original accuracy is 0"],
        )

    dist = np.linalg.norm(stack_vectors(transformed).astype(np.float64)
                          - stack_vectors(original).astype(np.float64), axis=1)
    report = MetricsReport(attrs, unreported, {"mean": float(dist.mean()), "max": float(dist.max())},
                           provenance=dict(provenance or {}))
    if cmap_group:
        report.cmap = _cmap_block(manifest, classifiers, original, transformed, cmap_group)
    return report


def _binary_scores(clf: ClassifierNet, records) -> np.ndarray:
    return torch.softmax(predict_logits(clf, records).double(), dim=1)[:, 1].numpy()


def _cmap_block(manifest, classifiers, original, transformed, group) -> dict:
    names = []
    for name in group:
        spec = manifest.attribute(name)
        if spec.num_classes != 2:
            raise ConfigError(f"cMAP group attribute {name!r} is not binary")
        if name not in classifiers:
            raise ConfigError(f"cMAP group attribute {name!r} has no classifier")
        names.append(name)
    labels = [label_array(original, n) for n in names]
    res_o = cmap([_binary_scores(classifiers[n], original) for n in names], labels)
    res_t = cmap([_binary_scores(classifiers[n], transformed) for n in names], labels)
    out = {
        "attributes": names,
        "original": res_o.value,
        "transformed": res_t.value,
        "suppression_ratio": suppression_ratio(res_o.value, res_t.value) if res_o.value is not None else None,
        "excluded": [names[k] for k in res_o.excluded],
    }
    return out


def render_table(rows: Mapping[str, MetricsReport], attributes: Sequence[str] | None = None) -> str:
    """Plain-text table: one row per configuration, one accuracy column per attribute."""
    rows = dict(rows)
    if not rows:
        return ""
    first = next(iter(rows.values()))
    attributes = list(attributes or first.attributes)
    label_w = max(len("configuration"), *(len(k) for k in rows))
    header = "configuration".ljust(label_w) + "".join(f"  {a:>10}" for a in attributes)
    lines = [header, "-" * len(header)]
    orig = "original".ljust(label_w) + "".join(
        f"  {first.attributes[a].original_accuracy:>10.4f}" if a in first.attributes else f"  {'-':>10}"
        for a in attributes)
    lines.append(orig)
    for label, rep in rows.items():
        cells = "".join(
            f"  {rep.attributes[a].transformed_accuracy:>10.4f}" if a in rep.attributes else f"  {'-':>10}"
            for a in attributes)
        lines.append(label.ljust(label_w) + cells)
    return "\n".join(lines) + "\n"
