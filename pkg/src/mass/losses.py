"""Suppression and preservation losses over batches of original/transformed embeddings.

All probabilities go through ``log_softmax``; logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from mass.errors import ConfigError, DataError, NumericalError
from mass.nets import ClassifierNet, ContrastiveNet, ModifierNet, normalize_rows

SIMILARITIES = ("cosine", "neg_kl", "neg_ce")


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite {what}")


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def sim_cosine(z_prime: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity; a zero row has similarity 0 with anything."""
    _check_shapes(z_prime, z)
    return (normalize_rows(z_prime) * normalize_rows(z)).sum(dim=-1)


def sim_neg_kl(logits_prime: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """``-KL(softmax(logits') || softmax(logits))`` per row."""
    _check_shapes(logits_prime, logits)
    _check_finite(logits_prime, "logits")
    _check_finite(logits, "logits")
    lp = F.log_softmax(logits_prime, dim=-1)
    lq = F.log_softmax(logits, dim=-1)
    return -(lp.exp() * (lp - lq)).sum(dim=-1)


def sim_neg_ce(logits_prime: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """``log softmax(logits')[label]`` per row, i.e. minus the cross-entropy to the one-hot label."""
    _check_finite(logits_prime, "logits")
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = logits_prime.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"label out of range for {n_classes} classes")
    lp = F.log_softmax(logits_prime, dim=-1)
    return lp.gather(-1, labels[:, None])[:, 0]


def entropy(logits: torch.Tensor) -> torch.Tensor:
    """Shannon entropy of ``softmax(logits)`` per row, with ``0 ln 0 = 0``."""
    _check_finite(logits, "logits")
    lp = F.log_softmax(logits, dim=-1)
    return -(lp.exp() * lp).sum(dim=-1)


def similarity(kind: str, heads_prime, heads, labels=None) -> torch.Tensor:
    """Dispatch one of the three similarity measures on ``(features, logits)`` pairs."""
    z_prime, logits_prime = heads_prime
    z, logits = heads
    if kind == "cosine":
        return sim_cosine(z_prime, z)
    if kind == "neg_kl":
        return sim_neg_kl(logits_prime, logits)
    if kind == "neg_ce":
        if labels is None:
            raise ConfigError("neg_ce similarity needs ground-truth labels")
        return sim_neg_ce(logits_prime, labels)
    raise ConfigError(f"unknown similarity {kind!r}; choose from {SIMILARITIES}")


@dataclass
class SuppressTerm:
    weight: float = 1.0
    entropy_weight: float = 1.0
    sim: str = "cosine"

    def __post_init__(self):
        if self.sim not in SIMILARITIES:
            raise ConfigError(f"unknown similarity {self.sim!r}; choose from {SIMILARITIES}")
        if not (math.isfinite(self.weight) and self.weight >= 0):
            raise ConfigError("suppression weight must be finite and >= 0")
        if not (math.isfinite(self.entropy_weight) and self.entropy_weight >= 0):
            raise ConfigError("entropy weight must be finite and >= 0")


@dataclass
class PreserveTerm:
    weight: float = 1.0
    sim: str = "neg_kl"

    def __post_init__(self):
        if self.sim not in SIMILARITIES:
            raise ConfigError(f"unknown similarity {self.sim!r}; choose from {SIMILARITIES}")
        if not (math.isfinite(self.weight) and self.weight >= 0):
            raise ConfigError("preservation weight must be finite and >= 0")


@dataclass
class LossWeights:
    suppress: dict[str, SuppressTerm] = field(default_factory=dict)
    preserve: dict[str, PreserveTerm] = field(default_factory=dict)
    w_rec: float = 1.0
    w_agnostic: float = 10.0
    temperature: float = 0.07

    def __post_init__(self):
        overlap = set(self.suppress) & set(self.preserve)
        if overlap:
            raise ConfigError(f"attributes both suppressed and preserved: {sorted(overlap)}")
        for name, v in (("w_rec", self.w_rec), ("w_agnostic", self.w_agnostic)):
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0")
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ConfigError("temperature must be finite and > 0")

    def to_dict(self) -> dict:
        return {
            "suppress": {k: {"w": t.weight, "h": t.entropy_weight, "sim": t.sim} for k, t in self.suppress.items()},
            "preserve": {k: {"w": t.weight, "sim": t.sim} for k, t in self.preserve.items()},
            "w_rec": self.w_rec,
            "w_agnostic": self.w_agnostic,
            "temperature": self.temperature,
        }


@dataclass
class Branches:
    """Frozen networks of the suppression and preservation branches."""

    classifiers: dict[str, ClassifierNet] = field(default_factory=dict)
    contrastive: ContrastiveNet | None = None


def _heads(classifier: ClassifierNet, x: torch.Tensor):
    classifier.eval()
    return classifier.heads(x)


def suppression_parts(classifier: ClassifierNet, x: torch.Tensor, x_prime: torch.Tensor,
                      labels, term: SuppressTerm) -> tuple[torch.Tensor, torch.Tensor]:
    """``(w * mean sim(x', x), -h * mean H(p_x'))``; their sum is the suppression loss."""
    heads_prime = _heads(classifier, x_prime)
    heads = _heads(classifier, x)
    sim = similarity(term.sim, heads_prime, heads, labels)
    ent = entropy(heads_prime[1])
    return term.weight * sim.mean(), -term.entropy_weight * ent.mean()


def suppression_loss(classifier, x, x_prime, labels, term: SuppressTerm) -> torch.Tensor:
    sim_part, ent_part = suppression_parts(classifier, x, x_prime, labels, term)
    return sim_part + ent_part


def reconstruction_loss(x_prime: torch.Tensor, x: torch.Tensor, w_rec: float = 1.0) -> torch.Tensor:
    """``w_rec * mean ||x' - x||``; the gradient at ``x' = x`` is taken as zero.

    Distances within rounding noise of zero (``16 * eps`` of the dtype) count as
    exactly zero. Re-normalizing a unit vector moves it by about one ulp, and
    the norm's subgradient there is a unit vector in a noise direction.
    """
    _check_shapes(x_prime, x)
    sq = ((x_prime - x) ** 2).sum(dim=-1)
    floor = 16 * torch.finfo(sq.dtype).eps
    positive = sq > floor * floor
    dist = torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    return w_rec * dist.mean()


def ntxent_batch(p: torch.Tensor, p_prime: torch.Tensor, temperature: float) -> torch.Tensor:
    """Mean NT-Xent over the ``2B`` anchors where ``(p_i, p'_i)`` are the positive pairs.

    Each anchor's denominator runs over every item of the other view and every
    other item of its own view.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    _check_shapes(p, p_prime)
    B = p.shape[0]
    if B < 1:
        raise DataError("NT-Xent needs at least one pair")
    a = normalize_rows(p)
    b = normalize_rows(p_prime)
    self_mask = torch.eye(B, dtype=torch.bool)
    cross = a @ b.T / temperature
    aa = (a @ a.T / temperature).masked_fill(self_mask, float("-inf"))
    bb = (b @ b.T / temperature).masked_fill(self_mask, float("-inf"))
    pos = torch.diagonal(cross)
    l_orig = torch.logsumexp(torch.cat([cross, aa], dim=1), dim=1) - pos
    l_trans = torch.logsumexp(torch.cat([cross.T, bb], dim=1), dim=1) - pos
    return torch.cat([l_orig, l_trans]).mean()


def agnostic_loss(net: ContrastiveNet, x: torch.Tensor, x_prime: torch.Tensor,
                  w_agnostic: float, temperature: float) -> torch.Tensor:
    net.eval()
    return w_agnostic * ntxent_batch(net(x), net(x_prime), temperature)


def preservation_specific_loss(classifier: ClassifierNet, x, x_prime, labels, term: PreserveTerm) -> torch.Tensor:
    """``-w * mean sim(x', x)``."""
    sim = similarity(term.sim, _heads(classifier, x_prime), _heads(classifier, x), labels)
    return -term.weight * sim.mean()


@dataclass
class LossBreakdown:
    suppression_sim: dict[str, torch.Tensor]
    suppression_entropy: dict[str, torch.Tensor]
    reconstruction: torch.Tensor
    agnostic: torch.Tensor
    preservation: dict[str, torch.Tensor]

    def components(self) -> list[tuple[str, torch.Tensor]]:
        out = []
        for k in self.suppression_sim:
            out.append((f"suppress/{k}/sim", self.suppression_sim[k]))
            out.append((f"suppress/{k}/entropy", self.suppression_entropy[k]))
        out.append(("reconstruction", self.reconstruction))
        out.append(("agnostic", self.agnostic))
        out.extend((f"preserve/{k}", v) for k, v in self.preservation.items())
        return out

    @property
    def total(self) -> torch.Tensor:
        parts = [v for _, v in self.components()]
        out = parts[0]
        for v in parts[1:]:
            out = out + v
        return out

    def to_dict(self) -> dict[str, float]:
        values = {k: float(v.detach()) for k, v in self.components()}
        values["total"] = sum(values.values())
        return values


def _label_tensor(labels: dict, name: str) -> torch.Tensor:
    if name not in labels:
        raise DataError(f"batch has no labels for attribute {name!r}")
    return torch.as_tensor(labels[name], dtype=torch.long)


def check_branches(weights: LossWeights, branches: Branches) -> None:
    missing = [a for a in (*weights.suppress, *weights.preserve) if a not in branches.classifiers]
    if missing:
        raise ConfigError(f"no frozen classifier for configured attributes {missing}")
    if weights.w_agnostic > 0 and branches.contrastive is None:
        raise ConfigError("w_agnostic > 0 but no contrastive network was given")


def total_loss(x: torch.Tensor, labels: dict, modifier: ModifierNet | None, branches: Branches,
               weights: LossWeights, x_prime: torch.Tensor | None = None) -> LossBreakdown:
    """Every loss term for one batch. Pass ``x_prime`` to skip applying ``modifier``."""
    check_branches(weights, branches)
    if x_prime is None:
        x_prime = modifier(x)
    zero = x.new_zeros(())
    sup_sim, sup_ent = {}, {}
    for name, term in weights.suppress.items():
        y = _label_tensor(labels, name) if term.sim == "neg_ce" else None
        sup_sim[name], sup_ent[name] = suppression_parts(branches.classifiers[name], x, x_prime, y, term)
    rec = reconstruction_loss(x_prime, x, weights.w_rec)
    agn = zero
    if weights.w_agnostic > 0:
        agn = agnostic_loss(branches.contrastive, x, x_prime, weights.w_agnostic, weights.temperature)
    pres = {}
    for name, term in weights.preserve.items():
        y = _label_tensor(labels, name) if term.sim == "neg_ce" else None
        pres[name] = preservation_specific_loss(branches.classifiers[name], x, x_prime, y, term)
    return LossBreakdown(sup_sim, sup_ent, rec, agn, pres)
