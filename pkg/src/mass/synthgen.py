"""Synthetic multi-attribute embedding datasets with a nearest-centroid learnability oracle.

Each attribute owns a private block of coordinates. Class ``c`` of attribute
``a`` is a fixed unit direction inside that block, and a record is

    normalize(sum_a mu[a, label_a] + noise * eps)

where ``eps`` is isotropic Gaussian with ``E||eps||^2 = 1`` (per-coordinate
variance ``1/D``), so ``noise`` is the noise norm relative to one attribute's
signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mass.embedding import (
    AttributeSpec,
    DatasetManifest,
    EmbeddingRecord,
    label_array,
    normalize,
    stack_vectors,
)
from mass.errors import ConfigError, DataError


@dataclass(frozen=True)
class SynthAttribute:
    name: str
    num_classes: int
    role: str = "unknown"
    subspace_dim: int | None = None

    @property
    def block(self) -> int:
        return self.num_classes if self.subspace_dim is None else self.subspace_dim


@dataclass(frozen=True)
class SynthConfig:
    dimension: int
    attributes: tuple[SynthAttribute, ...]
    samples: int
    noise: float = 0.5
    seed: int = 0
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "fractions", tuple(self.fractions))
        if self.dimension < 1 or self.samples < 1:
            raise ConfigError("dimension and samples must be positive")
        if not math.isfinite(self.noise) or self.noise < 0:
            raise ConfigError(f"noise must be finite and >= 0, got {self.noise}")
        used = 0
        for a in self.attributes:
            if a.block < 1:
                raise ConfigError(f"attribute {a.name!r}: subspace_dim must be >= 1")
            used += a.block
            if used > self.dimension:
                raise ConfigError(
                    f"attribute {a.name!r}: signal subspaces need {used} dims, "
                    f"exceeding dimension {self.dimension}"
                )

    def manifest(self) -> DatasetManifest:
        return DatasetManifest(
            self.dimension,
            tuple(AttributeSpec(a.name, a.num_classes, a.role) for a in self.attributes),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        allowed = {"dimension", "attributes", "samples", "noise", "seed", "fractions"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        try:
            attrs = []
            for a in d["attributes"]:
                extra = set(a) - {"name", "num_classes", "role", "subspace_dim"}
                if extra:
                    raise ConfigError(f"unknown attribute keys: {sorted(extra)}")
                attrs.append(SynthAttribute(a["name"], int(a["num_classes"]), a.get("role", "unknown"),
                                            a.get("subspace_dim")))
            kw = {k: d[k] for k in ("noise", "seed") if k in d}
            if "fractions" in d:
                kw["fractions"] = tuple(d["fractions"])
            return cls(int(d["dimension"]), tuple(attrs), int(d["samples"]), **kw)
        except KeyError as e:
            raise ConfigError(f"synth config missing key {e}") from None

    def to_dict(self) -> dict:
        attrs = []
        for a in self.attributes:
            entry = {"name": a.name, "num_classes": a.num_classes, "role": a.role}
            if a.subspace_dim is not None:
                entry["subspace_dim"] = a.subspace_dim
            attrs.append(entry)
        return {
            "dimension": self.dimension,
            "attributes": attrs,
            "samples": self.samples,
            "noise": self.noise,
            "seed": self.seed,
            "fractions": list(self.fractions),
        }


def reference_config(seed: int = 0, noise: float = 0.5) -> SynthConfig:
    """The desk-scale benchmark: D=64, N=4000, A0/A1/A2 with 8/4/2 classes."""
    return SynthConfig(
        dimension=64,
        attributes=(
            SynthAttribute("A0", 8, "suppress"),
            SynthAttribute("A1", 4, "preserve_specific"),
            SynthAttribute("A2", 2, "unknown"),
        ),
        samples=4000,
        noise=noise,
        seed=seed,
    )


def _class_directions(rng: np.random.Generator, num_classes: int, block: int) -> np.ndarray:
    if block >= num_classes:
        # orthonormal columns of a random rotation: every class pair is sqrt(2) apart
        q, r = np.linalg.qr(rng.standard_normal((block, block)))
        q = q * np.sign(np.diag(r))
        return q[:, :num_classes].T
    dirs = rng.standard_normal((num_classes, block))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def generate(config: SynthConfig) -> tuple[DatasetManifest, list[EmbeddingRecord]]:
    rng = np.random.default_rng(config.seed)
    D, N = config.dimension, config.samples
    centers = []
    offset = 0
    for a in config.attributes:
        full = np.zeros((a.num_classes, D))
        full[:, offset:offset + a.block] = _class_directions(rng, a.num_classes, a.block)
        centers.append(full)
        offset += a.block
    labels = np.stack([rng.integers(0, a.num_classes, size=N) for a in config.attributes], axis=1) \
        if config.attributes else np.zeros((N, 0), dtype=np.int64)
    eps = rng.standard_normal((N, D)) / math.sqrt(D)
    X = config.noise * eps
    for j, c in enumerate(centers):
        X += c[labels[:, j]]

    width = len(str(N - 1))
    records = []
    for i in range(N):
        vec = normalize(X[i]).astype(np.float32)
        lab = {a.name: int(labels[i, j]) for j, a in enumerate(config.attributes)}
        records.append(EmbeddingRecord(f"s{config.seed}-{i:0{width}d}", vec, lab))
    return config.manifest(), records


def nearest_centroid_oracle(train: Sequence[EmbeddingRecord], eval: Sequence[EmbeddingRecord],
                            attribute: str) -> float:
    """Top-1 accuracy of cosine nearest-centroid classification.

    Centroids are per-class means over ``train``; ties go to the lowest class index.
    """
    Xtr = stack_vectors(train).astype(np.float64)
    ytr = label_array(train, attribute)
    Xev = stack_vectors(eval).astype(np.float64)
    yev = label_array(eval, attribute)
    n_classes = int(max(ytr.max(), yev.max())) + 1
    present = set(np.unique(ytr).tolist())
    missing = [c for c in range(n_classes) if c not in present]
    if missing:
        raise DataError(f"attribute {attribute!r}: classes {missing} absent from train")

    cents = np.stack([Xtr[ytr == c].mean(axis=0) for c in range(n_classes)])
    norms = np.linalg.norm(cents, axis=1, keepdims=True)
    cents = np.divide(cents, norms, out=np.zeros_like(cents), where=norms > 0)
    xnorm = np.linalg.norm(Xev, axis=1, keepdims=True)
    Xev = np.divide(Xev, xnorm, out=np.zeros_like(Xev), where=xnorm > 0)
    pred = np.argmax(Xev @ cents.T, axis=1)  # first maximum wins
    return float(np.mean(pred == yev))
