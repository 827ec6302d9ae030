"""Multi-attribute embedding datasets: records, manifests, JSONL I/O and splitting."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from mass.errors import ConfigError, DataError

ROLES = ("suppress", "preserve_specific", "unknown")
SPLIT_NAMES = ("train", "validation", "test")


def normalize(v) -> np.ndarray:
    """Scale ``v`` to unit L2 norm; the zero vector maps to itself."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DataError("cannot normalize a non-finite vector")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return np.zeros_like(v)
    return v / norm


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    num_classes: int
    role: str = "unknown"

    def __post_init__(self):
        if not self.name:
            raise ConfigError("attribute name must be non-empty")
        if int(self.num_classes) != self.num_classes or self.num_classes < 2:
            raise ConfigError(f"attribute {self.name!r}: num_classes must be an integer >= 2")
        if self.role not in ROLES:
            raise ConfigError(f"attribute {self.name!r}: role must be one of {ROLES}, got {self.role!r}")

    @property
    def chance(self) -> float:
        return 1.0 / self.num_classes

    def one_hot(self, c: int) -> np.ndarray:
        if not 0 <= c < self.num_classes:
            raise DataError(f"attribute {self.name!r}: class {c} out of range")
        out = np.zeros(self.num_classes)
        out[c] = 1.0
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "num_classes": self.num_classes, "role": self.role}


@dataclass(frozen=True)
class DatasetManifest:
    dimension: int
    attributes: tuple[AttributeSpec, ...]
    splits: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise ConfigError("manifest dimension must be a positive integer")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate attribute names in manifest: {names}")

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def attribute(self, name: str) -> AttributeSpec:
        for a in self.attributes:
            if a.name == name:
                return a
        raise ConfigError(f"unknown attribute {name!r}; manifest has {self.names}")

    def with_role(self, role: str) -> list[AttributeSpec]:
        return [a for a in self.attributes if a.role == role]

    def fingerprint(self) -> str:
        """Hash of the schema that trained networks depend on.

        Roles and split counts are excluded: the same classifiers serve runs
        that suppress different attributes.
        """
        schema = {
            "dimension": self.dimension,
            "attributes": [[a.name, a.num_classes] for a in self.attributes],
        }
        blob = json.dumps(schema, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_dict(self) -> dict:
        out = {"dimension": self.dimension, "attributes": [a.to_dict() for a in self.attributes]}
        if self.splits is not None:
            out["splits"] = dict(self.splits)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        unknown = set(d) - {"dimension", "attributes", "splits"}
        if unknown:
            raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
        try:
            attrs = []
            for a in d["attributes"]:
                extra = set(a) - {"name", "num_classes", "role"}
                if extra:
                    raise ConfigError(f"unknown attribute keys: {sorted(extra)}")
                attrs.append(AttributeSpec(a["name"], a["num_classes"], a.get("role", "unknown")))
            return cls(d["dimension"], tuple(attrs), d.get("splits"))
        except KeyError as e:
            raise ConfigError(f"manifest missing key {e}") from None


@dataclass
class EmbeddingRecord:
    id: str
    vector: np.ndarray
    labels: dict[str, int] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.labels == other.labels
            and np.array_equal(self.vector, other.vector)
        )


@dataclass
class DatasetSplit:
    train: list[EmbeddingRecord]
    validation: list[EmbeddingRecord] = field(default_factory=list)
    test: list[EmbeddingRecord] = field(default_factory=list)

    def __post_init__(self):
        seen: set[str] = set()
        for part in (self.train, self.validation, self.test):
            for r in part:
                if r.id in seen:
                    raise DataError(f"record id {r.id!r} appears more than once across splits")
                seen.add(r.id)

    def __getitem__(self, name: str) -> list[EmbeddingRecord]:
        if name not in SPLIT_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


def validate_record(rec: EmbeddingRecord, manifest: DatasetManifest, where: str = "") -> EmbeddingRecord:
    """Check a record against the manifest and return it with a normalized float32 vector."""
    tag = f"record {rec.id!r}{where}"
    vec = np.asarray(rec.vector, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != manifest.dimension:
        raise DataError(f"{tag}: vector length {vec.size} != manifest dimension {manifest.dimension}")
    if not np.all(np.isfinite(vec)):
        raise DataError(f"{tag}: non-finite vector entries")
    for name, value in rec.labels.items():
        try:
            spec = manifest.attribute(name)
        except ConfigError:
            raise DataError(f"{tag}: unknown attribute {name!r}") from None
        if isinstance(value, bool) or int(value) != value:
            raise DataError(f"{tag}: label for {name!r} must be an integer")
        if not 0 <= value < spec.num_classes:
            raise DataError(
                f"{tag}: label out of range for {name!r}: {value} not in [0, {spec.num_classes})"
            )
    labels = {k: int(v) for k, v in rec.labels.items()}
    return EmbeddingRecord(str(rec.id), normalize(vec).astype(np.float32), labels)


def _format_vector(v: np.ndarray) -> str:
    v = np.asarray(v, dtype=np.float32)
    return "[" + ",".join(np.format_float_positional(x, unique=True, trim="0") for x in v) + "]"


def record_to_line(rec: EmbeddingRecord) -> str:
    # Shortest float32 repr per entry so the text round-trips bit-exactly.
    return (
        '{"id":' + json.dumps(rec.id)
        + ',"vector":' + _format_vector(rec.vector)
        + ',"labels":' + json.dumps(rec.labels, sort_keys=True, separators=(",", ":"))
        + "}"
    )


def write_records(path, records: Iterable[EmbeddingRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_line(rec) + "\n")


def read_records(path, manifest: DatasetManifest) -> list[EmbeddingRecord]:
    """Parse and validate a JSONL record file. Errors name the line number."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed line ({e.msg})") from None
            if not isinstance(obj, dict) or set(obj) != {"id", "vector", "labels"}:
                raise DataError(f"{path}:{lineno}: record must have exactly the keys id, vector, labels")
            if not isinstance(obj["vector"], list) or not isinstance(obj["labels"], dict):
                raise DataError(f"{path}:{lineno}: vector must be a list and labels an object")
            try:
                vec = np.asarray(obj["vector"], dtype=np.float32)
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: vector entries must be numbers") from None
            rec = EmbeddingRecord(str(obj["id"]), vec, obj["labels"])
            records.append(validate_record(rec, manifest, where=f" ({path.name} line {lineno})"))
    return records


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    try:
        return DatasetManifest.from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg})") from None


def save_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


def load_dataset(path, manifest: DatasetManifest) -> DatasetSplit:
    """Load a dataset directory (``train/validation/test.jsonl``) or a single JSONL file.

    A single file lands entirely in ``train``.
    """
    path = Path(path)
    if path.is_dir():
        parts = {}
        for name in SPLIT_NAMES:
            f = path / f"{name}.jsonl"
            parts[name] = read_records(f, manifest) if f.exists() else []
        if not any(parts.values()):
            raise DataError(f"no split files found in {path}")
        return DatasetSplit(**parts)
    return DatasetSplit(read_records(path, manifest))


def save_dataset(directory, split: DatasetSplit, manifest: DatasetManifest) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    counts = {name: len(split[name]) for name in SPLIT_NAMES}
    save_manifest(directory / "manifest.json", DatasetManifest(manifest.dimension, manifest.attributes, counts))
    for name in SPLIT_NAMES:
        write_records(directory / f"{name}.jsonl", split[name])


def split_dataset(records: Sequence[EmbeddingRecord], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Shuffle deterministically and cut into train/validation/test.

    Validation and test get ``floor(f * n)`` records; the remainder goes to train.
    """
    if len(records) == 0:
        raise DataError("cannot split an empty record list")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    n_train = n - n_val - n_test
    shuffled = [records[i] for i in order]
    return DatasetSplit(
        shuffled[:n_train],
        shuffled[n_train:n_train + n_val],
        shuffled[n_train + n_val:],
    )


def stack_vectors(records: Sequence[EmbeddingRecord]) -> np.ndarray:
    if not records:
        raise DataError("empty record set")
    return np.stack([np.asarray(r.vector, dtype=np.float32) for r in records])


def label_array(records: Sequence[EmbeddingRecord], attribute: str) -> np.ndarray:
    try:
        return np.array([r.labels[attribute] for r in records], dtype=np.int64)
    except KeyError:
        missing = next(r.id for r in records if attribute not in r.labels)
        raise DataError(f"record {missing!r} has no label for {attribute!r}") from None
