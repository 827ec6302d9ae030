import numpy as np
import pytest
from sklearn.metrics import mutual_info_score

from mass.embedding import EmbeddingRecord, split_dataset
from mass.errors import ConfigError, DataError
from mass.synthgen import SynthAttribute, SynthConfig, generate, nearest_centroid_oracle, reference_config


def _config(noise, n=100, seed=0, dim=32, attrs=((8, "a"), (2, "b"))):
    return SynthConfig(dim, tuple(SynthAttribute(name, c) for c, name in attrs), n, noise, seed)


def test_noiseless_oracle_is_perfect():
    manifest, recs = generate(_config(0.0, attrs=((4, "a"), (2, "b"))))
    for a in manifest.names:
        assert nearest_centroid_oracle(recs, recs, a) == 1.0


def test_noise_dominated_binary_attribute_is_near_chance():
    # 2000 draws of a fair coin: 0.05 is ~4.5 binomial standard deviations
    _, recs = generate(_config(1e3, n=2000, attrs=((2, "a"),)))
    split = split_dataset(recs, (0.5, 0.0, 0.5), seed=0)
    acc = nearest_centroid_oracle(split.train, split.test, "a")
    assert abs(acc - 0.5) <= 0.05


def test_generation_is_deterministic():
    m1, r1 = generate(_config(0.3, seed=5))
    m2, r2 = generate(_config(0.3, seed=5))
    assert m1 == m2
    assert r1 == r2
    _, r3 = generate(_config(0.3, seed=6))
    assert r1 != r3


def test_vectors_are_unit_norm():
    _, recs = generate(_config(0.5))
    norms = np.linalg.norm(np.stack([r.vector for r in recs]), axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)


def test_subspace_overflow_names_attribute():
    with pytest.raises(ConfigError, match="'big'"):
        SynthConfig(8, (SynthAttribute("a", 4), SynthAttribute("big", 6)), 10)


def test_oracle_tie_goes_to_lower_class():
    # centroids e0 (class 0) and e1 (class 1); the probe is equidistant
    train = [EmbeddingRecord("t0", np.array([1, 0], np.float32), {"a": 0}),
             EmbeddingRecord("t1", np.array([0, 1], np.float32), {"a": 1})]
    probe = np.array([1, 1], np.float32) / np.float32(np.sqrt(2))
    assert nearest_centroid_oracle(train, [EmbeddingRecord("p", probe, {"a": 0})], "a") == 1.0
    assert nearest_centroid_oracle(train, [EmbeddingRecord("p", probe, {"a": 1})], "a") == 0.0


def test_oracle_missing_class():
    train = [EmbeddingRecord("t0", np.array([1, 0], np.float32), {"a": 0})]
    ev = [EmbeddingRecord("e", np.array([0, 1], np.float32), {"a": 2})]
    with pytest.raises(DataError, match=r"\[1, 2\]"):
        nearest_centroid_oracle(train, ev, "a")


def test_reference_oracle_regression_baseline():
    # 8-class attribute at noise 0.5, N=4000: the oracle scored 1.0 on first run
    cfg = SynthConfig(64, (SynthAttribute("a", 8),), 4000, 0.5, 0)
    _, recs = generate(cfg)
    split = split_dataset(recs, (0.8, 0.1, 0.1), seed=0)
    acc = nearest_centroid_oracle(split.train, split.validation, "a")
    assert acc >= 0.95
    assert acc == pytest.approx(1.0)


def test_labels_are_independent():
    cfg = SynthConfig(64, (SynthAttribute("a", 8), SynthAttribute("b", 4), SynthAttribute("c", 2)), 10_000, 0.5, 1)
    _, recs = generate(cfg)
    labels = {n: np.array([r.labels[n] for r in recs]) for n in "abc"}
    for x, y in (("a", "b"), ("a", "c"), ("b", "c")):
        assert mutual_info_score(labels[x], labels[y]) < 0.02


def test_oracle_accuracy_non_increasing_in_noise():
    grid = [0.0, 0.25, 0.5, 1.0, 2.0]
    means = []
    for noise in grid:
        accs = []
        for seed in range(3):
            cfg = reference_config(seed, noise)
            cfg = SynthConfig(cfg.dimension, cfg.attributes, 2000, noise, seed)
            _, recs = generate(cfg)
            split = split_dataset(recs, (0.8, 0.1, 0.1), seed=seed)
            accs.append(np.mean([nearest_centroid_oracle(split.train, split.validation, a) for a in ("A0", "A1", "A2")]))
        means.append(np.mean(accs))
    assert all(b <= a + 1e-12 for a, b in zip(means, means[1:])), means


def test_config_round_trip():
    cfg = reference_config(3)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({**cfg.to_dict(), "typo": 1})
