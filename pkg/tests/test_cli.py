import json
import re

import numpy as np
import pytest
import torch

from mass.cli import main
from mass.embedding import load_dataset, load_manifest, read_records
from mass.nets import ClassifierNet, ModifierNet, load_checkpoint, save_checkpoint

SYNTH = {
    "dimension": 16,
    "samples": 400,
    "noise": 0.3,
    "seed": 0,
    "attributes": [
        {"name": "a", "num_classes": 4, "role": "suppress"},
        {"name": "b", "num_classes": 3, "role": "preserve_specific"},
        {"name": "c", "num_classes": 2},
    ],
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small dataset plus classifiers for every attribute and a contrastive encoder."""
    root = tmp_path_factory.mktemp("cli")
    cfg = _write(root / "synth.json", SYNTH)
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    hyper = _write(root / "clf.json", {"epochs": 5, "batch_size": 64, "hidden": [32, 16]})
    for name in ("a", "b", "c"):
        assert main(["pretrain", "--kind", "classifier", "--attr", name, "--data", str(root / "data"),
                     "--out", str(root / "clf" / f"{name}.ckpt"), "--config", str(hyper)]) == 0
    chyper = _write(root / "con.json", {"epochs": 2, "batch_size": 32, "proj_dim": 8})
    assert main(["pretrain", "--kind", "contrastive", "--data", str(root / "data"),
                 "--out", str(root / "contrastive.ckpt"), "--config", str(chyper)]) == 0
    run_cfg = {
        "suppress": {"a": {"w": 1.0, "h": 1.0, "sim": "neg_kl"}},
        "preserve": {"b": {"w": 1.0}},
        "w_rec": 0.1,
        "w_agnostic": 2.0,
        "optimizer": {"epochs": 2, "batch_size": 64},
        "seed": 0,
        "checkpoints": {"classifiers": {"a": "clf/a.ckpt", "b": "clf/b.ckpt"}, "contrastive": "contrastive.ckpt"},
    }
    _write(root / "run.json", run_cfg)
    return root


def test_gen_data_files_reload(workspace):
    manifest = load_manifest(workspace / "data" / "manifest.json")
    split = load_dataset(workspace / "data", manifest)
    assert split.sizes() == (320, 40, 40)
    assert manifest.names == ["a", "b", "c"]


def test_gen_data_seed_repeat_is_identical(tmp_path, capsys):
    cfg = _write(tmp_path / "s.json", SYNTH)
    for d in ("x", "y"):
        assert run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / d, "--seed", 7)[0] == 0
    for f in ("manifest.json", "train.jsonl", "validation.jsonl", "test.jsonl"):
        assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()
    assert run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "z", "--seed", 8)[0] == 0
    assert (tmp_path / "x" / "train.jsonl").read_bytes() != (tmp_path / "z" / "train.jsonl").read_bytes()


def test_gen_data_overflow_names_attribute(tmp_path, capsys):
    bad = dict(SYNTH, dimension=6)
    code, _, err = run(capsys, "gen-data", "--config", _write(tmp_path / "s.json", bad), "--out", tmp_path / "o")
    assert code == 2
    assert err.startswith("error[config]:") and "'b'" in err
    assert len(err.strip().splitlines()) == 1


def test_gen_data_unknown_key_is_error(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--config", _write(tmp_path / "s.json", dict(SYNTH, nosie=1)),
                       "--out", tmp_path / "o")
    assert code == 2 and "nosie" in err


def test_bad_arguments_are_config_errors(capsys):
    code, _, err = run(capsys, "train", "--run")
    assert code == 2 and err.startswith("error[config]:")
    code, _, err = run(capsys, "frobnicate")
    assert code == 2


def test_pretrain_clean_data_reaches_perfect_accuracy(tmp_path, capsys):
    clean = dict(SYNTH, noise=0.0, samples=800)
    assert run(capsys, "gen-data", "--config", _write(tmp_path / "s.json", clean), "--out", tmp_path / "d")[0] == 0
    code, _, _ = run(capsys, "pretrain", "--kind", "classifier", "--attr", "a", "--data", tmp_path / "d",
                     "--out", tmp_path / "a.ckpt", "--epochs", 20)
    assert code == 0
    log = json.loads((tmp_path / "a.log.json").read_text())
    assert log[-1]["val_metric"] == 1.0
    assert set(log[0]) == {"epoch", "lr", "train_loss", "val_metric"}


def test_pretrain_attr_errors(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--kind", "classifier", "--attr", "zz", "--data", workspace / "data",
                       "--out", tmp_path / "x.ckpt")
    assert code == 2 and "zz" in err
    code, _, err = run(capsys, "pretrain", "--kind", "contrastive", "--attr", "a", "--data", workspace / "data",
                       "--out", tmp_path / "x.ckpt")
    assert code == 2 and "--attr" in err
    assert not (tmp_path / "x.ckpt").exists()


def test_train_writes_checkpoint_and_log_deterministically(workspace, tmp_path, capsys):
    for name in ("g1", "g2"):
        code, _, err = run(capsys, "train", "--run", workspace / "run.json", "--data", workspace / "data",
                           "--out", tmp_path / f"{name}.ckpt")
        assert code == 0, err
    assert (tmp_path / "g1.ckpt").read_bytes() == (tmp_path / "g2.ckpt").read_bytes()
    assert (tmp_path / "g1.log.jsonl").read_text() == (tmp_path / "g2.log.jsonl").read_text()
    lines = (tmp_path / "g1.log.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["epoch"] == 0
    code, _, _ = run(capsys, "train", "--run", workspace / "run.json", "--data", workspace / "data",
                     "--out", tmp_path / "g3.ckpt", "--seed", 1)
    assert code == 0
    assert (tmp_path / "g3.ckpt").read_bytes() != (tmp_path / "g1.ckpt").read_bytes()


def test_train_missing_checkpoint_fails_before_training(workspace, tmp_path, capsys):
    d = json.loads((workspace / "run.json").read_text())
    d["checkpoints"] = {"classifiers": {"a": str(workspace / "clf" / "a.ckpt"), "b": str(workspace / "clf" / "nope.ckpt")},
                        "contrastive": str(workspace / "contrastive.ckpt")}
    cfg = _write(tmp_path / "run.json", d)
    code, out, err = run(capsys, "train", "--run", cfg, "--data", workspace / "data", "--out", tmp_path / "g.ckpt")
    assert code == 2 and "nope.ckpt" in err
    assert not (tmp_path / "g.ckpt").exists() and not (tmp_path / "g.log.jsonl").exists()


def test_train_nan_aborts_with_exit_4(workspace, tmp_path, capsys):
    net, _, meta = load_checkpoint(workspace / "clf" / "a.ckpt")
    with torch.no_grad():
        net.projector.layers[-1].affine.weight.fill_(float("nan"))
    save_checkpoint(tmp_path / "nan.ckpt", net, metadata=meta)
    d = json.loads((workspace / "run.json").read_text())
    d["checkpoints"] = {"classifiers": {"a": str(tmp_path / "nan.ckpt"), "b": str(workspace / "clf" / "b.ckpt")},
                        "contrastive": str(workspace / "contrastive.ckpt")}
    code, _, err = run(capsys, "train", "--run", _write(tmp_path / "run.json", d), "--data", workspace / "data",
                       "--out", tmp_path / "g.ckpt")
    assert code == 4
    assert re.match(r"error\[numerical\]: epoch 0 batch 0", err)


def _identity_modifier(workspace, path):
    manifest = load_manifest(workspace / "data" / "manifest.json")
    save_checkpoint(path, ModifierNet(16, seed=0), metadata={"manifest_hash": manifest.fingerprint()})


def test_transform_zero_head_is_identity(workspace, tmp_path, capsys):
    _identity_modifier(workspace, tmp_path / "g.ckpt")
    src = workspace / "data" / "validation.jsonl"
    out = tmp_path / "out.jsonl"
    code, _, err = run(capsys, "transform", "--modifier", tmp_path / "g.ckpt", "--data", src, "--out", out,
                       "--manifest", workspace / "data" / "manifest.json")
    assert code == 0, err
    manifest = load_manifest(workspace / "data" / "manifest.json")
    a, b = read_records(src, manifest), read_records(out, manifest)
    assert [r.id for r in a] == [r.id for r in b]
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.vector, y.vector, atol=1e-6)
        assert x.labels == y.labels


def test_transform_malformed_line_reports_line_number(workspace, tmp_path, capsys):
    _identity_modifier(workspace, tmp_path / "g.ckpt")
    lines = (workspace / "data" / "validation.jsonl").read_text().splitlines()
    lines[2] = lines[2][:-5]
    (tmp_path / "in.jsonl").write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "transform", "--modifier", tmp_path / "g.ckpt", "--data", tmp_path / "in.jsonl",
                       "--out", tmp_path / "o.jsonl", "--manifest", workspace / "data" / "manifest.json")
    assert code == 3
    assert err.startswith("error[data]:") and re.search(r"in\.jsonl:3\b", err)


def test_transform_rejects_wrong_manifest(workspace, tmp_path, capsys):
    other = dict(SYNTH, attributes=SYNTH["attributes"][:2])
    assert run(capsys, "gen-data", "--config", _write(tmp_path / "s.json", other), "--out", tmp_path / "d")[0] == 0
    _identity_modifier(workspace, tmp_path / "g.ckpt")
    code, _, err = run(capsys, "transform", "--modifier", tmp_path / "g.ckpt", "--data", tmp_path / "d" / "test.jsonl",
                       "--out", tmp_path / "o.jsonl")
    assert code == 2 and "manifest" in err


def test_evaluate_identical_files(workspace, tmp_path, capsys):
    src = workspace / "data" / "validation.jsonl"
    (tmp_path / "clf").mkdir()
    for n in ("a", "b"):
        (tmp_path / "clf" / f"{n}.ckpt").write_bytes((workspace / "clf" / f"{n}.ckpt").read_bytes())
    code, _, err = run(capsys, "evaluate", "--original", src, "--transformed", src, "--classifiers", tmp_path / "clf",
                       "--out", tmp_path / "report.json")
    assert code == 0, err
    rep = json.loads((tmp_path / "report.json").read_text())
    assert all(v["suppression_ratio"] == 0 for v in rep["attributes"].values())
    assert set(rep["attributes"]) == {"a", "b"}
    assert rep["unreported"] == ["c"]
    prov = rep["provenance"]
    assert re.fullmatch(r"[0-9a-f]{64}", prov["original_sha256"])
    assert set(prov["classifiers"]) == {"a", "b"}


def test_evaluate_cmap_group(workspace, tmp_path, capsys):
    src = workspace / "data" / "validation.jsonl"
    code, _, err = run(capsys, "evaluate", "--original", src, "--transformed", src, "--classifiers",
                       workspace / "clf", "--out", tmp_path / "r.json", "--cmap-group", "c")
    assert code == 0, err
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["cmap"]["original"] == rep["cmap"]["transformed"]
    code, _, err = run(capsys, "evaluate", "--original", src, "--transformed", src, "--classifiers",
                       workspace / "clf", "--out", tmp_path / "r.json", "--cmap-group", "a")
    assert code == 2


def test_baseline_sweep(workspace, tmp_path, capsys):
    src = workspace / "data" / "validation.jsonl"
    code, out, err = run(capsys, "baseline", "--data", src, "--classifiers", workspace / "clf",
                         "--sigmas", "0,100", "--out", tmp_path / "b.json")
    assert code == 0, err
    rep = json.loads((tmp_path / "b.json").read_text())
    assert set(rep) == {"sigma=0", "sigma=100"}
    assert all(v["suppression_ratio"] == 0 for v in rep["sigma=0"]["attributes"].values())


@pytest.mark.parametrize("suite,count", [("weights", 4), ("sims", 3), ("targets", 3)])
def test_ablate_suite_cardinality(workspace, tmp_path, capsys, suite, count):
    code, out, err = run(capsys, "ablate", "--suite", suite, "--base", workspace / "run.json",
                         "--data", workspace / "data", "--out", tmp_path / "abl", "--classifiers", workspace / "clf",
                         "--epochs", 1)
    assert code == 0, err
    summary = json.loads((tmp_path / "abl" / "summary.json").read_text())
    assert len(summary["cells"]) == count
    for cell in summary["cells"].values():
        d = tmp_path / "abl" / cell["dir"]
        assert {"run.json", "modifier.ckpt", "log.jsonl", "report.json"} <= {p.name for p in d.iterdir()}
    table = (tmp_path / "abl" / "table.txt").read_text().splitlines()
    assert len(table) == 2 + 1 + count
    if suite == "targets":
        targets = [json.loads((tmp_path / "abl" / c["dir"] / "run.json").read_text())["suppress"]
                   for c in summary["cells"].values()]
        assert [list(t) for t in targets] == [["a"], ["b"], ["c"]]


def test_ablate_jobs_match_sequential(workspace, tmp_path, capsys):
    for jobs, d in ((1, "seq"), (2, "par")):
        code, _, err = run(capsys, "ablate", "--suite", "sims", "--base", workspace / "run.json",
                           "--data", workspace / "data", "--out", tmp_path / d, "--epochs", 1, "--jobs", jobs)
        assert code == 0, err
    for cell in json.loads((tmp_path / "seq" / "summary.json").read_text())["cells"].values():
        for f in ("modifier.ckpt", "report.json"):
            assert (tmp_path / "seq" / cell["dir"] / f).read_bytes() == (tmp_path / "par" / cell["dir"] / f).read_bytes()


def test_ablate_targets_without_classifiers_fails(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "ablate", "--suite", "targets", "--base", workspace / "run.json",
                       "--data", workspace / "data", "--out", tmp_path / "abl")
    assert code == 2 and "'c'" in err


def test_help_documents_schema_keys(capsys):
    keys = {
        "gen-data": ["dimension", "samples", "noise", "seed", "fractions", "attributes", "num_classes", "role",
                     "subspace_dim"],
        "pretrain": ["epochs", "batch_size", "lr", "weight_decay", "hidden", "momentum", "temperature", "dropout",
                     "noise", "proj_dim"],
        "train": ["suppress", "preserve", "w_rec", "w_agnostic", "temperature", "optimizer", "seed",
                  "modifier_hidden", "manifest", "checkpoints"],
    }
    for cmd, names in keys.items():
        with pytest.raises(SystemExit) as e:
            main([cmd, "--help"])
        assert e.value.code == 0
        text = capsys.readouterr().out
        for k in names:
            assert k in text, (cmd, k)
