"""Command-line entry point: ``mass <command> ...``.

Every failure ends in one stderr line ``error[<kind>]: <message>`` and exit code
2 (configuration), 3 (data) or 4 (numerical abort).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from mass.embedding import (
    DatasetManifest,
    load_dataset,
    load_manifest,
    read_records,
    save_dataset,
    split_dataset,
    write_records,
)
from mass.errors import ConfigError, DataError, MassError
from mass.evaluation import MetricsReport, evaluate, gaussian_noise_baseline, render_table
from mass.experiment import SUITES, ablation_grid, config_hash, provenance
from mass.nets import ClassifierNet, ModifierNet, file_sha256, load_checkpoint, save_checkpoint
from mass.pretrain import ClassifierHyper, ContrastiveHyper, hyper_to_dict, train_classifier, train_contrastive
from mass.synthgen import SynthConfig, generate
from mass.training import RunConfig, train_modifier, transform_dataset

SYNTH_HELP = """\
synth.json keys:
  dimension      int, embedding dimension D
  samples        int, number of records N
  noise          float >= 0, isotropic noise scale (default 0.5)
  seed           int (default 0; --seed overrides)
  fractions      [train, validation, test] fractions (default [0.8, 0.1, 0.1])
  attributes     list of objects:
    name           str
    num_classes    int >= 2
    role           "suppress" | "preserve_specific" | "unknown" (default "unknown")
    subspace_dim   int >= num_classes, dims reserved for the class directions (default num_classes)

Writes manifest.json and train/validation/test.jsonl into --out.
"""

HYPER_HELP = """\
hyper.json keys for --kind classifier:
  epochs, batch_size (>= 2), lr, weight_decay, hidden (list of hidden widths)
hyper.json keys for --kind contrastive:
  epochs, batch_size (>= 2), lr, weight_decay, momentum, temperature,
  dropout (view coordinate dropout in [0, 1)), noise (view noise scale), proj_dim

--data is a dataset directory holding manifest.json. Writes the checkpoint to --out
and the per-epoch log {epoch, lr, train_loss, val_metric} next to it as <out>.log.json.
"""

RUN_HELP = """\
run.json keys:
  suppress       {attr: {"w": weight, "h": entropy weight, "sim": "cosine" | "neg_kl" | "neg_ce"}}, nonempty
  preserve       {attr: {"w": weight, "sim": "cosine" | "neg_kl" | "neg_ce"}}, disjoint from suppress
  w_rec          reconstruction weight (default 1.0)
  w_agnostic     contrastive preservation weight (default 10.0)
  temperature    NT-Xent temperature (default 0.07)
  optimizer      {"lr": 1e-3, "weight_decay": 0.05, "epochs": 100, "batch_size": 256} (AdamW, cosine
                 schedule; values shown are the defaults)
  seed           int (default 0; --seed overrides)
  modifier_hidden  list of hidden widths of the modifier MLP (default [D])
  manifest       path to manifest.json (default: the one in --data)
  checkpoints    {"classifiers": {attr: path}, "contrastive": path}

Relative paths resolve against the directory of run.json. Writes the modifier
checkpoint to --out and one JSON line per epoch to <out>.log.jsonl.
"""

DATA_HELP = """\
manifest.json keys:
  dimension      int
  attributes     list of {"name", "num_classes", "role"}
  splits         optional {split: record count}
JSONL records, one per line:
  {"id": str, "vector": [D floats, unit norm], "labels": {attr: class index}}
"""

EVAL_HELP = """\
--classifiers is a directory of classifier checkpoints (*.ckpt, searched recursively);
each one is keyed by the attribute recorded in it. Manifest attributes without a
classifier are listed under "unreported". The manifest defaults to manifest.json
next to --original.
"""

ABLATE_HELP = """\
Suites:
  targets   each manifest attribute in turn is the sole suppression target
  weights   w_agnostic over {1, 10, 40, 160}
  sims      suppression similarity over {cosine, neg_kl, neg_ce}

--base is a run.json (see `mass train --help` for its keys). Classifiers for targets
that the base run does not reference are taken from --classifiers. Each cell writes
run.json, modifier.ckpt, log.jsonl and report.json into its own subdirectory of --out;
the combined table goes to table.txt and summary.json.
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return d


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest_near(path, explicit=None) -> DatasetManifest:
    if explicit:
        return load_manifest(explicit)
    path = Path(path)
    return load_manifest((path if path.is_dir() else path.parent) / "manifest.json")


def _log_path(out, suffix: str) -> Path:
    out = Path(out)
    return out.with_name(out.stem + suffix)


def cmd_gen_data(args) -> None:
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = SynthConfig.from_dict(d)
    manifest, records = generate(cfg)
    split = split_dataset(records, cfg.fractions, cfg.seed)
    save_dataset(args.out, split, manifest)
    print(f"wrote {len(records)} records to {args.out}")


def cmd_pretrain(args) -> None:
    manifest = _manifest_near(args.data)
    split = load_dataset(args.data, manifest)
    hyper = _read_json(args.config) if args.config else {}
    if args.epochs is not None:
        hyper["epochs"] = args.epochs
    meta = {"manifest_hash": manifest.fingerprint(), "seed": args.seed}
    if args.kind == "classifier":
        if not args.attr:
            raise ConfigError("--attr is required for --kind classifier")
        spec = manifest.attribute(args.attr)
        h = ClassifierHyper.from_dict(hyper)
        net, log = train_classifier(split, spec, h, args.seed)
        meta["attribute"] = spec.name
    else:
        if args.attr:
            raise ConfigError("--attr is not accepted with --kind contrastive")
        h = ContrastiveHyper.from_dict(hyper)
        net, log = train_contrastive(split, h, args.seed)
    meta["hyper"] = hyper_to_dict(h)
    save_checkpoint(args.out, net, metadata=meta)
    _write_json(_log_path(args.out, ".log.json"), log)
    if log:
        print(f"final val_metric {log[-1]['val_metric']}")


def _load_run(args) -> tuple[RunConfig, DatasetManifest]:
    cfg = RunConfig.load(args.run)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, optimizer=replace(cfg.optimizer, epochs=args.epochs))
    manifest = load_manifest(cfg.resolve(cfg.manifest)) if cfg.manifest else _manifest_near(args.data)
    cfg.validate(manifest)
    return cfg, manifest


def cmd_train(args) -> None:
    cfg, manifest = _load_run(args)
    split = load_dataset(args.data, manifest)
    g, log = train_modifier(cfg, split, manifest)
    meta = {"manifest_hash": manifest.fingerprint(), "provenance": provenance(cfg)}
    save_checkpoint(args.out, g, metadata=meta)
    _log_path(args.out, ".log.jsonl").write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in log))
    print(f"trained {len(log)} epochs; final total {log[-1]['total'] if log else 'n/a'}")


def cmd_transform(args) -> None:
    manifest = _manifest_near(args.data, args.manifest)
    records = read_records(args.data, manifest)
    g, _, _ = load_checkpoint(args.modifier, manifest)
    if not isinstance(g, ModifierNet):
        raise ConfigError(f"{args.modifier} holds a {g.kind} network, not a modifier")
    out = transform_dataset(g, records)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_records(args.out, out)
    read_records(args.out, manifest)
    print(f"transformed {len(out)} records")


def _load_classifiers(directory, manifest: DatasetManifest) -> tuple[dict, dict]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"classifier directory not found: {directory}")
    nets, paths = {}, {}
    for p in sorted(directory.rglob("*.ckpt")):
        net, _, meta = load_checkpoint(p, manifest)
        if not isinstance(net, ClassifierNet):
            continue
        name = meta.get("attribute") or net.attribute or p.stem
        manifest.attribute(name)
        if name in nets:
            raise ConfigError(f"two classifier checkpoints for attribute {name!r}: {paths[name]} and {p}")
        nets[name], paths[name] = net, p
    return nets, paths


def _group(text):
    return [s for s in text.split(",") if s] if text else None


def cmd_evaluate(args) -> None:
    manifest = _manifest_near(args.original, args.manifest)
    original = read_records(args.original, manifest)
    transformed = read_records(args.transformed, manifest)
    classifiers, paths = _load_classifiers(args.classifiers, manifest)
    prov = {
        "original_sha256": file_sha256(args.original),
        "transformed_sha256": file_sha256(args.transformed),
        "classifiers": {n: file_sha256(p) for n, p in sorted(paths.items())},
    }
    report = evaluate(manifest, classifiers, original, transformed, _group(args.cmap_group), prov)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json())
    print(render_table({"transformed": report}), end="")


def cmd_baseline(args) -> None:
    manifest = _manifest_near(args.data, args.manifest)
    records = read_records(args.data, manifest)
    classifiers, paths = _load_classifiers(args.classifiers, manifest)
    try:
        sigmas = [float(s) for s in args.sigmas.split(",") if s]
    except ValueError:
        raise ConfigError(f"--sigmas must be comma-separated numbers, got {args.sigmas!r}") from None
    prov = {"data_sha256": file_sha256(args.data), "seed": args.seed,
            "classifiers": {n: file_sha256(p) for n, p in sorted(paths.items())}}
    rows = {}
    for s in sigmas:
        noisy = gaussian_noise_baseline(records, s, args.seed)
        rows[f"sigma={s:g}"] = evaluate(manifest, classifiers, records, noisy, provenance=dict(prov, sigma=s))
    _write_json(args.out, {k: r.to_dict() for k, r in rows.items()})
    print(render_table(rows), end="")


def _cell_dir(label: str) -> str:
    return label.replace("=", "_").replace("+", "plus_")


def _ablate_cell(label: str, cfg_dict: dict, data: str, manifest_dict: dict, classifier_paths: dict,
                 which: str, cell_dir: str) -> dict:
    manifest = DatasetManifest.from_dict(manifest_dict)
    cfg = RunConfig.from_dict(cfg_dict)
    split = load_dataset(data, manifest)
    out = Path(cell_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run.json", cfg_dict)
    g, log = train_modifier(cfg, split, manifest)
    save_checkpoint(out / "modifier.ckpt", g, metadata={"manifest_hash": manifest.fingerprint(),
                                                        "provenance": provenance(cfg)})
    (out / "log.jsonl").write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in log))
    classifiers = {}
    for name, p in classifier_paths.items():
        classifiers[name] = load_checkpoint(p, manifest)[0]
    records = split[which]
    report = evaluate(manifest, classifiers, records, transform_dataset(g, records), provenance=provenance(cfg))
    (out / "report.json").write_text(report.to_json())
    return report.to_dict()


def cmd_ablate(args) -> None:
    base, manifest = _load_run(args)
    available = {n: str(base.resolve(p).resolve()) for n, p in base.classifier_paths.items()}
    if args.classifiers:
        _, found = _load_classifiers(args.classifiers, manifest)
        for n, p in found.items():
            available.setdefault(n, str(Path(p).resolve()))
    contrastive = str(base.resolve(base.contrastive_path).resolve()) if base.contrastive_path else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cells = []
    for label, cfg in ablation_grid(base, args.suite, manifest):
        needed = [*cfg.weights.suppress, *cfg.weights.preserve]
        missing = [n for n in needed if n not in available]
        if missing:
            raise ConfigError(f"{label}: no classifier checkpoint for {missing}; pass --classifiers")
        cfg = replace(cfg, classifier_paths={n: available[n] for n in needed}, contrastive_path=contrastive,
                      manifest=None, base_dir=None)
        cells.append((label, cfg.to_dict()))

    job_args = [(label, d, str(args.data), manifest.to_dict(), available, args.split, str(out / _cell_dir(label)))
                for label, d in cells]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_ablate_cell, *zip(*job_args)))
    else:
        results = [_ablate_cell(*a) for a in job_args]

    reports = {label: MetricsReport.from_dict(r) for (label, _), r in zip(cells, results)}
    table = render_table(reports)
    (out / "table.txt").write_text(table)
    summary = {label: {"config_sha256": config_hash(RunConfig.from_dict(d)), "dir": _cell_dir(label),
                       "transformed_accuracy": {n: m.transformed_accuracy for n, m in reports[label].attributes.items()}}
               for label, d in cells}
    _write_json(out / "summary.json", {"suite": args.suite, "split": args.split, "cells": summary})
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mass", description="Selective attribute suppression for embedding datasets.")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    s = sub.add_parser("gen-data", help="generate a synthetic multi-attribute dataset", epilog=SYNTH_HELP + "\n" + DATA_HELP,
                       formatter_class=fmt)
    s.add_argument("--config", required=True, help="synth.json")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", help="pretrain a frozen classifier or contrastive encoder", epilog=HYPER_HELP,
                       formatter_class=fmt)
    s.add_argument("--kind", required=True, choices=["classifier", "contrastive"])
    s.add_argument("--attr", help="attribute name (classifier only)")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="output checkpoint path")
    s.add_argument("--config", help="hyper.json")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, help="overrides hyper.json epochs")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="train a data modifier against frozen branches", epilog=RUN_HELP,
                       formatter_class=fmt)
    s.add_argument("--run", required=True, help="run.json")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="output modifier checkpoint")
    s.add_argument("--seed", type=int, help="overrides run.json seed")
    s.add_argument("--epochs", type=int, help="overrides optimizer.epochs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("transform", help="apply a trained modifier to a JSONL file", epilog=DATA_HELP,
                       formatter_class=fmt)
    s.add_argument("--modifier", required=True)
    s.add_argument("--data", required=True, help="input JSONL")
    s.add_argument("--out", required=True, help="output JSONL")
    s.add_argument("--manifest", help="manifest.json (default: next to --data)")
    s.set_defaults(func=cmd_transform)

    s = sub.add_parser("evaluate", help="compare classifier accuracy on original and transformed data",
                       epilog=EVAL_HELP, formatter_class=fmt)
    s.add_argument("--original", required=True)
    s.add_argument("--transformed", required=True)
    s.add_argument("--classifiers", required=True, help="directory of classifier checkpoints")
    s.add_argument("--out", required=True, help="report.json")
    s.add_argument("--cmap-group", help="comma-separated binary attributes aggregated into one cMAP")
    s.add_argument("--manifest", help="manifest.json (default: next to --original)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("baseline", help="Gaussian-noise baseline sweep", epilog=EVAL_HELP, formatter_class=fmt)
    s.add_argument("--data", required=True, help="input JSONL")
    s.add_argument("--classifiers", required=True)
    s.add_argument("--sigmas", default="0.1,0.5,1,2", help="comma-separated noise levels")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="combined report JSON")
    s.add_argument("--manifest", help="manifest.json (default: next to --data)")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("ablate", help="train and evaluate an ablation suite", epilog=ABLATE_HELP + "\n" + RUN_HELP,
                       formatter_class=fmt)
    s.add_argument("--suite", required=True, choices=list(SUITES))
    s.add_argument("--base", dest="run", required=True, help="base run.json")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--classifiers", help="directory with classifiers for every attribute")
    s.add_argument("--split", default="validation", choices=["train", "validation", "test"])
    s.add_argument("--jobs", type=int, default=1, help="cells trained concurrently")
    s.add_argument("--seed", type=int, help="overrides the base seed")
    s.add_argument("--epochs", type=int, help="overrides optimizer.epochs")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be >= 1")
        args.func(args)
    except MassError as e:
        print(f"error[{e.kind}]: {' '.join(str(e).split())}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error[data]: {' '.join(str(e).split())}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
