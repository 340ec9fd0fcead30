"""Command-line entry point.

Subcommands: gen (write a synthetic dataset), train, eval, style-diag,
gradcheck, and ablate (the comparison sweeps). Exit codes: 0 success,
2 configuration error, 3 numerical failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .backbone import STAGES, Backbone, load_checkpoint
from .errors import ConfigurationError, NumericalError
from .evaluation import (evaluate, self_retrieval_split, style_diagnostics,
                         write_style_csv, write_style_summary)
from .gradcheck import full_suite
from .stylize import StylizerSpec
from .synth import (DatasetSpec, DomainStyle, SynthDataset, generate,
                    load_dataset, save_dataset)
from .trainer import MODES, TrainConfig, Trainer, write_metrics

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CHECK_FAILED = 4


# ---------------------------------------------------------------------------
# config file parsing: every field optional, unknown keys rejected


def _reject_unknown(section: dict, allowed: set[str], where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigurationError(
            f"unknown key(s) {sorted(unknown)} in {where}; allowed: {sorted(allowed)}")


def parse_dataset_spec(raw: dict) -> DatasetSpec:
    allowed = {"num_sources", "ids_per_domain", "images_per_id", "height",
               "width", "jitter", "seed", "source_styles", "target_style"}
    _reject_unknown(raw, allowed, "dataset spec")

    def style(entry: dict, where: str) -> DomainStyle:
        _reject_unknown(entry, {"gain", "bias", "noise_std"}, where)
        return DomainStyle(**entry)

    kwargs = {k: v for k, v in raw.items()
              if k not in ("source_styles", "target_style")}
    if raw.get("source_styles") is not None:
        kwargs["source_styles"] = [style(s, "source_styles[]")
                                   for s in raw["source_styles"]]
    if raw.get("target_style") is not None:
        kwargs["target_style"] = style(raw["target_style"], "target_style")
    return DatasetSpec(**kwargs)


def parse_stylizer(raw: dict, mode: str) -> StylizerSpec:
    allowed = {"method", "p", "rho", "alpha", "eps", "detach_sampled", "seed"}
    _reject_unknown(raw, allowed, "train.stylizer")
    kwargs = dict(raw)
    # stylization-as-augmentation defaults to firing on half the batches
    if mode == "aug" and "p" not in kwargs:
        kwargs["p"] = 0.5
    return StylizerSpec(**kwargs).validate()


def parse_train_config(raw: dict) -> TrainConfig:
    allowed = {"mode", "stylizer", "insertion", "epochs", "P", "K", "lr",
               "warmup_epochs", "decay_epochs", "decay_factor", "eta", "tau",
               "seed", "iters_per_epoch", "bank_update", "renorm_prototypes",
               "record_timing", "eval_domain"}
    _reject_unknown(raw, allowed, "train section")
    mode = raw.get("mode", "il")
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    kwargs = {k: v for k, v in raw.items() if k != "stylizer"}
    kwargs["stylizer"] = parse_stylizer(raw.get("stylizer", {}), mode)
    if "decay_epochs" in kwargs:
        kwargs["decay_epochs"] = tuple(kwargs["decay_epochs"])
    return TrainConfig(**kwargs).validate()


def parse_experiment_config(raw: dict) -> tuple[Optional[DatasetSpec], TrainConfig, str]:
    _reject_unknown(raw, {"dataset", "train", "eval"}, "config")
    dataset_spec = None
    if "dataset" in raw:
        dataset_spec = parse_dataset_spec(raw["dataset"])
    train = parse_train_config(raw.get("train", {}))
    eval_section = raw.get("eval", {})
    _reject_unknown(eval_section, {"domain"}, "eval section")
    eval_domain = eval_section.get("domain", train.eval_domain)
    train = replace(train, eval_domain=eval_domain)
    return dataset_spec, train, eval_domain


def resolved_config_dict(dataset_spec: Optional[DatasetSpec],
                         train: TrainConfig) -> dict:
    resolved: dict = {"train": asdict(train), "eval": {"domain": train.eval_domain}}
    if dataset_spec is not None:
        resolved["dataset"] = asdict(dataset_spec)
    return resolved


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON in {path}: {exc}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    spec = parse_dataset_spec(_load_json(args.spec) if args.spec else {})
    dataset = generate(spec)
    save_dataset(dataset, args.out)
    print(f"wrote {sum(d.images.shape[0] for d in dataset.domains)} images "
          f"across {len(dataset.domains)} domains to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    dataset_spec, config, _ = parse_experiment_config(raw)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved-config.json", "w") as fh:
        json.dump(resolved_config_dict(dataset_spec, config), fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
    trainer = Trainer(config, dataset)
    try:
        records = trainer.fit()
    except NumericalError as exc:
        with open(out / "diagnostics.json", "w") as fh:
            json.dump({"error": "numerical_failure", "detail": str(exc)}, fh,
                      indent=2)
            fh.write("\n")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_metrics(records, out / "metrics.jsonl")
    trainer.save(out / "checkpoint.bin")
    final = records[-1]
    print(f"finished {config.mode} after {len(records)} record(s): "
          f"mAP {final.map_target:.4f}, rank1 {final.rank1_target:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    arrays = load_checkpoint(args.checkpoint)
    state = {k[len("backbone."):]: v for k, v in arrays.items()
             if k.startswith("backbone.")}
    model = Backbone()
    model.load_state_dict(state)
    dataset = load_dataset(args.data)
    domain = dataset.domain(args.domain)
    feats = model.embed(domain.images)
    metrics = evaluate(self_retrieval_split(feats, domain.labels))
    print(json.dumps({"mAP": metrics["mAP"], "rank1": metrics["rank1"]}))
    return EXIT_OK


def cmd_style_diag(args) -> int:
    dataset = load_dataset(args.data)
    if args.checkpoint:
        arrays = load_checkpoint(args.checkpoint)
        model = Backbone()
        model.load_state_dict({k[len("backbone."):]: v for k, v in arrays.items()
                               if k.startswith("backbone.")})
    else:
        model = Backbone(seed=args.seed)
    per_domain = max(1, args.batch // max(len(dataset.sources), 1))
    images = np.concatenate([d.images[:per_domain] for d in dataset.sources])
    fmap = model.features_at(images, insertion=args.insertion)
    specs = {name: StylizerSpec(method=name, p=1.0)
             for name in ("isg", "mixstyle", "dsu", "padain")}
    records, summary = style_diagnostics(fmap, specs, n_draws=args.draws,
                                         seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_style_csv(records, out / "styles.csv")
    write_style_summary(summary, out / "summary.json")
    printable = {name: {k: round(v, 4) for k, v in entry.items()
                        if isinstance(v, float)}
                 for name, entry in summary.items()}
    print(json.dumps(printable, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    results = full_suite(max_entries=args.max_entries)
    failures = 0
    for result in results:
        print(result.line())
        failures += 0 if result.ok else 1
    elapsed = time.perf_counter() - start
    print(f"gradcheck: {len(results) - failures}/{len(results)} passed "
          f"in {elapsed:.1f}s")
    return EXIT_OK if failures == 0 else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# ablation sweeps


def _suite_configs(suite: str,
                   base: Optional[TrainConfig] = None
                   ) -> list[tuple[str, TrainConfig]]:
    if base is None:
        base = TrainConfig()
    isg = StylizerSpec(method="isg")

    def variant(mode, stylizer, insertion=None):
        cfg = replace(base, mode=mode, stylizer=stylizer)
        if insertion is not None:
            cfg = replace(cfg, insertion=insertion)
        return cfg

    baseline = variant("baseline", StylizerSpec(method="none"))
    il = variant("il", isg)
    if suite == "components":
        return [("baseline", baseline),
                ("aug_isg", variant("aug", StylizerSpec(method="isg", p=0.5))),
                ("il_isg", il)]
    if suite == "stylizers":
        return [("il_isg", il),
                ("il_mixstyle", variant("il", StylizerSpec(method="mixstyle"))),
                ("il_dsu", variant("il", StylizerSpec(method="dsu")))]
    if suite == "order":
        return [("il_fbf", il),
                ("il_ffb", variant("il_ffb", isg))]
    if suite == "position":
        rows = [("baseline", baseline)]
        for stage in STAGES:
            rows.append((f"il_{stage}", variant("il", isg, insertion=stage)))
        return rows
    if suite == "prob":
        rows = []
        for mode in ("il", "aug"):
            for p in (0.0, 0.25, 0.5, 0.75, 1.0):
                rows.append((f"{mode}_p{p:g}",
                             variant(mode, StylizerSpec(method="isg", p=p))))
        return rows
    raise ConfigurationError(
        f"unknown suite {suite!r}; expected components|stylizers|order|position|prob")


def run_ablation(suite: str, dataset: SynthDataset, seeds: int,
                 epochs: Optional[int] = None,
                 base: Optional[TrainConfig] = None) -> list[dict]:
    rows = []
    for label, config in _suite_configs(suite, base):
        for seed in range(seeds):
            cfg = replace(config, seed=seed)
            if epochs is not None:
                cfg = replace(cfg, epochs=epochs)
            records = Trainer(cfg, dataset).fit()
            final = records[-1]
            rows.append({"config": label, "seed": seed,
                         "map_target": final.map_target,
                         "rank1_target": final.rank1_target,
                         "final_loss": final.mean_loss})
    return rows


def _write_ablation_csv(rows: list[dict], out_dir: Path, suite: str):
    path = out_dir / f"{suite}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["config", "seed", "map_target",
                                                "rank1_target", "final_loss"])
        writer.writeheader()
        writer.writerows(rows)
    labels = []
    for row in rows:
        if row["config"] not in labels:
            labels.append(row["config"])
    with open(out_dir / f"{suite}_summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["config", "median_map",
                                                "median_rank1"])
        writer.writeheader()
        for label in labels:
            maps = [r["map_target"] for r in rows if r["config"] == label]
            ranks = [r["rank1_target"] for r in rows if r["config"] == label]
            writer.writerow({"config": label,
                             "median_map": float(np.median(maps)),
                             "median_rank1": float(np.median(ranks))})
    return path


def cmd_ablate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        dataset = load_dataset(args.data)
    else:
        dataset = generate(DatasetSpec())
        save_dataset(dataset, out / "dataset")
    base = None
    if args.config:
        _, base, _ = parse_experiment_config(_load_json(args.config))
    rows = run_ablation(args.suite, dataset, args.seeds, epochs=args.epochs,
                        base=base)
    path = _write_ablation_csv(rows, out, args.suite)
    print(f"wrote {len(rows)} runs to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="interstyle",
        description="style-interleaved training engine for generalizable embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic multi-domain dataset")
    p.add_argument("--spec", help="JSON dataset spec (defaults when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", default="target")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("style-diag", help="export style vectors and summary")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--draws", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=192)
    p.add_argument("--insertion", default="after_stage1", choices=STAGES)
    p.add_argument("--checkpoint")
    p.set_defaults(fn=cmd_style_diag)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--max-entries", type=int, default=6,
                   help="sampled entries per large tensor")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run a comparison sweep")
    p.add_argument("--suite", required=True,
                   choices=["components", "stylizers", "order", "position", "prob"])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="existing dataset dir (generated if omitted)")
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.add_argument("--config", help="base experiment config for all runs")
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
