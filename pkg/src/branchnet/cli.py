"""Command-line entry point.

Subcommands: synth, train, retrain, xval, eval. Runs are configured by a
flat ``section.key=value`` file (sections: arch, phase1, phase2, augment,
run) merged with ``--set`` overrides; every run echoes its resolved
config into the output directory so results are reproducible.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .data import (
    DataError,
    SyntheticSpec,
    assign_folds,
    gen_synthetic,
    load_manifest,
    split_trial,
)
from .metrics import (
    MetricsError,
    aggregate_trials,
    evaluate,
    fmt2,
    paired_t_test,
)
from .model import (
    ArchConfig,
    CheckpointError,
    EnsembleNetwork,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .trainer import Phase1Config, Phase2Config, run_phase1, run_phase2

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunSettings:
    seed: int = 0            # network initialization seed
    dtype: str = "float32"


@dataclasses.dataclass
class RunConfig:
    arch: ArchConfig
    phase1: Phase1Config
    phase2: Phase2Config
    augment: AugmentConfig
    run: RunSettings

    def validate(self):
        if self.phase2.base_lr >= self.phase1.base_lr:
            raise ConfigError(
                "phase2.base_lr must be strictly less than phase1.base_lr "
                "(retraining at the phase-1 rate or above causes forgetting)")


_SECTIONS = {
    "arch": ArchConfig,
    "phase1": Phase1Config,
    "phase2": Phase2Config,
    "augment": AugmentConfig,
    "run": RunSettings,
}


def _convert(section, name, text, where):
    cls = _SECTIONS[section]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if name not in fields:
        raise ConfigError(f"{where}: unknown key {section}.{name}")
    default = fields[name].default
    if default is dataclasses.MISSING:
        default = fields[name].default_factory()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) if ("." in v or "e" in v.lower()) else int(v)
                         for v in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {section}.{name}: {exc}") from exc


def parse_config_file(path):
    """Read ``section.key=value`` lines; '#' starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            if "=" not in line:
                raise ConfigError(f"{where}: expected key=value, got {line!r}")
            key, text = (part.strip() for part in line.split("=", 1))
            if key.count(".") != 1:
                raise ConfigError(f"{where}: key must look like section.name, got {key!r}")
            section, name = key.split(".")
            if section not in _SECTIONS:
                raise ConfigError(f"{where}: unknown section {section!r}")
            values[(section, name)] = _convert(section, name, text, where)
    return values


def build_run_config(config_path=None, overrides=()):
    values = parse_config_file(config_path) if config_path else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        if key.count(".") != 1 or key.split(".")[0] not in _SECTIONS:
            raise ConfigError(f"--set: key must look like section.name, got {key!r}")
        section, name = key.split(".")
        values[(section, name)] = _convert(section, name, text, f"--set {item}")
    kwargs = {section: {} for section in _SECTIONS}
    for (section, name), v in values.items():
        kwargs[section][name] = v
    try:
        cfg = RunConfig(
            arch=ArchConfig(**kwargs["arch"]),
            phase1=Phase1Config(**kwargs["phase1"]),
            phase2=Phase2Config(**kwargs["phase2"]),
            augment=AugmentConfig(**kwargs["augment"]),
            run=RunSettings(**kwargs["run"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    cfg.validate()
    return cfg


def write_resolved_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        for section in _SECTIONS:
            obj = getattr(cfg, section)
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                fh.write(f"{section}.{f.name}={v}\n")


def _net_dtype(cfg):
    return np.dtype(cfg.run.dtype).type


def _ensure_out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory is not writable: {out}")
    return out


def _load_labelled(path, num_classes):
    ds = load_manifest(path, num_classes=num_classes)
    if any(s.label is None for s in ds):
        raise DataError(f"{path}: manifest contains unlabelled samples")
    return ds


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args):
    try:
        out = _ensure_out_dir(args.out)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {args.out}: {exc}") from exc
    spec = SyntheticSpec(
        num_classes=args.classes,
        num_subjects=args.subjects,
        samples_per_subject_class=args.per_class,
        subject_noise=args.subject_noise,
        pattern_noise=args.pattern_noise,
        seed=args.seed,
    )
    manifest, accuracy = gen_synthetic(spec, out)
    print(f"manifest: {manifest}")
    print(f"samples: {spec.num_subjects * spec.num_classes * spec.samples_per_subject_class}")
    print(f"nearest-prototype calibration accuracy: {100 * accuracy:.2f}%")
    return 0


def cmd_train(args):
    cfg = build_run_config(args.config, args.set or ())
    out = _ensure_out_dir(args.out)
    train_ds = _load_labelled(args.data, cfg.arch.num_classes)
    val_ds = _load_labelled(args.val, cfg.arch.num_classes)
    net = EnsembleNetwork(cfg.arch, cfg.run.seed, dtype=_net_dtype(cfg))
    net, curve = run_phase1(net, train_ds, val_ds, cfg.phase1, cfg.augment,
                            verbose=not args.quiet)
    write_resolved_config(cfg, out / "config.resolved.cfg")
    save_checkpoint(net, out / "checkpoint.bne")
    curve.write_csv(out / "curves.csv")
    print(f"checkpoint: {out / 'checkpoint.bne'}")
    print(f"curves: {out / 'curves.csv'}")
    return 0


def _parse_eval_specs(items):
    sets = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--eval expects name=manifest, got {item!r}")
        name, manifest = item.split("=", 1)
        sets[name] = manifest
    return sets


def cmd_retrain(args):
    cfg = build_run_config(args.config, args.set or ())
    out = _ensure_out_dir(args.out)
    net, _ = load_checkpoint(args.ckpt)
    unlabelled = load_manifest(args.unlabelled, num_classes=cfg.arch.num_classes)
    eval_sets = {
        name: _load_labelled(manifest, net.config.num_classes)
        for name, manifest in _parse_eval_specs(args.eval).items()
    }
    net, curve = run_phase2(net, unlabelled, eval_sets, cfg.phase2,
                            verbose=not args.quiet)
    write_resolved_config(cfg, out / "config.resolved.cfg")
    save_checkpoint(net, out / "checkpoint.bne")
    curve.write_csv(out / "curves.csv")
    print(f"checkpoint: {out / 'checkpoint.bne'}")
    print(f"curves: {out / 'curves.csv'}")
    return 0


def _run_trial(manifest_path, cfg, t, trial_dir, quiet):
    """One cross-validation trial: phase 1, before-eval, phase 2, after-eval."""
    dataset = _load_labelled(manifest_path, cfg.arch.num_classes)
    split = split_trial(assign_folds(dataset.subjects()), t)
    parts = {
        "train": dataset.filter_subjects(split.subjects_in_folds(split.labelled_folds)),
        "val": dataset.filter_subjects(split.subjects_in(split.val_fold)),
        "test": dataset.filter_subjects(split.subjects_in(split.test_fold)),
        "unlabelled": dataset.filter_subjects(split.subjects_in_folds(split.unlabelled_folds)),
    }
    trial_dir = Path(trial_dir)
    trial_dir.mkdir(parents=True, exist_ok=True)
    p1 = dataclasses.replace(cfg.phase1, seed=cfg.phase1.seed + 1000 * t)
    p2 = dataclasses.replace(cfg.phase2, seed=cfg.phase2.seed + 1000 * t)
    net = EnsembleNetwork(cfg.arch, cfg.run.seed + t, dtype=_net_dtype(cfg))
    net, curve1 = run_phase1(net, parts["train"], parts["val"], p1, cfg.augment,
                             verbose=not quiet)
    rates = {"fold": float(t)}
    for name in ("train", "val", "test"):
        cm, rate = evaluate(net, parts[name])
        rates[f"{name}_before"] = rate
        if name == "test":
            cm.write_csv(trial_dir / "confusion_test_before.csv")
    save_checkpoint(net, trial_dir / "checkpoint_before.bne")
    eval_sets = {k: parts[k] for k in ("train", "val", "test")}
    net, curve2 = run_phase2(net, parts["unlabelled"], eval_sets, p2,
                             verbose=not quiet)
    for name in ("train", "val", "test"):
        cm, rate = evaluate(net, parts[name])
        rates[f"{name}_after"] = rate
        if name == "test":
            cm.write_csv(trial_dir / "confusion_test_after.csv")
    save_checkpoint(net, trial_dir / "checkpoint_after.bne")
    curve1.write_csv(trial_dir / "curves_phase1.csv")
    curve2.write_csv(trial_dir / "curves_phase2.csv")
    return rates


def cmd_xval(args):
    cfg = build_run_config(args.config, args.set or ())
    out = _ensure_out_dir(args.out)
    write_resolved_config(cfg, out / "config.resolved.cfg")
    folds = list(range(1, 11))
    if args.folds_subset:
        folds = [int(f) for f in args.folds_subset.split(",")]
    jobs = [(args.data, cfg, t, out / f"trial_{t:02d}", args.quiet) for t in folds]
    if args.parallel_trials > 1:
        with ProcessPoolExecutor(max_workers=args.parallel_trials) as pool:
            results = list(pool.map(_run_trial_star, jobs))
    else:
        results = [_run_trial(*job) for job in jobs]

    summary = aggregate_trials(results)
    with open(out / "summary.csv", "w", encoding="utf-8") as fh:
        cols = [c for c in summary.columns if c != "fold"]
        fh.write("metric,mean,std\n")
        for col in cols:
            fh.write(f"{col},{fmt2(summary.mean[col])},{fmt2(summary.std[col])}\n")
    with open(out / "folds.csv", "w", encoding="utf-8") as fh:
        fh.write("fold," + ",".join(str(int(r['fold'])) for r in results) + "\n")
        fh.write("test_after," + ",".join(fmt2(r["test_after"]) for r in results) + "\n")
        fh.write("test_before," + ",".join(fmt2(r["test_before"]) for r in results) + "\n")
        fh.write("difference," + ",".join(
            fmt2(r["test_after"] - r["test_before"]) for r in results) + "\n")

    before = [r["test_before"] for r in results]
    after = [r["test_after"] for r in results]
    ttest_path = out / "ttest.txt"
    try:
        result = paired_t_test(before, after)
        ttest_path.write_text(
            f"t={result.t:.6f} df={result.df} two_tailed_p={result.p:.6f}\n")
    except MetricsError as exc:
        ttest_path.write_text(f"degenerate: {exc}\n")
    print(f"summary: {out / 'summary.csv'}")
    print(f"per-fold table: {out / 'folds.csv'}")
    print(f"paired t-test: {ttest_path.read_text().strip()}")
    return 0


def _run_trial_star(job):
    return _run_trial(*job)


def cmd_eval(args):
    net, _ = load_checkpoint(args.ckpt)
    dataset = _load_labelled(args.data, net.config.num_classes)
    out = _ensure_out_dir(args.out) if args.out else None
    cm, rate = evaluate(net, dataset, mode="ensemble")
    print(f"ensemble rate: {fmt2(rate)}%  ({cm.total} samples)")
    if out:
        cm.write_csv(out / "confusion_ensemble.csv")
    if args.per_branch:
        for b in range(len(net.branches)):
            cm_b, rate_b = evaluate(net, dataset, mode=b)
            print(f"branch {b + 1} rate: {fmt2(rate_b)}%")
            if out:
                cm_b.write_csv(out / f"confusion_branch_{b + 1}.csv")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="branchnet",
        description="Shared-trunk convolutional ensemble with vote-based "
                    "self-training on unlabelled samples.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--subjects", type=int, default=40)
    p.add_argument("--per-class", type=int, default=2,
                   help="samples per subject per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subject-noise", type=float, default=0.1)
    p.add_argument("--pattern-noise", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="phase 1: supervised branch training")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="labelled manifest")
    p.add_argument("--val", required=True, help="validation manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("retrain", help="phase 2: self-training on unlabelled data")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--ckpt", required=True, help="input checkpoint")
    p.add_argument("--unlabelled", required=True, help="unlabelled manifest")
    p.add_argument("--eval", action="append", metavar="NAME=MANIFEST",
                   help="labelled eval set for curve logging (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("xval", help="subject-independent 10-fold cross-validation")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="labelled manifest with subject ids")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--folds-subset", help="comma-separated test folds, e.g. 8,7")
    p.add_argument("--parallel-trials", type=int, default=1)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labelled manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--per-branch", action="store_true",
                   help="also print/write one confusion matrix per branch")
    p.add_argument("--out", help="directory for confusion-matrix CSVs")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DataError, CheckpointError, MetricsError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
