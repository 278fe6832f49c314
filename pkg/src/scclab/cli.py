"""Command-line front end wiring the pipeline end to end.

Commands: generate, pretrain, extract, finetune, evaluate, pipeline. Every
flag can also come from a flat ``key = value`` config file (``--config``);
explicit command-line flags win. Each run writes a manifest that doubles as
a replayable config file. ``--seed`` controls all randomness.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import __version__, datasets, metrics, net, train
from . import graph as graph_mod

REG_FLAGS = {
    "vanilla": "vanilla",
    "label-smoothing": "label_smoothing",
    "entropy": "entropy_reg",
    "mc-dropout": "mc_dropout",
    "mixup": "mixup",
    "ensemble": "ensemble",
}
NOISE_FLAGS = {
    "uniform": "uniform",
    "class-conditional": "class_conditional",
    "neighborhood": "neighborhood",
}

REQUIRED = object()


def _bool(text):
    if isinstance(text, bool):
        return text
    if text.lower() in ("true", "1"):
        return True
    if text.lower() in ("false", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


# Per-command option tables: key -> (default, caster). Keys double as config
# file keys; flag names swap '_' for '-'.
GENERATE_SPEC = {
    "out": (REQUIRED, str),
    "seed": (1, int),
    "classes": (5, int),
    "per_class": (400, int),
    "test_per_class": (400, int),
    "dim": (16, int),
    "spread": (0.5, float),
    "noise": (0.4, float),
    "noise_model": ("uniform", str),
    "verify_per_class": (100, int),
}

_TRAIN_SPEC = {
    "seed": (1, int),
    "reg": ("vanilla", str),
    "epochs": (30, int),
    "batch_size": (32, int),
    "warmup_epochs": (10, int),
    "momentum": (0.9, float),
    "weight_decay": (1e-4, float),
    "mixup_alpha": (0.2, float),
    "dropout_rate": (0.5, float),
    "mc_passes": (50, int),
    "ensemble_size": (5, int),
    "entropy_weight": (0.1, float),
    "smoothing_epsilon": (0.1, float),
    "class_reweighting": (True, _bool),
    "hidden_units": (1024, int),
}

PRETRAIN_SPEC = {
    "data": (REQUIRED, str),
    "test": (None, str),
    "out": (REQUIRED, str),
    "lr": (0.1, float),
    **_TRAIN_SPEC,
}

EXTRACT_SPEC = {
    "data": (REQUIRED, str),
    "checkpoint": (REQUIRED, str),
    "out": (REQUIRED, str),
    "seed": (1, int),
    "reg": ("vanilla", str),
    "mc_passes": (50, int),
    "gba": (False, _bool),
    "k": (10, int),
    "lam": (0.5, float),
    "dump_graph": (False, _bool),
}

FINETUNE_SPEC = {
    "data": (REQUIRED, str),
    "test": (None, str),
    "artifacts": (REQUIRED, str),
    "out": (REQUIRED, str),
    "lr": (0.05, float),
    "gba": (False, _bool),
    "constant_c": (None, float),
    "sweep_c": (False, _bool),
    **_TRAIN_SPEC,
}

EVALUATE_SPEC = {
    "verification": (REQUIRED, str),
    "out": (REQUIRED, str),
    "seed": (1, int),
    "metric_bins": (100, int),
    "diagram_bins": (10, int),
    "sav": (False, _bool),
    "data": (None, str),
    "test": (None, str),
    "artifacts": (None, str),
    "epochs": (30, int),
    "batch_size": (32, int),
    "lr": (0.05, float),
    "warmup_epochs": (10, int),
    "momentum": (0.9, float),
    "weight_decay": (1e-4, float),
    "class_reweighting": (True, _bool),
}

PIPELINE_SPEC = {
    "out": (REQUIRED, str),
    "seed": (1, int),
    "classes": (5, int),
    "per_class": (400, int),
    "test_per_class": (400, int),
    "dim": (16, int),
    "spread": (0.5, float),
    "noise": (0.4, float),
    "noise_model": ("uniform", str),
    "verify_per_class": (100, int),
    "reg": ("vanilla", str),
    "pretrain_epochs": (30, int),
    "finetune_epochs": (30, int),
    "pretrain_lr": (0.1, float),
    "finetune_lr": (0.05, float),
    "batch_size": (32, int),
    "warmup_epochs": (10, int),
    "momentum": (0.9, float),
    "weight_decay": (1e-4, float),
    "mixup_alpha": (0.2, float),
    "dropout_rate": (0.5, float),
    "mc_passes": (50, int),
    "ensemble_size": (5, int),
    "entropy_weight": (0.1, float),
    "smoothing_epsilon": (0.1, float),
    "class_reweighting": (True, _bool),
    "hidden_units": (1024, int),
    "gba": (True, _bool),
    "k": (10, int),
    "lam": (0.5, float),
    "metric_bins": (100, int),
    "diagram_bins": (10, int),
}

COMMAND_SPECS = {
    "generate": GENERATE_SPEC,
    "pretrain": PRETRAIN_SPEC,
    "extract": EXTRACT_SPEC,
    "finetune": FINETUNE_SPEC,
    "evaluate": EVALUATE_SPEC,
    "pipeline": PIPELINE_SPEC,
}
_ALL_KEYS = {key for spec in COMMAND_SPECS.values() for key in spec} | {"providers"}


class CliError(ValueError):
    pass


def _flag_name(key):
    return "--lambda" if key == "lam" else "--" + key.replace("_", "-")


def _add_spec(parser, spec):
    parser.add_argument("--config", default=None, help="flat key = value config file")
    for key, (default, caster) in spec.items():
        flag = _flag_name(key)
        if caster is _bool:
            parser.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction,
                                default=None)
        elif key == "reg":
            parser.add_argument(flag, dest=key, choices=sorted(REG_FLAGS), default=None)
        elif key == "noise_model":
            parser.add_argument(flag, dest=key, choices=sorted(NOISE_FLAGS), default=None)
        else:
            parser.add_argument(flag, dest=key, type=caster, default=None)


def _resolve(args, spec):
    """Merge CLI flags over config-file values over defaults."""
    file_values = {}
    if args.config:
        file_values = train.read_kv(args.config)
        for key in file_values:
            if key not in _ALL_KEYS:
                raise CliError(f"{args.config}: unknown config key {key!r}")
    options = {}
    for key, (default, caster) in spec.items():
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            options[key] = cli_value
        elif key in file_values:
            options[key] = caster(file_values[key])
        elif default is REQUIRED:
            raise CliError(f"missing required option {_flag_name(key)}")
        else:
            options[key] = default
    return options


def _write_manifest(command, options, outdir, started, extra=()):
    values = dict(options)
    lines = [
        f"command: {command}",
        f"tool_version: {__version__}",
        f"duration_seconds: {time.monotonic() - started:.3f}",
        *extra,
    ]
    tmp = os.path.join(outdir, "manifest.txt.tmp")
    train.write_kv(values, tmp, comments=lines)
    os.replace(tmp, os.path.join(outdir, "manifest.txt"))


def _ensure_outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _train_config(options, lr_key="lr", epochs_key="epochs", reg=None):
    return train.TrainConfig(
        epochs=options[epochs_key],
        batch_size=options["batch_size"],
        initial_lr=options[lr_key],
        warmup_epochs=options["warmup_epochs"],
        momentum=options["momentum"],
        weight_decay=options["weight_decay"],
        regularizer=REG_FLAGS[reg if reg is not None else options["reg"]],
        mixup_alpha=options["mixup_alpha"],
        ensemble_size=options["ensemble_size"],
        dropout_rate=options["dropout_rate"],
        mc_passes=options["mc_passes"],
        class_reweighting=options["class_reweighting"],
        hidden_units=options["hidden_units"],
        entropy_weight=options["entropy_weight"],
        smoothing_epsilon=options["smoothing_epsilon"],
        seed=options["seed"],
    ).validate()


def _load_test(options):
    if options.get("test"):
        return datasets.load_dataset(options["test"])
    return None


def cmd_generate(options):
    started = time.monotonic()
    outdir = _ensure_outdir(options["out"])
    seed = options["seed"]
    train_ds, test_ds = datasets.generate_train_test(
        num_classes=options["classes"],
        per_class=options["per_class"],
        test_per_class=options["test_per_class"],
        dim=options["dim"],
        spread=options["spread"],
        seed=seed,
    )
    noisy = datasets.inject_noise(
        train_ds, NOISE_FLAGS[options["noise_model"]], options["noise"],
        seed=train.derive_seed(seed, "noise"),
    )
    verification = datasets.build_verification_set(
        noisy, per_class=options["verify_per_class"],
        seed=train.derive_seed(seed, "verify"),
    )
    datasets.save_dataset(noisy, os.path.join(outdir, "dataset.csv"))
    if len(test_ds):
        datasets.save_dataset(test_ds, os.path.join(outdir, "test.csv"))
    datasets.save_verification(verification, os.path.join(outdir, "verification.csv"))
    _write_manifest("generate", options, outdir, started,
                    extra=[f"flipped: {noisy.flip_count()}"])
    print(f"wrote {len(noisy)} train / {len(test_ds)} test samples, "
          f"{len(verification)} verification entries to {outdir}")
    return 0


def cmd_pretrain(options):
    started = time.monotonic()
    outdir = _ensure_outdir(options["out"])
    ds = datasets.load_dataset(options["data"])
    test_ds = _load_test(options)
    config = _train_config(options)
    result = train.pretrain(ds, config, test_ds)
    net.save_checkpoint(result.models, os.path.join(outdir, "checkpoint.txt"))
    train.save_train_log(result.log, os.path.join(outdir, "train_log.csv"))
    _write_manifest("pretrain", options, outdir, started)
    final = result.log[-1]
    print(f"pretrained {len(result.models)} model(s): "
          f"final loss {final.train_loss:.4f}, test top-1 {final.clean_test_acc:.4f}")
    return 0


def cmd_extract(options):
    started = time.monotonic()
    outdir = _ensure_outdir(options["out"])
    ds = datasets.load_dataset(options["data"])
    models = net.load_checkpoint(options["checkpoint"])
    config = train.TrainConfig(
        regularizer=REG_FLAGS[options["reg"]],
        mc_passes=options["mc_passes"],
        seed=options["seed"],
    )
    artifacts = train.extract(ds, models, config)
    train.save_artifacts(artifacts, outdir)
    if options["gba"] or options["dump_graph"]:
        g = graph_mod.build_knn(
            artifacts.features, k=options["k"], lam=options["lam"], ids=artifacts.ids
        )
        if options["dump_graph"]:
            graph_mod.save_edges_csv(g, os.path.join(outdir, "graph_edges.csv"))
        if options["gba"]:
            smoothed = graph_mod.smooth_artifacts(artifacts, graph=g)
            train.save_artifacts(smoothed, outdir, suffix="_gba")
    _write_manifest("extract", options, outdir, started)
    print(f"extracted artifacts for {len(ds)} samples to {outdir}")
    return 0


def _load_stage2_inputs(options):
    ds = datasets.load_dataset(options["data"])
    suffix = "_gba" if options["gba"] else ""
    artifacts = train.load_artifacts(options["artifacts"], suffix=suffix, ds=ds)
    return ds, artifacts


def cmd_finetune(options):
    started = time.monotonic()
    outdir = _ensure_outdir(options["out"])
    ds, artifacts = _load_stage2_inputs(options)
    test_ds = _load_test(options)
    config = _train_config(options)

    if options["sweep_c"]:
        if test_ds is None:
            raise CliError("--sweep-c needs --test to score each constant")
        rows = []
        for i in range(11):
            c = i / 10
            result = train.finetune_constant(ds, artifacts, c, config, test_ds)
            top1, top5 = metrics.accuracy(result.model, test_ds)
            rows.append((c, top1, top5))
        with open(os.path.join(outdir, "constant_sweep.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["c", "top1", "top5"])
            for c, top1, top5 in rows:
                writer.writerow([f"{c:.1f}", f"{top1:.9g}", f"{top5:.9g}"])
        _write_manifest("finetune", options, outdir, started)
        best = max(rows, key=lambda r: r[1])
        print(f"swept 11 constants: best c={best[0]:.1f} top-1 {best[1]:.4f}")
        return 0

    if options["constant_c"] is not None:
        result = train.finetune_constant(ds, artifacts, options["constant_c"], config, test_ds)
    else:
        result = train.finetune(ds, artifacts, config, test_ds)
    net.save_checkpoint(result.model, os.path.join(outdir, "checkpoint.txt"))
    train.save_train_log(result.log, os.path.join(outdir, "train_log.csv"))
    _write_manifest("finetune", options, outdir, started)
    final = result.log[-1]
    print(f"finetuned: final loss {final.train_loss:.4f}, "
          f"test top-1 {final.clean_test_acc:.4f}")
    return 0


def _provider_metrics(name, scc_path, verification, m_bins):
    ids, conf = train.load_scc_csv(scc_path)
    lookup = dict(zip(ids.tolist(), conf.tolist()))
    missing = [i for i in verification.ids.tolist() if i not in lookup]
    if missing:
        raise CliError(
            f"provider {name}: {len(missing)} verification ids missing from {scc_path}"
        )
    c = np.array([lookup[i] for i in verification.ids.tolist()])
    v = verification.v.astype(np.float64)
    report = metrics.calibration_report(v, c, m_bins=m_bins)
    return c, report


def cmd_evaluate(options, providers):
    started = time.monotonic()
    outdir = _ensure_outdir(options["out"])
    if not providers:
        raise CliError("need at least one --provider name=scc.csv")
    verification = datasets.load_verification(options["verification"])

    sav_inputs = None
    if options["sav"]:
        for key in ("data", "test", "artifacts"):
            if not options.get(key):
                raise CliError(f"--sav needs --{key}")
        ds = datasets.load_dataset(options["data"])
        test_ds = datasets.load_dataset(options["test"])
        artifacts = train.load_artifacts(options["artifacts"], ds=ds)
        config = train.TrainConfig(
            epochs=options["epochs"],
            batch_size=options["batch_size"],
            initial_lr=options["lr"],
            warmup_epochs=options["warmup_epochs"],
            momentum=options["momentum"],
            weight_decay=options["weight_decay"],
            class_reweighting=options["class_reweighting"],
            hidden_units=artifacts.model.layer_sizes[1],
            seed=options["seed"],
        ).validate()
        sav_inputs = (ds, test_ds, artifacts, config)

    rows = []
    for name, scc_path in providers:
        c, report = _provider_metrics(name, scc_path, verification, options["metric_bins"])
        diagram = metrics.calibration_report(
            verification.v.astype(np.float64), c, m_bins=options["diagram_bins"]
        )
        metrics.emit_reliability_csv(
            diagram, os.path.join(outdir, f"reliability_{name}.csv")
        )
        sav_top1 = float("nan")
        if sav_inputs is not None:
            ds, test_ds, artifacts, config = sav_inputs
            ids, conf = train.load_scc_csv(scc_path)
            lookup = dict(zip(ids.tolist(), conf.tolist()))
            try:
                full = np.array([lookup[i] for i in ds.ids.tolist()])
            except KeyError as exc:
                raise CliError(f"provider {name}: dataset id {exc} missing from {scc_path}")
            sav_top1 = metrics.sav_harness(ds, artifacts, full, config, test_ds)
        rows.append((name, report.mse, report.ece, report.oce, sav_top1))
        if not all(np.isfinite([report.mse, report.ece, report.oce])):
            raise CliError(f"provider {name}: non-finite metrics")

    metrics.write_metrics_summary(rows, os.path.join(outdir, "metrics_summary.csv"))
    _write_manifest("evaluate", options, outdir, started,
                    extra=[f"providers: {', '.join(n for n, _ in providers)}"])
    for name, m, e, o, sav in rows:
        print(f"{name}: mse={m:.4f} ece={e:.4f} oce={o:.4f} sav_top1={sav:.4f}")
    return 0


def cmd_pipeline(options):
    started = time.monotonic()
    outdir = _ensure_outdir(options["out"])
    seed = options["seed"]
    data_dir = _ensure_outdir(os.path.join(outdir, "dataset"))
    s1_dir = _ensure_outdir(os.path.join(outdir, "s1"))
    art_dir = _ensure_outdir(os.path.join(outdir, "artifacts"))
    s2_dir = _ensure_outdir(os.path.join(outdir, "s2"))
    eval_dir = _ensure_outdir(os.path.join(outdir, "eval"))

    # generate
    train_ds, test_ds = datasets.generate_train_test(
        num_classes=options["classes"], per_class=options["per_class"],
        test_per_class=options["test_per_class"], dim=options["dim"],
        spread=options["spread"], seed=seed,
    )
    ds = datasets.inject_noise(
        train_ds, NOISE_FLAGS[options["noise_model"]], options["noise"],
        seed=train.derive_seed(seed, "noise"),
    )
    verification = datasets.build_verification_set(
        ds, per_class=options["verify_per_class"], seed=train.derive_seed(seed, "verify")
    )
    datasets.save_dataset(ds, os.path.join(data_dir, "dataset.csv"))
    datasets.save_dataset(test_ds, os.path.join(data_dir, "test.csv"))
    datasets.save_verification(verification, os.path.join(data_dir, "verification.csv"))

    # stage 1
    pre_config = _train_config(options, lr_key="pretrain_lr", epochs_key="pretrain_epochs")
    pre = train.pretrain(ds, pre_config, test_ds)
    net.save_checkpoint(pre.models, os.path.join(s1_dir, "checkpoint.txt"))
    train.save_train_log(pre.log, os.path.join(s1_dir, "train_log.csv"))

    # extract (+ optional graph smoothing)
    artifacts = train.extract(ds, pre.models, pre_config)
    train.save_artifacts(artifacts, art_dir)
    stage2_artifacts = artifacts
    provider = options["reg"]
    if options["gba"]:
        stage2_artifacts = graph_mod.smooth_artifacts(
            artifacts, k=options["k"], lam=options["lam"]
        )
        train.save_artifacts(stage2_artifacts, art_dir, suffix="_gba")
        provider = f"{provider}_gba"

    # stage 2: same regularizer, except ensembles finetune a single model
    stage2_reg = options["reg"] if options["reg"] != "ensemble" else "vanilla"
    ft_config = _train_config(
        options, lr_key="finetune_lr", epochs_key="finetune_epochs", reg=stage2_reg
    )
    ft = train.finetune(ds, stage2_artifacts, ft_config, test_ds)
    net.save_checkpoint(ft.model, os.path.join(s2_dir, "checkpoint.txt"))
    train.save_train_log(ft.log, os.path.join(s2_dir, "train_log.csv"))

    # evaluate the confidence the pipeline actually used
    v = verification.v.astype(np.float64)
    lookup = dict(zip(stage2_artifacts.ids.tolist(), stage2_artifacts.scc.tolist()))
    c = np.array([lookup[i] for i in verification.ids.tolist()])
    report = metrics.calibration_report(v, c, m_bins=options["metric_bins"])
    diagram = metrics.calibration_report(v, c, m_bins=options["diagram_bins"])
    metrics.emit_reliability_csv(diagram, os.path.join(eval_dir, f"reliability_{provider}.csv"))
    top1, top5 = metrics.accuracy(ft.model, test_ds)
    metrics.write_metrics_summary(
        [(provider, report.mse, report.ece, report.oce, top1)],
        os.path.join(eval_dir, "metrics_summary.csv"),
    )
    if not all(np.isfinite([report.mse, report.ece, report.oce, top1])):
        raise CliError("pipeline produced non-finite metrics")

    s1_top1, _ = metrics.accuracy(pre.models[0], test_ds)
    _write_manifest("pipeline", options, outdir, started,
                    extra=[f"s1_top1: {s1_top1:.6f}", f"s2_top1: {top1:.6f}"])
    print(f"pipeline done: s1 top-1 {s1_top1:.4f} -> s2 top-1 {top1:.4f} "
          f"(mse={report.mse:.4f} ece={report.ece:.4f} oce={report.oce:.4f})")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scclab",
        description="confidence-balanced training on noisy web labels, desk scale",
    )
    parser.add_argument("--version", action="version", version=f"scclab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, spec in COMMAND_SPECS.items():
        cmd = sub.add_parser(name)
        _add_spec(cmd, spec)
        if name == "evaluate":
            cmd.add_argument("--provider", action="append", default=None,
                             metavar="NAME=SCC_CSV")
    return parser


def _parse_providers(args, file_values):
    raw = args.provider if getattr(args, "provider", None) else None
    if raw is None and "providers" in file_values:
        raw = [p.strip() for p in file_values["providers"].split(",") if p.strip()]
    providers = []
    for item in raw or []:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise CliError(f"bad provider {item!r}, expected NAME=SCC_CSV")
        providers.append((name, path))
    return providers


def main(argv=None):
    threads = os.environ.get("SCC_LAB_THREADS")
    if threads:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(int(threads))
        except (ImportError, ValueError):
            pass

    parser = build_parser()
    args = parser.parse_args(argv)
    spec = COMMAND_SPECS[args.command]
    try:
        options = _resolve(args, spec)
        if args.command == "generate":
            return cmd_generate(options)
        if args.command == "pretrain":
            return cmd_pretrain(options)
        if args.command == "extract":
            return cmd_extract(options)
        if args.command == "finetune":
            return cmd_finetune(options)
        if args.command == "evaluate":
            file_values = train.read_kv(args.config) if args.config else {}
            return cmd_evaluate(options, _parse_providers(args, file_values))
        return cmd_pipeline(options)
    except (ValueError, OSError, train.TrainingDiverged) as exc:
        print(f"scclab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
