"""Command-line experiment runner.

Commands:

    fedstage centralized  --stage stage_one --synthetic 250 --out runs/c1
    fedstage federated    --stage stage_one --clients 5 --interval 1 ...
    fedstage sweep        --sweep 1..10 ...
    fedstage two-stage    --mode federated ...
    fedstage gen-data     --out data/ --n-per-class 100

Every option can also come from a flat key=value config file passed with
--config; values given as flags win over the file, which wins over the
built-in defaults.  Data comes from a category directory (--data-dir) or
the synthetic generator (--synthetic N, examples per class).

Each run writes report.json, roc.csv, and a rendered roc.png into --out;
federated runs add history.jsonl and the trained weights, sweeps add
summary.csv with a rendered summary.png.  Reruns with the same config
produce byte-identical output files.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import lenet
from .data import (
    STAGE_ONE,
    STAGE_TWO,
    LabeledDataset,
    PartitionScheme,
    build_stage_datasets,
    partition_clients,
    save_pgm,
    split_train_test,
    synth_dataset,
    synth_images,
)
from .federated import (
    FedConfig,
    RoundRecord,
    SynthSpec,
    centralized_train,
    run_stage,
    run_two_stage,
)
from .metrics import EvalMeta, EvalReport, evaluate, write_report_json, write_roc_csv
from .plots import save_roc_figure, save_sweep_figure
from .seeding import mix_seed

DEFAULT_ROUNDS = {STAGE_ONE: 20, STAGE_TWO: 10}
SWEEP_MIN, SWEEP_MAX = 1, 10


class ConfigError(Exception):
    """Invalid or inconsistent configuration; maps to exit code 2."""


@dataclass
class ExperimentConfig:
    """Fully resolved settings for one CLI invocation."""

    command: str
    out: Path
    seed: int = 0
    stage: str = STAGE_ONE
    mode: str = "federated"
    clients: int = 5
    interval: int = 1
    rounds: int | None = None
    rounds_stage_one: int = DEFAULT_ROUNDS[STAGE_ONE]
    rounds_stage_two: int = DEFAULT_ROUNDS[STAGE_TWO]
    lr: float = 0.001
    batch: int = 32
    distribution: str = "balanced"
    data_dir: Path | None = None
    synthetic: int | None = None
    pretrained: Path | None = None
    sweep: tuple[int, int] = (SWEEP_MIN, SWEEP_MAX)
    workers: int = 1
    n_per_class: int = 100


# option name -> parser for values coming from a config file
_CASTERS = {
    "stage": str,
    "mode": str,
    "distribution": str,
    "data_dir": str,
    "pretrained": str,
    "out": str,
    "sweep": str,
    "rounds": int,
    "rounds_stage_one": int,
    "rounds_stage_two": int,
    "clients": int,
    "interval": int,
    "batch": int,
    "seed": int,
    "synthetic": int,
    "workers": int,
    "n_per_class": int,
    "lr": float,
}


def _read_config_file(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _CASTERS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def _parse_sweep(text: str) -> tuple[int, int]:
    match = re.fullmatch(r"(\d+)\.\.(\d+)", text.strip())
    if not match:
        raise ConfigError(f"sweep range must look like 1..10, got {text!r}")
    lo, hi = int(match.group(1)), int(match.group(2))
    if not (SWEEP_MIN <= lo <= hi <= SWEEP_MAX):
        raise ConfigError(
            f"sweep range must satisfy {SWEEP_MIN} <= a <= b <= {SWEEP_MAX}, got {lo}..{hi}"
        )
    return lo, hi


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedstage",
        description="Two-stage federated transfer learning experiments on 28x28 grayscale images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, *, data: bool = True) -> None:
        p.add_argument("--config", type=Path, help="flat key = value config file; flags win")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed (default 0)")
        if data:
            p.add_argument("--data-dir", help="directory with healthy/, covid/, non_covid/ PGMs")
            p.add_argument("--synthetic", type=int, metavar="N",
                           help="use generated data with N examples per class")

    def add_training(p: argparse.ArgumentParser) -> None:
        p.add_argument("--rounds", type=int, help="training rounds (default 20 stage_one, 10 stage_two)")
        p.add_argument("--lr", type=float, help="learning rate (default 0.001)")
        p.add_argument("--batch", type=int, help="batch size (default 32)")

    def add_federated(p: argparse.ArgumentParser) -> None:
        p.add_argument("--clients", type=int, help="number of simulated clients (default 5)")
        p.add_argument("--interval", type=int, help="local epochs per round (default 1)")
        p.add_argument("--distribution", choices=["balanced", "unbalanced"],
                       help="client data split (default balanced)")
        p.add_argument("--workers", type=int, help="client worker threads (default 1)")

    p = sub.add_parser("centralized", help="single-site training baseline")
    add_common(p)
    add_training(p)
    p.add_argument("--stage", choices=[STAGE_ONE, STAGE_TWO], help="which task (default stage_one)")
    p.add_argument("--pretrained", help="stage-one weight file (required for stage_two)")

    p = sub.add_parser("federated", help="one federated training stage")
    add_common(p)
    add_training(p)
    add_federated(p)
    p.add_argument("--stage", choices=[STAGE_ONE, STAGE_TWO], help="which task (default stage_one)")
    p.add_argument("--pretrained", help="stage-one weight file (required for stage_two)")

    p = sub.add_parser("sweep", help="federated runs over a range of averaging intervals")
    add_common(p)
    add_training(p)
    add_federated(p)
    p.add_argument("--stage", choices=[STAGE_ONE, STAGE_TWO], help="which task (default stage_one)")
    p.add_argument("--pretrained", help="stage-one weight file (required for stage_two)")
    p.add_argument("--sweep", help="interval range a..b (default 1..10)")

    p = sub.add_parser("two-stage", help="full pipeline: stage one, transfer, stage two")
    add_common(p)
    p.add_argument("--mode", choices=["centralized", "federated"],
                   help="training setting for both stages (default federated)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.001)")
    p.add_argument("--batch", type=int, help="batch size (default 32)")
    p.add_argument("--rounds-stage-one", type=int, help="stage-one rounds (default 20)")
    p.add_argument("--rounds-stage-two", type=int, help="stage-two rounds (default 10)")
    add_federated(p)

    p = sub.add_parser("gen-data", help="write a synthetic PGM category tree for --data-dir")
    add_common(p, data=False)
    p.add_argument("--n-per-class", type=int, help="images per category (default 100)")

    return parser


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    file_values: dict[str, str] = {}
    if getattr(args, "config", None) is not None:
        file_values = _read_config_file(args.config)

    cfg = ExperimentConfig(command=args.command, out=Path("."))

    def pick(key: str):
        flag = getattr(args, key, None)
        if flag is not None:
            return flag
        if key in file_values:
            try:
                return _CASTERS[key](file_values[key])
            except ValueError as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
        return None

    out = pick("out")
    if out is None:
        raise ConfigError("an output directory is required (--out)")
    cfg.out = Path(out)

    for key in ("seed", "stage", "mode", "clients", "interval", "lr", "batch",
                "distribution", "synthetic", "workers", "n_per_class",
                "rounds", "rounds_stage_one", "rounds_stage_two"):
        value = pick(key)
        if value is not None:
            setattr(cfg, key, value)

    data_dir = pick("data_dir")
    if data_dir is not None:
        cfg.data_dir = Path(data_dir)
    pretrained = pick("pretrained")
    if pretrained is not None:
        cfg.pretrained = Path(pretrained)
    sweep = pick("sweep")
    if sweep is not None:
        cfg.sweep = _parse_sweep(sweep)

    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {cfg.lr}")
    for name in ("batch", "clients", "interval", "workers", "rounds_stage_one",
                 "rounds_stage_two", "n_per_class"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1, got {getattr(cfg, name)}")
    if cfg.rounds is not None and cfg.rounds < 1:
        raise ConfigError(f"rounds must be >= 1, got {cfg.rounds}")
    if cfg.seed < 0:
        raise ConfigError(f"seed must be non-negative, got {cfg.seed}")

    if cfg.command == "gen-data":
        return

    if (cfg.data_dir is None) == (cfg.synthetic is None):
        raise ConfigError("exactly one data source is required: --data-dir or --synthetic N")
    if cfg.data_dir is not None and not cfg.data_dir.is_dir():
        raise ConfigError(f"data directory not found: {cfg.data_dir}")
    if cfg.synthetic is not None and cfg.synthetic < 2:
        raise ConfigError(f"--synthetic needs at least 2 examples per class, got {cfg.synthetic}")

    if cfg.command in ("federated", "sweep") or (
        cfg.command == "two-stage" and cfg.mode == "federated"
    ):
        if cfg.distribution == "unbalanced" and cfg.clients != 5:
            raise ConfigError(
                "the unbalanced distribution fixes five clients at shares "
                f"{PartitionScheme.UNBALANCED}; got --clients {cfg.clients}"
            )

    if cfg.command in ("centralized", "federated", "sweep") and cfg.stage == STAGE_TWO:
        if cfg.pretrained is None:
            raise ConfigError("stage_two requires --pretrained with stage-one weights")
        if not cfg.pretrained.is_file():
            raise ConfigError(f"pretrained weight file not found: {cfg.pretrained}")


# ---------------------------------------------------------------------------
# Seed derivations (one master seed fans out to every stochastic choice)
# ---------------------------------------------------------------------------

def _seeds(cfg: ExperimentConfig, stage: str) -> dict[str, int]:
    return {
        "init": mix_seed(cfg.seed, "init"),
        "shuffle": mix_seed(mix_seed(cfg.seed, "shuffle"), stage),
        "split": mix_seed(mix_seed(cfg.seed, "split"), stage),
        "partition": mix_seed(mix_seed(cfg.seed, "partition"), stage),
        "synth": mix_seed(mix_seed(cfg.seed, "synth"), stage),
    }


def _stage_dataset(cfg: ExperimentConfig, stage: str) -> LabeledDataset:
    if cfg.data_dir is not None:
        stage_one, stage_two = build_stage_datasets(cfg.data_dir)
        return stage_one if stage == STAGE_ONE else stage_two
    return synth_dataset(cfg.synthetic, _seeds(cfg, stage)["synth"], stage)


def _scheme(cfg: ExperimentConfig) -> PartitionScheme:
    if cfg.distribution == "unbalanced":
        return PartitionScheme.unbalanced()
    return PartitionScheme.balanced(cfg.clients)


def _stage_rounds(cfg: ExperimentConfig, stage: str) -> int:
    if cfg.rounds is not None:
        return cfg.rounds
    return DEFAULT_ROUNDS[stage]


# ---------------------------------------------------------------------------
# Output emission
# ---------------------------------------------------------------------------

def _write_history(history: list[RoundRecord], path: Path) -> None:
    lines = [json.dumps(rec.to_json_dict()) for rec in history]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def _emit_run(
    outdir: Path,
    report: EvalReport,
    weights: lenet.ModelWeights,
    history: list[RoundRecord] | None = None,
) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    write_report_json(report, outdir / "report.json")
    write_roc_csv(report.roc, outdir / "roc.csv")
    title = f"{report.stage} ({report.training_setting})"
    save_roc_figure([(f"AUC = {report.auc:.4f}", report.roc)], outdir / "roc.png", title=title)
    lenet.save_weights(weights, outdir / "weights.fstw")
    if history is not None:
        _write_history(history, outdir / "history.jsonl")


def _summary_row(interval: int, report: EvalReport) -> tuple:
    return (interval, report.auc, report.precision, report.sensitivity, report.specificity)


def _write_summary_csv(rows: list[tuple], path: Path) -> None:
    lines = ["interval,auc,precision,sensitivity,specificity"]
    for interval, auc_v, pre, sen, spe in rows:
        lines.append(f"{interval},{auc_v!r},{pre!r},{sen!r},{spe!r}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def _sizes_extra(train: LabeledDataset, test: LabeledDataset) -> dict[str, str]:
    return {"train_size": str(len(train)), "test_size": str(len(test))}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_centralized(cfg: ExperimentConfig) -> None:
    seeds = _seeds(cfg, cfg.stage)
    dataset = _stage_dataset(cfg, cfg.stage)
    train, test = split_train_test(dataset, 0.8, seeds["split"])
    if cfg.stage == STAGE_ONE:
        weights = lenet.init_weights(seeds["init"])
    else:
        weights = lenet.load_weights(cfg.pretrained)
    rounds = _stage_rounds(cfg, cfg.stage)
    weights, _ = centralized_train(weights, train, rounds, cfg.lr, cfg.batch, seeds["shuffle"])
    extra = _sizes_extra(train, test)
    if cfg.stage == STAGE_TWO:
        extra["pretrained_file"] = str(cfg.pretrained)
    report = evaluate(weights, test, EvalMeta(cfg.stage, "centralized"), extra)
    _emit_run(cfg.out, report, weights)
    print(f"centralized {cfg.stage}: auc={report.auc:.4f} -> {cfg.out}")


def _run_federated_stage(
    cfg: ExperimentConfig, stage: str, interval: int, outdir: Path
) -> EvalReport:
    seeds = _seeds(cfg, stage)
    dataset = _stage_dataset(cfg, stage)
    train, test = split_train_test(dataset, 0.8, seeds["split"])
    shards = partition_clients(train, _scheme(cfg), seeds["partition"])
    fed = FedConfig(
        stage=stage,
        rounds=_stage_rounds(cfg, stage),
        n_clients=cfg.clients,
        interval=interval,
        lr=cfg.lr,
        batch_size=cfg.batch,
        init_seed=seeds["init"],
        shuffle_seed=seeds["shuffle"],
        pretrained_path=str(cfg.pretrained) if cfg.pretrained else None,
    )
    weights, history = run_stage(fed, shards, max_workers=cfg.workers)
    extra = _sizes_extra(train, test)
    extra["client_sizes"] = ",".join(str(len(s)) for s in shards)
    if stage == STAGE_TWO:
        extra["pretrained_file"] = str(cfg.pretrained)
    meta = EvalMeta(stage, "federated", cfg.distribution, interval)
    report = evaluate(weights, test, meta, extra)
    _emit_run(outdir, report, weights, history)
    return report


def cmd_federated(cfg: ExperimentConfig) -> None:
    report = _run_federated_stage(cfg, cfg.stage, cfg.interval, cfg.out)
    print(f"federated {cfg.stage}: auc={report.auc:.4f} -> {cfg.out}")


def cmd_sweep(cfg: ExperimentConfig) -> None:
    lo, hi = cfg.sweep
    rows = []
    for interval in range(lo, hi + 1):
        outdir = cfg.out / f"interval_{interval:02d}"
        report = _run_federated_stage(cfg, cfg.stage, interval, outdir)
        rows.append(_summary_row(interval, report))
        print(f"sweep interval={interval}: auc={report.auc:.4f}")
    _write_summary_csv(rows, cfg.out / "summary.csv")
    save_sweep_figure(rows, cfg.out / "summary.png")
    print(f"sweep summary -> {cfg.out / 'summary.csv'}")


def cmd_two_stage(cfg: ExperimentConfig) -> None:
    stage1_out = cfg.out / STAGE_ONE
    stage2_out = cfg.out / STAGE_TWO
    stage1_out.mkdir(parents=True, exist_ok=True)
    stage2_out.mkdir(parents=True, exist_ok=True)
    weight_file = stage1_out / "weights.fstw"

    if cfg.mode == "federated":
        stage1 = FedConfig(
            stage=STAGE_ONE,
            rounds=cfg.rounds_stage_one,
            n_clients=cfg.clients,
            interval=cfg.interval,
            lr=cfg.lr,
            batch_size=cfg.batch,
            init_seed=mix_seed(cfg.seed, "init"),
            shuffle_seed=_seeds(cfg, STAGE_ONE)["shuffle"],
            save_path=str(weight_file),
        )
        stage2 = FedConfig(
            stage=STAGE_TWO,
            rounds=cfg.rounds_stage_two,
            n_clients=cfg.clients,
            interval=cfg.interval,
            lr=cfg.lr,
            batch_size=cfg.batch,
            init_seed=mix_seed(cfg.seed, "init"),
            shuffle_seed=_seeds(cfg, STAGE_TWO)["shuffle"],
            pretrained_path=str(weight_file),
        )
        source = (
            {"data_root": cfg.data_dir}
            if cfg.data_dir is not None
            else {"synth": SynthSpec(cfg.synthetic, mix_seed(cfg.seed, "synth"))}
        )
        res1, res2 = run_two_stage(
            stage1,
            stage2,
            scheme=_scheme(cfg),
            split_seed=mix_seed(cfg.seed, "split"),
            partition_seed=mix_seed(cfg.seed, "partition"),
            max_workers=cfg.workers,
            **source,
        )
        _emit_run(stage1_out, res1.report, res1.weights, res1.history)
        _emit_run(stage2_out, res2.report, res2.weights, res2.history)
        reports = (res1.report, res2.report)
    else:
        reports = []
        for stage, outdir, rounds in (
            (STAGE_ONE, stage1_out, cfg.rounds_stage_one),
            (STAGE_TWO, stage2_out, cfg.rounds_stage_two),
        ):
            seeds = _seeds(cfg, stage)
            dataset = _stage_dataset(cfg, stage)
            train, test = split_train_test(dataset, 0.8, seeds["split"])
            if stage == STAGE_ONE:
                weights = lenet.init_weights(seeds["init"])
            else:
                weights = lenet.load_weights(weight_file)
            weights, _ = centralized_train(weights, train, rounds, cfg.lr, cfg.batch, seeds["shuffle"])
            extra = _sizes_extra(train, test)
            if stage == STAGE_TWO:
                extra["pretrained_file"] = str(weight_file)
            report = evaluate(weights, test, EvalMeta(stage, "centralized"), extra)
            _emit_run(outdir, report, weights)
            reports.append(report)
        reports = tuple(reports)

    for report in reports:
        print(f"two-stage {report.stage}: auc={report.auc:.4f}")
    print(f"two-stage outputs -> {cfg.out}")


def cmd_gen_data(cfg: ExperimentConfig) -> None:
    categories = (("healthy", "disc"), ("covid", "thin_ring"), ("non_covid", "thick_ring"))
    for category, kind in categories:
        cat_dir = cfg.out / category
        cat_dir.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(mix_seed(cfg.seed, "gen", category))
        images = synth_images(kind, cfg.n_per_class, rng)
        for i in range(images.shape[0]):
            save_pgm(cat_dir / f"img_{i:04d}.pgm", images[i, 0])
    print(f"wrote {cfg.n_per_class} images per category -> {cfg.out}")


_COMMANDS = {
    "centralized": cmd_centralized,
    "federated": cmd_federated,
    "sweep": cmd_sweep,
    "two-stage": cmd_two_stage,
    "gen-data": cmd_gen_data,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        _COMMANDS[cfg.command](cfg)
    except Exception as exc:  # runtime failure, config was plausible
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
