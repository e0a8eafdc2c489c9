"""Simulated federated training with size-weighted weight averaging.

One round: broadcast the global weights, let every client train for
`interval` local epochs on its own shard, then replace the global weights
with the size-weighted mean of the client results.  Stage one starts from
a seeded random init and persists its final weights; stage two starts
from a stage-one weight file.

Determinism: client shuffle seeds are derived per (round, client) from a
base seed, and averaging accumulates in float64 in client index order, so
a run is reproducible bit-for-bit regardless of how many worker threads
execute the clients.  Only weights and shard sizes ever cross the
client/server boundary; image data stays inside the client step.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
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
    split_train_test,
    synth_dataset,
)
from .lenet import ModelWeights
from .metrics import EvalMeta, EvalReport, evaluate
from .seeding import mix_seed

STAGES = (STAGE_ONE, STAGE_TWO)


class StageOrderError(RuntimeError):
    """Stage two was started without a readable stage-one weight file."""


@dataclass
class FedConfig:
    """Configuration of one federated training stage.

    interval is the federated averaging interval: the number of local
    epochs each client runs per round.  pretrained_path is required for
    stage two (where the model starts from stage-one weights) and ignored
    for stage one; save_path, when set, is where a stage-one run persists
    its final weights.
    """

    stage: str
    rounds: int
    n_clients: int
    interval: int = 1
    lr: float = 0.001
    batch_size: int = 32
    init_seed: int = 0
    shuffle_seed: int = 0
    pretrained_path: str | None = None
    save_path: str | None = None

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.n_clients < 1:
            raise ValueError(f"n_clients must be >= 1, got {self.n_clients}")
        if self.interval < 1:
            raise ValueError(f"interval must be >= 1, got {self.interval}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.stage == STAGE_TWO and not self.pretrained_path:
            raise ValueError("stage_two requires pretrained_path")


@dataclass
class RoundRecord:
    """Bookkeeping for one federated round.

    duration_s is wall-clock time; it is kept out of to_json_dict so
    serialized histories stay byte-identical across reruns.
    """

    round_index: int
    client_losses: list[float]
    weights_checksum: str
    duration_s: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "round": self.round_index,
            "client_losses": self.client_losses,
            "weights_checksum": self.weights_checksum,
        }


def federated_average(
    client_weights: list[ModelWeights], client_sizes: list[int]
) -> ModelWeights:
    """Size-weighted mean of client weight dicts.

    Every entry of the result is sum_i (|D_i| / |D|) * w_i, accumulated in
    float64 in client index order and stored as float32.  A single client
    therefore gets weight 1 and passes through bit-exactly.
    """
    if not client_weights:
        raise ValueError("federated_average: no client weights given")
    if len(client_weights) != len(client_sizes):
        raise ValueError(
            f"federated_average: {len(client_weights)} weight sets but "
            f"{len(client_sizes)} sizes"
        )
    if any(int(s) <= 0 for s in client_sizes):
        raise ValueError(f"federated_average: client sizes must be positive, got {client_sizes}")
    names = list(client_weights[0].keys())
    for i, cw in enumerate(client_weights[1:], start=1):
        if set(cw.keys()) != set(names):
            raise ValueError(f"federated_average: client {i} has mismatched tensor names")
        for name in names:
            if cw[name].shape != client_weights[0][name].shape:
                raise ValueError(
                    f"federated_average: client {i} tensor {name!r} has shape "
                    f"{cw[name].shape}, expected {client_weights[0][name].shape}"
                )
    total = float(sum(int(s) for s in client_sizes))
    coefs = [int(s) / total for s in client_sizes]
    out: ModelWeights = {}
    for name in names:
        acc = np.zeros(client_weights[0][name].shape, dtype=np.float64)
        for coef, cw in zip(coefs, client_weights):
            acc += coef * cw[name].astype(np.float64)
        out[name] = acc.astype(np.float32)
    return out


def _train_client_with_loss(
    global_weights: ModelWeights,
    client_data: LabeledDataset,
    interval: int,
    lr: float,
    batch_size: int,
    shuffle_seed: int,
) -> tuple[ModelWeights, list[float]]:
    """Local training: `interval` epochs from a copy of the global weights.

    Epoch k (1-based) shuffles with seed shuffle_seed + k - 1, so a
    one-epoch client step is exactly one train_epoch call with the given
    seed.  Returns the new weights and all per-batch losses.
    """
    if len(client_data) < 1:
        raise ValueError("train_client: client dataset is empty")
    weights = dict(global_weights)
    losses: list[float] = []
    for k in range(interval):
        weights, epoch_losses = lenet.train_epoch_with_loss(
            weights, client_data, lr, batch_size, shuffle_seed + k
        )
        losses.extend(epoch_losses)
    return weights, losses


def train_client(
    global_weights: ModelWeights,
    client_data: LabeledDataset,
    interval: int,
    lr: float,
    batch_size: int,
    shuffle_seed: int,
) -> ModelWeights:
    """One client update; the global weights value is left untouched."""
    weights, _ = _train_client_with_loss(
        global_weights, client_data, interval, lr, batch_size, shuffle_seed
    )
    return weights


def client_seed(shuffle_seed_base: int, round_index: int, client_index: int) -> int:
    """Shuffle seed for one client in one round."""
    return mix_seed(shuffle_seed_base, round_index, client_index)


def run_stage(
    config: FedConfig,
    shards: list[LabeledDataset],
    max_workers: int = 1,
) -> tuple[ModelWeights, list[RoundRecord]]:
    """Run one full federated stage over fixed client shards.

    Clients may train in worker threads, but results are gathered and
    averaged in client index order, so the outcome is bit-identical to a
    sequential run.  Stage one saves its final weights to
    config.save_path when that is set; stage two loads its starting
    weights from config.pretrained_path.
    """
    if len(shards) != config.n_clients:
        raise ValueError(
            f"config names {config.n_clients} clients but got {len(shards)} shards"
        )
    for i, shard in enumerate(shards):
        if len(shard) < 1:
            raise ValueError(f"client {i} has an empty shard")

    if config.stage == STAGE_ONE:
        global_weights = lenet.init_weights(config.init_seed)
    else:
        if not config.pretrained_path or not Path(config.pretrained_path).is_file():
            raise StageOrderError(
                f"stage_two requires the stage-one weight file, none at "
                f"{config.pretrained_path!r}; run stage one first"
            )
        global_weights = lenet.load_weights(config.pretrained_path)

    sizes = [len(s) for s in shards]
    history: list[RoundRecord] = []
    for t in range(1, config.rounds + 1):
        started = time.perf_counter()
        seeds = [client_seed(config.shuffle_seed, t, i) for i in range(config.n_clients)]

        def client_job(i: int):
            return _train_client_with_loss(
                global_weights, shards[i], config.interval, config.lr,
                config.batch_size, seeds[i],
            )

        if max_workers > 1 and config.n_clients > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                results = list(pool.map(client_job, range(config.n_clients)))
        else:
            results = [client_job(i) for i in range(config.n_clients)]

        global_weights = federated_average([w for w, _ in results], sizes)
        history.append(
            RoundRecord(
                round_index=t,
                client_losses=[float(np.mean(losses)) for _, losses in results],
                weights_checksum=lenet.weights_checksum(global_weights),
                duration_s=time.perf_counter() - started,
            )
        )

    if config.stage == STAGE_ONE and config.save_path:
        lenet.save_weights(global_weights, config.save_path)
    return global_weights, history


def centralized_train(
    initial_weights: ModelWeights,
    dataset: LabeledDataset,
    epochs: int,
    lr: float,
    batch_size: int,
    shuffle_seed: int,
) -> tuple[ModelWeights, list[float]]:
    """Plain single-site training baseline; returns per-epoch mean losses.

    Epoch t shuffles with the same derived seed a one-client federated
    run would use in round t, so a federated run with one client and a
    one-epoch interval reproduces this exactly.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    weights = dict(initial_weights)
    epoch_losses: list[float] = []
    for t in range(1, epochs + 1):
        weights, losses = lenet.train_epoch_with_loss(
            weights, dataset, lr, batch_size, client_seed(shuffle_seed, t, 0)
        )
        epoch_losses.append(float(np.mean(losses)))
    return weights, epoch_losses


# ---------------------------------------------------------------------------
# Two-stage pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Synthetic data source: n_per_class examples per class per stage."""

    n_per_class: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_per_class < 1:
            raise ValueError(f"n_per_class must be >= 1, got {self.n_per_class}")


@dataclass
class StageResult:
    """Everything a stage run produced."""

    weights: ModelWeights
    history: list[RoundRecord]
    report: EvalReport


def _file_checksum(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_two_stage(
    stage1: FedConfig,
    stage2: FedConfig,
    *,
    scheme: PartitionScheme,
    data_root=None,
    synth: SynthSpec | None = None,
    split_seed: int = 0,
    partition_seed: int = 0,
    max_workers: int = 1,
) -> tuple[StageResult, StageResult]:
    """Full pipeline: train stage one, persist weights, transfer to stage two.

    Data comes either from a category directory tree (data_root) or from
    the synthetic generator (synth).  Each stage's dataset is split 80/20
    stratified and the training half partitioned across clients with the
    given scheme.  Stage two starts from the weight file stage one wrote;
    both stages are evaluated on their own held-out test sets.
    """
    if (data_root is None) == (synth is None):
        raise ValueError("exactly one of data_root and synth must be given")
    if stage1.stage != STAGE_ONE or stage2.stage != STAGE_TWO:
        raise ValueError("configs must be a stage_one, stage_two pair")
    if not stage1.save_path:
        raise ValueError("stage one must set save_path so stage two can load it")
    if stage2.pretrained_path != stage1.save_path:
        raise ValueError("stage two must load the file stage one saves")

    if data_root is not None:
        ds1, ds2 = build_stage_datasets(data_root)
    else:
        ds1 = synth_dataset(synth.n_per_class, mix_seed(synth.seed, STAGE_ONE), STAGE_ONE)
        ds2 = synth_dataset(synth.n_per_class, mix_seed(synth.seed, STAGE_TWO), STAGE_TWO)

    results = []
    for config, dataset in ((stage1, ds1), (stage2, ds2)):
        train, test = split_train_test(dataset, 0.8, mix_seed(split_seed, config.stage))
        shards = partition_clients(train, scheme, mix_seed(partition_seed, config.stage))
        weights, history = run_stage(config, shards, max_workers=max_workers)
        extra = {"train_size": str(len(train)), "test_size": str(len(test))}
        if config.stage == STAGE_ONE:
            extra["weights_file"] = str(config.save_path)
            extra["weights_checksum"] = _file_checksum(config.save_path)
        else:
            extra["pretrained_file"] = str(config.pretrained_path)
            extra["pretrained_checksum"] = _file_checksum(config.pretrained_path)
        meta = EvalMeta(
            stage=config.stage,
            training_setting="federated",
            distribution=scheme.kind,
            interval=config.interval,
        )
        results.append(StageResult(weights, history, evaluate(weights, test, meta, extra)))
    return results[0], results[1]
