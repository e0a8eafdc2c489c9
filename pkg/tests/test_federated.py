"""Round orchestration: size-weighted averaging, client training, two-stage runs."""

import json

import numpy as np
import numpy.testing as npt
import pytest

from fedstage.data import STAGE_ONE, STAGE_TWO, PartitionScheme, partition_clients, synth_dataset
from fedstage.federated import (
    FedConfig,
    RoundRecord,
    StageOrderError,
    SynthSpec,
    centralized_train,
    client_seed,
    federated_average,
    run_stage,
    run_two_stage,
    train_client,
)
from fedstage.lenet import WEIGHT_SHAPES, init_weights, load_weights, train_epoch, train_epoch_with_loss
from fedstage.seeding import mix_seed

_NAMES = [name for name, _ in WEIGHT_SHAPES]


def _random_weight_sets(rng, n_clients):
    shapes = {"a": (3, 2), "b": (4,), "c": (2, 2, 2)}
    return [
        {k: rng.normal(size=s).astype(np.float32) for k, s in shapes.items()}
        for _ in range(n_clients)
    ]


# ---------------------------------------------------------------------------
# Config and record types
# ---------------------------------------------------------------------------

def test_fed_config_validation():
    good = FedConfig(stage=STAGE_ONE, rounds=1, n_clients=1)
    assert good.interval == 1 and good.lr == 0.001 and good.batch_size == 32
    with pytest.raises(ValueError, match="rounds"):
        FedConfig(stage=STAGE_ONE, rounds=0, n_clients=1)
    with pytest.raises(ValueError, match="n_clients"):
        FedConfig(stage=STAGE_ONE, rounds=1, n_clients=0)
    with pytest.raises(ValueError, match="interval"):
        FedConfig(stage=STAGE_ONE, rounds=1, n_clients=1, interval=0)
    with pytest.raises(ValueError, match="learning rate"):
        FedConfig(stage=STAGE_ONE, rounds=1, n_clients=1, lr=0.0)
    with pytest.raises(ValueError, match="learning rate"):
        FedConfig(stage=STAGE_ONE, rounds=1, n_clients=1, lr=-0.1)
    with pytest.raises(ValueError, match="batch size"):
        FedConfig(stage=STAGE_ONE, rounds=1, n_clients=1, batch_size=0)
    with pytest.raises(ValueError, match="stage"):
        FedConfig(stage="stage_three", rounds=1, n_clients=1)
    with pytest.raises(ValueError, match="pretrained_path"):
        FedConfig(stage=STAGE_TWO, rounds=1, n_clients=1)


def test_round_record_json_dict_has_no_timing():
    record = RoundRecord(round_index=3, client_losses=[0.5, 0.25], weights_checksum="ab12", duration_s=1.25)
    assert record.to_json_dict() == {
        "round": 3,
        "client_losses": [0.5, 0.25],
        "weights_checksum": "ab12",
    }


# ---------------------------------------------------------------------------
# Weighted averaging
# ---------------------------------------------------------------------------

def test_average_single_client_is_identity():
    rng = np.random.default_rng(0)
    (w,) = _random_weight_sets(rng, 1)
    out = federated_average([w], [17])
    for name in w:
        npt.assert_array_equal(out[name], w[name])


def test_average_equal_sizes_is_midpoint():
    rng = np.random.default_rng(1)
    x, y = _random_weight_sets(rng, 2)
    out = federated_average([x, y], [5, 5])
    for name in x:
        expected = ((x[name].astype(np.float64) + y[name].astype(np.float64)) / 2).astype(np.float32)
        npt.assert_array_equal(out[name], expected)


def test_average_three_to_one_weighting():
    a = {"w": np.array([0.0], dtype=np.float32)}
    b = {"w": np.array([4.0], dtype=np.float32)}
    out = federated_average([a, b], [3, 1])
    assert out["w"][0] == pytest.approx(1.0, abs=1e-7)


def test_average_convex_hull_and_permutation_randomized():
    for trial in range(25):
        rng = np.random.default_rng(1300 + trial)
        n = int(rng.integers(2, 6))
        clients = _random_weight_sets(rng, n)
        sizes = [int(s) for s in rng.integers(1, 50, size=n)]
        avg = federated_average(clients, sizes)

        # bit-stable in fixed client order
        again = federated_average(clients, sizes)
        for name in avg:
            assert avg[name].dtype == np.float32
            npt.assert_array_equal(avg[name], again[name])

        perm = rng.permutation(n)
        permuted = federated_average([clients[i] for i in perm], [sizes[i] for i in perm])
        for name in avg:
            stack = np.stack([c[name] for c in clients])
            lo = np.nextafter(stack.min(axis=0), -np.inf)
            hi = np.nextafter(stack.max(axis=0), np.inf)
            assert np.all(avg[name] >= lo) and np.all(avg[name] <= hi)
            # order independence up to the final float32 rounding
            gap = np.abs(avg[name] - permuted[name])
            ulp = np.spacing(np.maximum(np.abs(avg[name]), np.abs(permuted[name])))
            assert np.all(gap <= ulp)


def test_average_identical_clients_fixpoint():
    rng = np.random.default_rng(2)
    (w,) = _random_weight_sets(rng, 1)
    for n in (2, 3, 4):
        out = federated_average([w] * n, [7] * n)
        for name in w:
            gap = np.abs(out[name] - w[name])
            assert np.all(gap <= np.spacing(np.abs(w[name])))


def test_average_validation_errors():
    rng = np.random.default_rng(3)
    x, y = _random_weight_sets(rng, 2)
    with pytest.raises(ValueError, match="no client"):
        federated_average([], [])
    with pytest.raises(ValueError, match="sizes"):
        federated_average([x, y], [1])
    with pytest.raises(ValueError, match="positive"):
        federated_average([x, y], [1, 0])
    bad_names = dict(x)
    bad_names["zzz"] = bad_names.pop("a")
    with pytest.raises(ValueError, match="names"):
        federated_average([x, bad_names], [1, 1])
    bad_shape = dict(x)
    bad_shape["b"] = np.zeros(5, dtype=np.float32)
    with pytest.raises(ValueError, match="shape"):
        federated_average([x, bad_shape], [1, 1])


# ---------------------------------------------------------------------------
# Client training
# ---------------------------------------------------------------------------

def test_train_client_zero_rate_returns_global_weights():
    ds = synth_dataset(5, seed=10)
    global_weights = init_weights(10)
    out = train_client(global_weights, ds, interval=3, lr=0.0, batch_size=4, shuffle_seed=1)
    for name in _NAMES:
        npt.assert_array_equal(out[name], global_weights[name])


def test_train_client_interval_chains_epochs():
    ds = synth_dataset(5, seed=11)
    global_weights = init_weights(11)
    out = train_client(global_weights, ds, interval=2, lr=0.01, batch_size=4, shuffle_seed=30)
    manual = train_epoch(global_weights, ds, 0.01, 4, shuffle_seed=30)
    manual = train_epoch(manual, ds, 0.01, 4, shuffle_seed=31)
    for name in _NAMES:
        npt.assert_array_equal(out[name], manual[name])


def test_train_client_single_epoch_equals_centralized_epoch():
    ds = synth_dataset(5, seed=12)
    global_weights = init_weights(12)
    out = train_client(global_weights, ds, interval=1, lr=0.005, batch_size=4, shuffle_seed=44)
    manual = train_epoch(global_weights, ds, 0.005, 4, shuffle_seed=44)
    for name in _NAMES:
        npt.assert_array_equal(out[name], manual[name])


def test_train_client_does_not_mutate_global_weights():
    ds = synth_dataset(4, seed=13)
    global_weights = init_weights(13)
    snapshot = {name: arr.copy() for name, arr in global_weights.items()}
    train_client(global_weights, ds, interval=2, lr=0.05, batch_size=4, shuffle_seed=0)
    for name in _NAMES:
        npt.assert_array_equal(global_weights[name], snapshot[name])


def test_client_seed_derivation():
    assert client_seed(5, 1, 0) == mix_seed(5, 1, 0)
    seen = {client_seed(123, t, i) for t in range(1, 6) for i in range(5)}
    assert len(seen) == 25  # distinct per round and client
    assert all(0 <= s < 2**63 for s in seen)
    assert client_seed(123, 2, 3) == client_seed(123, 2, 3)


# ---------------------------------------------------------------------------
# run_stage
# ---------------------------------------------------------------------------

def test_run_stage_single_client_matches_centralized():
    ds = synth_dataset(20, seed=14)
    config = FedConfig(
        stage=STAGE_ONE, rounds=2, n_clients=1, interval=1,
        lr=0.001, batch_size=8, init_seed=101, shuffle_seed=202,
    )
    fed_weights, history = run_stage(config, [ds])
    cen_weights, losses = centralized_train(init_weights(101), ds, 2, 0.001, 8, shuffle_seed=202)
    for name in _NAMES:
        npt.assert_array_equal(fed_weights[name], cen_weights[name])
    assert [r.round_index for r in history] == [1, 2]
    assert [r.client_losses for r in history] == [[l] for l in losses]


def test_run_stage_history_shape_and_checksums():
    ds = synth_dataset(25, seed=15)
    shards = partition_clients(ds, PartitionScheme.balanced(5), seed=0)
    config = FedConfig(stage=STAGE_ONE, rounds=3, n_clients=5, interval=1, lr=0.001, batch_size=8)
    weights, history = run_stage(config, shards)
    assert [r.round_index for r in history] == [1, 2, 3]
    for record in history:
        assert len(record.client_losses) == 5
        assert all(np.isfinite(l) and l > 0 for l in record.client_losses)
        assert len(record.weights_checksum) == 64
        json.dumps(record.to_json_dict())  # serializable as one JSON line
    assert all(weights[name].dtype == np.float32 for name in _NAMES)


def test_run_stage_parallel_equals_sequential():
    ds = synth_dataset(16, seed=16)
    shards = partition_clients(ds, PartitionScheme.balanced(4), seed=1)
    config = FedConfig(stage=STAGE_ONE, rounds=2, n_clients=4, interval=2, lr=0.01, batch_size=8)
    seq_weights, seq_history = run_stage(config, shards, max_workers=1)
    par_weights, par_history = run_stage(config, shards, max_workers=4)
    for name in _NAMES:
        npt.assert_array_equal(seq_weights[name], par_weights[name])
    assert [r.to_json_dict() for r in seq_history] == [r.to_json_dict() for r in par_history]


def test_run_stage_saves_stage_one_weights(tmp_path):
    ds = synth_dataset(6, seed=17)
    path = tmp_path / "stage1.fstw"
    config = FedConfig(
        stage=STAGE_ONE, rounds=1, n_clients=1, lr=0.01, batch_size=4, save_path=path,
    )
    weights, _ = run_stage(config, [ds])
    saved = load_weights(path)
    for name in _NAMES:
        npt.assert_array_equal(saved[name], weights[name])


def test_run_stage_shard_validation():
    ds = synth_dataset(5, seed=18)
    config = FedConfig(stage=STAGE_ONE, rounds=1, n_clients=2)
    with pytest.raises(ValueError, match="shards"):
        run_stage(config, [ds])
    empty = ds.subset(np.array([], dtype=np.int64))
    with pytest.raises(ValueError, match="empty"):
        run_stage(config, [ds, empty])


def test_run_stage_stage_two_requires_saved_file(tmp_path):
    ds = synth_dataset(5, seed=19, task=STAGE_TWO)
    config = FedConfig(
        stage=STAGE_TWO, rounds=1, n_clients=1,
        pretrained_path=tmp_path / "never_written.fstw",
    )
    with pytest.raises(StageOrderError):
        run_stage(config, [ds])


def test_centralized_train_losses_and_epochs():
    ds = synth_dataset(10, seed=20)
    weights, losses = centralized_train(init_weights(0), ds, 3, 0.01, 8, shuffle_seed=9)
    assert len(losses) == 3
    manual = init_weights(0)
    for t in range(1, 4):
        manual, epoch_losses = train_epoch_with_loss(manual, ds, 0.01, 8, client_seed(9, t, 0))
        assert losses[t - 1] == pytest.approx(float(np.mean(epoch_losses)), abs=0)
    for name in _NAMES:
        npt.assert_array_equal(weights[name], manual[name])
    with pytest.raises(ValueError, match="epochs"):
        centralized_train(init_weights(0), ds, 0, 0.01, 8, shuffle_seed=0)


# ---------------------------------------------------------------------------
# run_two_stage
# ---------------------------------------------------------------------------

def _two_stage_configs(tmp_path, rounds=(3, 3)):
    path = tmp_path / "stage1.fstw"
    stage1 = FedConfig(
        stage=STAGE_ONE, rounds=rounds[0], n_clients=5, interval=1,
        lr=0.05, batch_size=8, init_seed=7, shuffle_seed=8, save_path=path,
    )
    stage2 = FedConfig(
        stage=STAGE_TWO, rounds=rounds[1], n_clients=5, interval=1,
        lr=0.05, batch_size=8, shuffle_seed=9, pretrained_path=path,
    )
    return stage1, stage2


def test_run_two_stage_synthetic_smoke(tmp_path):
    stage1, stage2 = _two_stage_configs(tmp_path)
    res1, res2 = run_two_stage(
        stage1, stage2,
        scheme=PartitionScheme.balanced(5),
        synth=SynthSpec(30, seed=0),
    )
    assert res1.report.stage == STAGE_ONE
    assert res2.report.stage == STAGE_TWO
    assert res1.report.training_setting == "federated"
    assert res1.report.distribution == "balanced"
    assert res1.report.interval == 1
    assert len(res1.history) == 3 and len(res2.history) == 3
    # the file stage two loaded is exactly the file stage one saved
    assert res1.report.extra["weights_checksum"] == res2.report.extra["pretrained_checksum"]
    assert res2.report.extra["pretrained_file"] == str(tmp_path / "stage1.fstw")
    assert int(res1.report.extra["train_size"]) + int(res1.report.extra["test_size"]) == 60
    assert res1.report.counts.total == int(res1.report.extra["test_size"])


def test_run_two_stage_is_deterministic(tmp_path):
    stage1, stage2 = _two_stage_configs(tmp_path)
    first = run_two_stage(
        stage1, stage2, scheme=PartitionScheme.unbalanced(), synth=SynthSpec(20, seed=3),
    )
    second = run_two_stage(
        stage1, stage2, scheme=PartitionScheme.unbalanced(), synth=SynthSpec(20, seed=3),
    )
    for res_a, res_b in zip(first, second):
        assert res_a.report.to_json() == res_b.report.to_json()
        assert [r.to_json_dict() for r in res_a.history] == [r.to_json_dict() for r in res_b.history]
        for name in _NAMES:
            npt.assert_array_equal(res_a.weights[name], res_b.weights[name])


def test_run_two_stage_parallel_matches_sequential(tmp_path):
    stage1, stage2 = _two_stage_configs(tmp_path)
    seq = run_two_stage(
        stage1, stage2, scheme=PartitionScheme.balanced(5), synth=SynthSpec(20, seed=4),
        max_workers=1,
    )
    par = run_two_stage(
        stage1, stage2, scheme=PartitionScheme.balanced(5), synth=SynthSpec(20, seed=4),
        max_workers=4,
    )
    for res_a, res_b in zip(seq, par):
        assert res_a.report.to_json() == res_b.report.to_json()
        for name in _NAMES:
            npt.assert_array_equal(res_a.weights[name], res_b.weights[name])


def test_run_two_stage_argument_errors(tmp_path):
    stage1, stage2 = _two_stage_configs(tmp_path)
    with pytest.raises(ValueError, match="exactly one"):
        run_two_stage(stage1, stage2, scheme=PartitionScheme.balanced(5))
    with pytest.raises(ValueError, match="exactly one"):
        run_two_stage(
            stage1, stage2, scheme=PartitionScheme.balanced(5),
            data_root=tmp_path, synth=SynthSpec(5, seed=0),
        )
    with pytest.raises(ValueError, match="pair"):
        run_two_stage(stage1, stage1, scheme=PartitionScheme.balanced(5), synth=SynthSpec(5, seed=0))
    no_save = FedConfig(stage=STAGE_ONE, rounds=1, n_clients=5, lr=0.01)
    with pytest.raises(ValueError, match="save_path"):
        run_two_stage(no_save, stage2, scheme=PartitionScheme.balanced(5), synth=SynthSpec(5, seed=0))
    elsewhere = FedConfig(
        stage=STAGE_TWO, rounds=1, n_clients=5, lr=0.01,
        pretrained_path=tmp_path / "other.fstw",
    )
    with pytest.raises(ValueError, match="stage two must load"):
        run_two_stage(stage1, elsewhere, scheme=PartitionScheme.balanced(5), synth=SynthSpec(5, seed=0))


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(0, seed=0)
