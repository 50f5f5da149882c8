import csv
import dataclasses
import json

import numpy as np
import pytest

from nebpcl.errors import CheckpointIo, ConfigError, EmptyDataset, NonFiniteLoss, ShapeMismatch
from nebpcl.gnn import NebpModel, load_checkpoint
from nebpcl.particle_bp import GaussianSummary
from nebpcl.scenario import AgentState, generate_realization, load_preset
from nebpcl.training import TrainConfig, position_loss, resume, train

from conftest import tiny_config


def summary(pos):
    return GaussianSummary(np.array([*pos, 0.0, 0.0]), np.eye(4))


def state(pos):
    return AgentState(np.asarray(pos, float), np.zeros(2))


@pytest.mark.parametrize("est, truth, expect", [
    ([(1, 2)], [(1, 2)], 0.0),
    ([(3, 4)], [(0, 0)], 25.0),
    ([(1, 0), (0, 2)], [(0, 0), (0, 0)], 5.0),
])
def test_position_loss(est, truth, expect):
    assert position_loss([summary(e) for e in est], [state(t) for t in truth]) == expect


def test_position_loss_accepts_state_vectors():
    assert position_loss([summary((3, 4))], np.zeros((1, 4))) == 25.0


@pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"batch_size": 0}, {"lr": -1.0}, {"K": 0}, {"grad_clip": 0.0}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1e-3})
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        TrainConfig.load(tmp_path / "c.json")


@pytest.fixture(scope="module")
def small_dataset():
    cfg = tiny_config(num_agents=3, num_steps=4)
    return [generate_realization(cfg, seed=s) for s in range(4)]


def params_of(model):
    return [p for net in model.nets.values() for p in net.params]


def test_zero_learning_rate_keeps_parameters(small_dataset):
    cfg = TrainConfig(lr=0.0, epochs=1, K=16, seed=1)
    init = NebpModel.init(16, seed=1)
    out = train(cfg, small_dataset, model=init)
    for a, b in zip(params_of(init), params_of(out.model)):
        np.testing.assert_array_equal(a, b)


def test_deterministic(small_dataset, tmp_path):
    cfg = TrainConfig(lr=1e-3, epochs=2, K=16, seed=3)
    a = train(dataclasses.replace(cfg, checkpoint=str(tmp_path / "a.json")), small_dataset)
    b = train(dataclasses.replace(cfg, checkpoint=str(tmp_path / "b.json")), small_dataset)
    assert a.trace == b.trace
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()


def test_resume_matches_uninterrupted(small_dataset, tmp_path):
    full = train(TrainConfig(lr=1e-3, epochs=3, K=16, seed=2), small_dataset)
    first = TrainConfig(lr=1e-3, epochs=1, K=16, seed=2, checkpoint=str(tmp_path / "c.json"))
    train(first, small_dataset)
    rest = resume(dataclasses.replace(first, epochs=2, checkpoint=None), small_dataset, tmp_path / "c.json")
    assert rest.epochs_done == 3
    for a, b in zip(params_of(full.model), params_of(rest.model)):
        np.testing.assert_array_equal(a, b)
    assert full.epoch_losses[1:] == rest.epoch_losses


def test_per_step_updates_take_more_steps(small_dataset):
    base = TrainConfig(lr=1e-3, epochs=1, K=16, seed=0, batch_size=2)
    a = train(base, small_dataset)
    b = train(dataclasses.replace(base, per_step_updates=True), small_dataset)
    assert a.optimizer.step == 2
    assert b.optimizer.step == 2 * 4


def test_gradient_clipping_limits_first_update(small_dataset):
    init = NebpModel.init(16, seed=0)
    cfg = TrainConfig(lr=1e-2, epochs=1, K=16, seed=0, batch_size=4, grad_clip=1e-12)
    out = train(cfg, small_dataset, model=init)
    # with a tiny clip the Adam direction is unchanged but the moments are tiny: still a full lr step
    moved = max(float(np.max(np.abs(a - b))) for a, b in zip(params_of(init), params_of(out.model)))
    assert 0 < moved <= 1e-2 * (1 + 1e-6)


def test_loss_trace_csv(small_dataset, tmp_path):
    cfg = TrainConfig(lr=1e-3, epochs=2, K=16, seed=0, loss_trace=str(tmp_path / "trace.csv"))
    out = train(cfg, small_dataset)
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert list(rows[0]) == ["epoch", "batch", "loss"]
    assert len(rows) == 2 * 2 == len(out.trace)
    assert all(np.isfinite(float(r["loss"])) for r in rows)


def test_checkpoint_written_each_epoch(small_dataset, tmp_path):
    cfg = TrainConfig(lr=1e-3, epochs=2, K=16, seed=0, checkpoint=str(tmp_path / "c.json"))
    train(cfg, small_dataset)
    model, opt, st = load_checkpoint(tmp_path / "c.json")
    assert st == {"epochs_done": 2, "seed": 0} and opt.step == 4 and model.K == 16


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        train(TrainConfig(K=8), [])


def test_model_config_mismatch(small_dataset):
    with pytest.raises(ShapeMismatch):
        train(TrainConfig(K=8), small_dataset, model=NebpModel.init(16))


def test_unwritable_checkpoint(small_dataset, tmp_path):
    cfg = TrainConfig(epochs=1, K=8, checkpoint=str(tmp_path / "missing" / "c.json"))
    with pytest.raises(CheckpointIo):
        train(cfg, small_dataset[:1])


def test_non_finite_loss_names_realization_and_step(small_dataset):
    bad = small_dataset[1]
    truth = bad.truth.copy()
    truth[2, 0, 0] = np.nan
    data = [small_dataset[0], dataclasses.replace(bad, truth=truth)]
    with pytest.raises(NonFiniteLoss, match="realization 1 at step 2"):
        train(TrainConfig(epochs=1, K=8, batch_size=2), data)


@pytest.mark.slow
def test_smoke_training_reduces_loss():
    cfg = load_preset("train-small")
    data = [generate_realization(cfg, seed=100 + i) for i in range(5)]
    out = train(TrainConfig(epochs=2, K=200, seed=0), data)
    assert out.epoch_losses[1] < out.epoch_losses[0]
    assert all(np.isfinite(x[2]) for x in out.trace)


def test_config_round_trip(tmp_path):
    cfg = TrainConfig(lr=3e-4, epochs=2, K=64, T=2, dataset="d", checkpoint="c.json", grad_clip=5.0)
    (tmp_path / "t.json").write_text(json.dumps(dataclasses.asdict(cfg)))
    assert TrainConfig.load(tmp_path / "t.json") == cfg
