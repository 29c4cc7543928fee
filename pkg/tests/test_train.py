import math
from dataclasses import replace

import numpy as np
import pytest

from dbnseg.data import generate_domain_dataset, load_split
from dbnseg.tensor import Tensor
from dbnseg.train import (METRICS_HEADER, TrainConfig, evaluate, iterations_per_epoch, poly_lr,
                          sgd_momentum_step, split_by_holdout, train, train_from_directory)


# ---------------------------------------------------------------- schedule

def test_poly_lr_values():
    assert abs(poly_lr(0.01, 0, 100) - 0.01) <= 1e-12
    assert abs(poly_lr(0.01, 50, 100, 2.0) - 0.0025) <= 1e-12
    assert abs(poly_lr(0.01, 100, 100)) <= 1e-12


def test_poly_lr_monotone():
    values = [poly_lr(0.01, i, 777, 2.0) for i in range(778)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        poly_lr(0.01, 101, 100)


# ---------------------------------------------------------------- optimiser

def param(values):
    return Tensor(np.asarray(values, np.float32), requires_grad=True)


def test_sgd_plain_step():
    p = param([0.0, 0.0])
    v = [np.zeros(2, np.float32)]
    sgd_momentum_step([p], [np.float32([1.0, 2.0])], v, lr=1.0, momentum=0.0)
    assert p.data.tolist() == [-1.0, -2.0]


def test_sgd_zero_gradient_keeps_params():
    p = param([0.5, -1.5])
    v = [np.zeros(2, np.float32)]
    for _ in range(10):
        sgd_momentum_step([p], [np.zeros(2, np.float32)], v, lr=0.1, momentum=0.9)
    assert p.data.tolist() == [0.5, -1.5]


def test_sgd_two_momentum_steps():
    p = Tensor(np.zeros(1), requires_grad=True)
    v = [np.zeros(1)]
    for _ in range(2):
        sgd_momentum_step([p], [np.ones(1)], v, lr=0.1, momentum=0.9)
    assert p.data[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_momentum_zero_is_gradient_descent():
    rng = np.random.default_rng(0)
    p = param(rng.normal(size=5))
    ref = p.data.copy()
    v = [np.zeros(5, np.float32)]
    for _ in range(5):
        g = rng.normal(size=5).astype(np.float32)
        sgd_momentum_step([p], [g], v, lr=0.05, momentum=0.0)
        ref = ref - np.float32(0.05) * g
        assert np.array_equal(p.data, ref)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_momentum_step([param([0.0])], [np.zeros(2, np.float32)], [np.zeros(1, np.float32)], 0.1, 0.9)


# ---------------------------------------------------------------- config

def test_config_parsing_and_validation():
    cfg = TrainConfig.from_mapping({"epochs": "3", "norm": "bn", "flip": "false", "scales_train": "0.5, 1.0"})
    assert (cfg.epochs, cfg.norm, cfg.flip, cfg.scales_train) == (3, "bn", False, (0.5, 1.0))
    assert TrainConfig.from_mapping({k: v for k, v in
                                     (line.split(" = ") for line in cfg.dumps().splitlines())}) == cfg
    with pytest.raises(KeyError):
        TrainConfig.from_mapping({"learning_rate": "1"})
    for bad in ({"norm": "gn"}, {"epochs": "0"}, {"crop_size": "7"}, {"momentum": "1.0"}):
        with pytest.raises(ValueError):
            TrainConfig.from_mapping(bad)


def test_holdout_resolution():
    cfg = TrainConfig()
    assert cfg.holdout(4) == 3 and cfg.holdout(1) is None
    assert replace(cfg, holdout_domain=-2).holdout(4) is None
    assert replace(cfg, holdout_domain=1).holdout(4) == 1


# ---------------------------------------------------------------- training

def test_training_is_deterministic(tiny_data, tiny_config, tmp_path):
    a = train_from_directory(tiny_config, tiny_data, tmp_path / "a")
    b = train_from_directory(tiny_config, tiny_data, tmp_path / "b")
    for name in ("metrics.csv", "last.ckpt", "best.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.iteration_losses == b.iteration_losses
    lines = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert lines[0] == METRICS_HEADER and len(lines) == 1 + tiny_config.epochs
    assert all(math.isfinite(x) for ep in a.iteration_losses for x in ep)


def test_holdout_domain_never_trains(tiny_data, tiny_config):
    res = train_from_directory(tiny_config, tiny_data)
    for layer in res.model.norm_layers():
        assert layer.updates[2] == 0 and layer.updates[0] > 0
    assert res.history[-1]["val_miou_shifted_domain"] is not None


def test_zero_lr_leaves_parameters(tiny_data, tiny_config):
    cfg = replace(tiny_config, base_lr=0.0, epochs=1)
    ds = load_split(tiny_data, "train")
    from dbnseg.model import SegmentationModel

    init = SegmentationModel(cfg.model_config(4, 3), seed=cfg.seed).parameter_dict()
    res = train(cfg, ds, 4, 3)
    for name, p in res.model.parameter_dict().items():
        assert np.array_equal(p.data, init[name].data)


def test_iterations_per_epoch():
    assert iterations_per_epoch({0: [1] * 5, 1: [1] * 8}, 4) == 2 + 2


def test_split_by_holdout(tiny_data):
    ds = load_split(tiny_data, "train")
    keep, held = split_by_holdout(ds, 2)
    assert set(keep.domains.tolist()) == {0, 1} and set(held.domains.tolist()) == {2}
    assert split_by_holdout(ds, None) == (ds, None)


@pytest.fixture(scope="module")
def default_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("default_data")
    generate_domain_dataset(root, seed=0)
    return root


# Train and validation scenes are iid draws and the net barely overfits at this
# scale: after 6 epochs validation sat 0.002-0.004 above train on seeds 0-2.
# The sanity check therefore allows sampling noise of the 36-image val split.
TRAIN_VAL_SLACK = 0.01


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_default_dataset_smoke_run(default_data, seed):
    res = train_from_directory(TrainConfig(epochs=6, seed=seed), default_data)
    first = res.iteration_losses[0]
    assert all(math.isfinite(x) for x in first)
    assert np.mean(first[-3:]) < np.mean(first[:3])
    train_set, _ = split_by_holdout(load_split(default_data, "train"), 3)
    val_set, _ = split_by_holdout(load_split(default_data, "val"), 3)
    train_score = evaluate(res.model, train_set).mean_iou
    val_score = evaluate(res.model, val_set).mean_iou
    assert train_score >= val_score - TRAIN_VAL_SLACK, (train_score, val_score)


def test_evaluate_reports_both_scale_settings(tiny_data, tiny_config):
    res = train_from_directory(tiny_config, tiny_data)
    ds = load_split(tiny_data, "val")
    for scales in ((1.0,), (0.5, 1.0)):
        for stats in ("running", "batch"):
            rep = evaluate(res.model, ds, scales, stats, domain_names=["a", "b", "c"])
            assert rep.scales == scales and rep.stats == stats
            assert 0.0 <= rep.mean_iou <= 1.0
            assert [r[2] for r in rep.rows()] == ["a", "b", "c", "overall"]
    with pytest.raises(ValueError):
        evaluate(res.model, ds, stats="median")
