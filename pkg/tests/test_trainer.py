import json

import numpy as np
import pytest

from midrep import netdef, tensor as T, trainer
from midrep.errors import ArgumentError, DegenerateDataError
from midrep.synthetic import color_blobs
from midrep.trainer import PlateauSchedule, TrainConfig


def test_config_validation():
    with pytest.raises(ArgumentError):
        TrainConfig(base_lr=0)
    with pytest.raises(ArgumentError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ArgumentError):
        TrainConfig(dropout_rate=1.0)
    assert TrainConfig().base_lr == 0.015 and TrainConfig().dropout_rate == 0.5


def test_schedule_forced_plateaus():
    s = PlateauSchedule(0.015, 0.1, patience=3, max_decays=2)
    lrs, events = [], []
    for epoch, metric in enumerate([0.5] + [0.4] * 20):
        lrs.append(s.lr)
        if s.step(metric):
            events.append(epoch)
    assert events == [3, 6]
    assert s.lr == pytest.approx(0.015 * 0.01)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_schedule_resets_on_improvement():
    s = PlateauSchedule(1.0, 0.5, patience=2)
    assert not any(s.step(m) for m in [0.1, 0.2, 0.2, 0.3, 0.3, 0.4])
    assert s.lr == 1.0


def test_first_batch_loss_near_log_k():
    spec = netdef.build_network("table1", width=0.125, num_classes=3)
    w = netdef.init_weights(spec, 0)
    images, labels = color_blobs(8, seed=1)
    from midrep.data import preprocess

    x = np.stack([preprocess(im).data for im in images])
    out = netdef.forward(spec, w, x, taps=(), logits=True)
    loss, _ = T.softmax_xent_batch(out.logits.astype(np.float64), labels)
    assert abs(loss - np.log(3)) <= 0.1 * np.log(3)


def test_train_errors():
    spec = netdef.build_network("table1", width=0.125, num_classes=3)
    images, labels = color_blobs(6)
    with pytest.raises(DegenerateDataError):
        trainer.train_cnn(spec, images, np.zeros(6, int), images, labels)
    with pytest.raises(ArgumentError):
        trainer.train_cnn(netdef.build_network("table1", width=0.125), images, labels, images, labels)
    with pytest.raises(ArgumentError):
        trainer.train_cnn(spec, images, labels, images[:0], labels[:0])


def test_short_run_log_and_reproducibility(tmp_path):
    spec = netdef.build_network("table1", width=0.125, num_classes=3)
    images, labels = color_blobs(12, seed=2)
    config = TrainConfig(epochs=2, batch_size=4, seed=5, clip_norm=5.0)
    w1, log1 = trainer.train_cnn(spec, images[:9], labels[:9], images[9:], labels[9:], config)
    w2, log2 = trainer.train_cnn(spec, images[:9], labels[:9], images[9:], labels[9:], config)
    assert w1.identical(w2)
    assert log1.deterministic_view() == log2.deterministic_view()
    assert len(log1.epochs) == 2
    log1.to_csv(tmp_path / "log.csv")
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,loss,val_acc,lr"
    log1.to_json(tmp_path / "log.json")
    doc = json.loads((tmp_path / "log.json").read_text())
    assert len(doc["epochs"]) == 2 and "wall_time" in doc["epochs"][0]


def test_grad_check_small_stack():
    spec = netdef.build_network("table1", side=56, width=0.125, num_classes=4)
    w = netdef.init_weights(spec, 0)
    x = np.random.default_rng(0).uniform(-1, 1, (3, 56, 56))
    worst, records = trainer.grad_check(spec, w, x, 2, probes=30, details=True)
    assert worst <= 1e-6
    assert len(records) == 30


def test_grad_check_degenerate_zero_case():
    spec = netdef.build_network("table1", side=56, width=0.125, num_classes=3)
    w = netdef.init_weights(spec, 0)
    for blobs in w.params.values():
        for v in blobs.values():
            v[...] = 0
    worst = trainer.grad_check(spec, w, np.zeros((3, 56, 56)), 0, probes=20)
    assert np.isfinite(worst)


def test_grad_check_repeatable():
    spec = netdef.build_network("table1", side=56, width=0.125, num_classes=3)
    w = netdef.init_weights(spec, 1)
    x = np.random.default_rng(1).uniform(-1, 1, (3, 56, 56))
    _, a = trainer.grad_check(spec, w, x, 1, probes=5, seed=3, details=True)
    _, b = trainer.grad_check(spec, w, x, 1, probes=5, seed=3, details=True)
    assert a == b
    assert trainer.relative_error(0.0, 0.0) == 0.0
