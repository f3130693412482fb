import numpy as np
import pytest

from trimtrain import trainer
from trimtrain.data import Dataset, SyntheticStream
from trimtrain.flops import FIELDS
from trimtrain.layers import softmax_cross_entropy
from trimtrain.network import Sequential, lenet5, slim_lenet
from trimtrain.optim import OptimizerState, sgd_step
from trimtrain.tensor_core import Rng
from trimtrain.trainer import (CheckpointError, TrainConfig, evaluate, load_checkpoint,
                               save_checkpoint, train)


def synthetic_dataset(n, seed=0, classes=10):
    s = SyntheticStream(num_classes=classes, size=28, noise=0.3, seed=seed)
    x, y, _ = s.batch(n)
    return Dataset(x, y, "synthetic")


@pytest.fixture(scope="module")
def data():
    return synthetic_dataset(192, 0), synthetic_dataset(64, 1)


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=32, warmup_iters=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    for bad in (dict(batch_size=0), dict(lr=0), dict(warmup_iters=-1), dict(alpha=0.0),
                dict(epochs=-1), dict(eval_every=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig(batch_size=64, warmup_epochs=1.0)
    assert cfg.iterations_per_epoch(10000) == 157 and cfg.warmup(10000) == 157
    assert cfg.filter_config(10000).lr_schedule == ((157, 0.5),)


def test_flags_off_bit_matches_plain_sgd(data):
    train_set, _ = data
    cfg = small_cfg(eif=False, emp=False, lr_schedule=((4, 0.5),), weight_decay=1e-3)
    res = train(cfg, train_set)
    # independent plain loop with the same seed streams
    net = lenet5(Rng(cfg.seed).spawn(1))
    state = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay)
    shuffle = Rng(cfg.seed).spawn(3)
    it = 0
    for _ in range(cfg.epochs):
        order = shuffle.permutation(len(train_set))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            logits, caches = net.forward(train_set.images[idx])
            _, delta, _ = softmax_cross_entropy(logits, train_set.labels[idx])
            lr = cfg.lr * (0.5 if it >= 4 else 1.0)
            sgd_step(net.params(), net.backward(delta, caches), state, lr)
            it += 1
    for k, v in net.params().items():
        assert np.array_equal(v, res.net.params()[k]), k


@pytest.mark.parametrize("eif_on", [False, True])
def test_alpha_one_is_noop(data, eif_on):
    train_set, test_set = data
    a = train(small_cfg(eif=eif_on, emp=False), train_set, test_set)
    b = train(small_cfg(eif=eif_on, emp=True, alpha=1.0), train_set, test_set)
    for k, v in a.net.params().items():
        assert np.array_equal(v, b.net.params()[k])
    assert a.test_acc == b.test_acc
    assert b.ledger.selection_overhead == 0


def test_emp_does_not_change_first_screening(data):
    train_set, _ = data
    a = train(small_cfg(emp=False, warmup_iters=0, epochs=1), train_set)
    b = train(small_cfg(emp=True, alpha=0.5, warmup_iters=0, epochs=1), train_set)
    # before the first update both runs see identical weights
    assert a.rows[0]["preserved_count"] == b.rows[0]["preserved_count"]
    assert a.rows[0]["sampled_count"] == b.rows[0]["sampled_count"]


def test_evaluate_examples():
    labels = np.repeat(np.arange(10), 10)
    x = np.zeros((100, 1, 2, 2))

    class Const:
        def __init__(self, logits):
            self.logits = logits

        def predict(self, images, chunk=1000):
            return self.logits

    const = np.zeros((100, 10))
    const[:, 3] = 1.0
    acc, _ = evaluate(Const(const), Dataset(x, labels))
    assert acc == 0.1
    perfect = np.eye(10)[labels] * 100
    acc, loss = evaluate(Const(perfect), Dataset(x, labels))
    assert acc == 1.0 and loss < 1e-30


def test_evaluate_matches_confusion_matrix(data, rng):
    _, test_set = data
    net = lenet5(rng)
    sub = test_set.subset(np.arange(64))
    acc, _ = evaluate(net, sub)
    conf = np.zeros((10, 10), dtype=int)
    for img, lab in zip(sub.images, sub.labels):
        conf[lab, int(np.argmax(net.predict(img[None])[0]))] += 1
    assert acc == np.trace(conf) / conf.sum()


def test_evaluate_charges_nothing(data):
    train_set, test_set = data
    res = train(small_cfg(epochs=1, eval_every=1), train_set, test_set)
    no_eval = train(small_cfg(epochs=1), train_set)
    assert res.ledger.snapshot() == no_eval.ledger.snapshot()


def test_determinism_and_metrics_schema(data, tmp_path):
    train_set, test_set = data
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    r1 = train(small_cfg(), train_set, test_set, metrics_path=p1)
    r2 = train(small_cfg(), train_set, test_set, metrics_path=p2)
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == "# metrics-schema: 1"
    assert tuple(lines[1].split(",")) == trainer.METRICS_COLUMNS
    assert len(lines) == 2 + len(r1.rows) == 2 + 2 * 6
    for k, v in r1.net.params().items():
        assert np.array_equal(v, r2.net.params()[k])
    last = dict(zip(lines[1].split(","), lines[-1].split(",")))
    assert int(last["total"]) == r1.ledger.total
    assert float(last["test_acc"]) == r1.test_acc
    assert float(last["remaining_inclusive"]) == r1.remaining[0]


def test_baseline_ledger_matches_formulas(data):
    train_set, _ = data
    res = train(small_cfg(eif=False, emp=False), train_set)
    per = res.net.flops_per_instance()
    n = 2 * len(train_set)
    assert res.ledger.forward_main == n * per["forward"]
    assert res.ledger.backward_main == n * per["backward"]
    assert res.ledger.total == res.baseline_flops
    assert res.remaining == (1.0, 1.0)


def test_ledger_exactness_with_eif_and_emp(data):
    """forward_main == r * baseline forward; conv backward == r * alpha * baseline."""
    train_set, _ = data
    res = train(small_cfg(alpha=0.5), train_set)
    net, led = res.net, res.ledger
    prof = {d.name: d for d in net.profile()}
    from trimtrain.flops import backward_flops, flops_forward
    fwd = sum(flops_forward(d) for d in prof.values())
    assert led.forward_main == res.preserved * fwd
    convs = [l.name for l in net.conv_layers()]
    conv_bwd = sum(backward_flops(prof[c]) for c in convs)
    got = led.layer_total("errorprop_main", convs) + led.layer_total("weightgrad_main", convs)
    assert 2 * got == res.preserved * conv_bwd
    fcs = [n for n, d in prof.items() if d.kind == "fc"]
    fc_bwd = sum(backward_flops(prof[c]) for c in fcs)
    got_fc = led.layer_total("errorprop_main", fcs) + led.layer_total("weightgrad_main", fcs)
    assert got_fc == res.preserved * fc_bwd


def test_empty_preserved_batch_skips_update(data, monkeypatch):
    train_set, _ = data

    def all_low(config, input_shape=(1, 28, 28)):
        net = slim_lenet(Rng(0), input_shape, first_stride=config.filter_first_stride)
        net.layers[-1].weight[...] = 0.0
        net.layers[-1].bias[...] = [-50.0, 0.0]
        return net

    monkeypatch.setattr(trainer, "build_filter", all_low)
    cfg = small_cfg(warmup_iters=0, epochs=1)
    before = trainer.build_main(cfg).state_dict()
    res = train(cfg, train_set)
    assert res.skipped_updates == 6 and res.preserved == 0
    for k, v in res.net.params().items():
        assert np.array_equal(v, before[k])
    assert res.ledger.forward_main == 0 and res.ledger.backward_main == 0
    assert all(r.get("train_loss") is None for r in res.rows)


def test_warmup_trains_on_everything(data):
    train_set, _ = data
    res = train(small_cfg(warmup_iters=100), train_set)
    assert res.preserved == res.arrivals
    assert res.filter.state.updates == len(res.rows)


def test_train_on_sampled_runs(data):
    train_set, _ = data
    res = train(small_cfg(train_on_sampled=True, entropy_t=0.1, warmup_iters=0), train_set)
    assert np.isfinite(res.ledger.total)


def test_shuffle_off_uses_arrival_order(data):
    train_set, _ = data
    a = train(small_cfg(shuffle=False, eif=False, emp=False, epochs=1), train_set)
    b = train(small_cfg(shuffle=False, eif=False, emp=False, epochs=1, seed=3), train_set)
    assert a.rows[0]["train_loss"] == b.rows[0]["train_loss"]


def test_checkpoint_roundtrip(tmp_path, rng):
    net = lenet5(rng)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, net)
    state = load_checkpoint(p)
    other = lenet5(Rng(99))
    other.load_state_dict(state)
    for k, v in net.params().items():
        assert np.array_equal(v, other.params()[k])
    assert p.read_bytes().startswith(trainer.CKPT_MAGIC)


def test_checkpoint_errors(tmp_path, rng):
    bad = tmp_path / "bad"
    bad.write_bytes(b"NOTACKPT")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    good = tmp_path / "good"
    save_checkpoint(good, lenet5(rng))
    cut = tmp_path / "cut"
    cut.write_bytes(good.read_bytes()[:200])
    with pytest.raises(CheckpointError):
        load_checkpoint(cut)
    with pytest.raises(KeyError):
        lenet5(rng).load_state_dict({"conv1.weight": np.zeros((6, 1, 5, 5))})


def test_metrics_columns_cover_ledger():
    for f in FIELDS:
        assert f in trainer.METRICS_COLUMNS
