import io

import numpy as np
import pytest

from canadv import container, featurize, zoo
from canadv.zoo import ModelArchitecture, TrainConfig


def test_parameter_counts():
    assert zoo.build(ModelArchitecture.DNN).n_parameters() == 77 * 64 + 64 + 64 * 4 + 4 == 5252
    cnn = zoo.build(ModelArchitecture.CNN)
    assert sum(v.size for v in cnn.layer_params(0).values()) == 32 * 3 + 32 == 128
    assert cnn.params["4.weight"].shape == (1184, 4)
    lstm = zoo.build(ModelArchitecture.LSTM)
    assert lstm.params["0.w_hidden"].shape == (64, 256) and lstm.params["2.weight"].shape == (64, 4)


def test_architecture_layout():
    from canadv.nnet import Conv1d, Dense, Flatten, Lstm, MaxPool1d, Relu, TakeLastStep

    assert zoo.architecture_layers(ModelArchitecture.DNN) == (Dense(77, 64), Relu(), Dense(64, 4))
    assert zoo.architecture_layers(ModelArchitecture.CNN) == (Conv1d(1, 32, 3), Relu(), MaxPool1d(2), Flatten(), Dense(1184, 4))
    assert zoo.architecture_layers(ModelArchitecture.LSTM) == (Lstm(1, 64), TakeLastStep(), Dense(64, 4))


@pytest.mark.parametrize("arch", list(ModelArchitecture))
def test_build_deterministic(arch):
    a, b = zoo.build(arch, seed=9), zoo.build(arch, seed=9)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    c = zoo.build(arch, seed=10)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig() == TrainConfig(30, 0.001, 64, 0)


def test_training_steps_loss_and_accuracy(tiny_corpus, tiny_models):
    train, test = tiny_corpus["vehicle_a"]
    m = tiny_models[(ModelArchitecture.DNN, "vehicle_a")]
    h = m.history
    assert h["adam_steps"] == 15 * int(np.ceil(len(train) / 64)) == 15 * h["batches_per_epoch"]
    assert all(np.isfinite(h["epoch_losses"])) and h["final_loss"] < h["initial_loss"]
    assert (m.predict(train.features) == train.labels).mean() >= 0.95
    np.testing.assert_array_equal(m.predict(test.features), m.logits(test.features).argmax(axis=1))
    assert m.provenance["train_vehicle"] == "vehicle_a"


def test_training_is_bit_identical(tiny_corpus):
    train, _ = tiny_corpus["vehicle_b"]
    cfg = TrainConfig(epochs=2, seed=17)
    a = zoo.train(ModelArchitecture.CNN, train, cfg)
    b = zoo.train(ModelArchitecture.CNN, train, cfg)
    assert zoo.encode_checkpoint(a) == zoo.encode_checkpoint(b)


def test_epoch_order_reshuffles():
    a, b = zoo.epoch_order(50, 1, 1), zoo.epoch_order(50, 1, 2)
    assert sorted(a) == list(range(50)) and not np.array_equal(a, b)
    np.testing.assert_array_equal(a, zoo.epoch_order(50, 1, 1))


def test_unbalanced_training_set_rejected(tiny_corpus):
    train, _ = tiny_corpus["vehicle_a"]
    rows = np.flatnonzero(train.labels != 0)
    with pytest.raises(ValueError, match="balanced"):
        zoo.train(ModelArchitecture.DNN, train.take(rows[:-1]), TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_and_batch(tiny_corpus):
    train, _ = tiny_corpus["vehicle_a"]
    net = zoo.build(ModelArchitecture.DNN)
    net = net.with_params({**net.params, "2.bias": np.array([np.inf, 0.0, 0.0, 0.0])})
    with pytest.raises(zoo.TrainingError) as info:
        zoo.fit(net, train.features, train.labels, TrainConfig(epochs=1))
    assert (info.value.epoch, info.value.batch) == (1, 1)


def test_checkpoint_round_trip(tmp_path, tiny_corpus, tiny_models):
    m = tiny_models[(ModelArchitecture.DNN, "vehicle_c")]
    path = tmp_path / "m.ckpt"
    zoo.save(m, path)
    back = zoo.load(path)
    assert all(back.network.params[k].tobytes() == m.network.params[k].tobytes() for k in m.network.params)
    assert (back.identity, back.config, back.history, back.provenance) == (m.identity, m.config, m.history, m.provenance)
    x = tiny_corpus["vehicle_c"][1].features[:16]
    assert back.logits(x).tobytes() == m.logits(x).tobytes()
    zoo.save(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tiny_models):
    m = tiny_models[(ModelArchitecture.CNN, "vehicle_a")]
    blob = zoo.encode_checkpoint(m)
    with pytest.raises(zoo.CheckpointTruncatedError):
        zoo.load(blob[: len(blob) // 2])
    bumped = container.encode("checkpoint", zoo.CHECKPOINT_FORMAT_VERSION + 1, {}, {})
    with pytest.raises(zoo.CheckpointVersionError):
        zoo.load(bumped)
    meta, arrays = container.decode(blob, "checkpoint", zoo.CHECKPOINT_FORMAT_VERSION)
    arrays["4.weight"] = arrays["4.weight"][:-1]
    with pytest.raises(zoo.CheckpointShapeError):
        zoo.load(container.encode("checkpoint", zoo.CHECKPOINT_FORMAT_VERSION, meta, arrays))
    meta["architecture"] = "dnn"
    with pytest.raises(zoo.CheckpointShapeError):
        zoo.load(container.encode("checkpoint", zoo.CHECKPOINT_FORMAT_VERSION, meta, arrays))
    buf = io.BytesIO()
    zoo.save(m, buf)
    assert buf.getvalue() == blob


def test_identity_str_and_dict():
    ident = zoo.ModelIdentity(ModelArchitecture.LSTM, "vehicle_b", zoo.Defense.FINE_TUNED)
    assert str(ident) == "lstm@vehicle_b+fine_tuned"
    assert zoo.ModelIdentity.from_dict(ident.to_dict()) == ident
