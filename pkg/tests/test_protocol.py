from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from lib import ConfigError, ProtocolError, one_hot
from numeric import ridge_solve
from protocol import (
    ProtocolConfig,
    PhaseStream,
    dump_config,
    generate_stream,
    load_config,
    load_stream,
    parse_config,
)


def test_defaults():
    config = ProtocolConfig()
    assert config.num_phases == 5
    assert config.phase_classes(1) == (2, 3)
    assert config.compensation_gamma == config.gamma
    assert replace(config, gamma_c=0.25).compensation_gamma == 0.25


def test_integers_are_accepted_for_floats():
    config = ProtocolConfig(gamma=2, lambda2=1)
    assert config.gamma == 2.0 and isinstance(config.gamma, float)
    assert isinstance(config.lambda2, float)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(num_classes="10"),
        dict(num_classes=True),
        dict(num_classes=9),
        dict(classes_per_phase=0),
        dict(beta=0.0),
        dict(beta=1.01),
        dict(gamma=0.0),
        dict(lambda1=-0.1),
        dict(lambda2=1.5),
        dict(p_ratio=1.0),
        dict(comp_kernel=4),
        dict(freq_min=5.0),
        dict(update_mode="batch"),
        dict(fan_activation="tanh"),
        dict(comp_activation="gelu"),
        dict(gnn_epochs=-1),
        dict(compensation="yes"),
    ],
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        ProtocolConfig(**kwargs)


def test_parse_config():
    text = """
    # short run
    num_classes = 4    # two phases
    gamma = 0.5
    compensation = off
    update_mode = sample
    """
    config = parse_config(text, seed=7)
    assert config.num_classes == 4 and config.num_phases == 2
    assert config.gamma == 0.5
    assert config.compensation is False
    assert config.update_mode == "sample"
    assert config.seed == 7


@pytest.mark.parametrize(
    "text, message",
    [
        ("gama = 1.0", "unknown key"),
        ("gamma = 1.0\ngamma = 2.0", "duplicate key"),
        ("gamma 1.0", "expected key = value"),
        ("num_classes = 2.5", "not a valid int"),
        ("compensation = maybe", "not a boolean"),
    ],
)
def test_parse_config_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(text)


def test_unknown_override():
    with pytest.raises(ConfigError, match="unknown override"):
        parse_config("", gama=1.0)


def test_dump_parse_round_trip():
    config = ProtocolConfig(gamma=0.1, lambda2=1 / 3, compensation=False, seed=11)
    assert parse_config(dump_config(config)) == config


def test_load_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("beta = 0.9\n")
    assert load_config(str(path), seed=3) == ProtocolConfig(beta=0.9, seed=3)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(str(tmp_path / "missing.cfg"))


def test_stream_layout(tiny_config):
    stream = generate_stream(tiny_config)
    assert len(stream.phases) == 2
    for split in stream.phases:
        assert split.classes == tiny_config.phase_classes(split.phase)
        assert split.class_offset == 2 * split.phase and split.class_count == 2
        assert split.train.num_nodes == 24 and split.test.num_nodes == 16
        assert set(split.train.labels) == set(split.classes)
        assert split.train.d_v == 8 and split.train.d_t == 6


def test_stream_is_deterministic(tiny_config):
    first, second = generate_stream(tiny_config), generate_stream(tiny_config)
    for a, b in zip(first.phases, second.phases):
        assert_array_equal(a.train.edges, b.train.edges)
        assert_array_equal(a.train.features_vis, b.train.features_vis)
        assert_array_equal(a.test.features_txt, b.test.features_txt)
    other = generate_stream(replace(tiny_config, seed=1))
    assert not np.array_equal(other.phases[0].train.features_txt, first.phases[0].train.features_txt)


def test_noiseless_modalities_are_a_linear_image(tiny_config):
    stream = generate_stream(replace(tiny_config, noise=0.0, periodic_amplitude=0.0))
    train = stream.phases[0].train
    assert_array_equal(train.features_vis, train.features_txt @ stream.mixing)
    tau = train.features_txt[:, 1]
    assert np.all((tau >= 0.0) & (tau <= 1.0))
    for label in set(train.labels):
        rows = train.features_txt[train.labels == label][:, [0, *range(2, train.d_t)]]
        assert np.all(rows == rows[0])


def test_communities_are_denser_inside():
    graph = generate_stream(ProtocolConfig()).phases[0].train
    same = graph.labels[graph.edges[:, 0]] == graph.labels[graph.edges[:, 1]]
    assert same.sum() > 3 * (~same).sum()


def test_text_features_separate_classes():
    stream = generate_stream(ProtocolConfig())

    def design(graph):
        return np.hstack([graph.features_txt, np.ones((graph.num_nodes, 1))])

    X = np.vstack([design(split.train) for split in stream.phases])
    labels = np.concatenate([split.train.labels for split in stream.phases])
    W = ridge_solve(X, one_hot(labels, 10), 1.0)
    X_test = np.vstack([design(split.test) for split in stream.phases])
    test_labels = np.concatenate([split.test.labels for split in stream.phases])
    assert np.mean(np.argmax(X_test @ W, axis=1) == test_labels) >= 0.9


def test_saved_stream_loads_back(tmp_path, tiny_config):
    stream = generate_stream(tiny_config)
    stream.save(str(tmp_path / "stream"))
    loaded = load_stream(str(tmp_path / "stream"))
    assert loaded.config == tiny_config
    for a, b in zip(stream.phases, loaded.phases):
        assert a.classes == b.classes
        assert_array_equal(a.train.features_vis, b.train.features_vis)
        assert_array_equal(a.test.labels, b.test.labels)
        assert_array_equal(a.train.edges, b.train.edges)


def test_training_data_only_during_its_phase(tiny_config):
    phases = PhaseStream(generate_stream(tiny_config))
    assert phases.take_train(0, 0, "update").num_nodes == 24
    with pytest.raises(ProtocolError, match="requested during phase 0"):
        phases.take_train(1, 0, "update")
    phases.release(0)
    with pytest.raises(ProtocolError, match="released"):
        phases.take_train(0, 0, "update")
    assert phases.test(0).num_nodes == 16
    assert [(r.current_phase, r.phase, r.purpose) for r in phases.access_log] == [(0, 0, "update")]


def test_class_metadata_carries_no_training_data(tiny_config):
    phases = PhaseStream(generate_stream(tiny_config))
    split = phases.split(1)
    assert (split.phase, split.class_offset, split.class_count) == (1, 2, 2)
    assert not hasattr(split, "train")
    assert not hasattr(phases, "stream")
    phases.take_train(0, 0, "update")
    phases.release(0)
    assert not hasattr(phases.split(0), "train")
    with pytest.raises(ProtocolError, match="released"):
        phases.take_train(0, 0, "update")
