import numpy as np
import pytest

from rdlearn.data import synth_clusters
from rdlearn.errors import ConfigError, ShapeError
from rdlearn.nn import LayerSpec, Network, SgdState, mnist_table1_specs
from rdlearn.rdl import AlphaSchedule
from rdlearn.training import train_epoch
from rdlearn.transfer import TransferMethod, deep_supervision_attach, finetune_init, hints_pretrain


def _specs(classes=4):
    return [
        LayerSpec("FullyConnected", features=12, tap="h1"),
        LayerSpec("ReLU"),
        LayerSpec("FullyConnected", features=12, tap="h2"),
        LayerSpec("ReLU"),
        LayerSpec("Dropout", dropout_p=0.2),
        LayerSpec("LinearReadout", features=classes),
        LayerSpec("Softmax"),
    ]


def _net(seed, classes=4):
    return Network(_specs(classes), (1, 1, 6), seed=seed)


@pytest.fixture
def clusters():
    return synth_clusters(4, 50, 6, 3.0, rng_seed=2)


def _same_params(a, b):
    return all(p.tobytes() == q.tobytes() for (_, _, p), (_, _, q) in zip(a.parameters(), b.parameters()))


def test_finetune_copies_everything():
    teacher, student = _net(1), _net(2)
    out = finetune_init(student, teacher)
    assert _same_params(out, teacher)
    # the input student is untouched
    assert not _same_params(student, teacher)


def test_finetune_fresh_readout_for_new_class_count():
    teacher, student = _net(1, classes=4), _net(2, classes=9)
    with pytest.raises(ShapeError):
        finetune_init(student, teacher)
    out = finetune_init(student, teacher, LayerSpec("LinearReadout", features=9), seed=5)
    for i in (0, 2):
        for name in ("W", "b"):
            assert out.layers[i].params[name].tobytes() == teacher.layers[i].params[name].tobytes()
    assert out.layers[5].params["W"].shape == (12, 9)
    assert out.layers[5].params["W"].tobytes() != student.layers[5].params["W"].tobytes()


def test_finetune_reproduces_teacher_predictions(clusters):
    teacher = _net(1)
    train_epoch(teacher, clusters.images, clusters.labels, SgdState(0.05), batch_size=20, seed=0)
    out = finetune_init(_net(3), teacher)
    np.testing.assert_array_equal(out.predict(clusters.images), teacher.predict(clusters.images))


def test_finetune_is_idempotent():
    teacher, student = _net(1), _net(2)
    once = finetune_init(student, teacher)
    twice = finetune_init(once, teacher)
    assert _same_params(once, twice)


def test_transfer_method_validation():
    student, teacher = _net(1), _net(2)
    TransferMethod("Rdl", {"tap_map": {"h1": "h2"}}).validate(student, teacher)
    with pytest.raises(ConfigError) as err:
        TransferMethod("Rdl", {"tap_map": {"h9": "h8"}}).validate(student, teacher)
    assert len(err.value.problems) == 2
    with pytest.raises(ConfigError):
        TransferMethod("Nope").validate(student)
    with pytest.raises(ConfigError):
        TransferMethod("Finetune").validate(student)


def test_dsn_head_parameter_count():
    net = Network(mnist_table1_specs(), (1, 28, 28), seed=0)
    dsn = deep_supervision_attach(net, ["pool1", "pool2"], 10)
    assert dsn.param_count() == (32 * 8 * 8 + 1) * 10 + (64 * 2 * 2 + 1) * 10


def test_dsn_alpha_zero_matches_baseline(clusters):
    a, b = _net(4), _net(4)
    dsn = deep_supervision_attach(a, ["h1", "h2"], 4, AlphaSchedule(0.0, 3, "DsnDecay"))
    for epoch in range(2):
        train_epoch(a, clusters.images, clusters.labels, SgdState(0.05), 20, 1, epoch, [dsn])
        train_epoch(b, clusters.images, clusters.labels, SgdState(0.05), 20, 1, epoch)
    assert _same_params(a, b)


def test_dsn_empty_taps_is_identity(clusters):
    a, b = _net(4), _net(4)
    dsn = deep_supervision_attach(a, [], 4, AlphaSchedule(1.0, 3, "DsnDecay"))
    train_epoch(a, clusters.images, clusters.labels, SgdState(0.05), 20, 1, 0, [dsn])
    train_epoch(b, clusters.images, clusters.labels, SgdState(0.05), 20, 1, 0)
    assert _same_params(a, b)


def test_dsn_head_gradient_reaches_only_earlier_layers(clusters):
    net = _net(4)
    dsn = deep_supervision_attach(net, ["h1"], 4, AlphaSchedule(1.0, 3, "DsnDecay"))
    dsn.begin_epoch(0)
    res = net.forward(clusters.images[:10], "train", 0)
    grads, weights = dsn.tap_gradients(res, clusters.images[:10], clusters.labels[:10], 0, 0)
    g = net.backward(res, None, grads, weights)
    assert np.abs(g.params[0]["W"]).sum() > 0
    assert not g.params[2]["W"].any() and not g.params[5]["W"].any()
    head_before = dsn.heads["h1"]["W"].copy()
    dsn.after_backward(0, 0)
    assert not np.array_equal(head_before, dsn.heads["h1"]["W"])


def test_dsn_rejects_unknown_tap():
    with pytest.raises(ShapeError):
        deep_supervision_attach(_net(1), ["nope"], 4)


def test_hints_identity_regressor_starts_at_zero(clusters):
    teacher = _net(1)
    student = teacher.copy()
    res = hints_pretrain(student, teacher, "h2", "h2", clusters.images, 0, SgdState(0.01), regressor_init="identity")
    assert res.losses == [0.0]


def test_hints_descends_and_freezes_later_layers(clusters):
    teacher, student = _net(1), _net(2)
    later = {i: {k: v.copy() for k, v in student.layers[i].params.items()} for i in (2, 5)}
    res = hints_pretrain(student, teacher, "h1", "h2", clusters.images, 5, SgdState(0.01, 0.5), batch_size=20)
    assert all(b < a for a, b in zip(res.losses, res.losses[1:])), res.losses
    for i, params in later.items():
        for k, v in params.items():
            assert student.layers[i].params[k].tobytes() == v.tobytes()


def test_hints_zero_target_drives_loss_to_zero(clusters):
    teacher = _net(1)
    for name in ("W", "b"):
        teacher.layers[0].params[name][...] = 0.0
    # teacher h1 is identically zero
    student = _net(2)
    res = hints_pretrain(student, teacher, "h2", "h1", clusters.images, 30, SgdState(0.05, 0.9), batch_size=20)
    assert res.losses[-1] < 1e-2 * res.losses[0]
    assert np.abs(res.regressor["b"]).max() < 0.05


def test_hints_shape_errors(clusters):
    teacher = Network([LayerSpec("FullyConnected", features=5, tap="h1")], (1, 1, 6), seed=0)
    with pytest.raises(ShapeError):
        hints_pretrain(_net(2), teacher, "h1", "h1", clusters.images, 1, SgdState(0.01), regressor_init="identity")
    with pytest.raises(ShapeError):
        hints_pretrain(_net(2), teacher, "nope", "h1", clusters.images, 1, SgdState(0.01))
