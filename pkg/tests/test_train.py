import math

import numpy as np
import pytest

from attncal import tensor as T
from attncal.model import Model
from attncal.tasks import TaskSpec
from attncal.tensor import Tensor
from attncal.train import (
    Adam,
    TrainConfig,
    batch_loss,
    TrainingDiverged,
    check_gradients,
    grad_check,
    relative_error,
    teacher_forcing,
    train,
)
from conftest import tiny_config


def test_config_validation():
    with pytest.raises(ValueError, match="steps"):
        TrainConfig(steps=0)
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError, match="grad_clip"):
        TrainConfig(grad_clip=0.0)


def test_teacher_forcing_masks_answer_positions():
    spec = TaskSpec(vocab_size=64, val_len=2)
    batch = [spec.generate(g, g) for g in range(3)]
    inputs, targets, weights = teacher_forcing(batch)
    n = len(batch[0].tokens)
    assert inputs.shape == (3, n + 1)
    assert np.all(weights[:, : n - 1] == 0) and np.all(weights[:, n - 1 :] == 1)
    for b, inst in enumerate(batch):
        assert tuple(targets[b, n - 1 :]) == inst.answer
        assert inputs[b, n] == inst.answer[0]


def test_initial_loss_is_log_vocab(kv_task):
    res = train(Model.init(tiny_config(), 0), kv_task, TrainConfig(steps=1, batch=16))
    assert res.losses[0][1] == pytest.approx(math.log(24), rel=0.05)


def test_zero_lr_keeps_parameters_bitwise(kv_task):
    init = Model.init(tiny_config(), 1)
    res = train(init, kv_task, TrainConfig(steps=5, batch=4, lr=0.0))
    assert all(res.model.params[n].data.tobytes() == init.params[n].data.tobytes() for n in init.params)


def test_training_is_reproducible_and_leaves_input(kv_task, tmp_path):
    init = Model.init(tiny_config(), 2)
    before = init.params["embed"].data.copy()
    a = train(init, kv_task, TrainConfig(steps=4, batch=4))
    b = train(init, kv_task, TrainConfig(steps=4, batch=4))
    assert np.array_equal(init.params["embed"].data, before)
    a.model.save(tmp_path / "a")
    b.model.save(tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert a.loss_csv() == b.loss_csv() and a.loss_csv().startswith("step,loss\n0,")


def test_overfits_a_fixed_batch(kv_task):
    model = Model.init(tiny_config(), 3)
    batch = [kv_task.generate(g % 5, g) for g in range(4)]
    inputs, targets, weights = teacher_forcing(batch)
    opt = Adam(model.parameters(), TrainConfig(lr=1e-2))
    first = None
    for _ in range(150):
        model.zero_grad()
        loss = batch_loss(model, inputs, targets, weights)
        first = first or loss.item()
        loss.backward()
        opt.step()
    assert loss.item() < 0.1 * first


@pytest.mark.filterwarnings("ignore:invalid value")
def test_divergence_is_reported(kv_task):
    model = Model.init(tiny_config(), 4)
    model.params["unembed"].data[:] = np.inf
    with pytest.raises(TrainingDiverged) as err:
        train(model, kv_task, TrainConfig(steps=3, batch=2))
    assert err.value.step == 0


def test_grad_clip_scales_update():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([300.0, 400.0])
    opt = Adam([p], TrainConfig(lr=0.1, grad_clip=1.0))
    assert opt.step() == pytest.approx(500.0)
    # first Adam step moves every coordinate by lr regardless of scale
    assert np.allclose(p.data, [-0.1, -0.1])


# gradient checking -----------------------------------------------------------


def test_relative_error_floor():
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-6)
    assert relative_error(2.0, 1.0) == 0.5


def test_quadratic_toy_graph():
    x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    assert check_gradients(lambda: ((x * x) * 3.0 + x).sum(), [x]) < 1e-8


def test_check_gradients_detects_wrong_rule():
    x = Tensor(np.array([0.5, 1.5]), requires_grad=True)

    def broken():
        y = T._make(x.data ** 2, (x,), lambda g: (g * x.data,))  # should be 2x
        return y.sum()

    assert check_gradients(broken, [x]) > 0.1


def test_grad_check_tiny_transformer(kv_task):
    model = Model.init(tiny_config(), 5)
    assert model.num_params() <= 10_000
    assert grad_check(model, kv_task.generate(2, 7), n_samples=150, seed=1) < 1e-4


def test_grad_check_during_training(kv_task):
    res = train(Model.init(tiny_config(), 6), kv_task, TrainConfig(steps=201, batch=4, grad_check_every=100))
    assert [s for s, _ in res.grad_checks] == [0, 100, 200]
    assert all(err < 1e-4 for _, err in res.grad_checks)
