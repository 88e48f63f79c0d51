import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from mrialign import diffcore as dc
from mrialign.containers import IncompatibleCheckpointError
from mrialign.evaluation import BinaryPredictions, auc
from mrialign.synthdata import DatasetSpec, generate_dataset
from mrialign.training import (OptimizerState, PoisonedGradientError, SchedulerConfig, TrainRunConfig,
                               _batches, cross_entropy, finetune, optimizer_step, pretrain,
                               scheduler_lr)

SMALL = TrainRunConfig(batch_size=8, pretrain_epochs=3, finetune_epochs=2, folds=2, lr=1e-3)


@pytest.fixture(scope="module")
def records():
    return generate_dataset(DatasetSpec(n_patients=16, class_balance=0.5, seed=8))


def scalar_param(value, grad):
    p = dc.parameter(np.array(value))
    p.grad = np.array(grad)
    return {"theta": p}


def test_optimizer_zero_gradient_fixed_point():
    params = scalar_param([1.0, -2.0], [0.0, 0.0])
    optimizer_step(params, OptimizerState(weight_decay=0.0), 1e-3)
    assert np.array_equal(params["theta"].value, [1.0, -2.0])


def test_optimizer_first_step_closed_form():
    params = scalar_param(1.0, 0.5)
    optimizer_step(params, OptimizerState(weight_decay=0.0), 1e-4)
    assert params["theta"].value - 1.0 == pytest.approx(-1e-4, rel=1e-6)


def test_optimizer_pure_decay_step():
    params = scalar_param(1.0, 0.0)
    optimizer_step(params, OptimizerState(weight_decay=0.01), 1e-4)
    assert params["theta"].value == pytest.approx(0.999999, abs=1e-15)


def test_optimizer_rejects_nan_and_names_parameter():
    params = scalar_param([1.0], [math.nan])
    with pytest.raises(PoisonedGradientError, match="theta"):
        optimizer_step(params, OptimizerState(), 1e-4)


def test_optimizer_skips_frozen_and_mirrors_shapes():
    frozen = dc.parameter(np.ones((2, 2)))
    frozen.requires_grad = False
    frozen.grad = np.ones((2, 2))
    live = dc.parameter(np.ones((3, 1)))
    live.grad = np.full((3, 1), 0.2)
    state = OptimizerState()
    optimizer_step({"f": frozen, "l": live}, state, 1e-2)
    assert np.array_equal(frozen.value, np.ones((2, 2)))
    assert "f" not in state.first_moment
    assert state.first_moment["l"].shape == state.second_moment["l"].shape == (3, 1)


def test_scheduler_examples():
    cfg, base = SchedulerConfig(), 1e-4
    assert scheduler_lr(4, cfg, base) == pytest.approx(0.5 * base)
    assert scheduler_lr(9, cfg, base) == pytest.approx(base)
    assert scheduler_lr(15, cfg, base) == pytest.approx(0.5 * base)
    assert scheduler_lr(25, cfg, base) == pytest.approx(0.25 * base)


@given(st.integers(0, 400), st.integers(1, 20), st.integers(1, 20), st.floats(0.1, 0.9))
def test_scheduler_positive_and_non_increasing_after_warmup(epoch, warmup, every, factor):
    assume(math.log10(factor) * (epoch // every + 2) > -300)  # stay clear of float underflow
    cfg = SchedulerConfig(warmup, factor, every)
    lr = scheduler_lr(epoch, cfg, 1e-3)
    assert lr > 0
    if epoch >= warmup:
        assert scheduler_lr(epoch + 1, cfg, 1e-3) <= lr


def test_batches_never_leave_a_single_pair():
    for n in range(2, 60):
        sizes = [len(b) for b in _batches(n, 16, np.random.default_rng(n))]
        assert sum(sizes) == n
        assert min(sizes) >= 2


def test_cross_entropy_closed_forms():
    perfect = dc.constant([[-1e3, 1e3], [1e3, -1e3]])
    assert cross_entropy(perfect, [1, 0]).item() == pytest.approx(0.0, abs=1e-12)
    uniform = dc.constant(np.zeros((4, 2)))
    assert cross_entropy(uniform, [0, 1, 0, 1]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_linear_head_separates_separable_features():
    r = np.random.default_rng(0)
    labels = np.repeat([0, 1], 20)
    feats = r.normal(size=(40, 5)) + np.outer(labels * 2 - 1, [3.0, 0, 0, 0, 0])
    w, b = dc.parameter(np.zeros((5, 2))), dc.parameter(np.zeros(2))
    state = OptimizerState(weight_decay=0.0)
    for _ in range(100):
        w.grad = b.grad = None
        dc.backward(cross_entropy(dc.constant(feats) @ w + b, labels))
        optimizer_step({"w": w, "b": b}, state, 1e-2)
    logits = feats @ w.value + b.value
    assert auc(BinaryPredictions(logits[:, 1] - logits[:, 0], labels)) == 1.0


def test_config_text_round_trip():
    run = TrainRunConfig(seed=4, strategy="hard", ablation_mode="contrastive", lr=3e-4)
    values = dict(line.split(" = ") for line in run.to_text().splitlines())
    assert TrainRunConfig.from_mapping(values) == run
    with pytest.raises(KeyError, match="valid keys"):
        TrainRunConfig.from_mapping({"learning_rate": "1"})
    with pytest.raises(ValueError):
        TrainRunConfig(ablation_mode="everything")


def test_pretrain_is_deterministic(records):
    a = pretrain(records, SMALL)
    b = pretrain(records, SMALL)
    assert a.trajectory_csv() == b.trajectory_csv()
    for k, v in a.checkpoint_arrays().items():
        assert v.tobytes() == b.checkpoint_arrays()[k].tobytes()


def test_pretrain_global_only_has_no_local_loss(records):
    result = pretrain(records, SMALL.replace(ablation_mode="global-only"), epochs=2)
    assert all(row["local_loss"] == 0.0 for row in result.trajectory)
    assert all(row["global_loss"] > 0.0 for row in result.trajectory)


@pytest.mark.parametrize("mode", ["local-only", "no-location", "contrastive", "hard-negative"])
def test_every_ablation_mode_trains(records, mode):
    result = pretrain(records, SMALL.replace(ablation_mode=mode), epochs=1)
    assert np.isfinite(result.trajectory[0]["total"])
    if mode == "local-only":
        assert result.trajectory[0]["global_loss"] == 0.0


def test_pretrain_keeps_frozen_parameters_and_clamps_weights(records):
    from mrialign.training import ModelShapes, init_framework_params, streams
    shapes = ModelShapes.for_data(records[0].volume.shape, 64, SMALL)
    init = {k: p.value.copy() for k, p in init_framework_params(shapes, streams(SMALL.seed)["init"]).items()}
    result = pretrain(records, SMALL.replace(lr=0.5), epochs=3)
    for k, p in result.params.items():
        if k.startswith(("vol.stage1.", "vol.stage2.", "txt.embed", "txt.layer0.")) and not k.endswith(
                ("running_mean", "running_var")):
            assert p.value.tobytes() == init[k].tobytes(), k
    assert all(row["alpha"] >= 0.05 and row["beta"] >= 0.05 for row in result.trajectory)


def test_pretrain_loss_decreases_on_reference_run():
    data = generate_dataset(DatasetSpec(n_patients=32, seed=0))
    run = TrainRunConfig(batch_size=16, lr=1e-3, seed=0)
    traj = pretrain(data, run, epochs=51).trajectory
    assert traj[50]["total"] < traj[1]["total"]


def test_finetune_keeps_frozen_stages(records):
    pre = pretrain(records, SMALL, epochs=1).checkpoint_arrays()
    folds = finetune(records, SMALL, init=pre, keep_params=True)
    assert len(folds) == 2
    for f in folds:
        for k in ("vol.stage1.w", "vol.stage2.w", "vol.stage2.gamma"):
            assert f.params[k].tobytes() == pre[k].tobytes()
        assert not np.array_equal(f.params["vol.stage3.w"], pre["vol.stage3.w"])
        assert set(f.internal) == {"auc", "precision", "recall", "f1", "dice2d", "dice3d"}


def test_finetune_rejects_mismatched_checkpoint(records):
    pre = pretrain(records, SMALL, epochs=1).checkpoint_arrays()
    pre["vol.stage3.w"] = pre["vol.stage3.w"][:, :5]
    with pytest.raises(IncompatibleCheckpointError):
        finetune(records, SMALL, init=pre)


def test_finetune_is_deterministic(records):
    a = finetune(records, SMALL, external=records[:6])
    b = finetune(records, SMALL, external=records[:6])
    assert [(f.internal, f.external, f.losses) for f in a] == [(f.internal, f.external, f.losses) for f in b]
