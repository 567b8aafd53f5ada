import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldn.data import NoiseModel, synth_dataset
from ldn.errors import AlignmentError
from ldn.losses import LossWeights
from ldn.models import ArchConfig, build, load_weights
from ldn.train import (FrozenTeacher, OptimizerState, TrainConfig, adam_step, clip_global_norm, cosine_lr,
                       global_norm, lr_for_epoch, train, train_distilled, train_supervised)

STUDENT = ArchConfig.student((4, 8), 8, (1, 1, 1))
TEACHER = ArchConfig.teacher((4, 8), 8, (1, 1, 1))


def test_config_checks():
    with pytest.raises(ValueError):
        TrainConfig(crop_schedule=((5, 32),))
    with pytest.raises(ValueError):
        TrainConfig(crop_schedule=((0, 32), (0, 64)))
    with pytest.raises(ValueError):
        TrainConfig(t_max=0)
    cfg = TrainConfig(epochs=10, crop_schedule=((0, 16), (4, 32)), finetune_epochs=3)
    assert [cfg.crop_for_epoch(e) for e in (0, 3, 4, 12)] == [16, 16, 32, 32]
    assert cfg.total_epochs == 13


def test_cosine_schedule_values():
    cfg = TrainConfig(lr_max=1e-3, lr_min=1e-5, t_max=100)
    assert cosine_lr(0, cfg) == pytest.approx(1e-3)
    assert cosine_lr(50, cfg) == pytest.approx((1e-3 + 1e-5) / 2)
    assert cosine_lr(100, cfg) == pytest.approx(1e-5)
    assert cosine_lr(150, cfg) == 1e-5


@given(st.integers(1, 300), st.floats(1e-4, 1e-1), st.floats(0, 1e-4))
@settings(max_examples=40, deadline=None)
def test_cosine_is_monotone_and_bounded(t_max, hi, lo):
    cfg = TrainConfig(lr_max=hi, lr_min=lo, t_max=t_max)
    lrs = [cosine_lr(t, cfg) for t in range(t_max + 2)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(lo - 1e-15 <= v <= hi + 1e-15 for v in lrs)


def test_finetune_restarts_schedule():
    cfg = TrainConfig(epochs=4, t_max=4, finetune_epochs=2)
    lrs = [lr_for_epoch(e, cfg) for e in range(6)]
    assert lrs[4] == pytest.approx(cfg.lr_max) and lrs[5] == pytest.approx(cosine_lr(1, cfg, t_max=2))


def test_clip_global_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    assert global_norm(g) == 5
    clipped, norm = clip_global_norm(g, 0.1)
    assert norm == 5 and global_norm(clipped) == pytest.approx(0.1)
    np.testing.assert_allclose(clipped["a"] / clipped["b"][0, 0], [0.75, 0])
    same, _ = clip_global_norm({"a": np.array([0.01])}, 0.1)
    assert same["a"][0] == 0.01
    zero, n = clip_global_norm({"a": np.zeros(2)}, 0.1)
    assert n == 0 and not zero["a"].any()


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -5.0, 1e-3])}
    new, state = adam_step(p, g, OptimizerState.zeros_like(p), 0.01, TrainConfig())
    np.testing.assert_allclose(new["w"], p["w"] - 0.01 * np.sign(g["w"]), atol=1e-7)
    assert state.step == 1


def test_adam_matches_hand_rollout():
    cfg = TrainConfig()
    p = {"w": np.array([0.0])}
    state = OptimizerState.zeros_like(p)
    m = v = 0.0
    w = 0.0
    for t, gt in enumerate([1.0, -0.5, 2.0], start=1):
        p, state = adam_step(p, {"w": np.array([gt])}, state, 1e-2, cfg)
        m = 0.9 * m + 0.1 * gt
        v = 0.999 * v + 0.001 * gt * gt
        w -= 1e-2 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert p["w"][0] == pytest.approx(w, rel=1e-12)


@pytest.fixture(scope="module")
def pairs():
    return synth_dataset(12, 32, seed=5)


def _cfg(**kw):
    base = dict(epochs=3, t_max=3, batch_size=4, crop_schedule=((0, 16),), seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_training_lowers_loss(pairs):
    res = train_supervised(STUDENT, pairs[:8], _cfg(epochs=6, t_max=6), pairs[8:])
    assert res.log[-1].l_total < res.log[0].l_total
    assert res.best_psnr == max(r.val_psnr for r in res.log)
    assert res.best_epoch == int(np.argmax([r.val_psnr for r in res.log]))


def test_training_is_deterministic(pairs, tmp_path):
    a = train_supervised(STUDENT, pairs[:8], _cfg(), pairs[8:], checkpoint_dir=tmp_path / "a")
    b = train_supervised(STUDENT, pairs[:8], _cfg(), pairs[8:], checkpoint_dir=tmp_path / "b")
    for name in ("best.ldnw", "last.ldnw", "train_log.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    c = train_supervised(STUDENT, pairs[:8], _cfg(seed=2), pairs[8:])
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)


def test_checkpoint_contents(pairs, tmp_path):
    res = train_supervised(STUDENT, pairs[:8], _cfg(epochs=2, t_max=2), pairs[8:], checkpoint_dir=tmp_path)
    best = load_weights(tmp_path / "best.ldnw")
    assert all(best[k].tobytes() == res.best_params[k].tobytes() for k in best)
    log = (tmp_path / "train_log.txt").read_text().splitlines()
    assert "# lambda_distill = 0.0" in log and "# alpha = 0.0" in log
    assert log[-3] == "epoch,lr,l_total,val_psnr" and log[-2].startswith("0,")


def test_distillation_uses_teacher(pairs):
    teacher = FrozenTeacher(TEACHER, build(TEACHER, 0, residual_gain=0.1))
    assert teacher(pairs[0].noisy).shape == pairs[0].noisy.shape
    d = train_distilled(STUDENT, teacher, pairs[:8], _cfg(epochs=1), pairs[8:])
    s = train_supervised(STUDENT, pairs[:8], _cfg(epochs=1), pairs[8:])
    assert any(d.params[k].tobytes() != s.params[k].tobytes() for k in d.params)
    # the teacher is queried on the same training crops the student sees
    calls = []
    def spy(x):
        calls.append(x.shape)
        return teacher(x)
    train(STUDENT, pairs[:8], _cfg(epochs=1), LossWeights(0, 1, 0), spy)
    assert calls and calls[0] == (4, 16, 16, 3)


def test_frozen_teacher_is_read_only():
    teacher = FrozenTeacher(TEACHER, build(TEACHER, 0))
    with pytest.raises(ValueError):
        teacher.params["in.conv1.weight"][0, 0, 0, 0] = 1.0


def test_training_input_checks(pairs):
    with pytest.raises(ValueError):
        train_supervised(STUDENT, [], _cfg())
    with pytest.raises(ValueError):
        train(STUDENT, pairs, _cfg(), LossWeights(), None)
    with pytest.raises(AlignmentError):
        train_supervised(STUDENT, pairs, _cfg(crop_schedule=((0, 10),)))
    with pytest.raises(ValueError):
        train_supervised(STUDENT, pairs, _cfg(), weights=LossWeights())


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_clipped_norm_bound(seed, scale):
    rng = np.random.default_rng(seed)
    g = {str(i): rng.standard_normal(rng.integers(1, 6, 2)) * scale for i in range(int(rng.integers(1, 5)))}
    clipped, _ = clip_global_norm(g, 0.1)
    assert global_norm(clipped) <= 0.1 + 1e-9
    assert all(np.all(np.abs(clipped[k]) <= np.abs(g[k])) for k in g)


def test_adam_limits():
    p = {"w": np.array([0.5, -1.0])}
    same, _ = adam_step(p, {"w": np.zeros(2)}, OptimizerState.zeros_like(p), 1e-3, TrainConfig())
    np.testing.assert_array_equal(same["w"], p["w"])
    cfg = TrainConfig(beta1=0.0, beta2=0.0)
    state = OptimizerState.zeros_like(p)
    q = p
    for g in ([0.2, -3.0], [-0.7, 1e-2]):
        q, state = adam_step(q, {"w": np.array(g)}, state, 0.1, cfg)
    np.testing.assert_allclose(q["w"], p["w"] - 0.1 * (np.sign([0.2, -3.0]) + np.sign([-0.7, 1e-2])), atol=1e-6)


def test_fixed_batch_loss_decreases():
    from ldn.losses import loss_backward, loss_total
    from ldn.models import INPUT, ActivationTape, network

    net = network(STUDENT)
    batch = synth_dataset(4, 16, seed=8)
    noisy = np.concatenate([p.noisy for p in batch])
    clean = np.concatenate([p.clean for p in batch])
    cfg = TrainConfig()
    params = net.init(0, cfg.init_residual_gain)
    state = OptimizerState.zeros_like(params)
    losses = []
    for _ in range(6):
        tape = ActivationTape()
        report = loss_total(net.forward(params, noisy, tape), None, clean, LossWeights.supervised())
        losses.append(report.l_total)
        grads = net.backward(params, tape, loss_backward(report))
        grads.pop(INPUT)
        grads, _ = clip_global_norm(grads, cfg.clip_norm)
        params, state = adam_step(params, grads, state, 1e-3, cfg)
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_perfect_teacher_reduces_to_supervised_mse():
    clean_pairs = synth_dataset(8, 16, NoiseModel(0, 0), seed=6)
    cfg = _cfg(epochs=2, t_max=2)
    sup = train(STUDENT, clean_pairs, cfg, LossWeights(7.0, 0.0, 0.0))
    # noise-free data: the identity teacher returns exactly the ground truth of every crop
    dist = train(STUDENT, clean_pairs, cfg, LossWeights(0.0, 7.0, 0.0), teacher=lambda x: x.copy())
    assert all(sup.params[k].tobytes() == dist.params[k].tobytes() for k in sup.params)


def test_teacher_unchanged_by_distillation(pairs):
    params = build(TEACHER, 3, residual_gain=0.1)
    before = {k: v.tobytes() for k, v in params.items()}
    teacher = FrozenTeacher(TEACHER, params)
    train_distilled(STUDENT, teacher, pairs[:8], _cfg(epochs=1))
    assert all(teacher.params[k].tobytes() == before[k] for k in before)
    assert all(params[k].tobytes() == before[k] for k in before)


def test_teacher_alignment_checked(pairs):
    deep_teacher = FrozenTeacher(ArchConfig.teacher((4, 4, 4), 8, (1, 1, 1)),
                                 build(ArchConfig.teacher((4, 4, 4), 8, (1, 1, 1))))
    with pytest.raises(AlignmentError, match="teacher"):
        train_distilled(STUDENT, deep_teacher, pairs[:8], _cfg(crop_schedule=((0, 12),)))
