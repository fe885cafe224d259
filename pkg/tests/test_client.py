from __future__ import annotations

import numpy as np
import pytest

import oracles
from fedinject import tensor as T
from fedinject.client import (ClientModel, EncoderConfig, MissingModalityError, client_forward,
                              fedprox_local_objective, fedprox_penalty, init_client_params,
                              local_train, multitask_loss)
from fedinject.data import ConfigError, default_benchmark, generate_benchmark

SPEC = default_benchmark(n_train=60, n_val=40)
ENC = EncoderConfig(out_dim=8, conv_channels=(3, 4))


def model_for(task_ids, seed=0):
    tasks = [SPEC.task(t) for t in task_ids]
    params = init_client_params(SPEC, tasks, ENC, 10, np.random.default_rng(seed))
    return ClientModel(0, params, SPEC.modalities, tasks, ENC, 10)


DATA = generate_benchmark(SPEC, 0)


def test_encoders_produce_fixed_width_features():
    model = model_for(["covid", "ecg", "mortality"])
    for t in model.tasks:
        out = client_forward(model, DATA[t.id][:5], t)
        assert out.shape == (5, t.n_classes)
    single = client_forward(model, DATA["covid"][0], model.tasks[0])
    assert single.shape == (2,)


def test_batched_forward_equals_per_sample():
    model = model_for(["mortality"])
    t = model.tasks[0]
    batch = client_forward(model, DATA[t.id][:4], t).data
    for i in range(4):
        np.testing.assert_allclose(batch[i], client_forward(model, DATA[t.id][i], t).data,
                                   atol=1e-12)


def test_missing_modality_is_named():
    model = model_for(["mortality"])
    s = DATA["covid"][0]
    with pytest.raises(MissingModalityError, match="tabular|signal"):
        client_forward(model, [s], model.tasks[0])


def test_multitask_loss_matches_two_loop_brute_force():
    """Mean over tasks of the mean per-sample loss, one sample at a time."""
    model = model_for(["covid", "ecg", "mortality"])
    shard = {t.id: DATA[t.id][: 3 + k] for k, t in enumerate(model.tasks)}
    got = float(multitask_loss(model, model.params.tensors(), shard).data)
    per_task = []
    for t in model.tasks:
        losses = []
        for s in shard[t.id]:
            row = client_forward(model, s, t).data.tolist()
            losses.append(oracles.cross_entropy([row], [s.label]))
        per_task.append(sum(losses) / len(losses))
    assert got == pytest.approx(sum(per_task) / len(per_task), abs=1e-12)


def test_client_gradients_agree_with_finite_differences():
    model = model_for(["covid", "ecg", "mortality"])
    shard = {t.id: DATA[t.id][:3] for t in model.tasks}
    rep = T.finite_diff_check(lambda p: multitask_loss(model, p, shard), model.params,
                              max_entries=6, tol=1e-4)
    assert rep.passed, str(rep)
    assert len(rep.entries) == len(model.params)


def test_fedprox_penalty_is_zero_at_the_anchor_and_quadratic_away():
    model = model_for(["ecg"])
    anchor = model.params.copy()
    leaves = model.params.tensors()
    paths = model.params.trainable_paths()
    assert float(fedprox_penalty(leaves, anchor, 0.7, paths).data) == 0.0
    shifted = model.params.copy()
    for p in paths:
        shifted.set(p, shifted[p] + 0.1)
    expected = 0.5 * 0.7 * 0.01 * shifted.size()
    got = float(fedprox_penalty(shifted.tensors(), anchor, 0.7, paths).data)
    assert got == pytest.approx(expected, rel=1e-12)
    obj = fedprox_local_objective(lambda p: T.Tensor(1.5), leaves, model.params, anchor, 0.7)
    assert float(obj.data) == 1.5


def test_local_train_is_seeded_and_reduces_loss():
    shard = {t: DATA[t][:32] for t in ("covid", "ecg")}
    a, b = model_for(["covid", "ecg"]), model_for(["covid", "ecg"])
    ra = local_train(a, shard, 5, 0.1, np.random.default_rng(3))
    rb = local_train(b, shard, 5, 0.1, np.random.default_rng(3))
    assert a.params == b.params and ra.epoch_losses == rb.epoch_losses
    assert ra.epoch_losses[-1] < ra.epoch_losses[0]


def test_local_train_rejects_empty_shards():
    model = model_for(["covid"])
    with pytest.raises(ConfigError):
        local_train(model, {"covid": []}, 1, 0.1, np.random.default_rng(0))
