import math

import numpy as np
import pytest

from soma.adapter import AdapterKind
from soma.errors import ConfigError, DivergenceError, LabelError, NonFiniteError, RankError
from soma.model import (
    accuracy,
    backbone_trainable_count,
    init_block_model,
    trainable_parameters,
    weight_hash,
)
from soma.train import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    apply_freeze_policy,
    awd_coefficient,
    decay_references,
    loss_and_grad,
    train_loop,
)


def _tiny(seed=0, n_blocks=2):
    return init_block_model(d_in=5, d_model=6, d_hidden=7, n_blocks=n_blocks, n_classes=3, seed=seed)


def _separable(n=200, seed=0):
    # class decided by the sign of the first feature, with a wide margin
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, n))
    labels = rng.integers(0, 2, size=n)
    x[0] = np.where(labels == 1, 1.0, -1.0) * (2.0 + np.abs(x[0]))
    return x, labels


def test_loss_of_uniform_logits_is_log_classes():
    loss, grad = loss_and_grad(np.zeros((4, 3)), np.array([0, 1, 3]))
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    np.testing.assert_allclose(grad.sum(axis=0), 0.0, atol=1e-15)


def test_loss_of_a_large_margin_vanishes():
    logits = np.zeros((3, 2))
    logits[[1, 2], [0, 1]] = 100.0
    loss, _ = loss_and_grad(logits, np.array([1, 2]))
    assert 0.0 <= loss <= 1e-6


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    logits, labels = rng.normal(size=(4, 5)), np.array([0, 3, 1, 1, 2])
    _, grad = loss_and_grad(logits, labels)
    h = 1e-6
    for i in range(4):
        for j in range(5):
            up, down = logits.copy(), logits.copy()
            up[i, j] += h
            down[i, j] -= h
            numeric = (loss_and_grad(up, labels)[0] - loss_and_grad(down, labels)[0]) / (2 * h)
            assert grad[i, j] == pytest.approx(numeric, abs=1e-8)


@pytest.mark.parametrize('labels', [[0, 3], [-1, 0], [0, 1, 2]])
def test_loss_rejects_bad_labels(labels):
    with pytest.raises(LabelError):
        loss_and_grad(np.zeros((3, 2)), np.array(labels))


def test_awd_endpoints():
    assert awd_coefficient(0, 100, 0.05, 'cosine') == 0.05
    assert awd_coefficient(100, 100, 0.05, 'cosine') == 0.0
    assert awd_coefficient(37, 100, 0.05, 'constant') == 0.05
    assert awd_coefficient(37, 100, 0.05, 'off') == 0.0


def test_cosine_awd_never_increases():
    T = 10_000
    values = [awd_coefficient(t, T, 0.1, 'cosine') for t in range(T + 1)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert all(0.0 <= v <= 0.1 for v in values)


def test_awd_outside_the_schedule():
    with pytest.raises(ValueError):
        awd_coefficient(101, 100, 0.05, 'cosine')
    with pytest.raises(ValueError):
        awd_coefficient(-1, 100, 0.05, 'cosine')


def test_single_adamw_step_has_a_closed_form():
    rng = np.random.default_rng(2)
    theta = rng.normal(size=(3, 4))
    start = theta.copy()
    g = rng.normal(size=(3, 4))
    cfg = TrainConfig(lr=1e-2, wd0=0.1, awd='cosine', steps=10)

    adamw_step({'head.w': theta}, {'head.w': g}, OptimizerState(), cfg, 0)
    # after one step the bias-corrected moments are g and g^2
    expected = start - 1e-2 * (g / (np.abs(g) + 1e-8) + 0.1 * start)
    np.testing.assert_allclose(theta, expected, rtol=0, atol=1e-14)


def test_backbone_tensors_use_the_scaled_rate():
    theta, head = np.ones(2), np.ones(2)
    cfg = TrainConfig(lr=1e-2, backbone_lr_mult=0.5, awd='off')
    g = np.ones(2)
    adamw_step({'blocks.0.lin1.w': theta, 'head.w': head}, {'blocks.0.lin1.w': g, 'head.w': g},
               OptimizerState(), cfg, 0)
    np.testing.assert_allclose(1.0 - theta, 0.5 * (1.0 - head), rtol=1e-12)


def test_zero_gradient_without_decay_leaves_parameters_alone():
    theta = np.random.default_rng(3).normal(size=5)
    start = theta.copy()
    cfg = TrainConfig(awd='off', steps=5)
    opt = OptimizerState()
    for t in range(5):
        adamw_step({'head.w': theta}, {'head.w': np.zeros(5)}, opt, cfg, t)
    assert np.array_equal(theta, start)
    assert opt.step == 5


def test_decay_toward_the_initial_values():
    model = apply_freeze_policy(_tiny(), 1, TrainConfig(kind=AdapterKind.SOMA, rank=2, nfeb=1))
    cfg = TrainConfig(decay_reference='init', awd='constant', wd0=0.5, lr=0.1, steps=10)
    refs = decay_references(model, cfg)
    params = trainable_parameters(model)
    assert set(refs) == set(params)

    rng = np.random.default_rng(4)
    for theta in params.values():
        theta += rng.normal(size=theta.shape)

    def distance():
        return sum(float(np.sum((params[k] - refs[k]) ** 2)) for k in params)

    opt = OptimizerState()
    last = distance()
    for t in range(10):
        adamw_step(params, {k: np.zeros_like(v) for k, v in params.items()}, opt, cfg, t, refs)
        now = distance()
        assert now < last
        last = now


def test_zero_reference_has_no_table():
    assert decay_references(_tiny(), TrainConfig()) is None


def test_non_finite_gradient_touches_nothing():
    theta = np.ones(3)
    opt = OptimizerState()
    with pytest.raises(NonFiniteError):
        adamw_step({'head.w': theta}, {'head.w': np.array([0.0, np.nan, 1.0])}, opt, TrainConfig(), 0)
    assert np.array_equal(theta, np.ones(3))
    assert opt.step == 0 and not opt.m


def test_freeze_policy_with_no_frozen_blocks_adapts_every_block():
    model = apply_freeze_policy(_tiny(), 0, TrainConfig(kind=AdapterKind.SOMA, rank=2, nfeb=0))
    assert model.embed.frozen
    assert all(blk.lin1.adapter is not None and blk.lin2.adapter is not None for blk in model.blocks)
    assert not model.head.frozen


def test_freeze_policy_with_every_block_frozen():
    model = apply_freeze_policy(_tiny(), 2, TrainConfig(kind=AdapterKind.SOMA, rank=2, nfeb=2))
    assert backbone_trainable_count(model) == 0
    assert list(trainable_parameters(model)) == ['head.w', 'head.bias']


def test_freeze_policy_plain_fine_tuning():
    base = _tiny()
    full = apply_freeze_policy(base, 0, TrainConfig(kind=AdapterKind.NONE, nfeb=0))
    assert all(not lin.frozen for lin in full.layers())
    partial = apply_freeze_policy(base, 1, TrainConfig(kind=AdapterKind.NONE, nfeb=1))
    assert [lin.mode for lin in partial.layers()] == [
        'frozen', 'frozen', 'frozen', 'trainable', 'trainable', 'trainable',
    ]


def test_freeze_policy_leaves_the_original_alone():
    base = _tiny()
    before = weight_hash(base)
    apply_freeze_policy(base, 1, TrainConfig(kind=AdapterKind.LORA, rank=2, nfeb=1))
    assert weight_hash(base) == before
    assert all(lin.adapter is None and not lin.frozen for lin in base.layers())


def test_freeze_policy_only_wraps_the_targets():
    cfg = TrainConfig(kind=AdapterKind.PISSA, rank=2, nfeb=0, adapt_targets=('lin2',))
    model = apply_freeze_policy(_tiny(), 0, cfg)
    for blk in model.blocks:
        assert blk.lin1.mode == 'frozen'
        assert blk.lin2.mode == 'adapter'


def test_freeze_policy_errors():
    with pytest.raises(RankError, match='blocks.0.lin1'):
        apply_freeze_policy(_tiny(), 0, TrainConfig(kind=AdapterKind.SOMA, rank=100, nfeb=0))
    with pytest.raises(ConfigError):
        apply_freeze_policy(_tiny(), 3, TrainConfig(nfeb=3))


@pytest.mark.parametrize('kwargs', [
    {'rank': 0},
    {'awd': 'linear'},
    {'adapt_targets': ('lin3',)},
    {'adapt_targets': ()},
    {'kind': 'dora'},
    {'decay_reference': 'mean'},
    {'batch': 0},
])
def test_train_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_train_config_parses_the_kind():
    assert TrainConfig(kind='lora').kind is AdapterKind.LORA


def test_one_step_gives_one_loss():
    x, labels = _separable(20)
    _, losses = train_loop(_tiny(), x, labels, TrainConfig(kind=AdapterKind.NONE, nfeb=0, steps=1, batch=8))
    assert len(losses) == 1


def test_separable_data_is_learned():
    x, labels = _separable()
    cfg = TrainConfig(kind=AdapterKind.NONE, nfeb=0, lr=1e-2, backbone_lr_mult=1.0, wd0=0.0, awd='off',
                      steps=500, batch=32)
    model, losses = train_loop(_tiny(), x, labels, cfg)
    assert accuracy(model, x, labels) >= 0.99
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_training_is_deterministic():
    x, labels = _separable(60)
    cfg = TrainConfig(kind=AdapterKind.SOMA, rank=2, nfeb=1, steps=25, batch=16, seed=3)
    a, la = train_loop(apply_freeze_policy(_tiny(), 1, cfg), x, labels, cfg)
    b, lb = train_loop(apply_freeze_policy(_tiny(), 1, cfg), x, labels, cfg)
    assert weight_hash(a) == weight_hash(b)
    assert la == lb


def test_frozen_layers_never_move():
    x, labels = _separable(60)
    cfg = TrainConfig(kind=AdapterKind.SOMA, rank=2, nfeb=1, lr=1e-2, steps=20, batch=16)
    model = apply_freeze_policy(_tiny(), 1, cfg)
    frozen = {p: weight_hash(model, p) for p in ('embed', 'blocks.0')}
    adapted = weight_hash(model, 'blocks.1')
    train_loop(model, x, labels, cfg)
    assert {p: weight_hash(model, p) for p in frozen} == frozen
    assert weight_hash(model, 'blocks.1') != adapted


def test_divergence_is_reported():
    x = np.full((5, 4), np.nan)
    cfg = TrainConfig(kind=AdapterKind.NONE, nfeb=0, steps=3, batch=4)
    with np.errstate(all='ignore'), pytest.raises(DivergenceError) as info:
        train_loop(_tiny(), x, np.zeros(4, dtype=int), cfg)
    assert info.value.step == 0


def test_train_loop_checks_its_inputs():
    x, labels = _separable(10)
    with pytest.raises(ConfigError):
        train_loop(_tiny(), x, labels, TrainConfig(steps=0))
    with pytest.raises(ConfigError):
        train_loop(_tiny(), np.zeros((5, 0)), np.zeros(0, dtype=int), TrainConfig())
    with pytest.raises(LabelError):
        train_loop(_tiny(), x, labels[:5], TrainConfig())
