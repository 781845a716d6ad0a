from dataclasses import replace

import numpy as np
import pytest

from soma.adapter import AdapterKind
from soma.bench import (
    BenchProtocol,
    DomainSpec,
    RunReport,
    compare_methods,
    concat_datasets,
    finetune_and_eval,
    gen_domains,
    linear_probe_accuracy,
    method_configs,
    parse_sweep_values,
    pretrain_foundation,
    protocol_domains,
    run_protocol,
    run_single,
    summarize,
    sweep,
)
from soma.diagnostics import truncation_study
from soma.errors import ConfigError, DomainError, FoundationError
from soma.linalg import ComponentRange
from soma.model import backbone_trainable_count, forward, init_block_model, weight_hash
from soma.train import TrainConfig, apply_freeze_policy, loss_and_grad


def _small(**overrides):
    protocol = BenchProtocol(
        n_domains=4, n_pretrain_domains=2, source_domain=2, n_classes=4,
        d_in=8, d_model=8, d_hidden=16, n_blocks=2,
        n_per_class=32, n_eval_per_class=16,
        pretrain_steps=400, pretrain_lr=1e-2, min_foundation_acc=0.5,
    )
    return replace(protocol, **overrides)


@pytest.fixture(scope='module')
def small_setup():
    protocol = _small()
    train = protocol_domains(protocol, 0, 'train')
    held_out = protocol_domains(protocol, 0, 'eval')
    foundation = pretrain_foundation([train[0], train[1]], protocol, eval_domains=[held_out[0], held_out[1]])
    return protocol, train, held_out, foundation


@pytest.fixture(scope='module')
def default_comparison():
    return compare_methods(BenchProtocol(n_seeds=10), TrainConfig())


def test_domains_are_deterministic():
    a = gen_domains(3, 4, 6, 5, master_seed=11)
    b = gen_domains(3, 4, 6, 5, master_seed=11)
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
        assert np.array_equal(x.labels, y.labels)
    c = gen_domains(3, 4, 6, 5, master_seed=12)
    assert a[0].features.tobytes() != c[0].features.tobytes()


def test_identity_domains_without_noise_coincide():
    specs = [DomainSpec(domain_id=0), DomainSpec(domain_id=1)]
    a, b = gen_domains(2, 3, 4, 5, master_seed=0, specs=specs)
    assert np.array_equal(a.features, b.features)
    assert a.domains() == {0} and b.domains() == {1}


def test_labels_are_class_major():
    ds = gen_domains(2, 3, 4, 2, master_seed=0)[1]
    assert ds.labels.tolist() == [0, 0, 1, 1, 2, 2]
    assert ds.size == 6
    assert set(ds.domain_ids.tolist()) == {1}


def test_train_and_eval_splits_differ():
    train = gen_domains(2, 3, 4, 5, master_seed=0, split='train')
    held_out = gen_domains(2, 3, 4, 5, master_seed=0, split='eval')
    assert not np.array_equal(train[1].features, held_out[1].features)


@pytest.mark.parametrize('kwargs', [
    {'n_classes': 0},
    {'n_per_class': 0},
    {'d_in': 1},
    {'split': 'test'},
])
def test_gen_domains_rejects(kwargs):
    args = {'n_domains': 3, 'n_classes': 2, 'd_in': 4, 'n_per_class': 2, 'master_seed': 0, **kwargs}
    with pytest.raises(DomainError):
        gen_domains(**args)


def test_domain_spec_checks():
    with pytest.raises(DomainError):
        DomainSpec(domain_id=0, scale=0.0)
    with pytest.raises(DomainError):
        DomainSpec(domain_id=0, noise=-1.0)


@pytest.mark.parametrize('kwargs', [
    {'n_pretrain_domains': 1},
    {'n_pretrain_domains': 4},
    {'source_domain': 0},
    {'source_domain': 4},
    {'n_groups': 0},
    {'probe_layers': ('blocks.2.lin1',)},
    {'probe_layers': ('blocks.0.lin3',)},
    {'probe_layers': ('lin1',)},
])
def test_protocol_rejects(kwargs):
    with pytest.raises(ConfigError):
        _small(**kwargs)


def test_protocol_splits_the_domains():
    protocol = BenchProtocol()
    assert protocol.pretrain_ids == [0, 1, 2, 3, 4, 5]
    assert protocol.target_ids == [7]
    assert protocol.probes() == ('blocks.3.lin1', 'blocks.3.lin2')
    chosen = _small(probe_layers=('embed', 'blocks.1.lin2', 'head'))
    assert chosen.probes() == ('embed', 'blocks.1.lin2', 'head')


def test_strong_shift_hurts_a_linear_probe():
    protocol = BenchProtocol()
    train = protocol_domains(protocol, 0, 'train')
    held_out = protocol_domains(protocol, 0, 'eval')
    near, far = linear_probe_accuracy(train[0], [held_out[0], held_out[7]], n_classes=protocol.n_classes)
    assert near >= 0.9
    assert near - far >= 0.05


def test_single_class_foundation_is_perfect():
    protocol = _small(n_classes=1, pretrain_steps=5, min_foundation_acc=1.0)
    train = protocol_domains(protocol, 0, 'train')
    pretrain_foundation(train[:2], protocol)


def test_undertrained_foundation_is_refused():
    protocol = _small(n_classes=4, pretrain_steps=1, min_foundation_acc=0.99)
    train = protocol_domains(protocol, 0, 'train')
    with pytest.raises(FoundationError) as info:
        pretrain_foundation(train[:2], protocol)
    assert info.value.accuracy < 0.99


def test_pretraining_needs_two_domains():
    protocol = _small()
    with pytest.raises(DomainError):
        pretrain_foundation(protocol_domains(protocol, 0, 'train')[:1], protocol)


def test_pretraining_is_deterministic(small_setup):
    protocol, train, _, foundation = small_setup
    again = pretrain_foundation([train[0], train[1]], protocol)
    assert weight_hash(again) == weight_hash(foundation)


def test_no_steps_evaluates_the_foundation(small_setup):
    protocol, train, held_out, foundation = small_setup
    before = weight_hash(foundation)
    cfg = TrainConfig(kind=AdapterKind.NONE, nfeb=0, steps=0)
    report = finetune_and_eval(foundation, train[2], [held_out[3]], cfg, source_eval=held_out[2])

    logits, _ = forward(foundation, held_out[2].features)
    assert report.source_acc == float(np.mean(np.argmax(logits, axis=0) == held_out[2].labels))
    assert report.final_loss is None
    assert weight_hash(foundation) == before


def test_source_and_targets_must_be_disjoint(small_setup):
    _, train, held_out, foundation = small_setup
    with pytest.raises(DomainError):
        finetune_and_eval(foundation, train[2], [held_out[2]], TrainConfig(nfeb=0, rank=2))


def test_full_rank_soma_keeps_up_with_full_fine_tuning(small_setup):
    protocol, train, held_out, foundation = small_setup
    base = TrainConfig(nfeb=0, lr=5e-3, steps=150, batch=32, awd='constant')
    kwargs = {'source_eval': held_out[2], 'retention_sets': [held_out[0], held_out[1]]}
    soma = finetune_and_eval(foundation, train[2], [held_out[3]], replace(base, kind=AdapterKind.SOMA, rank=8), **kwargs)
    fft = finetune_and_eval(foundation, train[2], [held_out[3]], replace(base, kind=AdapterKind.NONE), **kwargs)
    assert abs(soma.source_acc - fft.source_acc) <= 0.02


def test_truncating_minor_components_costs_more_than_linearly(small_setup):
    protocol, _, held_out, foundation = small_setup
    pool = concat_datasets([held_out[0], held_out[1]])

    def neg_loss(model):
        logits, _ = forward(model, pool.features)
        return -loss_and_grad(logits, pool.labels)[0]

    ranks = (1, 2, 4, 8)
    study = truncation_study(
        foundation, lambda lin: lin.name.startswith('blocks.'),
        [ComponentRange.bottom(8, r) for r in ranks], neg_loss,
    )
    drop = {r: study.metric_before - after for r, after in zip(ranks, study.metric_after)}
    assert drop[8] > 0.0
    assert any(drop[2 * r] >= 1.5 * drop[r] for r in (1, 2, 4))


def test_method_ladder():
    methods = method_configs(TrainConfig(nfeb=2))
    assert list(methods) == ['fft', 'fft+freeze', 'soma+freeze', 'soma+freeze+awd', 'lora', 'pissa']
    assert methods['fft'].nfeb == 0 and methods['fft+freeze'].nfeb == 2
    assert methods['soma+freeze+awd'].awd == 'cosine'
    assert all(cfg.awd == 'constant' for name, cfg in methods.items() if name != 'soma+freeze+awd')


def test_smoke_comparison_fills_every_field():
    protocol = _small(pretrain_steps=50, min_foundation_acc=0.0)
    reports, summary = compare_methods(protocol, TrainConfig(rank=2, nfeb=1, steps=1, batch=16))
    assert [r.method for r in reports] == list(method_configs(TrainConfig()))
    assert [s.method for s in summary] == [r.method for r in reports]
    for report in reports:
        assert 0.0 <= report.source_acc <= 1.0
        assert 0.0 <= report.retention_acc <= 1.0
        assert list(report.target_acc) == ['3']
        assert set(report.smr_group_means) == {'blocks.1.lin1', 'blocks.1.lin2'}
        for groups in report.smr_group_means.values():
            assert len(groups) == 4
            assert all(np.isfinite(g) and g >= 0.0 for g in groups)
        assert report.final_loss is not None


def test_comparison_is_deterministic():
    protocol = _small(pretrain_steps=50, min_foundation_acc=0.0)
    cfg = TrainConfig(rank=2, nfeb=1, steps=5, batch=16)
    a, _ = compare_methods(protocol, cfg)
    b, _ = compare_methods(protocol, cfg)
    assert a == b


def test_worker_count_does_not_change_the_reports():
    protocol = _small(pretrain_steps=50, min_foundation_acc=0.0, n_seeds=2)
    methods = {'soma': TrainConfig(rank=2, nfeb=1, steps=3, batch=16)}
    serial = run_protocol(protocol, methods, workers=1)
    parallel = run_protocol(protocol, methods, workers=2)
    assert serial == parallel
    assert [r.seed for r in serial] == [0, 1]


def test_worker_failures_reach_the_caller():
    protocol = _small(pretrain_steps=1, min_foundation_acc=1.0, n_seeds=2)
    methods = {'soma': TrainConfig(rank=2, nfeb=1, steps=3, batch=16)}
    with pytest.raises(FoundationError) as info:
        run_protocol(protocol, methods, workers=2)
    assert info.value.required == 1.0
    assert info.value.accuracy < 1.0


def test_trainable_counts_are_ordered():
    base = init_block_model(64, 64, 128, 4, 16, seed=0)
    counts = [
        backbone_trainable_count(apply_freeze_policy(base, 0, cfg))
        for cfg in (
            TrainConfig(kind=AdapterKind.SOMA, rank=4, nfeb=0),
            TrainConfig(kind=AdapterKind.SOMA, rank=16, nfeb=0),
            TrainConfig(kind=AdapterKind.NONE, nfeb=0),
        )
    ]
    assert counts == [6144, 24576, 69632]


def test_frozen_blocks_survive_a_benchmark_run():
    run = run_single(BenchProtocol(), TrainConfig(nfeb=2))
    for prefix in ('embed', 'blocks.0', 'blocks.1'):
        assert weight_hash(run.model, prefix) == weight_hash(run.foundation, prefix)
    assert weight_hash(run.model, 'blocks.3') != weight_hash(run.foundation, 'blocks.3')
    assert len(run.losses) == 200


def test_sweep_labels_and_counts():
    protocol = _small(pretrain_steps=50, min_foundation_acc=0.0)
    reports, summary = sweep(protocol, TrainConfig(nfeb=1, steps=2, batch=16), 'rank', [1, 2])
    assert [s.method for s in summary] == ['rank=1', 'rank=2']
    assert all(r.kind == 'soma' for r in reports)
    assert reports[0].trainable_param_count < reports[1].trainable_param_count


def test_sweep_rejects_unknown_fields():
    with pytest.raises(ConfigError):
        sweep(_small(), TrainConfig(), 'lr', [1])


def test_parse_sweep_values():
    assert parse_sweep_values('rank', '4, 8,16') == [4, 8, 16]
    assert parse_sweep_values('adapt_targets', 'lin1,lin1+lin2') == [('lin1',), ('lin1', 'lin2')]
    for field, text in (('rank', 'a'), ('rank', ''), ('wd0', '1')):
        with pytest.raises(ConfigError):
            parse_sweep_values(field, text)


def _report(method, source, retention, top):
    return RunReport(
        method=method, kind='soma', rank=4, nfeb=2, seed=0, source_acc=source,
        target_acc={'7': source / 2}, retention_acc=retention,
        smr_group_means={'blocks.3.lin1': [top, 0.0]}, trainable_param_count=10,
    )


def test_summarize_means_and_spread():
    summary = summarize([_report('a', 0.5, 0.25, 1.0), _report('b', 1.0, 1.0, 0.0), _report('a', 1.0, 0.75, 3.0)])
    assert [s.method for s in summary] == ['a', 'b']
    a = summary[0]
    assert a.n_runs == 2
    assert a.source_acc_mean == 0.75 and a.source_acc_std == 0.25
    assert a.target_acc_mean == 0.375
    assert a.retention_acc_mean == 0.5
    assert a.top_smr_mean == 2.0 and a.top_smr_std == 1.0
    assert a.smr_group_means == [2.0, 0.0]
    assert summary[1].source_acc_std == 0.0


def test_soma_update_avoids_the_principal_directions(default_comparison):
    _, summary = default_comparison
    by_method = {s.method: s for s in summary}
    assert by_method['soma+freeze'].top_smr_mean < by_method['lora'].top_smr_mean
    assert by_method['soma+freeze+awd'].top_smr_mean < by_method['lora'].top_smr_mean


def test_soma_forgets_less_than_full_fine_tuning(default_comparison):
    reports, summary = default_comparison
    by_method = {s.method: s for s in summary}
    assert by_method['soma+freeze'].retention_acc_mean >= by_method['fft'].retention_acc_mean
    assert len(reports) == 60


def test_soma_top_group_is_lower_than_lora_seed_by_seed(default_comparison):
    reports, _ = default_comparison
    top = {(r.method, r.seed): r.top_group_smr for r in reports}
    wins = sum(top['soma+freeze', s] < top['lora', s] for s in range(10))
    assert wins >= 8
