'''
Synthetic domain-generalization benchmark.

Class prototypes live in d_in-dimensional space. Every domain shows them
through its own transform (rotation inside fixed coordinate planes, a global
scale, a per-feature style offset, Gaussian noise). A foundation model is
pretrained on the first few domains, then fine-tuned on one source domain
per method and scored on the source, on held-out target domains and on the
pretraining domains it should not forget.
'''
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np
from tqdm import tqdm

from settings import get_settings
from soma.adapter import AdapterKind, delta
from soma.diagnostics import smr_report
from soma.errors import ConfigError, DomainError, FoundationError
from soma.linalg import Matrix, SvdFactors, svd
from soma.model import (
    BlockModel,
    Linear,
    accuracy,
    backbone_trainable_count,
    init_block_model,
    layer_names,
)
from soma.train import ADAPT_TARGETS, TrainConfig, apply_freeze_policy, train_loop

logger = logging.getLogger(__name__)

SPLITS = {'train': 0, 'eval': 1}
SWEEP_FIELDS = ('rank', 'nfeb', 'adapt_targets')


@dataclass(frozen=True, eq=False)
class DomainSpec:
    domain_id: int
    angle: float = 0.0
    scale: float = 1.0
    style_shift: np.ndarray | None = None
    noise: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise DomainError(f'domain {self.domain_id}: scale must be positive, got {self.scale}')
        if self.noise < 0:
            raise DomainError(f'domain {self.domain_id}: noise must be nonnegative, got {self.noise}')


@dataclass(eq=False)
class TaskDataset:
    features: Matrix
    labels: np.ndarray
    domain_ids: np.ndarray

    def __post_init__(self):
        n = self.features.shape[1]
        if self.labels.shape != (n,) or self.domain_ids.shape != (n,):
            raise DomainError(
                f'{n} samples but {self.labels.shape[0]} labels and {self.domain_ids.shape[0]} domain ids'
            )

    @property
    def size(self) -> int:
        return int(self.features.shape[1])

    def domains(self) -> set[int]:
        return {int(d) for d in np.unique(self.domain_ids)}


def concat_datasets(datasets: list[TaskDataset]) -> TaskDataset:
    return TaskDataset(
        features=np.concatenate([ds.features for ds in datasets], axis=1),
        labels=np.concatenate([ds.labels for ds in datasets]),
        domain_ids=np.concatenate([ds.domain_ids for ds in datasets]),
    )


@dataclass(frozen=True)
class BenchProtocol:
    '''
    Everything that fixes a benchmark run apart from the fine-tuning
    TrainConfig. probe_layers left empty means both linears of the last block.
    '''
    n_domains: int = 8
    n_pretrain_domains: int = 6
    source_domain: int = 6
    n_classes: int = 16
    d_in: int = 64
    d_model: int = 64
    d_hidden: int = 128
    n_blocks: int = 4
    n_per_class: int = 48
    n_eval_per_class: int = 16
    master_seed: int = 0
    proto_scale: float = 1.0
    noise: float = 0.35
    style_std: float = 0.3
    scale_jitter: float = 0.2
    max_angle: float = math.pi / 2
    pretrain_steps: int = 1500
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 128
    min_foundation_acc: float = 0.9
    n_seeds: int = 1
    n_groups: int = 4
    probe_layers: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'probe_layers', tuple(self.probe_layers))
        for name in ('n_domains', 'n_classes', 'd_in', 'd_model', 'd_hidden', 'n_per_class',
                     'n_eval_per_class', 'pretrain_steps', 'pretrain_batch', 'n_seeds', 'n_groups'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be at least 1, got {getattr(self, name)}')
        if self.n_blocks < 0:
            raise ConfigError(f'n_blocks must be nonnegative, got {self.n_blocks}')
        if not (2 <= self.n_pretrain_domains < self.n_domains):
            raise ConfigError(
                f'n_pretrain_domains must be in [2, n_domains), got {self.n_pretrain_domains} of {self.n_domains}'
            )
        if not (self.n_pretrain_domains <= self.source_domain < self.n_domains):
            raise ConfigError(
                f'source_domain must be one of the non-pretraining domains '
                f'[{self.n_pretrain_domains}, {self.n_domains}), got {self.source_domain}'
            )
        if self.noise < 0 or self.style_std < 0 or self.scale_jitter < 0 or self.proto_scale <= 0:
            raise ConfigError('noise, style_std and scale_jitter must be nonnegative, proto_scale positive')
        if not (0.0 <= self.min_foundation_acc <= 1.0):
            raise ConfigError(f'min_foundation_acc must be in [0, 1], got {self.min_foundation_acc}')
        known = set(layer_names(self.n_blocks))
        for name in self.probe_layers:
            if name not in known:
                raise ConfigError(
                    f'probe layer {name!r} is not one of embed, head, blocks.<i>.lin1|lin2 with i < {self.n_blocks}'
                )

    @property
    def pretrain_ids(self) -> list[int]:
        return list(range(self.n_pretrain_domains))

    @property
    def target_ids(self) -> list[int]:
        return [d for d in range(self.n_pretrain_domains, self.n_domains) if d != self.source_domain]

    def probes(self) -> tuple[str, ...]:
        if self.probe_layers:
            return self.probe_layers
        if self.n_blocks == 0:
            return ()
        last = self.n_blocks - 1
        return (f'blocks.{last}.lin1', f'blocks.{last}.lin2')


@dataclass
class RunReport:
    method: str
    kind: str
    rank: int
    nfeb: int
    seed: int
    source_acc: float
    target_acc: dict[str, float] = field(default_factory=dict)
    retention_acc: float = 0.0
    smr_group_means: dict[str, list[float]] = field(default_factory=dict)
    smr_excluded: dict[str, int] = field(default_factory=dict)
    trainable_param_count: int = 0
    final_loss: float | None = None
    rank_deficient_layers: list[str] = field(default_factory=list)

    @property
    def mean_target_acc(self) -> float:
        if not self.target_acc:
            return 0.0
        return statistics.fmean(self.target_acc.values())

    @property
    def top_group_smr(self) -> float:
        '''Mean of group 0 over every probed layer.'''
        if not self.smr_group_means:
            return 0.0
        return statistics.fmean(groups[0] for groups in self.smr_group_means.values())


@dataclass
class MethodSummary:
    method: str
    n_runs: int
    source_acc_mean: float
    source_acc_std: float
    target_acc_mean: float
    target_acc_std: float
    retention_acc_mean: float
    retention_acc_std: float
    top_smr_mean: float
    top_smr_std: float
    smr_group_means: list[float]
    trainable_param_count: int


def default_domain_specs(
    n_domains: int,
    d_in: int,
    master_seed: int,
    max_angle: float = math.pi / 2,
    scale_jitter: float = 0.2,
    style_std: float = 0.3,
    noise: float = 0.35,
) -> list[DomainSpec]:
    '''
    Domain i rotates by max_angle·i/(n−1), so shift strength grows with the
    domain id and domain 0 is unrotated.
    '''
    rng = np.random.default_rng([master_seed, 1])
    specs = []
    for i in range(n_domains):
        angle = max_angle * i / (n_domains - 1) if n_domains > 1 else 0.0
        specs.append(DomainSpec(
            domain_id=i,
            angle=angle,
            scale=math.exp(rng.uniform(-scale_jitter, scale_jitter)),
            style_shift=rng.normal(0.0, style_std, size=d_in),
            noise=noise,
        ))
    return specs


def _rotation_planes(d_in: int, master_seed: int) -> np.ndarray:
    # disjoint coordinate pairs, shared by every domain
    perm = np.random.default_rng([master_seed, 3]).permutation(d_in)
    return perm[:2 * (d_in // 2)].reshape(-1, 2)


def _apply_spec(x: Matrix, spec: DomainSpec, planes: np.ndarray, rng: np.random.Generator) -> Matrix:
    out = x.copy()
    if spec.angle != 0.0:
        c, s = math.cos(spec.angle), math.sin(spec.angle)
        p, q = planes[:, 0], planes[:, 1]
        xp, xq = x[p], x[q]
        out[p] = c * xp - s * xq
        out[q] = s * xp + c * xq
    out *= spec.scale
    if spec.style_shift is not None:
        out += spec.style_shift[:, None]
    if spec.noise > 0:
        out += rng.normal(0.0, spec.noise, size=out.shape)
    return out


def gen_domains(
    n_domains: int,
    n_classes: int,
    d_in: int,
    n_per_class: int,
    master_seed: int,
    specs: list[DomainSpec] | None = None,
    split: str = 'train',
    proto_scale: float = 1.0,
    **spec_kwargs,
) -> list[TaskDataset]:
    '''
    One TaskDataset per domain, labels class-major.

    Parameters:
        n_domains, n_classes, d_in, n_per_class: all at least 1
        master_seed (int): fixes prototypes, rotation planes, default specs and samples
        specs (list[DomainSpec]): override the default per-domain transforms
        split (str): 'train' or 'eval', drawn from independent streams
        spec_kwargs: max_angle, scale_jitter, style_std, noise for the default specs

    Returns:
        list[TaskDataset]
    '''
    for name, value in (('n_domains', n_domains), ('n_classes', n_classes),
                        ('d_in', d_in), ('n_per_class', n_per_class)):
        if value < 1:
            raise DomainError(f'{name} must be at least 1, got {value}')
    if split not in SPLITS:
        raise DomainError(f'split must be one of {list(SPLITS)}, got {split!r}')
    if specs is None:
        specs = default_domain_specs(n_domains, d_in, master_seed, **spec_kwargs)
    elif len(specs) != n_domains:
        raise DomainError(f'{n_domains} domains but {len(specs)} specs')
    if d_in < 2 and any(spec.angle != 0.0 for spec in specs):
        raise DomainError('rotations need at least two input features')

    prototypes = np.random.default_rng([master_seed, 0]).normal(0.0, proto_scale, size=(n_classes, d_in))
    planes = _rotation_planes(d_in, master_seed)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    clean = np.ascontiguousarray(prototypes[labels].T)

    out = []
    for spec in specs:
        rng = np.random.default_rng([master_seed, 2, spec.domain_id, SPLITS[split]])
        out.append(TaskDataset(
            features=_apply_spec(clean, spec, planes, rng),
            labels=labels.copy(),
            domain_ids=np.full(labels.shape[0], spec.domain_id),
        ))
    return out


def protocol_domains(protocol: BenchProtocol, master_seed: int, split: str) -> list[TaskDataset]:
    return gen_domains(
        protocol.n_domains,
        protocol.n_classes,
        protocol.d_in,
        protocol.n_per_class if split == 'train' else protocol.n_eval_per_class,
        master_seed,
        split=split,
        proto_scale=protocol.proto_scale,
        max_angle=protocol.max_angle,
        scale_jitter=protocol.scale_jitter,
        style_std=protocol.style_std,
        noise=protocol.noise,
    )


def evaluate(model: BlockModel, dataset: TaskDataset) -> float:
    return accuracy(model, dataset.features, dataset.labels)


def pretrain_foundation(
    domains: list[TaskDataset],
    protocol: BenchProtocol,
    seed: int = 0,
    eval_domains: list[TaskDataset] | None = None,
) -> BlockModel:
    '''
    Train a fresh model with plain weights on the union of domains.

    Raises FoundationError when the mean per-domain accuracy (on eval_domains
    if given, else on the training domains) stays below
    protocol.min_foundation_acc.
    '''
    if len(domains) < 2:
        raise DomainError(f'pretraining needs at least two domains, got {len(domains)}')
    model = init_block_model(
        protocol.d_in, protocol.d_model, protocol.d_hidden, protocol.n_blocks, protocol.n_classes, seed,
    )
    cfg = TrainConfig(
        kind=AdapterKind.NONE,
        nfeb=0,
        lr=protocol.pretrain_lr,
        backbone_lr_mult=1.0,
        wd0=0.0,
        awd='off',
        steps=protocol.pretrain_steps,
        batch=protocol.pretrain_batch,
        seed=seed,
    )
    union = concat_datasets(domains)
    train_loop(model, union.features, union.labels, cfg)

    scored = eval_domains if eval_domains is not None else domains
    acc = statistics.fmean(evaluate(model, ds) for ds in scored)
    if acc < protocol.min_foundation_acc:
        raise FoundationError(acc, protocol.min_foundation_acc)
    logger.info('foundation (seed %d) reached mean accuracy %.4f', seed, acc)
    return model


def adapted_layer_names(foundation: BlockModel, cfg: TrainConfig) -> list[str]:
    if cfg.kind is AdapterKind.NONE:
        return []
    return [
        getattr(blk, slot).name
        for blk in foundation.blocks[cfg.nfeb:]
        for slot in ADAPT_TARGETS
        if slot in cfg.adapt_targets
    ]


def finetune(
    foundation: BlockModel,
    source: TaskDataset,
    cfg: TrainConfig,
    spectra: dict[str, SvdFactors] | None = None,
) -> tuple[BlockModel, list[float]]:
    '''
    Wrap a copy of the foundation per cfg and train it on the source domain.
    steps = 0 returns the untouched copy and an empty loss trace.
    '''
    model = apply_freeze_policy(foundation, cfg.nfeb, cfg, spectra)
    if cfg.steps == 0:
        return model, []
    return train_loop(model, source.features, source.labels, cfg)


def _layer_delta(tuned: Linear, base: Linear) -> Matrix:
    if tuned.adapter is not None:
        return delta(tuned.adapter)
    return tuned.dense() - base.dense()


def _check_disjoint(source: TaskDataset, targets: list[TaskDataset]):
    source_domains = source.domains()
    for ds in targets:
        overlap = source_domains & ds.domains()
        if overlap:
            raise DomainError(f'domains {sorted(overlap)} appear in both source and target sets')


def _fill_spectra(foundation: BlockModel, names, spectra: dict[str, SvdFactors]) -> dict[str, SvdFactors]:
    for name in names:
        if name not in spectra:
            spectra[name] = svd(foundation.layer(name).dense())
    return spectra


def score_run(
    foundation: BlockModel,
    model: BlockModel,
    losses: list[float],
    cfg: TrainConfig,
    source_eval: TaskDataset,
    targets: list[TaskDataset],
    retention_sets: list[TaskDataset] = (),
    spectra: dict[str, SvdFactors] | None = None,
    probe_layers: tuple[str, ...] = (),
    n_groups: int = 4,
    method: str | None = None,
) -> RunReport:
    '''
    Score a fine-tuned model against the foundation it came from.
    '''
    spectra = _fill_spectra(foundation, probe_layers, {} if spectra is None else spectra)
    report = RunReport(
        method=method or cfg.kind.value,
        kind=cfg.kind.value,
        rank=cfg.rank,
        nfeb=cfg.nfeb,
        seed=cfg.seed,
        source_acc=evaluate(model, source_eval),
        trainable_param_count=backbone_trainable_count(model),
        final_loss=losses[-1] if losses else None,
    )
    for ds in targets:
        for domain_id in sorted(ds.domains()):
            mask = ds.domain_ids == domain_id
            report.target_acc[str(domain_id)] = accuracy(model, ds.features[:, mask], ds.labels[mask])
    if retention_sets:
        report.retention_acc = evaluate(model, concat_datasets(list(retention_sets)))

    for name in probe_layers:
        tuned, base = model.layer(name), foundation.layer(name)
        smr = smr_report(base.dense(), _layer_delta(tuned, base), n_groups, spectra[name])
        report.smr_group_means[name] = smr.group_means
        report.smr_excluded[name] = smr.excluded
    report.rank_deficient_layers = [
        lin.name for lin in model.layers() if lin.adapter is not None and lin.adapter.dead_directions
    ]
    return report


def finetune_and_eval(
    foundation: BlockModel,
    source: TaskDataset,
    targets: list[TaskDataset],
    cfg: TrainConfig,
    retention_sets: list[TaskDataset] = (),
    source_eval: TaskDataset | None = None,
    spectra: dict[str, SvdFactors] | None = None,
    probe_layers: tuple[str, ...] = (),
    n_groups: int = 4,
    method: str | None = None,
) -> RunReport:
    '''
    Fine-tune a copy of the foundation on source and score it.

    Parameters:
        foundation (BlockModel): never modified
        source (TaskDataset): training data
        targets (list[TaskDataset]): held-out domains, disjoint from source
        cfg (TrainConfig): the method
        retention_sets: pretraining-domain eval sets never seen here
        source_eval: held-out source samples; the training set is scored if missing
        spectra: svd per foundation layer, filled in on demand
        probe_layers: layers whose update gets an SMR report
        n_groups: SMR groups per probed layer

    Returns:
        RunReport
    '''
    _check_disjoint(source, targets)
    spectra = _fill_spectra(foundation, adapted_layer_names(foundation, cfg), {} if spectra is None else spectra)
    model, losses = finetune(foundation, source, cfg, spectra)
    return score_run(
        foundation, model, losses, cfg,
        source_eval if source_eval is not None else source,
        targets, retention_sets, spectra, probe_layers, n_groups, method,
    )


@dataclass(eq=False)
class SingleRun:
    foundation: BlockModel
    model: BlockModel
    losses: list[float]
    report: RunReport


def run_single(protocol: BenchProtocol, cfg: TrainConfig) -> SingleRun:
    '''
    One fine-tuning run on the protocol's first seed, keeping the models
    around so they can be saved.
    '''
    master = protocol.master_seed
    train = protocol_domains(protocol, master, 'train')
    held_out = protocol_domains(protocol, master, 'eval')
    pretrain_ids = protocol.pretrain_ids
    foundation = pretrain_foundation(
        [train[d] for d in pretrain_ids], protocol, seed=master, eval_domains=[held_out[d] for d in pretrain_ids],
    )
    spectra = _fill_spectra(foundation, adapted_layer_names(foundation, cfg), {})
    model, losses = finetune(foundation, train[protocol.source_domain], cfg, spectra)
    report = score_run(
        foundation, model, losses, cfg,
        held_out[protocol.source_domain],
        [held_out[d] for d in protocol.target_ids],
        [held_out[d] for d in pretrain_ids],
        spectra, protocol.probes(), protocol.n_groups,
    )
    return SingleRun(foundation=foundation, model=model, losses=losses, report=report)


def method_configs(base: TrainConfig) -> dict[str, TrainConfig]:
    '''
    The ablation ladder (full fine-tuning, + freeze, + minor components,
    + annealing decay) plus the LoRA and PiSSA controls. Every rung except
    the last uses constant weight decay.
    '''
    return {
        'fft': replace(base, kind=AdapterKind.NONE, nfeb=0, awd='constant'),
        'fft+freeze': replace(base, kind=AdapterKind.NONE, awd='constant'),
        'soma+freeze': replace(base, kind=AdapterKind.SOMA, awd='constant'),
        'soma+freeze+awd': replace(base, kind=AdapterKind.SOMA, awd='cosine'),
        'lora': replace(base, kind=AdapterKind.LORA, awd='constant'),
        'pissa': replace(base, kind=AdapterKind.PISSA, awd='constant'),
    }


def _run_seed(protocol: BenchProtocol, methods: dict[str, TrainConfig], s: int) -> list[RunReport]:
    master = protocol.master_seed + s
    train = protocol_domains(protocol, master, 'train')
    held_out = protocol_domains(protocol, master, 'eval')

    pretrain_ids = protocol.pretrain_ids
    foundation = pretrain_foundation(
        [train[d] for d in pretrain_ids], protocol, seed=master, eval_domains=[held_out[d] for d in pretrain_ids],
    )
    spectra: dict[str, SvdFactors] = {}
    reports = []
    for label, cfg in methods.items():
        cfg = replace(cfg, seed=cfg.seed + s)
        report = finetune_and_eval(
            foundation,
            train[protocol.source_domain],
            [held_out[d] for d in protocol.target_ids],
            cfg,
            retention_sets=[held_out[d] for d in pretrain_ids],
            source_eval=held_out[protocol.source_domain],
            spectra=spectra,
            probe_layers=protocol.probes(),
            n_groups=protocol.n_groups,
            method=label,
        )
        logger.info(
            'seed %d %s: source %.4f target %.4f retention %.4f top smr %.4g',
            s, label, report.source_acc, report.mean_target_acc, report.retention_acc, report.top_group_smr,
        )
        reports.append(report)
    return reports


def run_protocol(
    protocol: BenchProtocol,
    methods: dict[str, TrainConfig],
    workers: int | None = None,
    progress: bool | None = None,
) -> list[RunReport]:
    '''
    Every method for every seed. With more than one worker the seeds run in
    separate processes. Reports come back seed-major in method order
    regardless of the worker count.
    '''
    settings = get_settings()
    workers = workers or settings.workers
    if progress is None:
        progress = settings.progress
    seeds = range(protocol.n_seeds)

    run_seed = partial(_run_seed, protocol, methods)
    if workers <= 1 or protocol.n_seeds == 1:
        per_seed = [run_seed(s) for s in tqdm(seeds, desc='seeds', disable=not progress)]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, protocol.n_seeds)) as executor:
            per_seed = list(tqdm(
                executor.map(run_seed, seeds),
                total=protocol.n_seeds,
                desc='seeds',
                disable=not progress,
            ))
    return [report for reports in per_seed for report in reports]


def _std(values: list[float]) -> float:
    return statistics.pstdev(values) if len(values) > 1 else 0.0


def summarize(reports: list[RunReport]) -> list[MethodSummary]:
    '''
    Mean and standard deviation per method, in first-seen method order.
    '''
    by_method: dict[str, list[RunReport]] = {}
    for report in reports:
        by_method.setdefault(report.method, []).append(report)

    out = []
    for method, runs in by_method.items():
        source = [r.source_acc for r in runs]
        target = [r.mean_target_acc for r in runs]
        retention = [r.retention_acc for r in runs]
        top = [r.top_group_smr for r in runs]
        groups = [g for r in runs for g in r.smr_group_means.values()]
        group_means = [statistics.fmean(col) for col in zip(*groups)] if groups else []
        out.append(MethodSummary(
            method=method,
            n_runs=len(runs),
            source_acc_mean=statistics.fmean(source),
            source_acc_std=_std(source),
            target_acc_mean=statistics.fmean(target),
            target_acc_std=_std(target),
            retention_acc_mean=statistics.fmean(retention),
            retention_acc_std=_std(retention),
            top_smr_mean=statistics.fmean(top),
            top_smr_std=_std(top),
            smr_group_means=group_means,
            trainable_param_count=runs[0].trainable_param_count,
        ))
    return out


def compare_methods(
    protocol: BenchProtocol,
    base_cfg: TrainConfig | None = None,
    workers: int | None = None,
    progress: bool | None = None,
) -> tuple[list[RunReport], list[MethodSummary]]:
    methods = method_configs(base_cfg or TrainConfig())
    reports = run_protocol(protocol, methods, workers, progress)
    return reports, summarize(reports)


def parse_sweep_values(field_name: str, text: str) -> list:
    '''
    Comma-separated sweep values. adapt_targets values join targets with '+'.

    Example:
        >>> parse_sweep_values('adapt_targets', 'lin1,lin1+lin2')
        [('lin1',), ('lin1', 'lin2')]
    '''
    if field_name not in SWEEP_FIELDS:
        raise ConfigError(f'cannot sweep {field_name!r}, expected one of {SWEEP_FIELDS}')
    items = [item.strip() for item in text.split(',') if item.strip()]
    if not items:
        raise ConfigError('sweep needs at least one value')
    if field_name == 'adapt_targets':
        return [tuple(t.strip() for t in item.split('+')) for item in items]
    try:
        return [int(item) for item in items]
    except ValueError:
        raise ConfigError(f'{field_name} values must be integers, got {text!r}') from None


def _sweep_label(field_name: str, value) -> str:
    if isinstance(value, tuple):
        value = '+'.join(value)
    return f'{field_name}={value}'


def sweep(
    protocol: BenchProtocol,
    base_cfg: TrainConfig,
    field_name: str,
    values: list,
    workers: int | None = None,
    progress: bool | None = None,
) -> tuple[list[RunReport], list[MethodSummary]]:
    '''
    Ablate one setting of SoMA + freeze + annealing decay, everything else fixed.
    '''
    if field_name not in SWEEP_FIELDS:
        raise ConfigError(f'cannot sweep {field_name!r}, expected one of {SWEEP_FIELDS}')
    base = replace(base_cfg, kind=AdapterKind.SOMA, awd='cosine')
    methods = {_sweep_label(field_name, v): replace(base, **{field_name: v}) for v in values}
    reports = run_protocol(protocol, methods, workers, progress)
    return reports, summarize(reports)


def linear_probe_accuracy(
    train: TaskDataset,
    evals: list[TaskDataset],
    n_classes: int | None = None,
    steps: int = 300,
    lr: float = 1e-2,
    seed: int = 0,
) -> list[float]:
    '''
    Softmax-regression probe fit on train, scored on each eval set.
    '''
    d_in = train.features.shape[0]
    n_classes = n_classes or int(train.labels.max()) + 1
    probe = BlockModel(
        embed=Linear(name='embed', w=np.eye(d_in), bias=np.zeros(d_in), frozen=True),
        blocks=[],
        head=Linear(name='head', w=np.zeros((n_classes, d_in)), bias=np.zeros(n_classes)),
    )
    cfg = TrainConfig(
        kind=AdapterKind.NONE, nfeb=0, lr=lr, backbone_lr_mult=1.0, wd0=0.0, awd='off',
        steps=steps, batch=128, seed=seed,
    )
    train_loop(probe, train.features, train.labels, cfg)
    return [evaluate(probe, ds) for ds in evals]
