import logging
import math
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from settings import get_settings
from soma.adapter import AdapterKind, init_adapter
from soma.errors import ConfigError, DivergenceError, LabelError, NonFiniteError, RankError
from soma.linalg import Matrix, SvdFactors
from soma.model import BlockModel, backward, clone_model, forward, trainable_parameters

logger = logging.getLogger(__name__)

AWD_SCHEDULES = ('cosine', 'constant', 'off')
DECAY_REFERENCES = ('zero', 'init')
ADAPT_TARGETS = ('lin1', 'lin2')

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    '''
    One fine-tuning (or pretraining) run.

    kind            which adapter wraps the unfrozen blocks, NONE trains plain weights
    rank            adapter rank
    nfeb            number of frozen early blocks
    lr              head learning rate; backbone tensors use lr * backbone_lr_mult
    wd0             weight decay at step 0
    awd             cosine | constant | off
    decay_reference zero pulls tensors toward 0, init toward their starting values
    lora_scale      multiplier on b·a for every adapter
    train_bias      whether adapter-wrapped layers train their bias
    '''
    kind: AdapterKind = AdapterKind.SOMA
    rank: int = 4
    nfeb: int = 2
    lr: float = 1e-3
    backbone_lr_mult: float = 0.5
    wd0: float = 0.05
    awd: str = 'cosine'
    steps: int = 200
    batch: int = 64
    seed: int = 0
    adapt_targets: tuple[str, ...] = ADAPT_TARGETS
    decay_reference: str = 'zero'
    lora_scale: float = 1.0
    train_bias: bool = True

    def __post_init__(self):
        if not isinstance(self.kind, AdapterKind):
            try:
                object.__setattr__(self, 'kind', AdapterKind.parse(str(self.kind)))
            except ValueError as e:
                raise ConfigError(str(e)) from None
        object.__setattr__(self, 'adapt_targets', tuple(self.adapt_targets))
        if self.rank < 1:
            raise ConfigError(f'rank must be at least 1, got {self.rank}')
        if self.nfeb < 0:
            raise ConfigError(f'nfeb must be nonnegative, got {self.nfeb}')
        if self.steps < 0:
            raise ConfigError(f'steps must be nonnegative, got {self.steps}')
        if self.batch < 1:
            raise ConfigError(f'batch must be at least 1, got {self.batch}')
        if self.wd0 < 0:
            raise ConfigError(f'wd0 must be nonnegative, got {self.wd0}')
        if self.lr <= 0 or self.backbone_lr_mult < 0:
            raise ConfigError('lr must be positive and backbone_lr_mult nonnegative')
        if self.awd not in AWD_SCHEDULES:
            raise ConfigError(f'awd must be one of {AWD_SCHEDULES}, got {self.awd!r}')
        if self.decay_reference not in DECAY_REFERENCES:
            raise ConfigError(f'decay_reference must be one of {DECAY_REFERENCES}, got {self.decay_reference!r}')
        unknown = set(self.adapt_targets) - set(ADAPT_TARGETS)
        if unknown or not self.adapt_targets:
            raise ConfigError(f'adapt_targets must be a nonempty subset of {ADAPT_TARGETS}, got {self.adapt_targets}')


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS


def loss_and_grad(logits: Matrix, labels: np.ndarray) -> tuple[float, Matrix]:
    '''
    Mean softmax cross-entropy over the batch and its gradient
    (softmax − onehot) / batch.
    '''
    n_classes, batch = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise LabelError(f'expected {batch} labels, got shape {labels.shape}')
    if batch and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f'labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]')

    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=0, keepdims=True)
    cols = np.arange(batch)
    log_probs = shifted[labels, cols] - np.log(total[0])
    loss = float(-np.mean(log_probs))

    grad = exp / total
    grad[labels, cols] -= 1.0
    return loss, grad / batch


def awd_coefficient(t: int, T: int, wd0: float, schedule: str) -> float:
    '''
    Weight decay for step t of T.

    cosine  : wd0 * (1 + cos(pi t / T)) / 2, from wd0 down to exactly 0
    constant: wd0
    off     : 0

    Example:
        >>> awd_coefficient(50, 100, 0.1, 'cosine')
        0.05
    '''
    if not (0 <= t <= T):
        raise ValueError(f'step {t} is outside the schedule [0, {T}]')
    if schedule == 'cosine':
        return wd0 * 0.5 * (1.0 + math.cos(math.pi * t / T))
    if schedule == 'constant':
        return wd0
    if schedule == 'off':
        return 0.0
    raise ConfigError(f'unknown weight decay schedule {schedule!r}')


def _lr_for(name: str, cfg: TrainConfig) -> float:
    if name.startswith('head.'):
        return cfg.lr
    return cfg.lr * cfg.backbone_lr_mult


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: OptimizerState,
    cfg: TrainConfig,
    t: int,
    references: dict[str, np.ndarray] | None = None,
) -> None:
    '''
    One decoupled AdamW update, in place.

    Parameters:
        params: tensors to update (the model's own arrays)
        grads: same keys as params
        opt (OptimizerState): moments and step counter, updated in place
        cfg (TrainConfig): lr, backbone_lr_mult, wd0, awd, steps
        t (int): step index fed to the weight decay schedule
        references: decay targets when cfg.decay_reference is 'init'

    Nothing is touched if any gradient is non-finite.
    '''
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f'non-finite gradient for {name} at step {t}')

    wd = awd_coefficient(t, max(cfg.steps, t), cfg.wd0, cfg.awd)
    opt.step += 1
    bias1 = 1.0 - opt.beta1 ** opt.step
    bias2 = 1.0 - opt.beta2 ** opt.step

    for name, theta in params.items():
        g = grads[name]
        if name not in opt.m:
            opt.m[name] = np.zeros_like(theta)
            opt.v[name] = np.zeros_like(theta)
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)

        lr = _lr_for(name, cfg)
        step = (m / bias1) / (np.sqrt(v / bias2) + opt.eps)
        if references is not None and name in references:
            decay = wd * (theta - references[name])
        else:
            decay = wd * theta
        theta -= lr * (step + decay)


def decay_references(model: BlockModel, cfg: TrainConfig) -> dict[str, np.ndarray] | None:
    '''
    What weight decay pulls toward: nothing (zero) or each tensor's value at
    the start of training. Adapter factors use their stored b0 / a0.
    '''
    if cfg.decay_reference == 'zero':
        return None
    refs = {}
    for lin in model.layers():
        if lin.adapter is not None:
            refs[f'{lin.name}.b'] = lin.adapter.b0
            refs[f'{lin.name}.a'] = lin.adapter.a0
    for name, theta in trainable_parameters(model).items():
        refs.setdefault(name, theta.copy())
    return refs


def apply_freeze_policy(
    model: BlockModel,
    nfeb: int,
    cfg: TrainConfig | None = None,
    spectra: dict[str, SvdFactors] | None = None,
) -> BlockModel:
    '''
    Copy of the model set up for fine-tuning.

    The first nfeb blocks become frozen-plain. The embed is frozen too
    whenever nfeb >= 1 or an adapter kind is in use. Every other block has
    its adapt targets wrapped with cfg.kind (or left trainable-plain for
    AdapterKind.NONE); non-target layers stay frozen-plain. The head always
    trains.

    Parameters:
        model (BlockModel): left untouched
        nfeb (int): 0 <= nfeb <= number of blocks
        cfg (TrainConfig): kind, rank, seed, adapt_targets, lora_scale, train_bias
        spectra: precomputed svd per layer name, reused by SoMA / PiSSA init
    '''
    if not (0 <= nfeb <= len(model.blocks)):
        raise ConfigError(f'nfeb must be in [0, {len(model.blocks)}], got {nfeb}')
    kind = cfg.kind if cfg is not None else AdapterKind.NONE
    out = clone_model(model)
    spectra = spectra or {}

    out.embed.frozen = nfeb > 0 or kind is not AdapterKind.NONE
    for i, blk in enumerate(out.blocks):
        for slot in ADAPT_TARGETS:
            lin = getattr(blk, slot)
            if i < nfeb:
                lin.frozen = True
            elif kind is AdapterKind.NONE:
                lin.frozen = False
            elif slot in cfg.adapt_targets:
                try:
                    lin.adapter = init_adapter(
                        lin.w, kind, cfg.rank,
                        seed=cfg.seed * 1000 + 2 * i + ADAPT_TARGETS.index(slot),
                        scale=cfg.lora_scale,
                        factors=spectra.get(lin.name),
                    )
                except RankError as e:
                    raise RankError(f'layer {lin.name}: {e}') from None
                lin.w = None
                lin.frozen = False
                lin.train_bias = cfg.train_bias
            else:
                lin.frozen = True
    out.head.frozen = False
    return out


def _batches(n: int, batch: int, rng: np.random.Generator):
    # endless stream of index batches, reshuffled every pass over the data
    order = rng.permutation(n)
    pos = 0
    while True:
        if pos + batch > n:
            tail = order[pos:]
            order = rng.permutation(n)
            need = batch - tail.shape[0]
            if need > n:
                need = n
            head = order[:need]
            pos = need
            yield np.concatenate([tail, head])
        else:
            yield order[pos:pos + batch]
            pos += batch


def train_loop(
    model: BlockModel,
    features: Matrix,
    labels: np.ndarray,
    cfg: TrainConfig,
    progress: bool | None = None,
) -> tuple[BlockModel, list[float]]:
    '''
    Minibatch training with AdamW and the configured weight decay schedule.

    The model is trained in place and returned with the per-step loss. The
    result depends only on the model, the data and cfg (cfg.seed fixes the
    data order).
    '''
    if cfg.steps < 1:
        raise ConfigError('train_loop needs at least one step')
    n = features.shape[1]
    if n == 0:
        raise ConfigError('train_loop needs a nonempty dataset')
    if labels.shape[0] != n:
        raise LabelError(f'{n} samples but {labels.shape[0]} labels')

    settings = get_settings()
    if progress is None:
        progress = settings.progress

    params = trainable_parameters(model)
    refs = decay_references(model, cfg)
    opt = OptimizerState()
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(n, min(cfg.batch, n), rng)

    losses = []
    for t in tqdm(range(cfg.steps), desc='train', disable=not progress, leave=False):
        idx = next(batches)
        logits, cache = forward(model, features[:, idx])
        loss, g_logits = loss_and_grad(logits, labels[idx])
        if not math.isfinite(loss):
            raise DivergenceError(t, loss)
        grads = backward(model, cache, g_logits)
        adamw_step(params, grads, opt, cfg, t, refs)
        losses.append(loss)
        if settings.log_every and t % settings.log_every == 0:
            logger.debug('step %d/%d loss %.6f', t, cfg.steps, loss)
    return model, losses
