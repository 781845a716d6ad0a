'''
The toy foundation model: a linear embed, a stack of residual MLP blocks
and a linear classifier head, plus hand-written reverse-mode gradients.

Activations are column-major in the batch sense: x is features x batch.
'''
import copy
import hashlib
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from soma.adapter import AdapterKind, LinearAdapter, adapter_forward, merge
from soma.errors import CacheMismatchError, CheckpointError, LayerError, ShapeError
from soma.linalg import Matrix

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(z: Matrix) -> Matrix:
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + _GELU_K * z ** 3)))


def gelu_grad(z: Matrix) -> Matrix:
    t = np.tanh(_GELU_C * (z + _GELU_K * z ** 3))
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * z * z)


@dataclass(eq=False)
class Linear:
    '''
    One linear layer. Exactly one of w / adapter is set:
        frozen-plain     w set, frozen True
        trainable-plain  w set, frozen False
        adapter-wrapped  adapter set (b and a train, w_res never does)
    '''
    name: str
    bias: np.ndarray
    w: Matrix | None = None
    adapter: LinearAdapter | None = None
    frozen: bool = False
    train_bias: bool = True

    def __post_init__(self):
        if (self.w is None) == (self.adapter is None):
            raise ValueError(f'layer {self.name} needs exactly one of a plain weight or an adapter')

    @property
    def mode(self) -> str:
        if self.adapter is not None:
            return 'adapter'
        return 'frozen' if self.frozen else 'trainable'

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.shape if self.w is not None else self.adapter.shape

    def dense(self) -> Matrix:
        if self.adapter is not None:
            return merge(self.adapter).w
        return self.w

    def forward(self, x: Matrix) -> Matrix:
        if self.adapter is not None:
            y = adapter_forward(self.adapter, x)
        else:
            if x.shape[0] != self.w.shape[1]:
                raise ShapeError(f'layer {self.name} expects {self.w.shape[1]} input rows, got shape {x.shape}')
            y = self.w @ x
        return y + self.bias[:, None]


@dataclass(eq=False)
class Block:
    name: str
    lin1: Linear
    lin2: Linear


@dataclass(eq=False)
class BlockModel:
    embed: Linear
    blocks: list[Block]
    head: Linear

    def layers(self) -> list[Linear]:
        out = [self.embed]
        for blk in self.blocks:
            out.extend((blk.lin1, blk.lin2))
        out.append(self.head)
        return out

    def layer(self, name: str) -> Linear:
        for lin in self.layers():
            if lin.name == name:
                return lin
        raise LayerError(f'no layer named {name!r}')

    @property
    def d_in(self) -> int:
        return self.embed.shape[1]

    @property
    def n_classes(self) -> int:
        return self.head.shape[0]


@dataclass(eq=False)
class ForwardCache:
    layer_names: tuple[str, ...]
    batch: int
    inputs: dict[str, Matrix] = field(default_factory=dict)
    pre_activations: dict[str, Matrix] = field(default_factory=dict)


def layer_names(n_blocks: int) -> list[str]:
    # forward order, same names init_block_model gives
    names = ['embed']
    for i in range(n_blocks):
        names.extend((f'blocks.{i}.lin1', f'blocks.{i}.lin2'))
    names.append('head')
    return names


def init_block_model(
    d_in: int,
    d_model: int,
    d_hidden: int,
    n_blocks: int,
    n_classes: int,
    seed: int,
) -> BlockModel:
    '''
    Fresh model with every layer trainable-plain and zero biases.
    lin2 starts at half the usual scale so the residual stream stays tame.
    '''
    rng = np.random.default_rng(seed)

    def plain(name, m, n, gain=1.0):
        return Linear(name=name, w=rng.normal(0.0, gain / math.sqrt(n), size=(m, n)), bias=np.zeros(m))

    embed = plain('embed', d_model, d_in)
    blocks = []
    for i in range(n_blocks):
        blocks.append(Block(
            name=f'blocks.{i}',
            lin1=plain(f'blocks.{i}.lin1', d_hidden, d_model),
            lin2=plain(f'blocks.{i}.lin2', d_model, d_hidden, gain=0.5),
        ))
    head = plain('head', n_classes, d_model)
    return BlockModel(embed=embed, blocks=blocks, head=head)


def clone_model(model: BlockModel) -> BlockModel:
    return copy.deepcopy(model)


def forward(model: BlockModel, x: Matrix) -> tuple[Matrix, ForwardCache]:
    '''
    Logits (n_classes x batch) plus everything backward needs.
    '''
    if x.ndim != 2 or x.shape[0] != model.d_in:
        raise ShapeError(f'model expects input with {model.d_in} rows, got shape {x.shape}')
    cache = ForwardCache(layer_names=tuple(lin.name for lin in model.layers()), batch=x.shape[1])

    cache.inputs[model.embed.name] = x
    h = model.embed.forward(x)
    for blk in model.blocks:
        cache.inputs[blk.lin1.name] = h
        z = blk.lin1.forward(h)
        cache.pre_activations[blk.name] = z
        act = gelu(z)
        cache.inputs[blk.lin2.name] = act
        h = h + blk.lin2.forward(act)
    cache.inputs[model.head.name] = h
    return model.head.forward(h), cache


def parameter_names(model: BlockModel) -> list[str]:
    names = []
    for lin in model.layers():
        if lin.adapter is not None:
            names.extend((f'{lin.name}.b', f'{lin.name}.a'))
            if lin.train_bias:
                names.append(f'{lin.name}.bias')
        elif not lin.frozen:
            names.extend((f'{lin.name}.w', f'{lin.name}.bias'))
    return names


def trainable_parameters(model: BlockModel) -> dict[str, np.ndarray]:
    '''
    Every trainable tensor by name. The arrays are the model's own, so
    updating them in place updates the model.
    '''
    params = {}
    for lin in model.layers():
        if lin.adapter is not None:
            params[f'{lin.name}.b'] = lin.adapter.b
            params[f'{lin.name}.a'] = lin.adapter.a
            if lin.train_bias:
                params[f'{lin.name}.bias'] = lin.bias
        elif not lin.frozen:
            params[f'{lin.name}.w'] = lin.w
            params[f'{lin.name}.bias'] = lin.bias
    return params


def _linear_backward(lin: Linear, x: Matrix, g: Matrix, grads: dict, need_input_grad: bool = True) -> Matrix | None:
    if lin.adapter is not None:
        ad = lin.adapter
        # dL/dB = G X^T A^T and dL/dA = B^T G X^T
        grads[f'{lin.name}.b'] = ad.scale * (g @ (ad.a @ x).T)
        grads[f'{lin.name}.a'] = ad.scale * ((ad.b.T @ g) @ x.T)
        if lin.train_bias:
            grads[f'{lin.name}.bias'] = g.sum(axis=1)
        if need_input_grad:
            return ad.w_res.T @ g + ad.scale * (ad.a.T @ (ad.b.T @ g))
        return None

    if not lin.frozen:
        grads[f'{lin.name}.w'] = g @ x.T
        grads[f'{lin.name}.bias'] = g.sum(axis=1)
    if need_input_grad:
        return lin.w.T @ g
    return None


def backward(model: BlockModel, cache: ForwardCache, g_logits: Matrix) -> dict[str, np.ndarray]:
    '''
    Gradients of the loss for every trainable tensor, keyed like
    trainable_parameters. Frozen tensors get no entry.
    '''
    names = tuple(lin.name for lin in model.layers())
    if names != cache.layer_names:
        raise CacheMismatchError('forward cache was produced by a model with different layers')
    if g_logits.shape != (model.n_classes, cache.batch):
        raise CacheMismatchError(
            f'gradient shape {g_logits.shape} does not match cached logits ({model.n_classes}, {cache.batch})'
        )

    grads: dict[str, np.ndarray] = {}
    g = _linear_backward(model.head, cache.inputs[model.head.name], g_logits, grads)
    for blk in reversed(model.blocks):
        g_act = _linear_backward(blk.lin2, cache.inputs[blk.lin2.name], g, grads)
        g_z = g_act * gelu_grad(cache.pre_activations[blk.name])
        g = g + _linear_backward(blk.lin1, cache.inputs[blk.lin1.name], g_z, grads)
    _linear_backward(model.embed, cache.inputs[model.embed.name], g, grads, need_input_grad=False)

    return {name: grads[name] for name in parameter_names(model)}


def predict(model: BlockModel, x: Matrix) -> np.ndarray:
    logits, _ = forward(model, x)
    return np.argmax(logits, axis=0)


def accuracy(model: BlockModel, x: Matrix, labels: np.ndarray) -> float:
    if labels.shape[0] == 0:
        return 0.0
    return float(np.mean(predict(model, x) == labels))


def merge_model(model: BlockModel) -> BlockModel:
    '''
    Copy of the model with every adapter folded back into a trainable-plain
    weight, w = w_res + b·a.
    '''
    merged = clone_model(model)
    for lin in merged.layers():
        if lin.adapter is not None:
            lin.w = merge(lin.adapter).w
            lin.adapter = None
            lin.frozen = False
    return merged


def backbone_trainable_count(model: BlockModel) -> int:
    '''
    Trainable backbone weights: r(m + n) per adapter, m·n per trainable-plain
    layer. Head and biases are left out.
    '''
    total = 0
    for lin in model.layers():
        if lin is model.head:
            continue
        m, n = lin.shape
        if lin.adapter is not None:
            total += lin.adapter.rank * (m + n)
        elif not lin.frozen:
            total += m * n
    return total


def model_tensors(model: BlockModel) -> dict[str, np.ndarray]:
    tensors = {}
    for lin in model.layers():
        if lin.adapter is not None:
            ad = lin.adapter
            tensors[f'{lin.name}.w_res'] = ad.w_res
            tensors[f'{lin.name}.b'] = ad.b
            tensors[f'{lin.name}.a'] = ad.a
            tensors[f'{lin.name}.b0'] = ad.b0
            tensors[f'{lin.name}.a0'] = ad.a0
            if ad.scale != 1.0:
                tensors[f'{lin.name}.scale'] = np.array([ad.scale])
        else:
            tensors[f'{lin.name}.w'] = lin.w
        tensors[f'{lin.name}.bias'] = lin.bias
    return tensors


def weight_hash(model: BlockModel, prefix: str | None = None) -> str:
    '''
    sha256 over every tensor whose name sits under prefix (all of them if
    prefix is None). Used to prove frozen layers never moved.
    '''
    digest = hashlib.sha256()
    for name, arr in model_tensors(model).items():
        if prefix is not None and not (name == prefix or name.startswith(prefix + '.')):
            continue
        digest.update(name.encode('utf-8'))
        digest.update(np.ascontiguousarray(arr, dtype='<f8').tobytes())
    return digest.hexdigest()


def dense_weights(tensors: Mapping[str, np.ndarray]) -> dict[str, Matrix]:
    '''
    Dense weight per layer prefix from a flat tensor table. Plain layers
    come from `<prefix>.w`, adapter layers are merged from
    `<prefix>.w_res/.b/.a` (and `.scale` when present).
    '''
    out = {}
    for name, arr in tensors.items():
        if name.endswith('.w'):
            out[name[:-2]] = arr
        elif name.endswith('.w_res'):
            prefix = name[:-len('.w_res')]
            try:
                b = tensors[f'{prefix}.b']
                a = tensors[f'{prefix}.a']
            except KeyError as e:
                raise CheckpointError(f'adapter layer {prefix} is missing tensor {e.args[0]}') from None
            scale = float(tensors[f'{prefix}.scale'][0]) if f'{prefix}.scale' in tensors else 1.0
            out[prefix] = arr + scale * (b @ a)
    return out


def model_from_tensors(tensors: Mapping[str, np.ndarray], kind: AdapterKind = AdapterKind.SOMA) -> BlockModel:
    '''
    Rebuild a BlockModel from model_tensors output. Plain layers come back
    trainable-plain; adapter layers come back wrapped, tagged with kind
    (the file format does not record it).
    '''
    def build(name):
        bias = tensors.get(f'{name}.bias')
        if bias is None:
            raise CheckpointError(f'layer {name} has no bias tensor')
        if f'{name}.w' in tensors:
            return Linear(name=name, w=np.array(tensors[f'{name}.w']), bias=np.array(bias))
        if f'{name}.w_res' not in tensors:
            raise CheckpointError(f'layer {name} has neither a plain weight nor adapter tensors')
        try:
            b, a = np.array(tensors[f'{name}.b']), np.array(tensors[f'{name}.a'])
            b0, a0 = np.array(tensors[f'{name}.b0']), np.array(tensors[f'{name}.a0'])
        except KeyError as e:
            raise CheckpointError(f'adapter layer {name} is missing tensor {e.args[0]}') from None
        scale = float(tensors[f'{name}.scale'][0]) if f'{name}.scale' in tensors else 1.0
        ad = LinearAdapter(
            w_res=np.array(tensors[f'{name}.w_res']), b=b, a=a, b0=b0, a0=a0,
            rank=b.shape[1], kind=kind, scale=scale,
        )
        return Linear(name=name, adapter=ad, bias=np.array(bias))

    n_blocks = 0
    while f'blocks.{n_blocks}.lin1.bias' in tensors:
        n_blocks += 1
    blocks = [
        Block(name=f'blocks.{i}', lin1=build(f'blocks.{i}.lin1'), lin2=build(f'blocks.{i}.lin2'))
        for i in range(n_blocks)
    ]
    return BlockModel(embed=build('embed'), blocks=blocks, head=build('head'))
