import fnmatch

import click
import numpy as np

from repositories import checkpoint_repository
from soma.adapter import AdapterKind, init_adapter
from soma.errors import RankError, ShapeError
from soma.linalg import as_matrix
from soma.model import dense_weights

adapter = click.Group('adapter')

ADAPTER_SUFFIXES = ('.w_res', '.b', '.a', '.b0', '.a0', '.scale')


def _layer_prefix(name: str) -> str:
    # merge writes the weight back as <prefix>.w, so nothing else can be adapted
    if not name.endswith('.w') or name == '.w':
        raise ShapeError(f'tensor {name!r} matches but is not a <layer>.w weight')
    return name[:-2]


@adapter.command('init')
@click.option('--input', 'input_path', required=True, help='Plain checkpoint to adapt.')
@click.option('--output', 'output_path', required=True, help='Adapter checkpoint to write.')
@click.option('--kind', type=click.Choice(['soma', 'pissa', 'lora']), default='soma', show_default=True)
@click.option('--rank', required=True, type=int, help='Adapter rank for every matched layer.')
@click.option('--seed', default=0, show_default=True, type=int, help='Seed for LoRA factors.')
@click.option('--scale', default=1.0, show_default=True, type=float, help='Multiplier on b·a.')
@click.option('--match', default='*.w', show_default=True, help='Pattern picking the weights to adapt.')
def cmd_init(input_path, output_path, kind, rank, seed, scale, match):
    '''
    Replace every matched weight `<prefix>.w` with `<prefix>.w_res`, `.b`,
    `.a`, `.b0` and `.a0`. Other tensors are copied as they are.
    '''
    kind = AdapterKind.parse(kind)
    tensors = checkpoint_repository.load_checkpoint(input_path)
    targets = [n for n, arr in tensors.items() if fnmatch.fnmatchcase(n, match) and arr.ndim == 2]
    if not targets:
        raise ShapeError(f'no 2-D tensor matches {match!r}')
    prefixes = {name: _layer_prefix(name) for name in targets}

    out = {}
    adapted = 0
    for name, arr in tensors.items():
        if name not in targets:
            out[name] = arr
            continue
        prefix = prefixes[name]
        try:
            ad = init_adapter(as_matrix(arr, name), kind, rank, seed=seed + adapted, scale=scale)
        except RankError as e:
            raise RankError(f'layer {prefix}: {e}') from None
        out[f'{prefix}.w_res'] = ad.w_res
        out[f'{prefix}.b'] = ad.b
        out[f'{prefix}.a'] = ad.a
        out[f'{prefix}.b0'] = ad.b0
        out[f'{prefix}.a0'] = ad.a0
        if scale != 1.0:
            out[f'{prefix}.scale'] = np.array([scale])
        adapted += 1
    checkpoint_repository.save_checkpoint(output_path, out)
    click.echo(f'{kind.value} rank {rank} on {adapted} layer(s), wrote {output_path}')


@adapter.command('merge')
@click.option('--input', 'input_path', required=True, help='Adapter checkpoint.')
@click.option('--output', 'output_path', required=True, help='Plain checkpoint to write.')
def cmd_merge(input_path, output_path):
    '''Fold every adapter back into a plain `<prefix>.w = w_res + scale·b·a`.'''
    tensors = checkpoint_repository.load_checkpoint(input_path)
    prefixes = {name[:-len('.w_res')] for name in tensors if name.endswith('.w_res')}
    dense = dense_weights(tensors)

    out = {}
    for name, arr in tensors.items():
        if name.endswith('.w_res'):
            prefix = name[:-len('.w_res')]
            out[f'{prefix}.w'] = dense[prefix]
            continue
        if any(name == prefix + suffix for prefix in prefixes for suffix in ADAPTER_SUFFIXES):
            continue
        out[name] = arr
    checkpoint_repository.save_checkpoint(output_path, out)
    click.echo(f'merged {len(prefixes)} adapter layer(s), wrote {output_path}')
