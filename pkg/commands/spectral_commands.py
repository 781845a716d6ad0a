import fnmatch
import logging

import click

from repositories import checkpoint_repository, report_repository
from soma.diagnostics import smr_report
from soma.errors import ShapeError
from soma.linalg import as_matrix, parse_range, reconstruct, svd
from soma.model import dense_weights

logger = logging.getLogger(__name__)

spectral = click.Group('spectral')


@spectral.command('svd')
@click.option('--input', 'input_path', required=True, help='Checkpoint to read.')
@click.option('--tensor', required=True, help='Name of the 2-D tensor to decompose.')
@click.option('--output', 'output_path', required=True, help='Spectrum CSV to write (index,sigma).')
def cmd_svd(input_path, tensor, output_path):
    '''Write the singular values of one tensor.'''
    tensors = checkpoint_repository.load_checkpoint(input_path)
    w = as_matrix(checkpoint_repository.get_tensor(tensors, tensor), tensor)
    factors = svd(w)
    report_repository.write_spectrum_csv(output_path, factors.sigma)
    click.echo(f'{tensor}: {w.shape[0]}x{w.shape[1]}, sigma_max {factors.sigma[0]:.6g}, wrote {output_path}')


@spectral.command('truncate')
@click.option('--input', 'input_path', required=True, help='Checkpoint to read.')
@click.option('--output', 'output_path', required=True, help='Checkpoint to write.')
@click.option('--range', 'range_text', required=True, help='Components to remove, start:end (slice syntax).')
@click.option('--tensor', 'names', multiple=True, help='Tensor to truncate; repeatable. Defaults to every match.')
@click.option('--match', default='*.w', show_default=True, help='Pattern picking tensors when --tensor is not given.')
def cmd_truncate(input_path, output_path, range_text, names, match):
    '''Remove a range of singular components from 2-D tensors.'''
    tensors = checkpoint_repository.load_checkpoint(input_path)
    if names:
        for name in names:
            checkpoint_repository.get_tensor(tensors, name)
        selected = list(names)
    else:
        selected = [n for n, arr in tensors.items() if fnmatch.fnmatchcase(n, match) and arr.ndim == 2]
    if not selected:
        raise ShapeError(f'no 2-D tensor matches {match!r}')

    out = dict(tensors)
    for name in selected:
        w = as_matrix(tensors[name], name)
        factors = svd(w)
        rng = parse_range(range_text, factors.k)
        out[name] = w - reconstruct(factors, rng)
        logger.debug('truncated %s of %s', rng.label(), name)
    checkpoint_repository.save_checkpoint(output_path, out)
    click.echo(f'truncated {range_text} from {len(selected)} tensor(s), wrote {output_path}')


@spectral.command('smr')
@click.option('--base', 'base_path', required=True, help='Checkpoint with the pre-trained weights.')
@click.option('--input', 'tuned_path', required=True, help='Fine-tuned checkpoint (plain or adapter).')
@click.option('--output', 'output_path', required=True, help='JSON report to write.')
@click.option('--groups', default=4, show_default=True, type=int, help='Equal groups of singular indices.')
@click.option('--match', default='*', show_default=True, help='Pattern over layer names.')
def cmd_smr(base_path, tuned_path, output_path, groups, match):
    '''Singular modulation ratio of every layer the two checkpoints share.'''
    base = dense_weights(checkpoint_repository.load_checkpoint(base_path))
    tuned = dense_weights(checkpoint_repository.load_checkpoint(tuned_path))
    layers = [name for name in base if name in tuned and fnmatch.fnmatchcase(name, match)]
    if not layers:
        raise ShapeError('the checkpoints share no matching layer')

    reports = {}
    for name in layers:
        w0 = as_matrix(base[name], name)
        w1 = as_matrix(tuned[name], name)
        reports[name] = smr_report(w0, w1 - w0, groups)
    report_repository.write_smr_reports(output_path, reports)
    for name, report in reports.items():
        means = ' '.join(f'{m:.4g}' for m in report.group_means)
        click.echo(f'{name}: {means}')
