import logging
import os

import click

from repositories import checkpoint_repository, config_repository, report_repository
from soma import bench
from soma.model import merge_model, model_tensors

logger = logging.getLogger(__name__)

run = click.Group('run')

CONFIG_COPY = 'config.txt'


def _load(config_path: str | None) -> config_repository.RunConfig:
    if config_path is None:
        return config_repository.RunConfig()
    return config_repository.load_config(config_path)


def _echo_summary(summary: list[bench.MethodSummary]):
    click.echo(f'{"method":<20} {"source":>8} {"target":>8} {"retain":>8} {"top smr":>10} {"params":>10}')
    for s in summary:
        click.echo(
            f'{s.method:<20} {s.source_acc_mean:>8.4f} {s.target_acc_mean:>8.4f} '
            f'{s.retention_acc_mean:>8.4f} {s.top_smr_mean:>10.4g} {s.trainable_param_count:>10d}'
        )


@run.command('train')
@click.option('--config', 'config_path', help='Run configuration; defaults apply without one.')
@click.option('--output', 'out_dir', required=True, help='Directory for every artifact of the run.')
def cmd_train(config_path, out_dir):
    '''
    Pretrain the foundation, fine-tune it once and write foundation.ckpt,
    model.ckpt, merged.ckpt, losses.csv, the report files and the config.
    '''
    config = _load(config_path)
    result = bench.run_single(config.protocol, config.train)

    checkpoint_repository.save_checkpoint(os.path.join(out_dir, 'foundation.ckpt'), model_tensors(result.foundation))
    checkpoint_repository.save_checkpoint(os.path.join(out_dir, 'model.ckpt'), model_tensors(result.model))
    checkpoint_repository.save_checkpoint(
        os.path.join(out_dir, 'merged.ckpt'), model_tensors(merge_model(result.model)),
    )
    report_repository.write_loss_csv(os.path.join(out_dir, 'losses.csv'), result.losses)
    summary = bench.summarize([result.report])
    report_repository.write_run_outputs(out_dir, [result.report], summary)
    config_repository.save_config(os.path.join(out_dir, CONFIG_COPY), config)

    r = result.report
    click.echo(
        f'{r.method}: source {r.source_acc:.4f} target {r.mean_target_acc:.4f} '
        f'retention {r.retention_acc:.4f}, wrote {out_dir}'
    )


@run.command('bench')
@click.option('--config', 'config_path', help='Run configuration; defaults apply without one.')
@click.option('--output', 'out_dir', required=True, help='Directory for the reports.')
def cmd_bench(config_path, out_dir):
    '''Run the six-method comparison for every seed of the protocol.'''
    config = _load(config_path)
    reports, summary = bench.compare_methods(config.protocol, config.train)
    report_repository.write_run_outputs(out_dir, reports, summary)
    config_repository.save_config(os.path.join(out_dir, CONFIG_COPY), config)
    _echo_summary(summary)


@run.command('sweep')
@click.option('--config', 'config_path', help='Run configuration; defaults apply without one.')
@click.option('--output', 'out_dir', required=True, help='Directory for the reports.')
@click.option('--field', 'field_name', required=True, type=click.Choice(bench.SWEEP_FIELDS))
@click.option('--values', 'values_text', required=True, help='Comma-separated values, e.g. 4,8,16 or lin1,lin1+lin2.')
def cmd_sweep(config_path, out_dir, field_name, values_text):
    '''Ablate one setting of SoMA with freezing and annealing weight decay.'''
    config = _load(config_path)
    values = bench.parse_sweep_values(field_name, values_text)
    reports, summary = bench.sweep(config.protocol, config.train, field_name, values)
    report_repository.write_run_outputs(out_dir, reports, summary)
    config_repository.save_config(os.path.join(out_dir, CONFIG_COPY), config)
    _echo_summary(summary)
