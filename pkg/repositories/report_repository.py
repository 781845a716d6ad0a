'''
Everything a run writes for people and scripts to read: run reports as JSON
plus a flat CSV, the per-method summary, spectra and loss traces.
'''
import csv
import io
import json
import os
from dataclasses import asdict
from typing import Any, Iterable

from repositories.storage import write_text
from soma.bench import MethodSummary, RunReport
from soma.diagnostics import SmrReport
from soma.errors import DataError

REPORTS_JSON = 'reports.json'
REPORTS_CSV = 'reports.csv'
SUMMARY_JSON = 'summary.json'
SUMMARY_CSV = 'summary.csv'


def _json(data: Any) -> str:
    return json.dumps(data, indent=2, allow_nan=False) + '\n'


def flatten_report(report: RunReport) -> dict[str, Any]:
    '''
    One CSV row for a report. Nested fields get dotted keys, e.g.
    `target_acc.7` or `smr_group_means.blocks.3.lin1.0`.
    '''
    row: dict[str, Any] = {
        'method': report.method,
        'kind': report.kind,
        'rank': report.rank,
        'nfeb': report.nfeb,
        'seed': report.seed,
        'source_acc': report.source_acc,
        'retention_acc': report.retention_acc,
        'trainable_param_count': report.trainable_param_count,
        'final_loss': report.final_loss,
    }
    for domain, acc in report.target_acc.items():
        row[f'target_acc.{domain}'] = acc
    for layer, means in report.smr_group_means.items():
        for g, value in enumerate(means):
            row[f'smr_group_means.{layer}.{g}'] = value
    for layer, excluded in report.smr_excluded.items():
        row[f'smr_excluded.{layer}'] = excluded
    row['rank_deficient_layers'] = ';'.join(report.rank_deficient_layers)
    return row


def _csv(rows: list[dict[str, Any]]) -> str:
    header: list[str] = []
    for row in rows:
        for key in row:
            if key not in header:
                header.append(key)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow(['' if row.get(key) is None else row.get(key) for key in header])
    return buf.getvalue()


def reports_to_json(reports: Iterable[RunReport]) -> str:
    return _json([asdict(r) for r in reports])


def reports_to_csv(reports: Iterable[RunReport]) -> str:
    return _csv([flatten_report(r) for r in reports])


def summary_to_csv(summary: Iterable[MethodSummary]) -> str:
    rows = []
    for s in summary:
        row = asdict(s)
        groups = row.pop('smr_group_means')
        for g, value in enumerate(groups):
            row[f'smr_group_means.{g}'] = value
        rows.append(row)
    return _csv(rows)


def write_run_outputs(out_dir: str, reports: list[RunReport], summary: list[MethodSummary]) -> list[str]:
    '''
    Write reports.json, reports.csv, summary.json and summary.csv into
    out_dir. Same reports in, same bytes out.

    Returns:
        list[str]: the paths written
    '''
    paths = {
        REPORTS_JSON: reports_to_json(reports),
        REPORTS_CSV: reports_to_csv(reports),
        SUMMARY_JSON: _json([asdict(s) for s in summary]),
        SUMMARY_CSV: summary_to_csv(summary),
    }
    written = []
    for name, text in paths.items():
        path = os.path.join(out_dir, name)
        write_text(path, text)
        written.append(path)
    return written


def load_reports(path: str) -> list[RunReport]:
    try:
        with open(path, encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f'cannot read reports from {path}: {e}') from None
    return [RunReport(**item) for item in data]


def write_spectrum_csv(path: str, sigma: Iterable[float]):
    lines = ['index,sigma']
    lines.extend(f'{i},{float(s)!r}' for i, s in enumerate(sigma))
    write_text(path, '\n'.join(lines) + '\n')


def write_loss_csv(path: str, losses: Iterable[float]):
    lines = ['step,loss']
    lines.extend(f'{t},{float(loss)!r}' for t, loss in enumerate(losses))
    write_text(path, '\n'.join(lines) + '\n')


def write_smr_reports(path: str, reports: dict[str, SmrReport]):
    '''SMR per layer as one JSON object keyed by layer name.'''
    write_text(path, _json({layer: asdict(r) for layer, r in reports.items()}))

