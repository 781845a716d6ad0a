import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from soma.errors import RangeError, ShapeError, SpectrumError
from soma.linalg import ComponentRange, Matrix, SvdFactors, numerical_rank, reconstruct, svd
from soma.model import BlockModel, Linear

logger = logging.getLogger(__name__)


@dataclass
class SmrReport:
    '''
    Singular modulation ratio per singular index of w0 (descending sigma).
    Indices at or below the rank tolerance are left out and counted in
    `excluded`.
    '''
    values: list[float]
    group_means: list[float] = field(default_factory=list)
    n_groups: int = 0
    excluded: int = 0


@dataclass
class TruncationStudy:
    ranges: list[ComponentRange]
    metric_before: float
    metric_after: list[float] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)


def smr(w0: Matrix, delta_w: Matrix, factors: SvdFactors | None = None) -> SmrReport:
    '''
    |u_i^T dW v_i| / sigma_i for every singular direction of w0.

    Parameters:
        w0 (Matrix): the pre-trained weight
        delta_w (Matrix): the update, same shape as w0
        factors (SvdFactors): svd of w0 if the caller already has it

    Returns:
        SmrReport: values only, group_means left empty

    Example:
        >>> smr(np.diag([2.0, 1.0]), np.diag([2.0, 1.0])).values
        [1.0, 1.0]
    '''
    if w0.shape != delta_w.shape:
        raise ShapeError(f'weight {w0.shape} and update {delta_w.shape} differ in shape')
    f = factors if factors is not None else svd(w0)
    rank = numerical_rank(f)
    if rank == 0:
        raise SpectrumError('w0 is all zero, there is no spectrum to project onto')

    u = f.U[:, :rank]
    projected = delta_w @ f.Vt[:rank].T
    values = np.abs(np.einsum('ij,ij->j', u, projected)) / f.sigma[:rank]
    return SmrReport(values=[float(v) for v in values], excluded=f.k - rank)


def group_smr(values: Iterable[float], n_groups: int) -> list[float]:
    '''
    Mean SMR over contiguous equal groups, group 0 holding the largest
    singular values. When the length does not divide evenly the last group
    takes the remainder.

    Example:
        >>> group_smr([1, 1, 2, 2], 2)
        [1.0, 2.0]
    '''
    vals = np.asarray(list(values), dtype=np.float64)
    if n_groups < 1:
        raise RangeError(f'need at least one group, got {n_groups}')
    if n_groups > vals.shape[0]:
        raise RangeError(f'cannot split {vals.shape[0]} values into {n_groups} groups')
    size = vals.shape[0] // n_groups
    means = []
    for g in range(n_groups):
        stop = vals.shape[0] if g == n_groups - 1 else (g + 1) * size
        means.append(float(np.mean(vals[g * size:stop])))
    return means


def smr_report(w0: Matrix, delta_w: Matrix, n_groups: int = 4, factors: SvdFactors | None = None) -> SmrReport:
    report = smr(w0, delta_w, factors)
    report.group_means = group_smr(report.values, n_groups)
    report.n_groups = n_groups
    return report


def _weight_slot(lin: Linear) -> np.ndarray:
    # the array truncation edits in place: the plain weight or the adapter residual
    return lin.adapter.w_res if lin.adapter is not None else lin.w


def truncation_study(
    model: BlockModel,
    layer_selector: Callable[[Linear], bool] | Iterable[str],
    ranges: list[ComponentRange],
    eval_fn: Callable[[BlockModel], float],
) -> TruncationStudy:
    '''
    Remove a group of singular components from the selected layers, score
    the model, put the weights back. One score per range.

    Parameters:
        model (BlockModel): edited in place for the duration, restored bit for bit
        layer_selector: predicate over layers or an iterable of layer names
        ranges (list[ComponentRange]): components to remove, one run each
        eval_fn: scores a model, e.g. accuracy on a held-out set

    Returns:
        TruncationStudy
    '''
    if callable(layer_selector):
        layers = [lin for lin in model.layers() if layer_selector(lin)]
    else:
        wanted = list(layer_selector)
        layers = [model.layer(name) for name in wanted]

    # one spectrum per layer for the whole study
    spectra = {lin.name: svd(lin.dense()) for lin in layers}
    for rng in ranges:
        for lin in layers:
            try:
                rng.validate(spectra[lin.name].k)
            except RangeError:
                raise RangeError(f'range {rng.label()} does not fit layer {lin.name} (k={spectra[lin.name].k})') from None

    study = TruncationStudy(ranges=list(ranges), metric_before=float(eval_fn(model)))
    for rng in ranges:
        saved = {lin.name: _weight_slot(lin).copy() for lin in layers}
        try:
            for lin in layers:
                _weight_slot(lin)[...] -= reconstruct(spectra[lin.name], rng)
            metric = float(eval_fn(model))
        finally:
            for lin in layers:
                _weight_slot(lin)[...] = saved[lin.name]
        logger.debug('truncating %s on %d layers: metric %.6f', rng.label(), len(layers), metric)
        study.metric_after.append(metric)
        study.labels.append(rng.label())
    return study
