import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from soma.errors import RankError, ShapeError
from soma.linalg import RANK_RTOL, Matrix, SvdFactors, as_matrix, svd

logger = logging.getLogger(__name__)


class AdapterKind(str, Enum):
    '''
    Which subspace the adapter trains. NONE means the plain weight itself
    is trained (full fine-tuning).
    '''
    SOMA = 'soma'
    PISSA = 'pissa'
    LORA = 'lora'
    NONE = 'none'

    @classmethod
    def parse(cls, text: str) -> 'AdapterKind':
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f'unknown adapter kind {text!r}, expected one of {[k.value for k in cls]}') from None


@dataclass(eq=False)
class LinearAdapter:
    '''
    Frozen residual plus trainable low-rank factors.

    b and a evolve during training, b0 and a0 keep the initial factors so
    the update can be read back as b·a − b0·a0.
    '''
    w_res: Matrix
    b: Matrix
    a: Matrix
    b0: Matrix
    a0: Matrix
    rank: int
    kind: AdapterKind
    scale: float = 1.0
    # singular values at or below the rank tolerance inside the trained subspace
    dead_directions: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.w_res.shape


@dataclass
class MergedLinear:
    w: Matrix


def _check_rank(w: Matrix, r: int) -> None:
    k = min(w.shape)
    if not (1 <= r <= k):
        raise RankError(f'rank {r} is out of range for a {w.shape[0]}x{w.shape[1]} weight (1..{k})')


def _spectral_init(w: Matrix, r: int, kind: AdapterKind, scale: float, factors: SvdFactors | None) -> LinearAdapter:
    w = as_matrix(w, 'base weight')
    _check_rank(w, r)
    f = factors if factors is not None else svd(w)
    if f.shape != w.shape:
        raise ShapeError(f'svd factors of shape {f.shape} do not belong to a {w.shape} weight')

    k = f.k
    picked = slice(k - r, k) if kind is AdapterKind.SOMA else slice(0, r)
    root = np.sqrt(f.sigma[picked])
    b = np.ascontiguousarray(f.U[:, picked] * root)
    a = np.ascontiguousarray(root[:, None] * f.Vt[picked, :])

    # explicit subtraction, not a spectral rebuild of the other components
    w_res = w - scale * (b @ a)

    tol = RANK_RTOL * f.sigma[0] if k else 0.0
    dead = int(np.count_nonzero(f.sigma[picked] <= tol))
    if dead:
        logger.warning('%s init picked %d dead singular directions (sigma <= %.3e)', kind.value, dead, tol)

    return LinearAdapter(
        w_res=w_res,
        b=b,
        a=a,
        b0=b.copy(),
        a0=a.copy(),
        rank=r,
        kind=kind,
        scale=scale,
        dead_directions=dead,
    )


def soma_init(w: Matrix, r: int, scale: float = 1.0, factors: SvdFactors | None = None) -> LinearAdapter:
    '''
    Adapter over the r minor singular components of w.

    Parameters:
        w (Matrix): base weight, m x n
        r (int): rank, 1 <= r <= min(m, n)
        scale (float): multiplier on b·a, 1 keeps the plain form
        factors (SvdFactors): reuse an svd of w that was already computed

    Returns:
        LinearAdapter: b = U[:, -r:]·sqrt(S[-r:]), a = sqrt(S[-r:])·Vt[-r:, :],
        w_res = w − b·a

    Example:
        >>> ad = soma_init(np.diag([4.0, 1.0]), 1)
        >>> ad.b @ ad.a
        array([[0., 0.],
               [0., 1.]])
    '''
    return _spectral_init(w, r, AdapterKind.SOMA, scale, factors)


def pissa_init(w: Matrix, r: int, scale: float = 1.0, factors: SvdFactors | None = None) -> LinearAdapter:
    '''
    Same as soma_init but over the r principal components.
    '''
    return _spectral_init(w, r, AdapterKind.PISSA, scale, factors)


def lora_init(w: Matrix, r: int, seed: int, scale: float = 1.0) -> LinearAdapter:
    '''
    Random adapter: b = 0, a uniform on [-sqrt(6/n), sqrt(6/n)].

    Parameters:
        w (Matrix): base weight, m x n
        r (int): rank
        seed (int): seed of the generator drawing a

    Returns:
        LinearAdapter: w_res is an exact copy of w
    '''
    w = as_matrix(w, 'base weight')
    _check_rank(w, r)
    m, n = w.shape
    bound = math.sqrt(6.0 / n)
    rng = np.random.default_rng(seed)
    a = rng.uniform(-bound, bound, size=(r, n))
    b = np.zeros((m, r))
    return LinearAdapter(
        w_res=w,
        b=b,
        a=a,
        b0=b.copy(),
        a0=a.copy(),
        rank=r,
        kind=AdapterKind.LORA,
        scale=scale,
    )


def init_adapter(
    w: Matrix,
    kind: AdapterKind,
    r: int,
    seed: int = 0,
    scale: float = 1.0,
    factors: SvdFactors | None = None,
) -> LinearAdapter:
    if kind is AdapterKind.SOMA:
        return soma_init(w, r, scale, factors)
    if kind is AdapterKind.PISSA:
        return pissa_init(w, r, scale, factors)
    if kind is AdapterKind.LORA:
        return lora_init(w, r, seed, scale)
    raise ValueError('AdapterKind.NONE trains the plain weight, there is no adapter to build')


def adapter_forward(ad: LinearAdapter, x: Matrix) -> Matrix:
    '''
    w_res·x + scale·b·(a·x), never materializing b·a.
    '''
    if x.ndim != 2 or x.shape[0] != ad.w_res.shape[1]:
        raise ShapeError(f'adapter expects input with {ad.w_res.shape[1]} rows, got shape {x.shape}')
    return ad.w_res @ x + ad.scale * (ad.b @ (ad.a @ x))


def merge(ad: LinearAdapter) -> MergedLinear:
    return MergedLinear(w=ad.w_res + ad.scale * (ad.b @ ad.a))


def delta(ad: LinearAdapter) -> Matrix:
    '''
    The update the adapter applies on top of the base weight:
    scale·(b·a − b0·a0).
    '''
    return ad.scale * (ad.b @ ad.a - ad.b0 @ ad.a0)


def count_trainable(shapes: Iterable[tuple[int, int]], r: int) -> int:
    '''
    Trainable adapter entries over a set of layers: sum of r·(m + n).

    Example:
        >>> count_trainable([(8, 8)], 1)
        16
    '''
    if r < 1:
        raise RankError(f'rank must be at least 1, got {r}')
    return sum(r * (m + n) for m, n in shapes)
