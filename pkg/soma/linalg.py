import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import NDArray

from soma.errors import ConvergenceError, NonFiniteError, RangeError, ShapeError

logger = logging.getLogger(__name__)

Matrix = NDArray[np.float64]

CONVERGENCE_TOL = 1e-14
MAX_SWEEPS = 60
RANK_RTOL = 1e-12

# columns this small are treated as exactly zero and get a completed basis vector
_DEGENERATE_NORM = 1e-300


def as_matrix(data: Any, name: str = 'matrix') -> Matrix:
    '''
    Turn anything array-like into a fresh float64, row-major 2-D array.

    Parameters:
        data (Any): nested lists, an ndarray, anything numpy understands
        name (str): used in the error message

    Returns:
        Matrix: a C-contiguous float64 copy

    Example:
        >>> as_matrix([[1, 2], [3, 4]]).dtype
        dtype('float64')
    '''
    w = np.array(data, dtype=np.float64, order='C', copy=True)
    if w.ndim != 2:
        raise ShapeError(f'{name} must be 2-D, got shape {w.shape}')
    if not np.all(np.isfinite(w)):
        raise NonFiniteError(f'{name} has NaN or Inf entries')
    return w


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f'cannot multiply {a.shape} by {b.shape}')
    return a @ b


def frobenius(w: Matrix) -> float:
    return math.sqrt(float(np.sum(np.square(w))))


@dataclass(frozen=True)
class ComponentRange:
    '''
    Half-open slice [start, end) of the descending singular order.
    '''
    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise RangeError(f'invalid component range {self.start}:{self.end}')

    @classmethod
    def top(cls, r: int) -> 'ComponentRange':
        return cls(0, r)

    @classmethod
    def bottom(cls, k: int, r: int) -> 'ComponentRange':
        return cls(k - r, k)

    @classmethod
    def full(cls, k: int) -> 'ComponentRange':
        return cls(0, k)

    @property
    def size(self) -> int:
        return self.end - self.start

    def validate(self, k: int) -> 'ComponentRange':
        if self.end > k:
            raise RangeError(f'component range {self.start}:{self.end} is out of bounds for k={k}')
        return self

    def label(self) -> str:
        return f'{self.start}:{self.end}'


def parse_range(text: str, k: int) -> ComponentRange:
    '''
    Parse a `start:end` range the way a python slice reads.

    Empty start means 0, empty end means k and negative numbers count back
    from k, so `-4:` is the bottom four components.

    Example:
        >>> parse_range('-4:', 16)
        ComponentRange(start=12, end=16)
    '''
    parts = text.strip().split(':')
    if len(parts) != 2:
        raise RangeError(f'range must look like start:end, got {text!r}')
    try:
        start = int(parts[0]) if parts[0].strip() else 0
        end = int(parts[1]) if parts[1].strip() else k
    except ValueError:
        raise RangeError(f'range must look like start:end, got {text!r}') from None
    if start < 0:
        start += k
    if end < 0:
        end += k
    return ComponentRange(start, end).validate(k)


@dataclass(frozen=True)
class SvdFactors:
    '''
    U (m x k), sigma (k, descending) and Vt (k x n) with k = min(m, n).
    '''
    U: Matrix
    sigma: NDArray[np.float64]
    Vt: Matrix

    @property
    def k(self) -> int:
        return int(self.sigma.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.U.shape[0], self.Vt.shape[1])


def numerical_rank(f: SvdFactors) -> int:
    if f.k == 0 or f.sigma[0] == 0.0:
        return 0
    return int(np.count_nonzero(f.sigma > RANK_RTOL * f.sigma[0]))


def _jacobi_columns(a: Matrix) -> tuple[Matrix, Matrix, int]:
    '''
    One-sided Jacobi on the columns of a (rows >= cols).

    Columns are held as the rows of `cols` so each rotation touches
    contiguous memory. Pairs are visited cyclic-by-row. Returns the rotated
    columns, the accumulated rotations (rows are the columns of V) and the
    number of sweeps used.
    '''
    cols = np.array(a.T, dtype=np.float64, order='C')
    n = cols.shape[0]
    v = np.eye(n)
    off = 0.0
    for sweep in range(1, MAX_SWEEPS + 1):
        off = 0.0
        for i in range(n - 1):
            ci = cols[i]
            vi = v[i]
            for j in range(i + 1, n):
                cj = cols[j]
                gamma = float(np.dot(ci, cj))
                if gamma == 0.0:
                    continue
                alpha = float(np.dot(ci, ci))
                beta = float(np.dot(cj, cj))
                scale = math.sqrt(alpha) * math.sqrt(beta)
                if scale == 0.0:
                    continue
                ratio = abs(gamma) / scale
                if ratio > off:
                    off = ratio
                if ratio < CONVERGENCE_TOL:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t

                new_ci = c * ci - s * cj
                cols[j] = s * ci + c * cj
                cols[i] = new_ci

                vj = v[j]
                new_vi = c * vi - s * vj
                v[j] = s * vi + c * vj
                v[i] = new_vi
        if off < CONVERGENCE_TOL:
            return cols, v, sweep
    raise ConvergenceError(off, MAX_SWEEPS)


def _complete_rows(basis: Matrix, valid: NDArray[np.bool_]) -> None:
    '''
    Fill the rows of basis flagged invalid with unit vectors orthogonal to
    everything already there. Picks the standard basis vector with the
    largest residual each time (lowest index on ties) so the result is
    deterministic.
    '''
    dim = basis.shape[1]
    for idx in np.flatnonzero(~valid):
        q = basis[valid]
        proj = np.eye(dim) - q.T @ q
        e = int(np.argmax(np.einsum('ij,ij->j', proj, proj)))
        cand = proj[:, e].copy()
        # second pass cleans up what the first projection left behind
        cand -= q.T @ (q @ cand)
        basis[idx] = cand / np.linalg.norm(cand)
        valid[idx] = True


def svd(w: Matrix) -> SvdFactors:
    '''
    Deterministic singular value decomposition by one-sided Jacobi.

    Parameters:
        w (Matrix): nonempty, finite m x n matrix

    Returns:
        SvdFactors: U (m x k), sigma descending, Vt (k x n), k = min(m, n).
        Each column of U has its largest-magnitude entry positive (lowest
        row index wins a tie) and the matching row of Vt carries the sign.

    Example:
        >>> svd(np.diag([3.0, 2.0, 1.0])).sigma
        array([3., 2., 1.])
    '''
    w = as_matrix(w, 'svd input')
    m, n = w.shape
    if m == 0 or n == 0:
        raise ShapeError(f'svd needs a nonempty matrix, got shape {w.shape}')

    transposed = m < n
    a = w.T if transposed else w
    cols, v_rows, sweeps = _jacobi_columns(a)
    logger.debug('jacobi svd of %dx%d converged in %d sweeps', m, n, sweeps)

    norms = np.sqrt(np.einsum('ij,ij->i', cols, cols))
    order = np.argsort(-norms, kind='stable')
    sigma = norms[order]
    left = cols[order]
    right = v_rows[order]

    valid = sigma > _DEGENERATE_NORM
    sigma[~valid] = 0.0
    left[valid] /= sigma[valid][:, None]
    if not np.all(valid):
        _complete_rows(left, valid)

    if transposed:
        U, Vt = right.T, left
    else:
        U, Vt = left.T, right
    U = np.ascontiguousarray(U)
    Vt = np.ascontiguousarray(Vt)

    k = sigma.shape[0]
    pivots = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[pivots, np.arange(k)] < 0.0, -1.0, 1.0)
    U *= signs
    Vt *= signs[:, None]
    return SvdFactors(U=U, sigma=sigma, Vt=Vt)


def reconstruct(f: SvdFactors, rng: ComponentRange) -> Matrix:
    '''
    Sum of sigma_i u_i v_i^T over the components in rng.
    '''
    rng.validate(f.k)
    s, e = rng.start, rng.end
    return (f.U[:, s:e] * f.sigma[s:e]) @ f.Vt[s:e, :]
