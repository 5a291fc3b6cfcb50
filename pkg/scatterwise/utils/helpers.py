"""
Utility functions and helpers for scatterwise
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import scipy.linalg
from rich.logging import RichHandler

from .errors import InvalidArgumentError

T = TypeVar('T')
R = TypeVar('R')

_THREADS = 1


def setup_logging(level: int = logging.INFO) -> logging.Logger:
    """Attach a rich handler to the package logger (once)."""
    logger = logging.getLogger('scatterwise')
    if not any(isinstance(h, RichHandler) for h in logger.handlers):
        handler = RichHandler(show_path=False, markup=False)
        handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(handler)
    logger.setLevel(level)
    return logger


def set_threads(threads: int) -> None:
    """Set the worker count used by parallel assembly loops."""
    global _THREADS
    if threads < 1:
        raise InvalidArgumentError(f"threads must be >= 1, got {threads}")
    _THREADS = int(threads)


def get_threads() -> int:
    return _THREADS


def parallel_map(func: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """Map over items with a thread pool; numpy kernels release the GIL."""
    items = list(items)
    workers = threads or _THREADS
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def chunk_ranges(total: int, size: int) -> Iterator[Tuple[int, int]]:
    """Yield (start, stop) pairs covering range(total) in blocks of size."""
    size = max(1, int(size))
    for start in range(0, total, size):
        yield start, min(total, start + size)


def as_complex(value: Any, name: str = 'value') -> complex:
    """Parse a number, a [re, im] pair or a string like '2+0.1j'."""
    try:
        if isinstance(value, (list, tuple)):
            if len(value) != 2:
                raise ValueError("expected [re, im]")
            return complex(float(value[0]), float(value[1]))
        if isinstance(value, str):
            return complex(value.replace(' ', ''))
        return complex(value)
    except (TypeError, ValueError) as e:
        raise InvalidArgumentError(f"{name}: cannot read complex number from {value!r} ({e})")


def as_vector(value: Any, length: int = 3, name: str = 'vector', dtype=float) -> np.ndarray:
    """Convert a sequence into a numpy vector of the given length."""
    if dtype is complex and isinstance(value, (list, tuple)):
        arr = np.array([as_complex(v, name) for v in value], dtype=complex)
    else:
        arr = np.asarray(value, dtype=dtype)
    if arr.shape != (length,):
        raise InvalidArgumentError(f"{name}: expected {length} components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name}: non-finite component in {arr}")
    return arr


def unit(vector: Sequence[float], name: str = 'direction') -> np.ndarray:
    """Return the normalized vector; zero length is an invalid argument."""
    v = np.asarray(vector, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0 or not np.isfinite(n):
        raise InvalidArgumentError(f"{name} must be a non-zero finite vector")
    return v / n


def cross_matrix(v: np.ndarray) -> np.ndarray:
    """Matrix [v]x with [v]x @ w == cross(v, w)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ], dtype=np.result_type(v, float))


def max_norm(values: np.ndarray) -> float:
    """Component max-norm over all entries (6-vectors, stacked fields)."""
    values = np.asarray(values)
    return float(np.max(np.abs(values))) if values.size else 0.0


def row_sum_norm(matrix: np.ndarray) -> float:
    """Operator norm induced by the max-norm: largest absolute row sum."""
    matrix = np.asarray(matrix)
    if matrix.size == 0:
        return 0.0
    return float(np.max(np.sum(np.abs(matrix), axis=-1)))


def lu_with_condition(matrix: np.ndarray,
                      overwrite: bool = False) -> Tuple[Tuple[np.ndarray, np.ndarray], float]:
    """LU-factorize and return (lu_piv, 1-norm condition estimate).

    With overwrite=True the factors replace `matrix` in place.
    """
    anorm = float(np.max(np.sum(np.abs(matrix), axis=0))) if matrix.size else 0.0
    lu_piv = scipy.linalg.lu_factor(matrix, overwrite_a=overwrite, check_finite=True)
    gecon, = scipy.linalg.get_lapack_funcs(('gecon',), (lu_piv[0],))
    rcond, info = gecon(lu_piv[0], anorm, norm='1')
    if info != 0 or rcond == 0.0:
        return lu_piv, float('inf')
    return lu_piv, float(1.0 / rcond)
