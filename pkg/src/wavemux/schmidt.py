"""Schmidt decomposition of the discretised one-axis pair amplitude."""
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .model import biphoton_amplitude

DEFAULT_N = 1024
LAMBDA_FLOOR = 1e-12


class GridResolutionWarning(UserWarning):
    pass


class SchmidtError(RuntimeError):
    pass


@dataclass
class AmplitudeGrid:
    values: np.ndarray
    axis_S: np.ndarray
    axis_AS: np.ndarray
    sigma: float
    kappa: float

    @property
    def axis(self):
        return self.axis_S

    @property
    def shape(self):
        return self.values.shape


@dataclass
class SchmidtResult:
    lambdas: np.ndarray
    M: float
    grid_n: int
    M_doubled: float | None = None

    @property
    def converged(self):
        """Relative change of M on doubling the grid is below 0.2 %."""
        if self.M_doubled is None:
            return None
        return abs(self.M_doubled - self.M) / self.M_doubled < 2e-3


def build_amplitude_grid(sigma, kappa, n=DEFAULT_N, n_AS=None):
    """Sample the pair amplitude on ``[-kappa/2, kappa/2]^2`` and L2-normalise it.

    ``sigma`` is the sum-variable (coincidence) width, so the amplitude itself
    is evaluated with width ``sqrt(2) sigma``.  ``n_AS`` gives a rectangular
    grid.  The amplitude is hard-cropped at the field edge.
    """
    n_AS = n if n_AS is None else n_AS
    if n < 2 or n_AS < 2:
        raise ValueError("grid needs at least two samples per axis")
    if not (sigma > 0 and kappa > 0):
        raise ValueError("sigma and kappa must be positive")
    k_S = np.linspace(-kappa / 2, kappa / 2, n)
    k_AS = np.linspace(-kappa / 2, kappa / 2, n_AS)
    step = kappa / (min(n, n_AS) - 1)
    if step > sigma / 4:
        warnings.warn(f"grid step {step:.3g} resolves sigma={sigma:.3g} with fewer than 4 samples",
                      GridResolutionWarning, stacklevel=2)
    values = biphoton_amplitude(k_S[:, None], k_AS[None, :], math.sqrt(2.0) * sigma)
    values /= np.linalg.norm(values)
    return AmplitudeGrid(values=values, axis_S=k_S, axis_AS=k_AS, sigma=float(sigma), kappa=float(kappa))


def _svd(values, compute_uv):
    try:
        return scipy.linalg.svd(values, compute_uv=compute_uv, lapack_driver="gesdd")
    except (np.linalg.LinAlgError, ValueError):
        try:
            return scipy.linalg.svd(values, compute_uv=compute_uv, lapack_driver="gesvd")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SchmidtError(
                f"SVD did not converge for grid {values.shape}, "
                f"finite={np.isfinite(values).all()}, norm={np.linalg.norm(values):.6g}"
            ) from exc


def effective_mode_number(lambdas):
    lam = np.asarray(lambdas, dtype=float)
    lam = lam[lam > LAMBDA_FLOOR]
    lam = lam / math.sqrt(np.sum(lam * lam))
    return 1.0 / np.sum(lam ** 4)


def schmidt_decompose(grid):
    """Singular values (normalised so their squares sum to one) and ``M = 1/sum lambda^4``."""
    values = grid.values if isinstance(grid, AmplitudeGrid) else np.asarray(grid, dtype=float)
    norm = np.linalg.norm(values)
    if not np.isfinite(norm) or norm == 0:
        raise SchmidtError(f"grid is not normalisable (norm={norm})")
    s = _svd(values / norm, compute_uv=False)
    s = np.sort(s)[::-1]
    s = s[s > LAMBDA_FLOOR]
    lam = s / math.sqrt(np.sum(s * s))
    return SchmidtResult(lambdas=lam, M=float(1.0 / np.sum(lam ** 4)), grid_n=int(max(values.shape)))


def schmidt_modes(grid, count):
    """First ``count`` Schmidt pairs ``(lambda_j, u_j(k_S), v_j(k_AS))``."""
    u, s, vh = _svd(grid.values, compute_uv=True)
    lam = s / math.sqrt(np.sum(s * s))
    count = min(count, len(lam))
    return lam[:count], u[:, :count], vh[:count].conj().T


def modes_for_axis(sigma, kappa, n=DEFAULT_N, check_convergence=False):
    """Mode number along one axis, optionally repeated at ``2n`` as a resolution check."""
    res = schmidt_decompose(build_amplitude_grid(sigma, kappa, n))
    if check_convergence:
        res.M_doubled = schmidt_decompose(build_amplitude_grid(sigma, kappa, 2 * n)).M
    return res


def total_mode_number(Mx, My):
    if Mx < 1 or My < 1:
        raise ValueError("per-axis mode numbers must be at least 1")
    return Mx * My


def write_spectrum(result, path):
    """Two-column table ``index lambda``."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# M={result.M!r}\n# grid_n={result.grid_n}\n# columns=index,lambda\n")
        for j, lam in enumerate(result.lambdas):
            fh.write(f"{j}\t{float(lam)!r}\n")
