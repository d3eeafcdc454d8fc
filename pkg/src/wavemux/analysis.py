"""Streaming estimators over frame streams.

Every estimator here is built on mergeable accumulators: a frame stream can be
cut into arbitrary pieces, each piece accumulated separately and the results
added, and the counts come out identical to a single pass.  No background is
subtracted anywhere.

Regions are axis-aligned squares in wavevector space with half-open extent
``[c - kappa/2, c + kappa/2)`` on each axis.
"""
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import least_squares
from scipy.signal import lombscargle
from scipy.special import ndtr

from .frames import Arm, Frame, FrameBatch
from .model import chi_expr, decoherence_rate, g2_model, roi_acceptance_f, roi_acceptance_xy, tmsv_g2


class EmptyStreamError(ValueError):
    pass


class RegionError(ValueError):
    pass


class ZeroDenominatorError(ArithmeticError):
    """g2 requested where one of the single-arm click probabilities is zero."""


class FitError(RuntimeError):
    """Fit did not converge; ``fallback`` carries a moment-based estimate."""

    def __init__(self, message, fallback=None):
        super().__init__(message)
        self.fallback = fallback


# ---------------------------------------------------------------- inputs

def iter_batches(frames):
    """Normalise the accepted frame inputs to an iterator of :class:`FrameBatch`."""
    if isinstance(frames, FrameBatch):
        yield frames
        return
    if isinstance(frames, Frame):
        yield FrameBatch.from_frames([frames])
        return
    if isinstance(frames, (list, tuple)) and frames and isinstance(frames[0], Frame):
        yield FrameBatch.from_frames(frames)
        return
    for item in frames:
        if isinstance(item, FrameBatch):
            yield item
        elif isinstance(item, Frame):
            yield FrameBatch.from_frames([item])
        else:
            raise TypeError(f"cannot read frames from {type(item).__name__}")


def _peek(frames):
    """First batch (or None) and an iterator that still yields it."""
    it = iter_batches(frames)
    first = next(it, None)
    if first is None:
        return None, iter(())
    return first, itertools.chain([first], it)


def _arm_mask(arm_codes, arms):
    if isinstance(arms, (Arm, int, str)):
        return arm_codes == int(Arm.parse(arms))
    return np.isin(arm_codes, [int(Arm.parse(a)) for a in arms])


# ---------------------------------------------------------------- regions

class RegionSet:
    """Rectangular lattice of square regions: every ``(cx, cy)`` combination.

    Region ``(i, j)`` (``i`` along x) has flat index ``i * len(centers_y) + j``.
    Centers must be strictly increasing along each axis; neighbours may overlap.
    """

    def __init__(self, centers_x, centers_y, kappa):
        self.centers_x = np.atleast_1d(np.asarray(centers_x, dtype=float))
        self.centers_y = np.atleast_1d(np.asarray(centers_y, dtype=float))
        self.kappa = float(kappa)
        if not self.kappa > 0:
            raise RegionError("region side must be positive")
        for c in (self.centers_x, self.centers_y):
            if c.size == 0 or np.any(np.diff(c) <= 0):
                raise RegionError("region centres must be non-empty and strictly increasing")

    @classmethod
    def single(cls, center, kappa):
        return cls([center[0]], [center[1]], kappa)

    @classmethod
    def tiling(cls, kappa, fov, center=(0.0, 0.0)):
        """Non-overlapping tiles of side ``kappa`` filling as much of ``fov`` as fits, centred on ``center``."""
        axes = []
        for c, F in zip(center, fov):
            n = int(math.floor(F / kappa + 1e-9))
            if n < 1:
                raise RegionError(f"tile side {kappa} exceeds field of view {F}")
            axes.append(c + (np.arange(n) - (n - 1) / 2.0) * kappa)
        return cls(axes[0], axes[1], kappa)

    @property
    def shape(self):
        return len(self.centers_x), len(self.centers_y)

    @property
    def size(self):
        return len(self.centers_x) * len(self.centers_y)

    def centers(self):
        cx, cy = np.meshgrid(self.centers_x, self.centers_y, indexing="ij")
        return np.column_stack([cx.ravel(), cy.ravel()])

    def conjugate(self):
        """Point-mirrored set; region ``k`` of this set mirrors region ``size-1-k`` of the result."""
        return RegionSet(-self.centers_x[::-1], -self.centers_y[::-1], self.kappa)

    def check_within(self, fov, tol=1e-9):
        if fov is None:
            return
        for c, F, name in ((self.centers_x, fov[0], "x"), (self.centers_y, fov[1], "y")):
            lo = c[0] - self.kappa / 2
            hi = c[-1] + self.kappa / 2
            if lo < -F / 2 - tol or hi > F / 2 + tol:
                raise RegionError(f"regions span [{lo:.4g}, {hi:.4g}) along {name}, outside the field [{-F/2:.4g}, {F/2:.4g})")

    @staticmethod
    def _axis_range(centers, kappa, x):
        a = np.searchsorted(centers + kappa / 2, x, side="right")
        b = np.searchsorted(centers - kappa / 2, x, side="right")
        return a, np.maximum(a, b)

    def membership(self, kx, ky):
        """All ``(hit, region)`` incidences for hit coordinates ``kx, ky``."""
        ax, bx = self._axis_range(self.centers_x, self.kappa, kx)
        ay, by = self._axis_range(self.centers_y, self.kappa, ky)
        nx = bx - ax
        ny = by - ay
        cnt = nx * ny
        hit = np.repeat(np.arange(len(kx)), cnt)
        k = _cumcount(hit)
        nyh = ny[hit]
        i = ax[hit] + k // np.maximum(nyh, 1)
        j = ay[hit] + k % np.maximum(nyh, 1)
        return hit, i * len(self.centers_y) + j


@dataclass(frozen=True)
class RegionPair:
    center_S: tuple
    center_AS: tuple
    kappa: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise RegionError("kappa must be positive")

    @classmethod
    def conjugate_of(cls, center_S, kappa):
        return cls(tuple(center_S), (-center_S[0], -center_S[1]), kappa)

    def is_conjugate(self, pixel_pitch=2.1):
        return (abs(self.center_S[0] + self.center_AS[0]) <= pixel_pitch / 2
                and abs(self.center_S[1] + self.center_AS[1]) <= pixel_pitch / 2)

    def sets(self):
        return RegionSet.single(self.center_S, self.kappa), RegionSet.single(self.center_AS, self.kappa)


def _cumcount(group):
    if group.size == 0:
        return group.astype(np.int64)
    starts = np.r_[0, np.flatnonzero(np.diff(group)) + 1]
    lengths = np.diff(np.r_[starts, group.size])
    return np.arange(group.size) - np.repeat(starts, lengths)


# ---------------------------------------------------------------- g2 statistics

@dataclass
class G2Estimate:
    p_S: float
    p_AS: float
    p_SAS: float
    g2: float
    stderr: float
    n_frames: int
    n_S: int = 0
    n_AS: int = 0
    n_SAS: int = 0


def g2_log_variance(n_frames, n_S, n_AS, n_SAS):
    """Delta-method variance of ``log g2`` for multinomial frame outcomes.

    ``1/n11 - 1/nS - 1/nAS + 2 n11/(nS nAS) - 1/N``; an empty coincidence cell
    is counted as one so the error stays finite.
    """
    n11 = np.maximum(np.asarray(n_SAS, dtype=float), 1.0)
    nS = np.asarray(n_S, dtype=float)
    nA = np.asarray(n_AS, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = 1.0 / n11 - 1.0 / nS - 1.0 / nA + 2.0 * np.asarray(n_SAS, float) / (nS * nA) - 1.0 / n_frames
    return np.maximum(v, 0.0)


def g2_from_counts(n_frames, n_S, n_AS, n_SAS, strict=True):
    """``g2 = p_SAS / (p_S p_AS)`` with its standard error.

    Scalars with a zero single-arm count raise :class:`ZeroDenominatorError`
    when ``strict``; array inputs (maps) get NaN in those cells instead.
    """
    if n_frames <= 0:
        raise EmptyStreamError("no frames")
    nS = np.asarray(n_S, dtype=float)
    nA = np.asarray(n_AS, dtype=float)
    n11 = np.asarray(n_SAS, dtype=float)
    scalar = nS.ndim == 0 and nA.ndim == 0 and n11.ndim == 0
    if scalar and strict and (nS == 0 or nA == 0):
        raise ZeroDenominatorError(f"g2 undefined: n_S={int(nS)}, n_AS={int(nA)} in {n_frames} frames")
    with np.errstate(divide="ignore", invalid="ignore"):
        g = n_frames * n11 / (nS * nA)
        g = np.where((nS > 0) & (nA > 0), g, np.nan)
        se = g * np.sqrt(g2_log_variance(n_frames, nS, nA, n11))
    if scalar:
        return G2Estimate(float(nS / n_frames), float(nA / n_frames), float(n11 / n_frames), float(g), float(se),
                          int(n_frames), int(nS), int(nA), int(n11))
    return G2Estimate(nS / n_frames, nA / n_frames, n11 / n_frames, g, se, int(n_frames), nS, nA, n11)


# ---------------------------------------------------------------- accumulators

class CorrelationAccumulator:
    """Per-frame region clicks for two arms and their joint counts.

    ``pairs`` selects which (S-region, AS-region) joint counts are kept:
    ``"full"`` for the whole matrix or a pair of equal-length index arrays.
    ``mode="click"`` counts frames with at least one hit (the default estimator);
    ``mode="number"`` accumulates photon numbers and their products instead.
    """

    def __init__(self, s_regions, as_regions, pairs="full", arm_s=Arm.S, arm_as=Arm.AS, mode="click",
                 check_fov=True):
        if mode not in ("click", "number"):
            raise ValueError(f"unknown mode {mode!r}")
        self.s_regions = s_regions
        self.as_regions = as_regions
        self.arm_s = arm_s
        self.arm_as = arm_as
        self.mode = mode
        self.check_fov = check_fov
        if isinstance(pairs, str):
            if pairs != "full":
                raise ValueError(f"unknown pairing {pairs!r}")
            self.pairs = None
            shape = (s_regions.size, as_regions.size)
        else:
            a, b = (np.asarray(p, dtype=np.int64) for p in pairs)
            if a.shape != b.shape:
                raise ValueError("pair index arrays differ in length")
            self.pairs = (a, b)
            shape = a.shape
        self.n_frames = 0
        self.n_S = np.zeros(s_regions.size, dtype=np.int64)
        self.n_AS = np.zeros(as_regions.size, dtype=np.int64)
        self.n_SAS = np.zeros(shape, dtype=np.int64)
        self._fov_checked = False

    def _matrix(self, batch, regions, arms):
        sel = np.flatnonzero(_arm_mask(batch.arm, arms))
        frame_local = np.repeat(np.arange(batch.n_frames), np.diff(batch.ptr))[sel]
        hit, reg = regions.membership(batch.kx[sel], batch.ky[sel])
        m = sp.csr_matrix((np.ones(hit.size, dtype=np.int64), (frame_local[hit], reg)),
                          shape=(batch.n_frames, regions.size))
        m.sum_duplicates()
        if self.mode == "click":
            m.data[:] = 1
        return m

    def update(self, batch):
        if self.check_fov and not self._fov_checked:
            self.s_regions.check_within(batch.meta.get("fov"))
            self.as_regions.check_within(batch.meta.get("fov"))
            self._fov_checked = True
        cs = self._matrix(batch, self.s_regions, self.arm_s)
        ca = self._matrix(batch, self.as_regions, self.arm_as)
        self.n_frames += batch.n_frames
        self.n_S += np.asarray(cs.sum(axis=0)).ravel()
        self.n_AS += np.asarray(ca.sum(axis=0)).ravel()
        if self.pairs is None:
            self.n_SAS += (cs.T @ ca).toarray()
        elif len(self.pairs[0]):
            a, b = self.pairs
            self.n_SAS += np.asarray(cs[:, a].multiply(ca[:, b]).sum(axis=0)).ravel()
        return self

    def consume(self, frames):
        for batch in iter_batches(frames):
            self.update(batch)
        return self

    def merge(self, other):
        if (self.n_S.shape != other.n_S.shape or self.n_AS.shape != other.n_AS.shape
                or self.n_SAS.shape != other.n_SAS.shape or self.mode != other.mode):
            raise ValueError("accumulators are not compatible")
        out = self.copy()
        out.n_frames += other.n_frames
        out.n_S += other.n_S
        out.n_AS += other.n_AS
        out.n_SAS += other.n_SAS
        return out

    __add__ = merge

    def copy(self):
        out = object.__new__(CorrelationAccumulator)
        out.__dict__.update(self.__dict__)
        out.n_S, out.n_AS, out.n_SAS = self.n_S.copy(), self.n_AS.copy(), self.n_SAS.copy()
        return out

    def _singles_for_pairs(self):
        if self.pairs is None:
            return self.n_S[:, None], self.n_AS[None, :]
        a, b = self.pairs
        return self.n_S[a], self.n_AS[b]

    def estimate(self):
        """Per-pair :class:`G2Estimate` arrays (NaN where undefined)."""
        if self.n_frames == 0:
            raise EmptyStreamError("no frames accumulated")
        nS, nA = self._singles_for_pairs()
        nS, nA = np.broadcast_arrays(nS, nA)
        return g2_from_counts(self.n_frames, nS, nA, self.n_SAS, strict=False)

    def pooled(self, mask=None):
        """g2 treating every selected (frame, region pair) as one trial.

        ``mask`` has the shape of ``n_SAS``; by default every kept pair is pooled.
        """
        nS, nA = np.broadcast_arrays(*self._singles_for_pairs())
        mask = np.ones(nS.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        n_pairs = int(mask.sum())
        if n_pairs == 0 or self.n_frames == 0:
            raise EmptyStreamError("nothing to pool")
        return g2_from_counts(self.n_frames * n_pairs, int(nS[mask].sum()), int(nA[mask].sum()),
                              int(self.n_SAS[mask].sum()))


@dataclass
class CoincidenceCounts:
    n_frames: int
    n_S: int
    n_AS: int
    n_SAS: int

    def _p(self, n):
        return n / self.n_frames

    @property
    def p_S(self):
        return self._p(self.n_S)

    @property
    def p_AS(self):
        return self._p(self.n_AS)

    @property
    def p_SAS(self):
        return self._p(self.n_SAS)

    def __add__(self, other):
        return CoincidenceCounts(self.n_frames + other.n_frames, self.n_S + other.n_S,
                                 self.n_AS + other.n_AS, self.n_SAS + other.n_SAS)

    def g2(self):
        return g2_from_counts(self.n_frames, self.n_S, self.n_AS, self.n_SAS)


def _pair_accumulator(pair, arm_s=Arm.S, arm_as=Arm.AS, mode="click"):
    s, a = pair.sets()
    return CorrelationAccumulator(s, a, pairs=([0], [0]), arm_s=arm_s, arm_as=arm_as, mode=mode)


def count_coincidences(frames, pair, arm_s=Arm.S, arm_as=Arm.AS):
    """Frames with a click in the S region, the AS region, and both."""
    acc = _pair_accumulator(pair, arm_s, arm_as).consume(frames)
    if acc.n_frames == 0:
        raise EmptyStreamError("frame stream is empty")
    return CoincidenceCounts(acc.n_frames, int(acc.n_S[0]), int(acc.n_AS[0]), int(acc.n_SAS[0]))


def g2_estimate(frames, pair, mode="click", arm_s=Arm.S, arm_as=Arm.AS):
    """Cross-correlation for one region pair.

    ``mode="number"`` uses photon-number moments ``<nS nAS>/(<nS><nAS>)``; its
    standard error reuses the click formula and is only indicative.
    """
    acc = _pair_accumulator(pair, arm_s, arm_as, mode).consume(frames)
    if acc.n_frames == 0:
        raise EmptyStreamError("frame stream is empty")
    return g2_from_counts(acc.n_frames, int(acc.n_S[0]), int(acc.n_AS[0]), int(acc.n_SAS[0]))


@dataclass
class G2Map:
    s_regions: RegionSet
    as_regions: RegionSet
    estimate: G2Estimate
    accumulator: CorrelationAccumulator

    @property
    def g2(self):
        return self.estimate.g2

    @property
    def stderr(self):
        return self.estimate.stderr


def g2_map(frames, s_regions, as_regions, arm_s=Arm.S, arm_as=Arm.AS):
    """g2 for every (S region, AS region) combination.

    Rows follow ``s_regions``' flat order, columns ``as_regions``'.  Pass
    ``as_regions = s_regions.conjugate()`` and reverse the columns to put
    conjugate pairs on the diagonal (see :func:`conjugate_diagonal`).
    """
    acc = CorrelationAccumulator(s_regions, as_regions, "full", arm_s, arm_as).consume(frames)
    return G2Map(s_regions, as_regions, acc.estimate(), acc)


def conjugate_diagonal(m):
    """Reorder a map built against ``s_regions.conjugate()`` so row ``k`` meets its conjugate in column ``k``."""
    return m[:, ::-1]


def tiled_conjugate_accumulator(kappa, fov, arm_s=Arm.S, arm_as=Arm.AS, mode="click"):
    """Accumulator over every tile of a side-``kappa`` tiling paired with its mirror tile."""
    s = RegionSet.tiling(kappa, fov)
    a = s.conjugate()
    idx = np.arange(s.size)
    return CorrelationAccumulator(s, a, pairs=(idx, s.size - 1 - idx), arm_s=arm_s, arm_as=arm_as, mode=mode)


# ---------------------------------------------------------------- histograms

@dataclass
class CoincidenceHistogram:
    axes: tuple
    edges_x: np.ndarray
    edges_y: np.ndarray
    counts: np.ndarray
    n_outside: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def total(self):
        return int(self.counts.sum()) + int(self.n_outside)

    @property
    def centers_x(self):
        return 0.5 * (self.edges_x[1:] + self.edges_x[:-1])

    @property
    def centers_y(self):
        return 0.5 * (self.edges_y[1:] + self.edges_y[:-1])

    def __add__(self, other):
        if not (np.array_equal(self.edges_x, other.edges_x) and np.array_equal(self.edges_y, other.edges_y)):
            raise ValueError("histograms have different binning")
        return CoincidenceHistogram(self.axes, self.edges_x, self.edges_y, self.counts + other.counts,
                                    self.n_outside + other.n_outside, dict(self.meta))


def uniform_edges(lo, hi, width):
    n = int(round((hi - lo) / width))
    if n < 1 or not math.isclose(n * width, hi - lo, rel_tol=1e-9):
        raise ValueError(f"[{lo}, {hi}) is not a whole number of bins of width {width}")
    return lo + width * np.arange(n + 1)


def _check_uniform(edges):
    d = np.diff(edges)
    if d.size == 0 or np.any(d <= 0) or not np.allclose(d, d[0], rtol=1e-9, atol=0):
        raise ValueError("bin edges must be uniform and increasing")


def _frame_pairs(batch, arms_s=Arm.S, arms_as=Arm.AS):
    """Indices of every (S hit, AS hit) combination sharing a frame."""
    frame_of = np.repeat(np.arange(batch.n_frames), np.diff(batch.ptr))
    s = np.flatnonzero(_arm_mask(batch.arm, arms_s))
    a = np.flatnonzero(_arm_mask(batch.arm, arms_as))
    na = np.bincount(frame_of[a], minlength=batch.n_frames)
    start_a = np.r_[0, np.cumsum(na)[:-1]]
    fs = frame_of[s]
    rep = na[fs]
    s_idx = np.repeat(s, rep)
    off = _cumcount(np.repeat(np.arange(s.size), rep))
    a_idx = a[np.repeat(start_a[fs], rep) + off]
    return s_idx, a_idx


class HistogramAccumulator:
    """2D histogram of all same-frame S x AS hit combinations.

    ``kind`` is ``"x"`` or ``"y"`` for ``(k_S, k_AS)`` along that axis, or
    ``"com"`` for the sums ``(kx_S + kx_AS, ky_S + ky_AS)``.  Combinations
    outside the edges are counted in ``n_outside`` so totals stay exact.
    """

    def __init__(self, kind, edges_x, edges_y, arm_s=Arm.S, arm_as=Arm.AS):
        if kind not in ("x", "y", "com"):
            raise ValueError(f"unknown histogram kind {kind!r}")
        self.kind = kind
        self.edges_x = np.asarray(edges_x, dtype=float)
        self.edges_y = np.asarray(edges_y, dtype=float)
        _check_uniform(self.edges_x)
        _check_uniform(self.edges_y)
        self.arm_s, self.arm_as = arm_s, arm_as
        self.counts = np.zeros((len(self.edges_x) - 1, len(self.edges_y) - 1), dtype=np.int64)
        self.n_outside = 0

    def _values(self, batch):
        s, a = _frame_pairs(batch, self.arm_s, self.arm_as)
        if self.kind == "com":
            return batch.kx[s] + batch.kx[a], batch.ky[s] + batch.ky[a]
        k = batch.kx if self.kind == "x" else batch.ky
        return k[s], k[a]

    def update(self, batch):
        u, v = self._values(batch)
        ex, ey = self.edges_x, self.edges_y
        inside = (u >= ex[0]) & (u < ex[-1]) & (v >= ey[0]) & (v < ey[-1])
        h, _, _ = np.histogram2d(u[inside], v[inside], bins=(ex, ey))
        self.counts += h.astype(np.int64)
        self.n_outside += int(u.size - inside.sum())
        return self

    def consume(self, frames):
        for b in iter_batches(frames):
            self.update(b)
        return self

    def merge(self, other):
        if (self.kind != other.kind or not np.array_equal(self.edges_x, other.edges_x)
                or not np.array_equal(self.edges_y, other.edges_y)):
            raise ValueError("histogram accumulators are not compatible")
        out = HistogramAccumulator(self.kind, self.edges_x, self.edges_y, self.arm_s, self.arm_as)
        out.counts = self.counts + other.counts
        out.n_outside = self.n_outside + other.n_outside
        return out

    __add__ = merge

    def result(self):
        axes = {"x": ("kx_S", "kx_AS"), "y": ("ky_S", "ky_AS"), "com": ("kx_S+kx_AS", "ky_S+ky_AS")}[self.kind]
        return CoincidenceHistogram(axes, self.edges_x.copy(), self.edges_y.copy(), self.counts.copy(),
                                    self.n_outside)


def coincidence_map(frames, axis="y", edges=None, bin_width=2.1, fov=None):
    """``(k_S, k_AS)`` histogram along one axis over all same-frame hit combinations."""
    if axis not in ("x", "y"):
        raise ValueError("axis must be 'x' or 'y'")
    first, batches = _peek(frames)
    if edges is None:
        fov = fov or (first.meta.get("fov") if first is not None else None)
        if fov is None:
            raise ValueError("pass edges or a field of view")
        F = fov[0] if axis == "x" else fov[1]
        n = int(math.ceil(F / bin_width - 1e-9))
        edges = -n * bin_width / 2 + bin_width * np.arange(n + 1)
    acc = HistogramAccumulator(axis, edges, edges)
    for b in batches:
        acc.update(b)
    return acc.result()


def com_histogram(frames, half_width=30.0, bin_width=1.0):
    edges = uniform_edges(-half_width, half_width, bin_width)
    return HistogramAccumulator("com", edges, edges).consume(frames).result()


# ---------------------------------------------------------------- 2D Gaussian fit

PARAM_NAMES_2D = ("amplitude", "center_x", "center_y", "sigma_x", "sigma_y", "offset")


@dataclass
class GaussianFit:
    params: dict
    errors: dict
    covariance: np.ndarray
    chi2: float
    dof: int
    converged: bool
    message: str = ""


def gaussian2d_binned(params, edges_x, edges_y):
    """Expected counts per bin: bin-integrated Gaussian of total ``amplitude`` plus a flat ``offset`` per bin."""
    A, cx, cy, sx, sy, off = params
    px = np.diff(ndtr((edges_x - cx) / sx))
    py = np.diff(ndtr((edges_y - cy) / sy))
    return A * px[:, None] * py[None, :] + off


def moment_estimate(hist):
    """Centre and width from second moments after removing the median (flat) level."""
    c = hist.counts.astype(float)
    off = float(np.median(np.r_[c[0], c[-1], c[:, 0], c[:, -1]]))
    w = np.clip(c - off, 0, None)
    tot = w.sum()
    if tot <= 0:
        raise FitError("histogram has no signal above its edge level")
    X, Y = np.meshgrid(hist.centers_x, hist.centers_y, indexing="ij")
    mx = (w * X).sum() / tot
    my = (w * Y).sum() / tot
    bx = hist.edges_x[1] - hist.edges_x[0]
    by = hist.edges_y[1] - hist.edges_y[0]
    sx = math.sqrt(max((w * (X - mx) ** 2).sum() / tot - bx * bx / 12, bx * bx / 12))
    sy = math.sqrt(max((w * (Y - my) ** 2).sum() / tot - by * by / 12, by * by / 12))
    return {"amplitude": float(tot), "center_x": mx, "center_y": my, "sigma_x": sx, "sigma_y": sy, "offset": off}


def fit_gaussian_2d(hist, max_iter=200, tol=1e-8):
    """Poisson-weighted least squares of :func:`gaussian2d_binned` to ``hist``.

    A first pass weights bins by ``sqrt(max(counts, 1))``; a second pass
    re-weights with the first-pass model.  Uncertainties are the square roots
    of the diagonal of ``(J^T J)^-1``.  Raises :class:`FitError` (with the
    moment estimate attached) if the optimiser fails to converge.
    """
    counts = hist.counts.astype(float)
    init = moment_estimate(hist)
    x0 = np.array([init[k] for k in PARAM_NAMES_2D])
    span_x = hist.edges_x[-1] - hist.edges_x[0]
    span_y = hist.edges_y[-1] - hist.edges_y[0]
    bw = min(hist.edges_x[1] - hist.edges_x[0], hist.edges_y[1] - hist.edges_y[0])
    lo = [0.0, hist.edges_x[0], hist.edges_y[0], bw * 1e-3, bw * 1e-3, 0.0]
    hi = [np.inf, hist.edges_x[-1], hist.edges_y[-1], span_x, span_y, np.inf]
    x0 = np.clip(x0, np.array(lo) + 1e-12, np.array(hi) - 1e-12)

    weights = 1.0 / np.sqrt(np.maximum(counts, 1.0))
    res = None
    for _ in range(2):
        def resid(p, w=weights):
            return ((gaussian2d_binned(p, hist.edges_x, hist.edges_y) - counts) * w).ravel()
        res = least_squares(resid, x0, bounds=(lo, hi), method="trf", x_scale="jac",
                            ftol=tol, xtol=tol, gtol=tol, max_nfev=max_iter)
        if res.status <= 0:
            raise FitError(f"2D Gaussian fit did not converge: {res.message}", fallback=init)
        x0 = res.x
        weights = 1.0 / np.sqrt(np.maximum(gaussian2d_binned(res.x, hist.edges_x, hist.edges_y), 1.0))
    J = res.jac
    try:
        cov = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(J.T @ J)
    err = np.sqrt(np.clip(np.diag(cov), 0, None))
    chi2 = float(2 * res.cost)
    return GaussianFit(dict(zip(PARAM_NAMES_2D, map(float, res.x))), dict(zip(PARAM_NAMES_2D, map(float, err))),
                       cov, chi2, int(counts.size - len(x0)), True, res.message)


@dataclass
class ComFit:
    histogram: CoincidenceHistogram
    fit: GaussianFit

    @property
    def sigma_x(self):
        return self.fit.params["sigma_x"]

    @property
    def sigma_y(self):
        return self.fit.params["sigma_y"]

    @property
    def center(self):
        return self.fit.params["center_x"], self.fit.params["center_y"]


def com_histogram_and_fit(frames, half_width=30.0, bin_width=1.0, min_coincidences=1000):
    """Centre-of-mass coincidence histogram and its 2D Gaussian fit."""
    hist = com_histogram(frames, half_width, bin_width)
    if hist.total < min_coincidences:
        raise FitError(f"only {hist.total} coincidences; need at least {min_coincidences}")
    return ComFit(hist, fit_gaussian_2d(hist))


# ---------------------------------------------------------------- ROI-size curve

@dataclass
class RoiSizePoint:
    kappa: float
    p_S: float
    estimate: G2Estimate
    model: float = math.nan
    model_no_noise: float = math.nan
    model_no_noise_full_acceptance: float = math.nan
    tmsv: float = math.nan


def g2_vs_roi_size(frames, sizes, center=(0.0, 0.0), tile=False, model=None):
    """Conjugate-pair g2 and S click probability as the ROI side changes.

    With ``tile`` the field is tiled by ROIs of each size and every tile is
    paired with its mirror; counts are pooled over tiles (each frame-tile a
    trial).  ``model`` may give ``p_mode, n_cells_per_area, eta_S, eta_AS,
    chi_R, sigma, xi_full, fov`` to attach overlays: the noise model, the same
    with no AS noise, the no-noise curve with full acceptance, and the TMSV
    bound at ``pbar = p_S / eta_S``.
    """
    first, batches = _peek(frames)
    if first is None:
        raise EmptyStreamError("frame stream is empty")
    fov = first.meta.get("fov")
    accs = []
    for kappa in sizes:
        if tile:
            if fov is None:
                raise ValueError("tiling needs the field of view")
            accs.append(tiled_conjugate_accumulator(kappa, fov))
        else:
            accs.append(_pair_accumulator(RegionPair.conjugate_of(center, kappa)))
    for b in batches:
        for acc in accs:
            acc.update(b)
    out = []
    for kappa, acc in zip(sizes, accs):
        est = acc.pooled()
        pt = RoiSizePoint(float(kappa), est.p_S, est)
        if model is not None:
            p = model["p_mode"] * model["cells_per_area"] * kappa * kappa
            sig = model["sigma"]
            f = roi_acceptance_xy(kappa, *sig) if np.ndim(sig) else roi_acceptance_f(kappa, sig)
            xi = model["xi_full"] * kappa * kappa / (model["fov"][0] * model["fov"][1])
            args = (model["eta_S"], model["eta_AS"], model["chi_R"])
            pt.model = g2_model(p, *args, f, xi)
            pt.model_no_noise = g2_model(p, *args, f, 0.0)
            pt.model_no_noise_full_acceptance = g2_model(p, *args, 1.0, 0.0)
            if est.p_S > 0:
                pt.tmsv = tmsv_g2(est.p_S / model["eta_S"])
        out.append(pt)
    return out


# ---------------------------------------------------------------- Cauchy-Schwarz and autocorrelation

def cauchy_schwarz_R(g2_SAS, g2_SS, g2_ASAS, err_SAS=0.0, err_SS=0.0, err_ASAS=0.0):
    """``R = g2_SAS^2 / (g2_SS g2_ASAS)`` and its first-order error.

    Arguments may be :class:`G2Estimate` objects, whose ``stderr`` is used.
    """
    vals = []
    for g, e in ((g2_SAS, err_SAS), (g2_SS, err_SS), (g2_ASAS, err_ASAS)):
        if isinstance(g, G2Estimate):
            g, e = g.g2, g.stderr
        if not g > 0:
            raise ValueError("correlation values must be positive")
        vals.append((float(g), float(e)))
    (a, ea), (b, eb), (c, ec) = vals
    R = a * a / (b * c)
    se = R * math.sqrt((2 * ea / a) ** 2 + (eb / b) ** 2 + (ec / c) ** 2)
    return R, se


def autocorrelation_estimate(split_frames, region, arm=Arm.S):
    """Correlation between the two halves of a split arm in the same region.

    ``region`` is ``(center, kappa)`` or a :class:`RegionSet` for pooling over
    several regions (each region paired with itself).
    """
    arm = Arm.parse(arm)
    halves = {Arm.S: (Arm.S1, Arm.S2), Arm.AS: (Arm.AS1, Arm.AS2)}[arm]
    rs = region if isinstance(region, RegionSet) else RegionSet.single(region[0], region[1])
    idx = np.arange(rs.size)
    acc = CorrelationAccumulator(rs, rs, pairs=(idx, idx), arm_s=halves[0], arm_as=halves[1])
    acc.consume(split_frames)
    return acc.pooled()


# ---------------------------------------------------------------- lifetime fit

LIFETIME_PARAMS = ("alpha1", "alpha2", "tau1", "tau2", "omega", "xi")


@dataclass
class LifetimeFit:
    alpha1: float
    alpha2: float
    tau1: float
    tau2: float
    omega: float
    xi: float
    stderr: dict
    covariance: np.ndarray
    free: tuple
    residual_norm: float
    converged: bool
    valid: bool
    tau2_degenerate: bool
    p: float
    eta_AS: float
    f_kappa: float
    K: float | None = None
    decoherence_rate: float | None = None
    message: str = ""

    @property
    def params(self):
        return {k: getattr(self, k) for k in LIFETIME_PARAMS}

    @property
    def beat_period(self):
        return 2 * math.pi / self.omega if self.omega > 0 else math.inf

    def chi(self, t):
        return chi_expr(np.asarray(t, float), self.alpha1, self.alpha2, self.tau1, self.tau2, self.omega)

    def g2(self, t):
        return lifetime_g2(t, self.params, self.p, self.eta_AS, self.f_kappa)

    def p_AS(self, t):
        return self.p * self.eta_AS * self.chi(t) + self.xi


def lifetime_g2(t, params, p, eta_AS, f_kappa):
    """Conjugate-ROI g2 versus storage time with the beating retrieval efficiency."""
    chi = chi_expr(np.asarray(t, float), params["alpha1"], params["alpha2"], params["tau1"], params["tau2"],
                   params["omega"])
    return 1.0 + eta_AS * chi * f_kappa / (p * eta_AS * chi + params["xi"])


def _lifetime_init(t, chi_proxy, fixed):
    t = np.asarray(t, float)
    good = chi_proxy > 0
    tmax = float(t.max()) if t.size else 1.0
    init = {}
    if good.sum() >= 2 and np.ptp(t[good] ** 2) > 0:
        slope, icpt = np.polyfit(t[good] ** 2, np.log(chi_proxy[good]), 1)
    else:
        slope, icpt = 0.0, math.log(max(float(np.mean(chi_proxy)), 1e-6))
    init["tau1"] = 1.0 / math.sqrt(-slope) if slope < 0 else 10 * tmax
    init["alpha1"] = math.exp(icpt / 2)
    init["tau2"] = init["tau1"]
    env = init["alpha1"] ** 2 * np.exp(-t * t / init["tau1"] ** 2)
    resid = chi_proxy - env
    omegas = []
    if "omega" not in fixed and t.size >= 4:
        dt = np.median(np.diff(np.sort(t)))
        span = np.ptp(t)
        if dt > 0 and span > 0:
            grid = np.linspace(2 * math.pi / span, math.pi / dt, 2000)
            power = lombscargle(t, resid - resid.mean(), grid)
            order = np.argsort(power)[::-1]
            for k in order:
                if all(abs(grid[k] - w) > 2 * math.pi / span for w in omegas):
                    omegas.append(float(grid[k]))
                if len(omegas) == 3:
                    break
    omegas = omegas or [fixed.get("omega", 0.0)]
    cands = []
    for w in omegas:
        basis = np.cos(w * t) * np.exp(-t * t / init["tau1"] ** 2)
        amp = float(basis @ resid / max(basis @ basis, 1e-300))
        a2 = abs(amp) / (2 * max(init["alpha1"], 1e-12))
        cands.append(dict(init, omega=w, alpha2=a2))
    return cands


def fit_lifetime(t, g2, g2_err=None, *, p, eta_AS, f_kappa=1.0, p_AS=None, p_AS_err=None, fixed=None,
                 initial=None, K=None, v_thermal=None, max_iter=200, tol=1e-8):
    """Fit the beating retrieval model to g2 (and optionally p_AS) versus storage time.

    ``p`` (mean pairs per ROI), ``eta_AS`` and ``f_kappa`` are known inputs.
    g2 alone only fixes ``xi`` relative to ``alpha^2``; either supply the AS
    click probabilities ``p_AS`` (modelled as ``p eta_AS chi + xi``) or fix
    ``xi``.  ``fixed`` maps parameter names to held values; fixing
    ``alpha2 = 0`` also holds ``tau2`` and ``omega``.  Non-convergence returns
    the best parameters with ``valid = False``.
    """
    t = np.asarray(t, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    fixed = dict(fixed or {})
    if t.size < 6:
        raise ValueError("need at least six time points")
    if p_AS is None and "xi" not in fixed:
        raise ValueError("xi and the amplitudes are degenerate in g2 alone: pass p_AS or fix xi")
    if fixed.get("alpha2", None) == 0.0:
        fixed.setdefault("omega", 0.0)
        fixed.setdefault("tau2", 1.0)
    weighted = g2_err is not None
    g2_err = np.abs(g2 - 1) if g2_err is None else np.asarray(g2_err, float)
    if p_AS is not None:
        p_AS = np.asarray(p_AS, float)
        p_AS_err = np.abs(p_AS) if p_AS_err is None else np.asarray(p_AS_err, float)

    # retrieval-efficiency proxy for the starting point
    if p_AS is not None:
        chi0 = np.clip(p_AS / (p * eta_AS), 1e-12, None)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi_guess = eta_AS * chi0 * (f_kappa / (g2 - 1) - p)
        xi0 = float(np.clip(np.nanmedian(xi_guess), 0, None)) if np.isfinite(xi_guess).any() else 0.0
        xi0 = fixed.get("xi", xi0)
        chi_proxy = np.clip((p_AS - xi0) / (p * eta_AS), 1e-12, None)
    else:
        xi0 = fixed["xi"]
        with np.errstate(divide="ignore", invalid="ignore"):
            chi_proxy = xi0 * (g2 - 1) / (eta_AS * (f_kappa - p * (g2 - 1)))
        chi_proxy = np.where(np.isfinite(chi_proxy) & (chi_proxy > 0), chi_proxy, 1e-12)
    if fixed.get("alpha2", None) == 0.0 and "omega" in fixed:
        starts = [dict(_lifetime_init(t, chi_proxy, fixed)[0], alpha2=0.0)]
    else:
        starts = _lifetime_init(t, chi_proxy, fixed)
    if initial:
        starts = [dict(s, **initial) for s in starts]
    for s in starts:
        s["xi"] = xi0
        s.update(fixed)

    free = tuple(k for k in LIFETIME_PARAMS if k not in fixed)
    lo_all = {"alpha1": 0.0, "alpha2": 0.0, "tau1": 1e-6, "tau2": 1e-6, "omega": 0.0, "xi": 0.0}
    hi_all = {"alpha1": 1.0, "alpha2": 1.0, "tau1": 1e9, "tau2": 1e9, "omega": np.inf, "xi": np.inf}
    lo = np.array([lo_all[k] for k in free])
    hi = np.array([hi_all[k] for k in free])

    def unpack(x):
        d = dict(fixed)
        d.update(zip(free, x))
        return d

    def resid(x):
        d = unpack(x)
        r = (lifetime_g2(t, d, p, eta_AS, f_kappa) - g2) / g2_err
        if p_AS is not None:
            chi = chi_expr(t, d["alpha1"], d["alpha2"], d["tau1"], d["tau2"], d["omega"])
            r = np.r_[r, (p * eta_AS * chi + d["xi"] - p_AS) / p_AS_err]
        return r

    best = None
    for s in starts:
        x0 = np.clip(np.array([s[k] for k in free], float), lo + 1e-12, np.where(np.isfinite(hi), hi - 1e-12, hi))
        res = least_squares(resid, x0, bounds=(lo, hi), method="trf", x_scale="jac", ftol=tol, xtol=tol,
                            gtol=tol, max_nfev=max_iter * (len(free) + 1))
        if best is None or res.cost < best.cost:
            best = res
    J = best.jac
    dof = max(J.shape[0] - J.shape[1], 1)
    try:
        cov = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(J.T @ J)
    if not weighted:
        cov = cov * 2 * best.cost / dof
    err = dict(zip(free, np.sqrt(np.clip(np.diag(cov), 0, None))))
    d = unpack(best.x)
    # a Gaussian decay is symmetric in the sign of tau; report it positive
    d["tau1"], d["tau2"] = abs(d["tau1"]), abs(d["tau2"])
    tau2_deg = ("tau2" not in free or d["alpha2"] == 0
                or not err.get("tau2", np.inf) < 0.25 * d["tau2"]
                or d["tau2"] >= 0.99 * hi_all["tau2"])
    rate = None
    if K is not None:
        rate = decoherence_rate(K, v_thermal) if v_thermal is not None else decoherence_rate(K)
    converged = best.status > 0
    return LifetimeFit(
        alpha1=d["alpha1"], alpha2=d["alpha2"], tau1=d["tau1"], tau2=d["tau2"], omega=d["omega"], xi=d["xi"],
        stderr={k: float(v) for k, v in err.items()}, covariance=cov, free=free,
        residual_norm=float(np.sqrt(2 * best.cost)), converged=converged, valid=converged,
        tau2_degenerate=bool(tau2_deg), p=p, eta_AS=eta_AS, f_kappa=f_kappa, K=K, decoherence_rate=rate,
        message=best.message,
    )


# ---------------------------------------------------------------- region-ensemble uncertainty

@dataclass
class EnsembleResult:
    mean: np.ndarray
    std: np.ndarray
    maps: np.ndarray
    row_centers: np.ndarray
    column_centers: np.ndarray
    kappa: float

    @property
    def diagonal_mean(self):
        return np.diag(self.mean)

    @property
    def diagonal_std(self):
        return np.diag(self.std)


def ensemble_geometry(fov_column, kappa, row_step):
    """Largest row count a column of the given length admits."""
    return int(math.floor((fov_column - kappa) / row_step + 1e-9)) + 1


def region_ensemble_uncertainty(frames, kappa, n_rows=100, n_columns=25, row_step=2.1, column_centers=None,
                                axis="y", fov=None):
    """Mean and spread of g2 maps over conjugate column positions.

    Each column position ``c`` carries ``n_rows`` overlapping regions along
    ``axis`` (step ``row_step``) in the S arm at ``c`` and in the AS arm at
    ``-c``; g2 is computed for every S-row x AS-row combination, giving one
    ``n_rows x n_rows`` map per column.  Rows are ordered so that entry
    ``(i, i)`` is a conjugate pair.  The maps are then averaged over columns and
    their standard deviation reported per cell (overlap correlations are not
    corrected for).
    """
    first, batches = _peek(frames)
    if first is None:
        raise EmptyStreamError("frame stream is empty")
    fov = fov or first.meta.get("fov")
    if fov is None:
        raise ValueError("field of view unknown")
    col_len, cross_len = (fov[1], fov[0]) if axis == "y" else (fov[0], fov[1])
    max_rows = ensemble_geometry(col_len, kappa, row_step)
    if n_rows > max_rows or cross_len < kappa:
        raise RegionError(f"field admits at most {max(max_rows, 0)} rows of side {kappa} at step {row_step} "
                          f"(requested {n_rows}); column centres may range over +-{max(cross_len - kappa, 0) / 2:.4g} "
                          f"(requested {n_columns} columns)")
    rows = (np.arange(n_rows) - (n_rows - 1) / 2.0) * row_step
    if column_centers is None:
        half = (cross_len - kappa) / 2
        column_centers = np.linspace(-half, half, n_columns) if n_columns > 1 else np.zeros(1)
    column_centers = np.asarray(column_centers, float)
    accs = []
    for c in column_centers:
        if axis == "y":
            s = RegionSet([c], rows, kappa)
            a = RegionSet([-c], -rows[::-1], kappa)
        else:
            s = RegionSet(rows, [c], kappa)
            a = RegionSet(-rows[::-1], [-c], kappa)
        accs.append(CorrelationAccumulator(s, a, "full"))
    for b in batches:
        for acc in accs:
            acc.update(b)
    maps = np.stack([conjugate_diagonal(acc.estimate().g2) for acc in accs])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(maps, axis=0)
        std = np.nanstd(maps, axis=0, ddof=1) if len(accs) > 1 else np.zeros_like(mean)
    return EnsembleResult(mean, std, maps, rows, column_centers, float(kappa))
