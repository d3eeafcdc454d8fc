"""Monte Carlo camera-frame generator for the multimode pair source.

The field of view is tiled by independent mode cells.  Each cell emits a
thermally distributed number of pairs per frame; the S photon lands uniformly
inside its cell and the AS partner at the mirrored position plus a Gaussian
deviate of width ``sigma`` per axis.  Losses, retrieval, dark counts and AS
noise are then applied and the surviving photons quantised to pixels.

All randomness comes from :mod:`wavemux.rng`, keyed by the master seed and
indexed by frame, so a frame's content does not depend on which worker made
it or in which order.  Two kernels implement the same stream: a numba loop
(``_kernel_numba``) and a vectorised numpy path (``_run_numpy``).
"""
import concurrent.futures
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import poisson

from . import _accel
from ._accel import njit
from .frames import Arm, FrameBatch
from .model import (DetectionParams, MemoryParams, SourceParams, chi_R_of_t,
                    mode_cell_pitch)
from .rng import (P_ACCEPT, P_COUNTS, P_DARK_AS_POS, P_DARK_S_POS, P_NOISE_COUNT, P_NOISE_POS,
                  P_OCCUPANCY, P_PAIR_DETECT, P_PAIR_GAUSS, P_PAIR_JITTER, P_SPLIT_AS, P_SPLIT_S,
                  seed_key, uniform2, uniform2_np)

DEFAULT_CHUNK = 65536
# tests shrink this to exercise the grow-and-resume path
_CAPACITY_OVERRIDE = None
_TWO_PI = 2.0 * math.pi


class ConfigError(ValueError):
    pass


class SinkError(RuntimeError):
    """Raised when a sink fails; ``frames_written`` says how far output got."""

    def __init__(self, message, frames_written):
        super().__init__(message)
        self.frames_written = frames_written


@dataclass(frozen=True)
class SimConfig:
    source: SourceParams = field(default_factory=SourceParams)
    detection: DetectionParams = field(default_factory=DetectionParams)
    memory: MemoryParams | None = None
    n_frames: int = 1
    storage_times: tuple = (0.0,)
    master_seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ConfigError("n_frames must be at least 1")
        times = tuple(float(t) for t in np.atleast_1d(self.storage_times))
        if not times or any(not (t >= 0 and math.isfinite(t)) for t in times):
            raise ConfigError("storage times must be finite and non-negative")
        object.__setattr__(self, "storage_times", times)
        seed_key(self.master_seed)
        plan_cells(self.source)

    def storage_time(self, frame_index):
        return self.storage_times[frame_index % len(self.storage_times)]


def plan_cells(source):
    """Cells per axis and their pitch.

    The nominal pitch ``2 sigma / 0.565`` is adjusted so a whole number of
    cells tiles the field exactly.
    """
    out = []
    for sigma, fov in ((source.sigma_x, source.fov_kappa_x), (source.sigma_y, source.fov_kappa_y)):
        delta = mode_cell_pitch(sigma)
        if delta > fov:
            raise ConfigError(f"mode cell pitch {delta:.4g} exceeds field of view {fov:.4g}")
        n = max(1, int(round(fov / delta)))
        out.append((n, fov / n))
    return out


def _poisson_table(mean):
    """CDF table for inverse-transform Poisson sampling (count = #entries <= u)."""
    if mean <= 0:
        return np.array([1.0])
    kmax = int(mean + 12.0 * math.sqrt(mean) + 20)
    cdf = poisson.cdf(np.arange(kmax + 1), mean)
    cdf[-1] = 1.0
    return cdf


@dataclass
class _Plan:
    k0: np.uint64
    k1: np.uint64
    ncx: int
    ncy: int
    cdx: float
    cdy: float
    hx: float
    hy: float
    qc: np.ndarray
    logq: np.ndarray
    q_max: float
    log1m_qmax: float
    sigx: float
    sigy: float
    eta_s: float
    chi_eta: np.ndarray
    dark_s: np.ndarray
    dark_as: np.ndarray
    noise: np.ndarray
    noise_len: np.ndarray
    pitch: float
    npx: int
    npy: int
    times: np.ndarray


def build_plan(cfg):
    src, det = cfg.source, cfg.detection
    (ncx, cdx), (ncy, cdy) = plan_cells(src)
    hx, hy = src.fov_kappa_x / 2.0, src.fov_kappa_y / 2.0
    # per-cell mean pair number
    if src.envelope == "gaussian" and src.p_mode > 0:
        cx = -hx + (np.arange(ncx) + 0.5) * cdx
        cy = -hy + (np.arange(ncy) + 0.5) * cdy
        r2 = cy[:, None] ** 2 + cx[None, :] ** 2
        pbar = (src.p_mode * np.exp(-r2 / (2.0 * src.envelope_width ** 2))).ravel()
    else:
        pbar = np.full(ncx * ncy, float(src.p_mode))
    qc = pbar / (1.0 + pbar)
    q_max = float(qc.max()) if qc.size else 0.0
    with np.errstate(divide="ignore"):
        logq = np.log(qc)
    log1m_qmax = math.log1p(-q_max) if q_max < 1 else -math.inf

    times = np.asarray(cfg.storage_times, dtype=float)
    if cfg.memory is not None:
        chi = np.atleast_1d(chi_R_of_t(times, cfg.memory))
        xi = np.atleast_1d(cfg.memory.xi(times))
    else:
        chi = np.full(len(times), det.chi_R0)
        xi = np.zeros(len(times))
    tables = [_poisson_table(x) for x in xi]
    width = max(len(t) for t in tables)
    noise = np.ones((len(tables), width))
    for i, t in enumerate(tables):
        noise[i, :len(t)] = t
    npx, npy = det.sensor_shape(src.fov_kappa_x, src.fov_kappa_y)
    k0, k1 = seed_key(cfg.master_seed)
    return _Plan(
        k0=np.uint64(k0), k1=np.uint64(k1), ncx=ncx, ncy=ncy, cdx=cdx, cdy=cdy, hx=hx, hy=hy,
        qc=qc, logq=logq, q_max=q_max, log1m_qmax=log1m_qmax,
        sigx=src.sigma_x, sigy=src.sigma_y, eta_s=det.eta_S, chi_eta=chi * det.eta_AS,
        dark_s=_poisson_table(det.dark_rate / 2.0), dark_as=_poisson_table(det.dark_rate / 2.0),
        noise=noise, noise_len=np.array([len(t) for t in tables], dtype=np.int64),
        pitch=det.pixel_pitch, npx=npx, npy=npy, times=times,
    )


@njit
def _count_from_cdf(cdf, n, u):
    k = 0
    while k < n and cdf[k] <= u:
        k += 1
    return k


@njit
def _pixel(k, h, pitch, npix):
    p = int(math.floor((k + h) / pitch))
    if p < 0:
        return 0
    if p >= npix:
        return npix - 1
    return p


@njit
def _kernel_numba(k0, k1, f0, f1, ncx, ncy, cdx, cdy, hx, hy, qc, logq, q_max, log1m_qmax,
                  sigx, sigy, eta_s, chi_eta, dark_s, dark_as, noise, noise_len, pitch, npx, npy,
                  ptr, o_arm, o_kx, o_ky, o_px, o_py, o_src, o_pair, o_cell, n_start):
    """Fill frames ``[f0, f1)``.  Returns ``(next_frame, n_hits)``; ``next_frame < f1``
    means the output arrays ran out and that frame must be redone after growing them."""
    n = n_start
    cap = o_arm.shape[0]
    ncell = ncx * ncy
    nsched = chi_eta.shape[0]
    fx = 2.0 * hx
    fy = 2.0 * hy
    for f in range(f0, f1):
        n_frame = n
        s = f % nsched
        ce = chi_eta[s]
        j = 0
        if q_max > 0.0:
            pos = -1
            r = 0
            while True:
                ug, un = uniform2(k0, k1, r, P_OCCUPANCY, f)
                step = np.floor(math.log(ug) / log1m_qmax) + 1.0
                if pos + step >= ncell:
                    break
                pos += int(step)
                accept = True
                if qc[pos] < q_max:
                    ua, _ = uniform2(k0, k1, r, P_ACCEPT, f)
                    accept = ua * q_max < qc[pos]
                if accept:
                    npairs = 1 + int(np.floor(math.log(un) / logq[pos]))
                    ix = pos % ncx
                    iy = pos // ncx
                    for _ in range(npairs):
                        ujx, ujy = uniform2(k0, k1, j, P_PAIR_JITTER, f)
                        ug1, ug2 = uniform2(k0, k1, j, P_PAIR_GAUSS, f)
                        uds, uda = uniform2(k0, k1, j, P_PAIR_DETECT, f)
                        kxs = -hx + (ix + ujx) * cdx
                        kys = -hy + (iy + ujy) * cdy
                        rad = math.sqrt(-2.0 * math.log(ug1))
                        ang = _TWO_PI * ug2
                        kxa = -kxs + sigx * rad * math.cos(ang)
                        kya = -kys + sigy * rad * math.sin(ang)
                        if uds < eta_s:
                            if n >= cap:
                                return f, n_frame
                            o_arm[n] = 0
                            o_kx[n] = kxs
                            o_ky[n] = kys
                            o_px[n] = _pixel(kxs, hx, pitch, npx)
                            o_py[n] = _pixel(kys, hy, pitch, npy)
                            o_src[n] = 0
                            o_pair[n] = j
                            o_cell[n] = pos
                            n += 1
                        if uda < ce and -hx <= kxa and kxa < hx and -hy <= kya and kya < hy:
                            if n >= cap:
                                return f, n_frame
                            o_arm[n] = 1
                            o_kx[n] = kxa
                            o_ky[n] = kya
                            o_px[n] = _pixel(kxa, hx, pitch, npx)
                            o_py[n] = _pixel(kya, hy, pitch, npy)
                            o_src[n] = 0
                            o_pair[n] = j
                            o_cell[n] = pos
                            n += 1
                        j += 1
                r += 1
        uc_s, uc_a = uniform2(k0, k1, 0, P_COUNTS, f)
        un_, _ = uniform2(k0, k1, 0, P_NOISE_COUNT, f)
        n_ds = _count_from_cdf(dark_s, dark_s.shape[0], uc_s)
        n_da = _count_from_cdf(dark_as, dark_as.shape[0], uc_a)
        n_no = _count_from_cdf(noise[s], noise_len[s], un_)
        for group in range(3):
            if group == 0:
                cnt = n_ds
                purpose = P_DARK_S_POS
                arm = 0
                srcv = 1
            elif group == 1:
                cnt = n_da
                purpose = P_DARK_AS_POS
                arm = 1
                srcv = 1
            else:
                cnt = n_no
                purpose = P_NOISE_POS
                arm = 1
                srcv = 2
            for i in range(cnt):
                if n >= cap:
                    return f, n_frame
                ux, uy = uniform2(k0, k1, i, purpose, f)
                kx = -hx + ux * fx
                ky = -hy + uy * fy
                o_arm[n] = arm
                o_kx[n] = kx
                o_ky[n] = ky
                o_px[n] = _pixel(kx, hx, pitch, npx)
                o_py[n] = _pixel(ky, hy, pitch, npy)
                o_src[n] = srcv
                o_pair[n] = -1
                o_cell[n] = -1
                n += 1
        ptr[f - f0 + 1] = n
    return f1, n


def _run_numba(plan, f0, f1):
    nf = f1 - f0
    ptr = np.zeros(nf + 1, dtype=np.int64)
    # start near the expected size; grow on overflow
    expect = nf * (2.0 * float(np.sum(plan.qc / np.maximum(1 - plan.qc, 1e-300)))
                   + plan.dark_s.size + plan.noise.shape[1]) + 64
    cap = int(min(max(expect, 1024), 5e8)) if _CAPACITY_OVERRIDE is None else _CAPACITY_OVERRIDE
    cols = _alloc(cap)
    start, n = f0, 0
    while True:
        start, n = _kernel_numba(
            plan.k0, plan.k1, start, f1, plan.ncx, plan.ncy, plan.cdx, plan.cdy, plan.hx, plan.hy,
            plan.qc, plan.logq, plan.q_max, plan.log1m_qmax, plan.sigx, plan.sigy, plan.eta_s,
            plan.chi_eta, plan.dark_s, plan.dark_as, plan.noise, plan.noise_len, plan.pitch,
            plan.npx, plan.npy, ptr[start - f0:], *cols, n)
        if start >= f1:
            break
        cols = [np.concatenate([c, np.empty_like(c)]) for c in cols]
    return ptr, [c[:n] for c in cols]


def _alloc(cap):
    return [np.empty(cap, np.int8), np.empty(cap), np.empty(cap), np.empty(cap, np.int32),
            np.empty(cap, np.int32), np.empty(cap, np.int8), np.empty(cap, np.int32), np.empty(cap, np.int32)]


def _cumcount(group):
    """Running index within each run of equal (sorted) ``group`` values."""
    if group.size == 0:
        return group.astype(np.int64)
    starts = np.r_[0, np.flatnonzero(np.diff(group)) + 1]
    lengths = np.diff(np.r_[starts, group.size])
    return np.arange(group.size) - np.repeat(starts, lengths)


def _pixels_np(k, h, pitch, npix):
    return np.clip(np.floor((k + h) / pitch), 0, npix - 1).astype(np.int32)


def _run_numpy(plan, f0, f1):
    k0, k1 = plan.k0, plan.k1
    frames = np.arange(f0, f1, dtype=np.int64)
    nsched = len(plan.chi_eta)
    parts = []  # (frame, group, sub, arm, kx, ky, src, pair, cell)

    if plan.q_max > 0.0 and frames.size:
        ncell = plan.ncx * plan.ncy
        pos = np.full(frames.size, -1, dtype=np.int64)
        active = np.arange(frames.size)
        sl_f, sl_r, sl_cell, sl_un = [], [], [], []
        r = 0
        while active.size:
            ug, un = uniform2_np(k0, k1, r, P_OCCUPANCY, frames[active])
            step = np.floor(np.log(ug) / plan.log1m_qmax) + 1.0
            newpos = pos[active] + step
            keep = newpos < ncell
            active = active[keep]
            pos[active] += step[keep].astype(np.int64)
            sl_f.append(active)
            sl_r.append(np.full(active.size, r, dtype=np.int64))
            sl_cell.append(pos[active].copy())
            sl_un.append(un[keep])
            r += 1
        lf = np.concatenate(sl_f)
        rr = np.concatenate(sl_r)
        cell = np.concatenate(sl_cell)
        un = np.concatenate(sl_un)
        order = np.lexsort((rr, lf))
        lf, rr, cell, un = lf[order], rr[order], cell[order], un[order]
        accept = np.ones(lf.size, dtype=bool)
        thin = plan.qc[cell] < plan.q_max
        if thin.any():
            ua, _ = uniform2_np(k0, k1, rr[thin], P_ACCEPT, frames[lf[thin]])
            accept[thin] = ua * plan.q_max < plan.qc[cell[thin]]
        lf, cell, un = lf[accept], cell[accept], un[accept]
        npairs = 1 + np.floor(np.log(un) / plan.logq[cell]).astype(np.int64)
        pf = np.repeat(lf, npairs)
        pcell = np.repeat(cell, npairs)
        j = _cumcount(pf)
        fabs = frames[pf]
        ujx, ujy = uniform2_np(k0, k1, j, P_PAIR_JITTER, fabs)
        ug1, ug2 = uniform2_np(k0, k1, j, P_PAIR_GAUSS, fabs)
        uds, uda = uniform2_np(k0, k1, j, P_PAIR_DETECT, fabs)
        ix = (pcell % plan.ncx).astype(np.float64)
        iy = (pcell // plan.ncx).astype(np.float64)
        kxs = -plan.hx + (ix + ujx) * plan.cdx
        kys = -plan.hy + (iy + ujy) * plan.cdy
        rad = np.sqrt(-2.0 * np.log(ug1))
        ang = _TWO_PI * ug2
        kxa = -kxs + plan.sigx * rad * np.cos(ang)
        kya = -kys + plan.sigy * rad * np.sin(ang)
        ds = uds < plan.eta_s
        ce = plan.chi_eta[fabs % nsched]
        da = (uda < ce) & (-plan.hx <= kxa) & (kxa < plan.hx) & (-plan.hy <= kya) & (kya < plan.hy)
        parts.append((pf[ds], 0, j[ds], 0, kxs[ds], kys[ds], 0, j[ds], pcell[ds]))
        parts.append((pf[da], 0, j[da], 1, kxa[da], kya[da], 0, j[da], pcell[da]))

    uc_s, uc_a = uniform2_np(k0, k1, 0, P_COUNTS, frames)
    un_, _ = uniform2_np(k0, k1, 0, P_NOISE_COUNT, frames)
    n_ds = np.searchsorted(plan.dark_s, uc_s, side="right")
    n_da = np.searchsorted(plan.dark_as, uc_a, side="right")
    sched = frames % nsched
    n_no = np.zeros(frames.size, dtype=np.int64)
    for s in range(nsched):
        m = sched == s
        n_no[m] = np.searchsorted(plan.noise[s, :plan.noise_len[s]], un_[m], side="right")
    for group, (cnt, purpose, arm, srcv) in enumerate(
            ((n_ds, P_DARK_S_POS, 0, 1), (n_da, P_DARK_AS_POS, 1, 1), (n_no, P_NOISE_POS, 1, 2)), start=1):
        lf = np.repeat(np.arange(frames.size), cnt)
        i = _cumcount(lf)
        ux, uy = uniform2_np(k0, k1, i, purpose, frames[lf])
        kx = -plan.hx + ux * (2.0 * plan.hx)
        ky = -plan.hy + uy * (2.0 * plan.hy)
        parts.append((lf, group, i, arm, kx, ky, srcv, np.full(lf.size, -1), np.full(lf.size, -1)))

    def cat(idx, dtype):
        return np.concatenate([np.broadcast_to(np.asarray(p[idx], dtype=dtype), p[0].shape) for p in parts])

    lf = cat(0, np.int64)
    grp = cat(1, np.int64)
    sub = cat(2, np.int64)
    arm = cat(3, np.int8)
    order = np.lexsort((arm, sub, grp, lf))
    lf = lf[order]
    kx = cat(4, np.float64)[order]
    ky = cat(5, np.float64)[order]
    cols = [arm[order], kx, ky, _pixels_np(kx, plan.hx, plan.pitch, plan.npx),
            _pixels_np(ky, plan.hy, plan.pitch, plan.npy), cat(6, np.int8)[order],
            cat(7, np.int32)[order], cat(8, np.int32)[order]]
    ptr = np.zeros(frames.size + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(np.bincount(lf, minlength=frames.size))
    return ptr, cols


def _meta(cfg, plan):
    return {"fov": (2 * plan.hx, 2 * plan.hy), "pitch": plan.pitch, "sensor": (plan.npx, plan.npy),
            "seed": cfg.master_seed, "cells": (plan.ncx, plan.ncy)}


def simulate(cfg, start=0, stop=None, plan=None):
    """Frames ``[start, stop)`` of the run as one :class:`FrameBatch`."""
    stop = cfg.n_frames if stop is None else stop
    if not 0 <= start <= stop <= cfg.n_frames:
        raise ValueError(f"frame range [{start}, {stop}) outside run of {cfg.n_frames} frames")
    plan = build_plan(cfg) if plan is None else plan
    runner = _run_numba if _accel.backend() == "numba" else _run_numpy
    ptr, cols = runner(plan, start, stop)
    names = ("arm", "kx", "ky", "px", "py", "source", "pair", "cell")
    times = plan.times[np.arange(start, stop) % len(plan.times)]
    return FrameBatch(first_frame=start, ptr=ptr, storage_time=times, meta=_meta(cfg, plan),
                      **dict(zip(names, cols)))


def sample_frame(cfg, frame_index):
    """Regenerate a single frame on its own."""
    if not 0 <= frame_index < cfg.n_frames:
        raise ValueError(f"frame_index {frame_index} outside [0, {cfg.n_frames})")
    return simulate(cfg, frame_index, frame_index + 1).frame(0)


@dataclass
class RunSummary:
    n_frames: int
    n_S: int
    n_AS: int
    frames_with_S: int
    frames_with_AS: int
    sumsq_S: int
    sumsq_AS: int
    complete: bool = True

    def _mean(self, total):
        return total / self.n_frames if self.n_frames else math.nan

    @property
    def mean_S(self):
        """Mean S detections per frame over the full field (the ``p_S`` of the model)."""
        return self._mean(self.n_S)

    @property
    def mean_AS(self):
        return self._mean(self.n_AS)

    def _se(self, total, sumsq):
        n = self.n_frames
        if n < 2:
            return math.nan
        var = (sumsq - total * total / n) / (n - 1)
        return math.sqrt(max(var, 0.0) / n)

    @property
    def se_mean_S(self):
        return self._se(self.n_S, self.sumsq_S)

    @property
    def se_mean_AS(self):
        return self._se(self.n_AS, self.sumsq_AS)

    @property
    def click_S(self):
        return self._mean(self.frames_with_S)

    @property
    def click_AS(self):
        return self._mean(self.frames_with_AS)

    def add(self, batch):
        cs = batch.counts_per_frame(Arm.S)
        ca = batch.counts_per_frame(Arm.AS)
        self.n_frames += batch.n_frames
        self.n_S += int(cs.sum())
        self.n_AS += int(ca.sum())
        self.frames_with_S += int(np.count_nonzero(cs))
        self.frames_with_AS += int(np.count_nonzero(ca))
        self.sumsq_S += int((cs * cs).sum())
        self.sumsq_AS += int((ca * ca).sum())

    def as_dict(self):
        return {"n_frames": self.n_frames, "n_S": self.n_S, "n_AS": self.n_AS,
                "mean_S": self.mean_S, "se_mean_S": self.se_mean_S,
                "mean_AS": self.mean_AS, "se_mean_AS": self.se_mean_AS,
                "click_S": self.click_S, "click_AS": self.click_AS, "complete": self.complete}


class CollectSink:
    """Keeps every batch in memory; accepts out-of-order delivery."""

    order_tolerant = True

    def __init__(self):
        self.batches = []

    def write(self, batch):
        self.batches.append(batch)

    def close(self):
        pass

    def abort(self, exc):
        pass

    def result(self):
        return FrameBatch.concat(self.batches)


def _chunks(n, size):
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def run_simulation(cfg, sink=None, workers=1, chunk_frames=DEFAULT_CHUNK):
    """Generate the whole run and deliver it to ``sink`` in chunks.

    Chunks are delivered in frame order unless ``sink.order_tolerant`` is set.
    A failing sink aborts the run: ``sink.abort`` is called so it can mark its
    output partial, and :class:`SinkError` is raised.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    plan = build_plan(cfg)
    summary = RunSummary(0, 0, 0, 0, 0, 0, 0)
    chunks = _chunks(cfg.n_frames, max(1, int(chunk_frames)))
    tolerant = bool(getattr(sink, "order_tolerant", False))
    written = 0

    def deliver(batch):
        nonlocal written
        if sink is not None:
            try:
                sink.write(batch)
            except Exception as exc:
                sink.abort(exc)
                raise SinkError(f"sink failed after {written} frames: {exc}", written) from exc
        written += batch.n_frames
        summary.add(batch)

    if workers == 1:
        for a, b in chunks:
            deliver(simulate(cfg, a, b, plan))
    else:
        pending = {}
        next_start = 0
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(simulate, cfg, a, b, plan) for a, b in chunks]
            try:
                for fut in concurrent.futures.as_completed(futs):
                    batch = fut.result()
                    if tolerant:
                        deliver(batch)
                        continue
                    pending[batch.first_frame] = batch
                    while next_start in pending:
                        ready = pending.pop(next_start)
                        next_start += ready.n_frames
                        deliver(ready)
            except BaseException:
                for f in futs:
                    f.cancel()
                raise
    if sink is not None:
        sink.close()
    return summary


def wollaston_split(batch, arm, seed):
    """Send every hit of ``arm`` to sub-arm 1 or 2 with probability 1/2.

    Returns a new batch in which those hits are relabelled ``S1``/``S2`` (or
    ``AS1``/``AS2``); hits of the other arm are untouched.  The coin for the
    ``i``-th ``arm`` hit of frame ``f`` depends only on ``(seed, f, i)``.
    Accepts a :class:`Frame` too, in which case two frames are returned.
    """
    from .frames import Frame

    arm = Arm.parse(arm)
    if arm not in (Arm.S, Arm.AS):
        raise ValueError("only the S or AS arm can be split")
    if isinstance(batch, Frame):
        fb = FrameBatch.from_frames([batch])
        out = wollaston_split(fb, arm, seed).frame(0)
        subs = (Arm.S1, Arm.S2) if arm == Arm.S else (Arm.AS1, Arm.AS2)
        first = Frame(out.index, out.storage_time, [h for h in out.hits if h.arm == subs[0]])
        second = Frame(out.index, out.storage_time, [h for h in out.hits if h.arm == subs[1]])
        return first, second
    k0, k1 = seed_key(seed)
    sel = batch.arm == int(arm)
    frames = batch.frame_index[sel]
    i = _cumcount(frames)
    purpose = P_SPLIT_S if arm == Arm.S else P_SPLIT_AS
    u, _ = uniform2_np(np.uint64(k0), np.uint64(k1), i, purpose, frames)
    lo, hi = (Arm.S1, Arm.S2) if arm == Arm.S else (Arm.AS1, Arm.AS2)
    new_arm = batch.arm.copy()
    new_arm[sel] = np.where(u < 0.5, int(lo), int(hi)).astype(np.int8)
    out = FrameBatch(first_frame=batch.first_frame, ptr=batch.ptr.copy(), arm=new_arm, kx=batch.kx,
                     ky=batch.ky, px=batch.px, py=batch.py, source=batch.source, pair=batch.pair,
                     cell=batch.cell, storage_time=batch.storage_time, meta=dict(batch.meta))
    return out
