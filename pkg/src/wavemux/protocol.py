"""Multiplexed multi-photon generation: heralded writes, a wavevector registry, routed readout.

One run repeats write trials.  In each trial every one of ``M`` mode cells
receives a thermal number of pairs; each pair's S photon is detected with
probability ``eta_S`` and a detection registers the cell together with its
spin-wave wavevector.  A later herald in an already registered cell
overwrites it (counted as a double occupancy).  Trials stop once the
registry holds ``n_target`` cells or ``max_trials`` is reached.  All
registered excitations are then read out together: each survives with the
retrieval efficiency at its own storage age, the switch transmission and
``eta_AS``.

With ``hidden_excitations`` on, pairs whose S photon was lost still leave a
spin wave behind; in a registered cell they are read out with it and add
background photons.
"""
import concurrent.futures
import math
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from ._accel import njit
from .model import MemoryParams, chi_expr, chi_expr_nb
from .rng import (MAX_TRIAL, P_PROTO_HERALD, P_PROTO_JITTER, P_PROTO_OCCUPANCY, P_PROTO_READOUT, seed_key,
                  uniform2, uniform2_np)

CHI_CONSTANT = 0
CHI_MEMORY = 1
CHI_WAVEVECTOR = 2


@dataclass(frozen=True)
class ProtocolConfig:
    n_target: int = 1
    p_mode: float = 0.01
    M: int = 665
    eta_S: float = 0.08
    eta_AS: float = 0.08
    chi_R0: float = 0.35
    memory: MemoryParams | None = None
    trial_period: float = 1.0
    max_trials: int = 100000
    switch_loss: float = 0.0
    master_seed: int = 0
    hidden_excitations: bool = True
    fov_kappa: float = 420.0
    k_w: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.n_target < 1:
            raise ValueError("n_target must be at least 1")
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if not (self.p_mode >= 0 and math.isfinite(self.p_mode)):
            raise ValueError("p_mode must be finite and non-negative")
        for name in ("eta_S", "eta_AS", "chi_R0", "switch_loss"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.trial_period > 0:
            raise ValueError("trial_period must be positive")
        if not 1 <= self.max_trials <= MAX_TRIAL:
            raise ValueError(f"max_trials must lie in [1, {MAX_TRIAL}]")
        if not self.fov_kappa > 0:
            raise ValueError("fov_kappa must be positive")
        seed_key(self.master_seed)


@dataclass(frozen=True)
class StoredExcitation:
    K: tuple
    birth_trial: int
    mode_cell: int
    count: int = 1


@dataclass
class ProtocolResult:
    trials_used: int
    registry_size: int
    n_out: int
    heralds: int
    pairs: int
    double_occupancy: int
    multi_pair_events: int
    complete: bool
    registry: list = field(default_factory=list)

    @property
    def success(self):
        return self.complete and self.n_out == self.registry_size


def _chi_setup(cfg):
    m = cfg.memory
    if m is None:
        return CHI_CONSTANT, cfg.chi_R0, 0.0, 1.0, 1.0, 0.0, 1.0
    mode = CHI_WAVEVECTOR if m.wavevector_decay else CHI_MEMORY
    return mode, m.alpha1, m.alpha2, m.tau1, m.tau2, m.omega, m.v_thermal


def _grid(cfg):
    side = int(math.ceil(math.sqrt(cfg.M)))
    return side, cfg.fov_kappa / side


@njit
def _chi_at(mode, age, kx, ky, a1, a2, t1, t2, om, v):
    if mode == 0:
        return a1
    if mode == 1:
        return chi_expr_nb(age, a1, a2, t1, t2, om)
    kk = math.sqrt(kx * kx + ky * ky) * v
    tau = math.inf if kk == 0.0 else 1.0 / kk
    return chi_expr_nb(age, a1, a2, tau, tau, om)


@njit
def _kernel_numba(k0, k1, r0, r1, M, q, logq, log1m_q, eta_s, eta_as, loss, n_target, max_trials,
                  period, hidden, side, pitch, half, kwx, kwy, chi_mode, a1, a2, t1, t2, om, v,
                  o_trials, o_reg, o_out, o_her, o_pairs, o_dbl, o_multi, o_done,
                  reg, birth, nexc, kx, ky):
    for run in range(r0, r1):
        o = run - r0
        for c in range(M):
            reg[c] = 0
            nexc[c] = 0
        n_reg = 0
        her = 0
        pairs = 0
        dbl = 0
        multi = 0
        trial = 0
        done = False
        while trial < max_trials:
            if q > 0.0:
                pos = -1
                r = 0
                j = 0
                purp_o = (trial << 8) | P_PROTO_OCCUPANCY
                purp_h = (trial << 8) | P_PROTO_HERALD
                purp_j = (trial << 8) | P_PROTO_JITTER
                while True:
                    ug, un = uniform2(k0, k1, r, purp_o, run)
                    step = np.floor(math.log(ug) / log1m_q) + 1.0
                    if pos + step >= M:
                        break
                    pos += int(step)
                    n = 1 + int(np.floor(math.log(un) / logq))
                    h = 0
                    for _ in range(n):
                        uh, _u = uniform2(k0, k1, j, purp_h, run)
                        if uh < eta_s:
                            h += 1
                        j += 1
                    pairs += n
                    her += h
                    if n >= 2:
                        multi += 1
                    if h > 0:
                        if reg[pos]:
                            dbl += 1
                        else:
                            n_reg += 1
                        reg[pos] = 1
                        birth[pos] = trial
                        nexc[pos] = n if hidden else h
                        ux, uy = uniform2(k0, k1, r, purp_j, run)
                        kx[pos] = -half + ((pos % side) + ux) * pitch - kwx
                        ky[pos] = -half + ((pos // side) + uy) * pitch - kwy
                    elif hidden and reg[pos]:
                        nexc[pos] += n
                    r += 1
            trial += 1
            if n_reg >= n_target:
                done = True
                break
        last = trial - 1
        out = 0
        e = 0
        for c in range(M):
            if reg[c]:
                age = (last - birth[c]) * period
                p_keep = _chi_at(chi_mode, age, kx[c], ky[c], a1, a2, t1, t2, om, v) * (1.0 - loss) * eta_as
                for _ in range(nexc[c]):
                    u, _u = uniform2(k0, k1, e, P_PROTO_READOUT, run)
                    if u < p_keep:
                        out += 1
                    e += 1
        o_trials[o] = trial
        o_reg[o] = n_reg
        o_out[o] = out
        o_her[o] = her
        o_pairs[o] = pairs
        o_dbl[o] = dbl
        o_multi[o] = multi
        o_done[o] = done


def _params(cfg):
    q = cfg.p_mode / (1.0 + cfg.p_mode)
    with np.errstate(divide="ignore"):
        logq = math.log(q) if q > 0 else -math.inf
    log1m_q = math.log1p(-q) if q < 1 else -math.inf
    side, pitch = _grid(cfg)
    k0, k1 = seed_key(cfg.master_seed)
    return dict(k0=np.uint64(k0), k1=np.uint64(k1), q=q, logq=logq, log1m_q=log1m_q, side=side, pitch=pitch)


_OUT_NAMES = ("trials_used", "registry_size", "n_out", "heralds", "pairs", "double_occupancy",
              "multi_pair_events", "complete")


def _run_numba(cfg, r0, r1):
    P = _params(cfg)
    n = r1 - r0
    outs = [np.zeros(n, np.int64) for _ in range(7)] + [np.zeros(n, np.bool_)]
    M = cfg.M
    state = (np.zeros(M, np.uint8), np.zeros(M, np.int64), np.zeros(M, np.int64), np.zeros(M), np.zeros(M))
    _kernel_numba(P["k0"], P["k1"], r0, r1, M, P["q"], P["logq"], P["log1m_q"], cfg.eta_S, cfg.eta_AS,
                  cfg.switch_loss, cfg.n_target, cfg.max_trials, cfg.trial_period, cfg.hidden_excitations,
                  P["side"], P["pitch"], cfg.fov_kappa / 2, float(cfg.k_w[0]), float(cfg.k_w[1]),
                  *_chi_setup(cfg), *outs, *state)
    return dict(zip(_OUT_NAMES, outs))


def _chi_np(cfg, age, kx, ky):
    mode, a1, a2, t1, t2, om, v = _chi_setup(cfg)
    if mode == CHI_CONSTANT:
        return np.full(age.shape, a1)
    if mode == CHI_MEMORY:
        return chi_expr(age, a1, a2, t1, t2, om)
    kk = np.sqrt(kx * kx + ky * ky) * v
    with np.errstate(divide="ignore"):
        tau = np.where(kk == 0.0, np.inf, 1.0 / np.where(kk == 0.0, 1.0, kk))
    return chi_expr(age, a1, a2, tau, tau, om)


def _cumcount(group):
    if group.size == 0:
        return group.astype(np.int64)
    starts = np.r_[0, np.flatnonzero(np.diff(group)) + 1]
    lengths = np.diff(np.r_[starts, group.size])
    return np.arange(group.size) - np.repeat(starts, lengths)


def _run_numpy(cfg, r0, r1):
    P = _params(cfg)
    k0, k1 = P["k0"], P["k1"]
    M = cfg.M
    runs = np.arange(r0, r1, dtype=np.int64)
    n = runs.size
    reg = np.zeros((n, M), dtype=bool)
    birth = np.zeros((n, M), dtype=np.int64)
    nexc = np.zeros((n, M), dtype=np.int64)
    kx = np.zeros((n, M))
    ky = np.zeros((n, M))
    res = {k: np.zeros(n, np.int64) for k in _OUT_NAMES[:-1]}
    res["complete"] = np.zeros(n, bool)
    active = np.arange(n)
    trial = 0
    while active.size and trial < cfg.max_trials:
        if P["q"] > 0.0:
            pos = np.full(active.size, -1, np.int64)
            live = np.arange(active.size)
            sl_a, sl_r, sl_c, sl_u = [], [], [], []
            r = 0
            while live.size:
                ug, un = uniform2_np(k0, k1, r, (trial << 8) | P_PROTO_OCCUPANCY, runs[active[live]])
                step = np.floor(np.log(ug) / P["log1m_q"]) + 1.0
                keep = pos[live] + step < M
                live = live[keep]
                pos[live] += step[keep].astype(np.int64)
                sl_a.append(active[live])
                sl_r.append(np.full(live.size, r, np.int64))
                sl_c.append(pos[live].copy())
                sl_u.append(un[keep])
                r += 1
            a = np.concatenate(sl_a)
            rr = np.concatenate(sl_r)
            cell = np.concatenate(sl_c)
            un = np.concatenate(sl_u)
            order = np.lexsort((rr, a))
            a, rr, cell, un = a[order], rr[order], cell[order], un[order]
            npairs = 1 + np.floor(np.log(un) / P["logq"]).astype(np.int64)
            slot = np.repeat(np.arange(a.size), npairs)
            j = _cumcount(np.repeat(a, npairs))
            uh, _ = uniform2_np(k0, k1, j, (trial << 8) | P_PROTO_HERALD, runs[a[slot]])
            h = np.bincount(slot, weights=(uh < cfg.eta_S), minlength=a.size).astype(np.int64)
            np.add.at(res["pairs"], a, npairs)
            np.add.at(res["heralds"], a, h)
            np.add.at(res["multi_pair_events"], a, (npairs >= 2).astype(np.int64))
            hh = h > 0
            ah, ch, rh = a[hh], cell[hh], rr[hh]
            was = reg[ah, ch]
            np.add.at(res["double_occupancy"], ah, was.astype(np.int64))
            np.add.at(res["registry_size"], ah, (~was).astype(np.int64))
            reg[ah, ch] = True
            birth[ah, ch] = trial
            nexc[ah, ch] = npairs[hh] if cfg.hidden_excitations else h[hh]
            ux, uy = uniform2_np(k0, k1, rh, (trial << 8) | P_PROTO_JITTER, runs[ah])
            half = cfg.fov_kappa / 2
            kx[ah, ch] = -half + ((ch % P["side"]) + ux) * P["pitch"] - float(cfg.k_w[0])
            ky[ah, ch] = -half + ((ch // P["side"]) + uy) * P["pitch"] - float(cfg.k_w[1])
            if cfg.hidden_excitations:
                hid = ~hh
                ahd, chd = a[hid], cell[hid]
                on = reg[ahd, chd]
                nexc[ahd[on], chd[on]] += npairs[hid][on]
        trial += 1
        res["trials_used"][active] = trial
        stop = res["registry_size"][active] >= cfg.n_target
        res["complete"][active[stop]] = True
        active = active[~stop]

    # simultaneous readout
    ri, ci = np.nonzero(reg)
    last = res["trials_used"][ri] - 1
    age = (last - birth[ri, ci]) * cfg.trial_period
    p_keep = _chi_np(cfg, age.astype(float), kx[ri, ci], ky[ri, ci]) * (1.0 - cfg.switch_loss) * cfg.eta_AS
    cnt = nexc[ri, ci]
    er = np.repeat(ri, cnt)
    e = _cumcount(er)
    u, _ = uniform2_np(k0, k1, e, P_PROTO_READOUT, runs[er])
    kept = u < np.repeat(p_keep, cnt)
    res["n_out"] = np.bincount(er, weights=kept, minlength=n).astype(np.int64)
    return res


def _run_block(cfg, r0, r1):
    if _accel.backend() == "numba":
        return _run_numba(cfg, r0, r1)
    return _run_numpy(cfg, r0, r1)


def run_protocol(cfg, run_index=0, with_registry=False):
    """One protocol run.  ``with_registry`` also returns the stored excitations."""
    out = _run_block(cfg, run_index, run_index + 1)
    res = ProtocolResult(**{k: (bool(out[k][0]) if k == "complete" else int(out[k][0])) for k in _OUT_NAMES})
    if with_registry:
        res.registry = registry_of_run(cfg, run_index)
    return res


def registry_of_run(cfg, run_index=0):
    """Replay one run with the numpy path and list its registry at readout."""
    P = _params(cfg)
    k0, k1 = P["k0"], P["k1"]
    reg = {}
    n_reg = 0
    trial = 0
    while trial < cfg.max_trials and n_reg < cfg.n_target:
        if P["q"] > 0:
            pos, r, j = -1, 0, 0
            while True:
                ug, un = uniform2_np(k0, k1, r, (trial << 8) | P_PROTO_OCCUPANCY, run_index)
                step = float(np.floor(np.log(ug) / P["log1m_q"]) + 1.0)
                if pos + step >= cfg.M:
                    break
                pos += int(step)
                n = 1 + int(np.floor(np.log(un) / P["logq"]))
                uh, _ = uniform2_np(k0, k1, np.arange(j, j + n), (trial << 8) | P_PROTO_HERALD, run_index)
                j += n
                h = int((uh < cfg.eta_S).sum())
                if h:
                    if pos not in reg:
                        n_reg += 1
                    ux, uy = uniform2_np(k0, k1, r, (trial << 8) | P_PROTO_JITTER, run_index)
                    half = cfg.fov_kappa / 2
                    K = (float(-half + ((pos % P["side"]) + ux) * P["pitch"] - cfg.k_w[0]),
                         float(-half + ((pos // P["side"]) + uy) * P["pitch"] - cfg.k_w[1]))
                    reg[pos] = StoredExcitation(K, trial, pos, n if cfg.hidden_excitations else h)
                elif cfg.hidden_excitations and pos in reg:
                    old = reg[pos]
                    reg[pos] = StoredExcitation(old.K, old.birth_trial, pos, old.count + n)
                r += 1
        trial += 1
    return [reg[c] for c in sorted(reg)]


@dataclass
class ProtocolEnsemble:
    config: ProtocolConfig
    runs: dict

    @property
    def n_runs(self):
        return len(self.runs["n_out"])

    def distribution(self):
        """Normalised output photon-number histogram (index = photon number)."""
        return np.bincount(self.runs["n_out"]) / self.n_runs

    @property
    def mean(self):
        return float(np.mean(self.runs["n_out"]))

    def mean_ci(self, z=1.96):
        n = self.n_runs
        sd = float(np.std(self.runs["n_out"], ddof=1)) if n > 1 else 0.0
        half = z * sd / math.sqrt(n)
        return self.mean - half, self.mean + half

    def success_probability(self, n=None):
        """Probability that a run stopped normally and delivered exactly ``n`` photons (default ``n_target``)."""
        n = self.config.n_target if n is None else n
        ok = self.runs["complete"] & (self.runs["n_out"] == n)
        return float(np.mean(ok))

    def conditional_probability(self, n):
        """``P(n_out = n | registry = n)`` with its binomial standard error and the number of runs used."""
        sel = self.runs["registry_size"] == n
        k = int(sel.sum())
        if k == 0:
            return math.nan, math.nan, 0
        p = float(np.mean(self.runs["n_out"][sel] == n))
        return p, math.sqrt(p * (1 - p) / k), k

    @property
    def trials_total(self):
        return int(self.runs["trials_used"].sum())

    @property
    def mean_trials(self):
        return float(np.mean(self.runs["trials_used"]))

    @property
    def heralds_per_trial(self):
        return self.runs["heralds"].sum() / self.trials_total

    @property
    def pairs_per_trial(self):
        return self.runs["pairs"].sum() / self.trials_total

    @property
    def multi_pair_rate(self):
        """Fraction of (cell, trial) slots holding two or more pairs."""
        return self.runs["multi_pair_events"].sum() / (self.trials_total * self.config.M)

    @property
    def double_occupancy_rate(self):
        return self.runs["double_occupancy"].sum() / (self.trials_total * self.config.M)

    @property
    def complete_fraction(self):
        return float(np.mean(self.runs["complete"]))

    def summary(self):
        lo, hi = self.mean_ci()
        return {
            "n_runs": self.n_runs, "n_target": self.config.n_target, "mean_out": self.mean,
            "mean_out_ci_low": lo, "mean_out_ci_high": hi, "success_probability": self.success_probability(),
            "mean_trials": self.mean_trials, "heralds_per_trial": self.heralds_per_trial,
            "pairs_per_trial": self.pairs_per_trial, "multi_pair_rate": self.multi_pair_rate,
            "double_occupancy_rate": self.double_occupancy_rate, "complete_fraction": self.complete_fraction,
        }


def protocol_ensemble(cfg, n_runs, workers=1, block=4096):
    """Independent runs ``0 .. n_runs-1``; identical for any worker count."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    blocks = [(a, min(a + block, n_runs)) for a in range(0, n_runs, block)]
    if workers > 1 and len(blocks) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ab: _run_block(cfg, *ab), blocks))
    else:
        parts = [_run_block(cfg, a, b) for a, b in blocks]
    runs = {k: np.concatenate([p[k] for p in parts]) for k in _OUT_NAMES}
    return ProtocolEnsemble(cfg, runs)
