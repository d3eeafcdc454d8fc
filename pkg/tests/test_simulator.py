import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import wavemux.simulator as simmod
from wavemux import use_backend
from wavemux.frames import Arm, FrameBatch, Source
from wavemux.model import DetectionParams, MemoryParams, SourceParams, mode_cell_pitch
from wavemux.simulator import (
    CollectSink, ConfigError, SimConfig, SinkError, build_plan, plan_cells, run_simulation, sample_frame,
    simulate, wollaston_split,
)

ATOL = 1e-12  # numba and numpy transcendental calls may differ in the last bit


def test_cells_tile_the_field():
    (nx, px), (ny, py) = plan_cells(SourceParams())
    assert (nx, ny) == (27, 25)
    assert nx * px == pytest.approx(420.0) and ny * py == pytest.approx(420.0)
    with pytest.raises(ConfigError):
        plan_cells(SourceParams(fov_kappa_x=10.0))


def test_same_seed_same_frames(small_cfg, backend):
    assert simulate(small_cfg).equals(simulate(small_cfg))


def test_different_seed_different_frames(small_cfg):
    other = SimConfig(small_cfg.source, small_cfg.detection, n_frames=small_cfg.n_frames, master_seed=12)
    assert not simulate(small_cfg).equals(simulate(other))


CHUNK_CFG = SimConfig(source=SourceParams(p_mode=0.01), detection=DetectionParams(dark_rate=0.1), n_frames=400,
                      master_seed=21)
CHUNK_REF = {}


@settings(max_examples=20, deadline=None)
@given(cut=st.integers(0, 400), cut2=st.integers(0, 400))
def test_chunking_is_invisible(cut, cut2):
    if "ref" not in CHUNK_REF:
        CHUNK_REF["ref"] = simulate(CHUNK_CFG)
    a, b = sorted((cut, cut2))
    parts = FrameBatch.concat([simulate(CHUNK_CFG, 0, a), simulate(CHUNK_CFG, a, b), simulate(CHUNK_CFG, b, 400)])
    assert CHUNK_REF["ref"].equals(parts)


@pytest.mark.parametrize("i", [0, 7, 399])
def test_single_frame_regeneration(small_cfg, i):
    assert sample_frame(small_cfg, i) == simulate(small_cfg).frame(i)


def _configs():
    return [
        SimConfig(source=SourceParams(p_mode=0.004), detection=DetectionParams(dark_rate=0.3), n_frames=500,
                  master_seed=1),
        SimConfig(source=SourceParams(p_mode=0.3, envelope="gaussian", envelope_width=80.0), n_frames=60,
                  master_seed=2),
        SimConfig(source=SourceParams(p_mode=0.02),
                  memory=MemoryParams(alpha1=0.58, alpha2=0.04, tau1=40.0, tau2=30.0, omega=0.32,
                                      xi_table=((0.0, 0.5), (20.0, 3.0))),
                  storage_times=(0.0, 5.0, 20.0), n_frames=300, master_seed=2 ** 64 - 1),
        SimConfig(source=SourceParams(p_mode=2.0, sigma_x=2.0, sigma_y=9.0, fov_kappa_x=300.0, fov_kappa_y=210.0),
                  detection=DetectionParams(eta_S=1.0, eta_AS=1.0, chi_R0=1.0), n_frames=20, master_seed=9),
    ]


@pytest.mark.parametrize("cfg", _configs())
def test_backends_produce_the_same_events(cfg):
    with use_backend("numba"):
        a = simulate(cfg)
    with use_backend("numpy"):
        b = simulate(cfg)
    assert a.n_hits > 0
    assert a.equals(b, atol=ATOL)


def test_output_growth_path(monkeypatch, small_cfg):
    ref = simulate(small_cfg)
    monkeypatch.setattr(simmod, "_CAPACITY_OVERRIDE", 7)
    with use_backend("numba"):
        assert simulate(small_cfg).equals(ref)


def test_thermal_pair_number_in_one_cell(backend):
    # a field exactly one mode cell wide: pairs per frame follow the Bose-Einstein law
    side = mode_cell_pitch(4.45)
    src = SourceParams(sigma_x=4.45, sigma_y=4.45, fov_kappa_x=side, fov_kappa_y=side, p_mode=0.7)
    cfg = SimConfig(src, DetectionParams(eta_S=1.0, eta_AS=0.0, pixel_pitch=side / 8), n_frames=20000,
                    master_seed=4)
    n = simulate(cfg).counts_per_frame(Arm.S)
    kmax = 8
    obs = np.bincount(np.minimum(n, kmax), minlength=kmax + 1)
    pbar = 0.7
    pmf = pbar ** np.arange(kmax) / (1 + pbar) ** np.arange(1, kmax + 1)
    exp = np.r_[pmf, 1 - pmf.sum()] * n.size
    assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_pair_statistics_over_the_field(lossless_cfg):
    cfg = SimConfig(lossless_cfg.source, lossless_cfg.detection, n_frames=3000, master_seed=5)
    b = simulate(cfg)
    n = b.counts_per_frame(Arm.S)
    mean, var = 675 * 0.01, 675 * 0.01 * 1.01
    assert abs(n.mean() - mean) < 5 * math.sqrt(var / n.size)
    assert n.var(ddof=1) == pytest.approx(var, rel=0.1)


def test_conjugate_sum_width(lossless_cfg):
    b = simulate(lossless_cfg)
    pair = b.source == Source.PAIR
    fr = b.frame_index
    key_s = {(f, p): i for i, (f, p, a) in enumerate(zip(fr, b.pair, b.arm)) if a == Arm.S and pair[i]}
    sx, sy = [], []
    for i, (f, p, a) in enumerate(zip(fr, b.pair, b.arm)):
        if a == Arm.AS and (f, p) in key_s:
            j = key_s[(f, p)]
            sx.append(b.kx[i] + b.kx[j])
            sy.append(b.ky[i] + b.ky[j])
    assert len(sx) > 1500
    assert np.std(sx) == pytest.approx(4.45, rel=0.06)
    assert np.std(sy) == pytest.approx(4.76, rel=0.06)
    assert abs(np.mean(sx)) < 0.5


def test_detection_efficiencies():
    src = SourceParams(p_mode=0.05)
    det = DetectionParams(eta_S=0.3, eta_AS=0.5, chi_R0=0.4, dark_rate=0.0)
    b = simulate(SimConfig(src, det, n_frames=2000, master_seed=8))
    nS = (b.arm == Arm.S).sum()
    nA = (b.arm == Arm.AS).sum()
    pairs = 675 * 0.05 * 2000
    assert nS / pairs == pytest.approx(0.3, rel=0.03)
    # AS photons are also lost past the field edge, a few percent here
    assert 0.9 < nA / (pairs * 0.2) < 1.0


def test_pixels_and_field(small_cfg):
    b = simulate(small_cfg)
    assert np.all((b.kx >= -210) & (b.kx < 210) & (b.ky >= -210) & (b.ky < 210))
    assert np.array_equal(b.px, np.clip(np.floor((b.kx + 210) / 2.1), 0, 199).astype(int))
    assert b.px.min() >= 0 and b.px.max() <= 199


def test_dark_counts_and_noise():
    mem = MemoryParams(xi_table=((0.0, 0.0), (1.0, 2.0)))
    cfg = SimConfig(SourceParams(p_mode=0.0), DetectionParams(dark_rate=0.4), memory=mem,
                    storage_times=(0.0, 1.0), n_frames=4000, master_seed=6)
    b = simulate(cfg)
    dark = b.source == Source.DARK
    noise = b.source == Source.NOISE
    assert dark.sum() / 4000 == pytest.approx(0.4, rel=0.08)
    assert np.all(b.arm[noise] == Arm.AS)
    n_noise = np.bincount(b.frame_index[noise] % 2, minlength=2)
    assert n_noise[0] == 0
    assert n_noise[1] / 2000 == pytest.approx(2.0, rel=0.05)
    assert np.all(b.pair[dark | noise] == -1)


def test_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(n_frames=0)
    with pytest.raises(ConfigError):
        SimConfig(storage_times=(-1.0,))
    with pytest.raises(ValueError):
        SimConfig(master_seed=-1)


def test_frame_range_checks(small_cfg):
    with pytest.raises(ValueError):
        simulate(small_cfg, 10, 5)
    with pytest.raises(ValueError):
        sample_frame(small_cfg, 400)


@pytest.mark.parametrize("workers", [1, 3])
def test_run_simulation_collects_everything(small_cfg, workers):
    sink = CollectSink()
    summary = run_simulation(small_cfg, sink, workers=workers, chunk_frames=37)
    got = sink.result()
    ref = simulate(small_cfg)
    assert got.equals(ref)
    assert summary.n_frames == 400
    assert summary.n_S == int((ref.arm == Arm.S).sum())
    assert summary.mean_S == pytest.approx(summary.n_S / 400)
    assert summary.click_S <= summary.mean_S


class _Failing:
    order_tolerant = False

    def __init__(self, after):
        self.after = after
        self.calls = 0
        self.aborted = None

    def write(self, batch):
        self.calls += 1
        if self.calls > self.after:
            raise OSError("disk full")

    def close(self):
        raise AssertionError("should not close")

    def abort(self, exc):
        self.aborted = exc


def test_sink_failure_is_reported(small_cfg):
    sink = _Failing(after=2)
    with pytest.raises(SinkError) as err:
        run_simulation(small_cfg, sink, chunk_frames=100)
    assert err.value.frames_written == 200
    assert isinstance(sink.aborted, OSError)


def test_wollaston_split(small_cfg):
    b = simulate(SimConfig(small_cfg.source, small_cfg.detection, n_frames=4000, master_seed=1))
    s = wollaston_split(b, Arm.S, 5)
    assert s.equals(wollaston_split(b, "S", 5))
    n1, n2 = (s.arm == Arm.S1).sum(), (s.arm == Arm.S2).sum()
    assert n1 + n2 == (b.arm == Arm.S).sum()
    assert abs(n1 - n2) < 4 * math.sqrt(n1 + n2)
    assert np.array_equal(s.arm[b.arm == Arm.AS], b.arm[b.arm == Arm.AS])
    # coins depend on (seed, frame, hit number), so a slice splits the same way
    part = wollaston_split(b.slice(100, 200), Arm.S, 5)
    assert np.array_equal(part.arm, s.slice(100, 200).arm)
    both = wollaston_split(s, Arm.AS, 5)
    assert set(np.unique(both.arm)) <= {int(a) for a in (Arm.S1, Arm.S2, Arm.AS1, Arm.AS2)}
    with pytest.raises(ValueError):
        wollaston_split(b, Arm.S1, 5)


def test_wollaston_split_frame(small_cfg):
    fr = simulate(small_cfg).frame(3)
    a, c = wollaston_split(fr, Arm.S, 1)
    assert a.index == c.index == 3
    assert len(a.hits) + len(c.hits) == fr.count(Arm.S)


def test_plan_noise_tables():
    mem = MemoryParams(xi_table=((0.0, 0.0), (10.0, 5.0)))
    plan = build_plan(SimConfig(memory=mem, storage_times=(0.0, 10.0)))
    assert plan.noise.shape[0] == 2
    assert plan.noise_len[0] == 1 and plan.noise_len[1] > 20
    assert plan.noise[1, plan.noise_len[1] - 1] == 1.0
