"""Time the numba kernels against the pure-numpy fallback.

Both paths must produce the same events before anything is timed.  Their
wavevectors may differ in the last bits, because numpy's SIMD log/exp and numba's
libm calls do not round identically.

Run from the repository root::

    python3 benchmarks/bench_backends.py [--frames N] [--runs N] [--repeat K]
"""
import argparse
import math
import time

from wavemux import use_backend
from wavemux.model import DetectionParams, SourceParams
from wavemux.protocol import ProtocolConfig, protocol_ensemble
from wavemux.simulator import SimConfig, simulate


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def bench_simulator(n_frames, repeat):
    cfg = SimConfig(source=SourceParams(p_mode=0.21 / (675 * 0.08)), detection=DetectionParams(dark_rate=0.02),
                    n_frames=n_frames, master_seed=1)
    rows = {}
    outs = {}
    for name in ("numba", "numpy"):
        with use_backend(name):
            simulate(cfg, 0, min(n_frames, 100))  # compile / warm caches
            rows[name], outs[name] = best_of(lambda: simulate(cfg), repeat)
    assert outs["numba"].equals(outs["numpy"], atol=1e-12), "backends disagree"
    return rows, outs["numba"].n_hits


def bench_protocol(n_runs, repeat):
    cfg = ProtocolConfig(n_target=6, p_mode=0.01, M=665, master_seed=2)
    rows = {}
    outs = {}
    for name in ("numba", "numpy"):
        with use_backend(name):
            protocol_ensemble(cfg, 4)
            rows[name], outs[name] = best_of(lambda: protocol_ensemble(cfg, n_runs), repeat)
    for key, a in outs["numba"].runs.items():
        assert (a == outs["numpy"].runs[key]).all(), f"backends disagree on {key}"
    return rows, outs["numba"].trials_total


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=200_000)
    ap.add_argument("--runs", type=int, default=2_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    print(f"{'kernel':<12}{'work':>14}{'numba s':>12}{'numpy s':>12}{'speed-up':>10}")
    sim, hits = bench_simulator(args.frames, args.repeat)
    print(f"{'simulate':<12}{args.frames:>8} frm{sim['numba']:>12.3f}{sim['numpy']:>12.3f}"
          f"{sim['numpy'] / sim['numba']:>10.1f}   ({hits} hits)")
    pro, trials = bench_protocol(args.runs, args.repeat)
    print(f"{'protocol':<12}{args.runs:>8} run{pro['numba']:>12.3f}{pro['numpy']:>12.3f}"
          f"{pro['numpy'] / pro['numba']:>10.1f}   ({trials} trials)")
    return 0 if math.isfinite(sim["numba"]) else 1


if __name__ == "__main__":
    raise SystemExit(main())
