"""Command-line front end.

Exit codes: 0 success, 1 usage, 2 configuration/schema, 3 data integrity.
"""
import argparse
import math
import os
import sys

import numpy as np

from . import analysis as an
from . import config as cf
from .frameio import FrameFileSink, FrameFormatError, iter_frame_file, read_header
from .frames import Arm, FrameBatch
from .model import chi_R_of_t, roi_acceptance_xy
from .protocol import protocol_ensemble
from .schmidt import modes_for_axis, total_mode_number, write_spectrum
from .simulator import SinkError, build_plan, plan_cells, run_simulation, simulate, wollaston_split
from .tables import columns_to_rows, fmt, write_report, write_table

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _common(p, needs_config=True):
    p.add_argument("--config", required=needs_config, help="TOML run configuration")
    p.add_argument("--out", default=None, help="output directory (default: [output] dir)")
    p.add_argument("--seed", type=int, default=None, help="master seed override (unsigned 64-bit)")
    p.add_argument("--workers", type=int, default=1, help="worker threads")
    p.add_argument("--frames", type=int, default=None, help="frame count override")


def build_parser():
    parser = _Parser(prog="wavemux", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a frame-stream file")
    _common(p)

    p = sub.add_parser("analyze", help="analysis products from a frame-stream file")
    _common(p)
    p.add_argument("frames_file", help="frame-stream file written by simulate")

    p = sub.add_parser("modes", help="Schmidt mode numbers")
    _common(p, needs_config=False)
    p.add_argument("--sigma-x", type=float, default=None)
    p.add_argument("--sigma-y", type=float, default=None)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--n", type=int, default=None, help="grid points per axis")

    p = sub.add_parser("fit-lifetime", help="fit g2 versus storage time")
    _common(p)
    p.add_argument("data", nargs="?", default=None, help="table with columns t,g2,g2_err[,p_AS,p_AS_err]")

    p = sub.add_parser("protocol", help="multiplexed generation protocol ensemble")
    _common(p)
    p.add_argument("--runs", type=int, default=None, help="number of protocol runs")

    p = sub.add_parser("report", help="simulate in memory and write every analysis table")
    _common(p)
    return parser


# ---------------------------------------------------------------- helpers

def _load(args):
    cfg = cf.load(args.config) if args.config else cf.normalise({"schema_version": cf.SCHEMA_VERSION})
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        raise UsageError("--seed must be an unsigned 64-bit integer")
    if args.frames is not None and args.frames < 1:
        raise UsageError("--frames must be at least 1")
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    return cf.apply_overrides(cfg, seed=args.seed, frames=args.frames)


def _outdir(args, cfg):
    d = args.out or cfg["output"]["dir"]
    os.makedirs(d, exist_ok=True)
    return d


def _meta(cfg, **extra):
    m = {"config_digest": cf.digest(cfg)}
    m.update(extra)
    return m


def _model_overlay(cfg):
    s, d = cfg["source"], cfg["detection"]
    (ncx, _), (ncy, _) = plan_cells(cf.sim_config(cfg).source)
    fov = (s["fov_kappa_x"], s["fov_kappa_y"])
    mem = cf.memory_params(cfg)
    t0 = cfg["simulation"]["storage_times"][0]
    chi = chi_R_of_t(t0, mem) if mem else d["chi_R0"]
    xi = float(mem.xi(t0)) if mem else 0.0
    return {"p_mode": s["p_mode"], "cells_per_area": ncx * ncy / (fov[0] * fov[1]), "eta_S": d["eta_S"],
            "eta_AS": d["eta_AS"], "chi_R": chi, "sigma": (s["sigma_x"], s["sigma_y"]),
            "xi_full": xi + d["dark_rate"] / 2, "fov": fov}


# ---------------------------------------------------------------- analysis products

def _run_products(cfg, frames_fn, out, meta):
    """``frames_fn()`` returns a fresh iterable of batches each time it is called."""
    a = cfg["analysis"]
    written = []
    first = next(iter(frames_fn()), None)
    if first is None or first.n_frames == 0:
        raise an.EmptyStreamError("no data: the frame stream holds no frames")
    fov = first.meta.get("fov") or (cfg["source"]["fov_kappa_x"], cfg["source"]["fov_kappa_y"])
    center = tuple(a["roi_center"])
    for product in a["products"]:
        if product == "coincidences":
            pair = an.RegionPair.conjugate_of(center, a["roi_kappa"])
            c = an.count_coincidences(frames_fn(), pair)
            est = an.g2_from_counts(c.n_frames, c.n_S, c.n_AS, c.n_SAS, strict=False)
            path = os.path.join(out, "coincidences.txt")
            write_report(path, {"n_frames": c.n_frames, "n_S": c.n_S, "n_AS": c.n_AS, "n_SAS": c.n_SAS,
                                "p_S": c.p_S, "p_AS": c.p_AS, "p_SAS": c.p_SAS, "g2": est.g2,
                                "g2_stderr": est.stderr}, dict(meta, roi_center=center, roi_kappa=a["roi_kappa"]))
        elif product == "com":
            hist = an.HistogramAccumulator("com", *(2 * [an.uniform_edges(-a["com_half_width"], a["com_half_width"],
                                                                          a["com_bin"])]))
            for b in frames_fn():
                hist.update(b)
            h = hist.result()
            fit_meta = {}
            try:
                fit = an.fit_gaussian_2d(h)
                fit_meta = {f"fit_{k}": v for k, v in fit.params.items()}
                fit_meta.update({f"fit_{k}_err": v for k, v in fit.errors.items()})
                write_report(os.path.join(out, "com_fit.txt"),
                             dict(fit.params, **{f"{k}_err": v for k, v in fit.errors.items()},
                                  chi2=fit.chi2, dof=fit.dof, covariance=fit.covariance), meta)
            except an.FitError as exc:
                fit_meta = {"fit_error": str(exc).replace("\n", " ")}
                if exc.fallback:
                    fit_meta.update({f"moment_{k}": v for k, v in exc.fallback.items()})
            X, Y = np.meshgrid(h.centers_x, h.centers_y, indexing="ij")
            path = os.path.join(out, "com_histogram.txt")
            write_table(path, ["sum_kx", "sum_ky", "counts"], columns_to_rows(X, Y, h.counts),
                        dict(meta, axes="kx_S+kx_AS,ky_S+ky_AS", edges_x=h.edges_x, edges_y=h.edges_y,
                             n_outside=h.n_outside, total=h.total, **fit_meta))
        elif product in ("map_x", "map_y"):
            axis = product[-1]
            F = fov[0] if axis == "x" else fov[1]
            n = int(math.ceil(F / a["map_bin"] - 1e-9))
            edges = -n * a["map_bin"] / 2 + a["map_bin"] * np.arange(n + 1)
            acc = an.HistogramAccumulator(axis, edges, edges)
            for b in frames_fn():
                acc.update(b)
            h = acc.result()
            X, Y = np.meshgrid(h.centers_x, h.centers_y, indexing="ij")
            path = os.path.join(out, f"coincidence_map_{axis}.txt")
            write_table(path, [f"k{axis}_S", f"k{axis}_AS", "counts"], columns_to_rows(X, Y, h.counts),
                        dict(meta, axes=f"k{axis}_S,k{axis}_AS", edges=edges, n_outside=h.n_outside, total=h.total))
        elif product == "g2_map":
            k = a["g2_map_kappa"]
            n = int(math.floor(fov[1] / k + 1e-9))
            rows = (np.arange(n) - (n - 1) / 2) * k
            s_set = an.RegionSet([center[0]], rows, k)
            as_set = an.RegionSet([-center[0]], -rows[::-1], k)
            m = an.g2_map(frames_fn(), s_set, as_set)
            e = m.estimate
            g = an.conjugate_diagonal(e.g2)
            se = an.conjugate_diagonal(e.stderr)
            I, J = np.meshgrid(rows, rows, indexing="ij")
            path = os.path.join(out, "g2_map.txt")
            write_table(path, ["ky_S", "ky_AS_mirrored", "g2", "stderr"], columns_to_rows(I, -J, g, se),
                        dict(meta, kappa=k, column_kx_S=center[0], note="AS row is the mirror of ky_AS_mirrored"))
        elif product == "roi_curve":
            pts = an.g2_vs_roi_size(frames_fn(), a["roi_sizes"], center=center, tile=a["tile_rois"],
                                    model=_model_overlay(cfg))
            path = os.path.join(out, "g2_vs_roi.txt")
            write_table(path, ["kappa", "p_S", "p_AS", "g2", "stderr", "model", "model_no_noise",
                               "model_no_noise_full_acceptance", "tmsv"],
                        [(p.kappa, p.p_S, p.estimate.p_AS, p.estimate.g2, p.estimate.stderr, p.model,
                          p.model_no_noise, p.model_no_noise_full_acceptance, p.tmsv) for p in pts],
                        dict(meta, tiled=a["tile_rois"]))
        elif product == "ensemble":
            res = an.region_ensemble_uncertainty(frames_fn(), a["roi_kappa"], n_rows=a["ensemble_rows"],
                                                 n_columns=a["ensemble_columns"], row_step=a["ensemble_row_step"],
                                                 fov=fov)
            I, J = np.meshgrid(res.row_centers, res.row_centers, indexing="ij")
            path = os.path.join(out, "g2_ensemble.txt")
            write_table(path, ["ky_S", "ky_AS_mirrored", "mean", "std"], columns_to_rows(I, -J, res.mean, res.std),
                        dict(meta, kappa=res.kappa, columns=len(res.column_centers)))
        elif product == "autocorr":
            rs = an.RegionSet.tiling(a["roi_kappa"], fov)
            idx = np.arange(rs.size)
            conj = rs.conjugate()
            acc_ss = an.CorrelationAccumulator(rs, rs, (idx, idx), Arm.S1, Arm.S2)
            acc_aa = an.CorrelationAccumulator(conj, conj, (idx, idx), Arm.AS1, Arm.AS2)
            acc_sa = an.CorrelationAccumulator(rs, conj, (idx, rs.size - 1 - idx), (Arm.S1, Arm.S2),
                                               (Arm.AS1, Arm.AS2))
            seed = a["split_seed"]
            for b in frames_fn():
                sb = wollaston_split(wollaston_split(b, Arm.S, seed), Arm.AS, seed)
                for acc in (acc_ss, acc_aa, acc_sa):
                    acc.update(sb)
            gss, gaa, gsa = acc_ss.pooled(), acc_aa.pooled(), acc_sa.pooled()
            try:
                R, Rse = an.cauchy_schwarz_R(gsa, gss, gaa)
            except ValueError:
                R, Rse = math.nan, math.nan  # a zero correlation leaves R undefined
            path = os.path.join(out, "cauchy_schwarz.txt")
            write_report(path, {"g2_SAS": gsa.g2, "g2_SAS_err": gsa.stderr, "g2_SS": gss.g2,
                                "g2_SS_err": gss.stderr, "g2_ASAS": gaa.g2, "g2_ASAS_err": gaa.stderr,
                                "R": R, "R_err": Rse, "regions": rs.size}, dict(meta, kappa=a["roi_kappa"]))
        written.append(path)
    return written


# ---------------------------------------------------------------- commands

def cmd_simulate(args):
    cfg = _load(args)
    sim = cf.sim_config(cfg)
    out = _outdir(args, cfg)
    d = cf.digest(cfg)
    path = os.path.join(out, "frames.txt")
    sink = FrameFileSink(path, d, (sim.source.fov_kappa_x, sim.source.fov_kappa_y), sim.detection.pixel_pitch,
                         sim.n_frames, provenance=cfg["simulation"]["provenance"],
                         extra_header={"storage_times": fmt(list(sim.storage_times)),
                                       "master_seed": sim.master_seed})
    summary = run_simulation(sim, sink, workers=args.workers, chunk_frames=cfg["simulation"]["chunk_frames"])
    write_report(os.path.join(out, "summary.txt"), summary.as_dict(), {"config_digest": d})
    print(f"frames={summary.n_frames} mean_S={fmt(summary.mean_S)} mean_AS={fmt(summary.mean_AS)} -> {path}")
    return EXIT_OK


def cmd_analyze(args):
    cfg = _load(args)
    out = _outdir(args, cfg)
    if not os.path.exists(args.frames_file):
        raise UsageError(f"no such frame file: {args.frames_file}")
    if os.path.getsize(args.frames_file) == 0:
        raise an.EmptyStreamError(f"no data: {args.frames_file} is empty")
    hdr = read_header(args.frames_file)
    meta = _meta(cfg, frames_digest=hdr.get("config_digest", "unknown"))

    def frames_fn():
        return iter_frame_file(args.frames_file)

    for p in _run_products(cfg, frames_fn, out, meta):
        print(p)
    return EXIT_OK


def cmd_modes(args):
    cfg = _load(args)
    m = cfg["modes"]
    sx = args.sigma_x if args.sigma_x is not None else m["sigma_x"]
    sy = args.sigma_y if args.sigma_y is not None else m["sigma_y"]
    kappa = args.kappa if args.kappa is not None else m["kappa"]
    n = args.n if args.n is not None else m["n"]
    for v, name in ((sx, "sigma-x"), (sy, "sigma-y"), (kappa, "kappa")):
        if not v > 0:
            raise UsageError(f"--{name} must be positive")
    if n < 2:
        raise UsageError("--n must be at least 2")
    rx = modes_for_axis(sx, kappa, n)
    ry = modes_for_axis(sy, kappa, n)
    M = total_mode_number(rx.M, ry.M)
    print(f"M_x={rx.M:.4f} M_y={ry.M:.4f} M={M:.2f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        meta = {"sigma_x": sx, "sigma_y": sy, "kappa": kappa, "n": n}
        write_report(os.path.join(args.out, "modes.txt"), {"M_x": rx.M, "M_y": ry.M, "M": M}, meta)
        write_spectrum(rx, os.path.join(args.out, "spectrum_x.txt"))
        write_spectrum(ry, os.path.join(args.out, "spectrum_y.txt"))
    return EXIT_OK


def cmd_fit_lifetime(args):
    cfg = _load(args)
    lt = cfg["lifetime"]
    data = args.data or lt.get("data")
    if not data:
        raise UsageError("no lifetime data table given")
    if "p" not in lt or "eta_AS" not in lt:
        raise cf.ConfigSchemaError(["lifetime: p and eta_AS are required"])
    from .tables import read_table
    try:
        _, cols, arr = read_table(data)
    except (OSError, ValueError) as exc:
        raise FrameFormatError(f"cannot read {data}: {exc}") from exc
    if not cols or "t" not in cols or "g2" not in cols:
        raise FrameFormatError(f"{data}: needs columns t and g2")
    col = {c: arr[:, i] for i, c in enumerate(cols)}
    fit = an.fit_lifetime(col["t"], col["g2"], col.get("g2_err"), p=lt["p"], eta_AS=lt["eta_AS"],
                          f_kappa=lt["f_kappa"], p_AS=col.get("p_AS"), p_AS_err=col.get("p_AS_err"),
                          fixed=lt["fixed"], K=lt.get("K"))
    out = _outdir(args, cfg)
    vals = dict(fit.params, **{f"{k}_err": v for k, v in fit.stderr.items()}, beat_period=fit.beat_period,
                residual_norm=fit.residual_norm, converged=fit.converged, valid=fit.valid,
                tau2_degenerate=fit.tau2_degenerate, free=",".join(fit.free), covariance=fit.covariance)
    if fit.decoherence_rate is not None:
        vals["decoherence_rate"] = fit.decoherence_rate
    write_report(os.path.join(out, "lifetime_fit.txt"), vals, _meta(cfg))
    print(f"T={fmt(fit.beat_period)} alpha1={fmt(fit.alpha1)} alpha2={fmt(fit.alpha2)} valid={fit.valid}")
    return EXIT_OK


def cmd_protocol(args):
    cfg = _load(args)
    pc = cf.protocol_config(cfg)
    n_runs = args.runs if args.runs is not None else cfg["protocol"]["n_runs"]
    if n_runs < 1:
        raise UsageError("--runs must be at least 1")
    ens = protocol_ensemble(pc, n_runs, workers=args.workers)
    out = _outdir(args, cfg)
    meta = _meta(cfg)
    summ = ens.summary()
    for n in range(1, pc.n_target + 1):
        p, se, k = ens.conditional_probability(n)
        summ[f"P_out_eq_{n}_given_registry_{n}"] = p
        summ[f"P_out_eq_{n}_given_registry_{n}_err"] = se
    write_report(os.path.join(out, "protocol.txt"), summ, meta)
    dist = ens.distribution()
    write_table(os.path.join(out, "protocol_distribution.txt"), ["n", "probability"],
                list(zip(range(len(dist)), dist)), meta)
    print(f"mean_out={fmt(ens.mean)} success={fmt(ens.success_probability())} "
          f"pairs_per_trial={fmt(ens.pairs_per_trial)} heralds_per_trial={fmt(ens.heralds_per_trial)}")
    return EXIT_OK


def cmd_report(args):
    cfg = _load(args)
    sim = cf.sim_config(cfg)
    out = _outdir(args, cfg)
    chunk = cfg["simulation"]["chunk_frames"]
    summary = run_simulation(sim, None, workers=args.workers, chunk_frames=chunk)
    meta = _meta(cfg)
    write_report(os.path.join(out, "summary.txt"), summary.as_dict(), meta)
    plan = build_plan(sim)

    def frames_fn():
        # frames depend only on (seed, index): regenerate per pass instead of holding the run in memory
        for a in range(0, sim.n_frames, chunk):
            yield simulate(sim, a, min(a + chunk, sim.n_frames), plan)

    for p in _run_products(cfg, frames_fn, out, meta):
        print(p)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "analyze": cmd_analyze, "modes": cmd_modes, "fit-lifetime": cmd_fit_lifetime,
            "protocol": cmd_protocol, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"wavemux: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except cf.ConfigSchemaError as exc:
        print(f"wavemux: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FrameFormatError, an.EmptyStreamError, SinkError) as exc:
        print(f"wavemux: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"wavemux: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
