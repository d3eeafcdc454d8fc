import os
import shutil
import subprocess

import numpy as np
import pytest

from wavemux import analysis as an
from wavemux.cli import main
from wavemux.model import chi_expr
from wavemux.tables import read_table, write_table

from conftest import PRESETS

SMALL = """schema_version = 1
[source]
p_mode = 0.0038888888888888888
[detection]
dark_rate = 0.02
[simulation]
n_frames = {frames}
master_seed = 11
chunk_frames = 64
[analysis]
products = ["coincidences", "com", "map_x", "map_y", "g2_map", "roi_curve"]
roi_sizes = [21.0, 42.0]
"""


def _cfg(tmp_path, text=None, frames=300, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text if text is not None else SMALL.format(frames=frames))
    return str(p)


def _report_values(path):
    vals = {}
    for line in open(path):
        if line.startswith("#") or "=" not in line:
            continue
        k, v = line.split("=", 1)
        vals[k.strip()] = v.strip()
    return vals


def _frame_lines(path):
    return [l for l in open(path) if not l.startswith("#")]


def test_simulate_writes_requested_frames(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    out = tmp_path / "o"
    assert main(["simulate", "--config", cfg, "--out", str(out), "--frames", "10"]) == 0
    lines = _frame_lines(out / "frames.txt")
    assert sorted({int(l.split(",")[0]) for l in lines}) == list(range(10))
    assert "# end frames=10" in open(out / "frames.txt").read()
    assert "frames=10" in capsys.readouterr().out


def test_simulate_is_reproducible_across_runs_and_workers(tmp_path):
    cfg = _cfg(tmp_path)
    outs = []
    for i, w in enumerate((1, 1, 4)):
        d = tmp_path / f"o{i}"
        assert main(["simulate", "--config", cfg, "--out", str(d), "--workers", str(w)]) == 0
        outs.append((d / "frames.txt").read_bytes())
    assert outs[0] == outs[1] == outs[2]
    d = tmp_path / "other"
    main(["simulate", "--config", cfg, "--out", str(d), "--seed", "12"])
    assert (d / "frames.txt").read_bytes() != outs[0]


def test_analyze_matches_in_memory_report(tmp_path):
    cfg = _cfg(tmp_path, frames=2000)
    a, r = tmp_path / "a", tmp_path / "r"
    assert main(["simulate", "--config", cfg, "--out", str(a)]) == 0
    assert main(["analyze", "--config", cfg, "--out", str(a), str(a / "frames.txt")]) == 0
    assert main(["report", "--config", cfg, "--out", str(r)]) == 0
    for name in ("coincidences.txt", "com_histogram.txt", "coincidence_map_x.txt", "coincidence_map_y.txt",
                 "g2_map.txt", "g2_vs_roi.txt"):
        fa = [l for l in open(a / name) if not l.startswith("# frames_digest")]
        fr = open(r / name).readlines()
        assert fa == fr, name
    meta, cols, rows = read_table(a / "g2_vs_roi.txt")
    assert cols[0] == "kappa" and rows.shape == (2, 9)
    assert f"# config_digest={meta['config_digest']}\n" in open(a / "summary.txt").readlines()
    assert "frames_digest" in read_table(a / "com_histogram.txt")[0]


def test_outputs_carry_config_digest(tmp_path):
    cfg = _cfg(tmp_path)
    out = tmp_path / "o"
    main(["report", "--config", cfg, "--out", str(out)])
    digests = {read_table(out / f)[0]["config_digest"] for f in ("com_histogram.txt", "g2_map.txt")}
    digests.add(open(out / "coincidences.txt").readline().strip().split("=", 1)[1])
    assert len(digests) == 1 and len(digests.pop()) == 64


@pytest.mark.parametrize("sx,kappa,lo,hi", [(10.0, 10.0, 1.0, 1.6), (4.45, 420.0, 26.6, 26.85)])
def test_modes_command(sx, kappa, lo, hi, capsys, tmp_path):
    out = tmp_path / "m"
    assert main(["modes", "--sigma-x", str(sx), "--sigma-y", str(sx), "--kappa", str(kappa), "--n", "1024",
                 "--out", str(out)]) == 0
    Mx = float(capsys.readouterr().out.split()[0].split("=")[1])
    assert lo <= Mx <= hi
    assert float(_report_values(out / "modes.txt")["M_x"]) == pytest.approx(Mx, abs=1e-4)
    assert (out / "spectrum_x.txt").exists()


def test_modes_rejects_bad_numbers(capsys):
    assert main(["modes", "--kappa", "-1"]) == 1
    assert main(["modes", "--n", "1"]) == 1


def test_analyze_empty_file(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert main(["analyze", "--config", cfg, "--out", str(tmp_path / "o"), str(empty)]) == 3
    assert "no data" in capsys.readouterr().err


def test_analyze_file_without_frames(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    f = tmp_path / "f.txt"
    f.write_text("# wavemux-frames 1\n# n_frames=0\n# columns=frame_index,arm,kx,ky,px,py\n# end frames=0\n")
    assert main(["analyze", "--config", cfg, "--out", str(tmp_path / "o"), str(f)]) == 3
    assert "no data" in capsys.readouterr().err


def test_analyze_malformed_file_reports_line(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    out = tmp_path / "o"
    main(["simulate", "--config", cfg, "--out", str(out), "--frames", "20"])
    lines = open(out / "frames.txt").read().splitlines()
    lines[9] = "3,S,notanumber,0.0,1,1"
    bad = tmp_path / "bad.txt"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["analyze", "--config", cfg, "--out", str(out), str(bad)]) == 3
    assert "line 10" in capsys.readouterr().err


def test_analyze_truncated_file(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    out = tmp_path / "o"
    main(["simulate", "--config", cfg, "--out", str(out), "--frames", "20"])
    lines = open(out / "frames.txt").read().splitlines()[:-5]
    bad = tmp_path / "trunc.txt"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["analyze", "--config", cfg, "--out", str(out), str(bad)]) == 3
    assert "truncated" in capsys.readouterr().err


def test_missing_frame_file_is_usage_error(tmp_path, capsys):
    assert main(["analyze", "--config", _cfg(tmp_path), str(tmp_path / "nope.txt")]) == 1


@pytest.mark.parametrize("text", ["schema_version = 1\n[source]\nsigma_x = -2.0\n", "schema_version = 3\n",
                                  "[source\n"])
def test_schema_errors_exit_2(tmp_path, capsys, text):
    assert main(["simulate", "--config", _cfg(tmp_path, text), "--out", str(tmp_path)]) == 2
    assert "invalid configuration" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["simulate"], ["simulate", "--config", "x", "--frames", "many"],
                                  ["protocol", "--config", "x", "--runs"]])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as ei:
        main(argv)
    assert ei.value.code == 1


@pytest.mark.parametrize("flag,value", [("--seed", "-1"), ("--seed", str(2 ** 64)), ("--frames", "0"),
                                        ("--workers", "0")])
def test_bad_override_values_exit_1(tmp_path, flag, value, capsys):
    assert main(["simulate", "--config", _cfg(tmp_path), "--out", str(tmp_path), flag, value]) == 1


def test_missing_config_file(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "none.cfg")]) == 1


def test_protocol_command(tmp_path, capsys):
    text = "schema_version = 1\n[protocol]\nn_target = 3\nmaster_seed = 4\n"
    out = tmp_path / "p"
    assert main(["protocol", "--config", _cfg(tmp_path, text), "--out", str(out), "--runs", "300"]) == 0
    vals = _report_values(out / "protocol.txt")
    assert int(vals["n_runs"]) == 300
    assert float(vals["pairs_per_trial"]) == pytest.approx(6.65, rel=0.05)
    assert "P_out_eq_3_given_registry_3" in vals
    _, cols, rows = read_table(out / "protocol_distribution.txt")
    assert rows[:, 1].sum() == pytest.approx(1.0)
    assert main(["protocol", "--config", _cfg(tmp_path, text), "--out", str(out), "--runs", "0"]) == 1


def _lifetime_table(path):
    t = np.linspace(0, 120, 241)
    params = dict(alpha1=0.58, alpha2=0.04, tau1=150.0, tau2=150.0, omega=2 * np.pi * 0.051, xi=2e-5)
    g = an.lifetime_g2(t, params, 2.6e-3, 0.08, 0.5)
    pas = 2.6e-3 * 0.08 * chi_expr(t, 0.58, 0.04, 150.0, 150.0, params["omega"]) + 2e-5
    write_table(path, ["t", "g2", "g2_err", "p_AS", "p_AS_err"], list(zip(t, g, 0.05 * g, pas, 0.05 * pas)))


def test_fit_lifetime_command(tmp_path, capsys):
    data = tmp_path / "lt.txt"
    _lifetime_table(data)
    text = "schema_version = 1\n[lifetime]\np = 2.6e-3\neta_AS = 0.08\nf_kappa = 0.5\n"
    out = tmp_path / "f"
    assert main(["fit-lifetime", "--config", _cfg(tmp_path, text), "--out", str(out), str(data)]) == 0
    vals = _report_values(out / "lifetime_fit.txt")
    assert float(vals["beat_period"]) == pytest.approx(19.61, abs=0.01)
    assert vals["valid"] == "true"


def test_fit_lifetime_errors(tmp_path, capsys):
    data = tmp_path / "lt.txt"
    _lifetime_table(data)
    assert main(["fit-lifetime", "--config", _cfg(tmp_path, "schema_version = 1\n"), str(data)]) == 2
    text = "schema_version = 1\n[lifetime]\np = 2.6e-3\neta_AS = 0.08\n"
    assert main(["fit-lifetime", "--config", _cfg(tmp_path, text)]) == 1
    junk = tmp_path / "junk.txt"
    junk.write_text("# columns=a,b\n1,2\n")
    assert main(["fit-lifetime", "--config", _cfg(tmp_path, text), str(junk)]) == 3


def test_operating_point_preset_mean_stokes_rate(tmp_path, capsys):
    out = tmp_path / "mm"
    assert main(["simulate", "--config", str(PRESETS / "multimode_memory.cfg"), "--out", str(out), "--frames", "40000"]) == 0
    vals = _report_values(out / "summary.txt")
    assert float(vals["mean_S"]) == pytest.approx(0.21, abs=0.01)


def test_report_writes_autocorrelation_and_ensemble(tmp_path, capsys):
    text = """schema_version = 1
[source]
p_mode = 0.022222222222222223
[simulation]
n_frames = 3000
[analysis]
products = ["autocorr", "ensemble"]
roi_kappa = 42.0
ensemble_rows = 4
ensemble_columns = 3
ensemble_row_step = 42.0
"""
    out = tmp_path / "r"
    assert main(["report", "--config", _cfg(tmp_path, text), "--out", str(out)]) == 0
    cs = _report_values(out / "cauchy_schwarz.txt")
    assert float(cs["g2_SAS"]) > 1.5 and int(cs["regions"]) == 100
    _, cols, rows = read_table(out / "g2_ensemble.txt")
    assert cols == ["ky_S", "ky_AS_mirrored", "mean", "std"] and rows.shape == (16, 4)


@pytest.mark.skipif(shutil.which("wavemux") is None, reason="console script not installed")
def test_console_script_exit_codes(tmp_path):
    bad = _cfg(tmp_path, "schema_version = 9\n")
    r = subprocess.run(["wavemux", "simulate", "--config", bad], capture_output=True, text=True)
    assert r.returncode == 2
    r = subprocess.run(["wavemux", "nonsense"], capture_output=True, text=True)
    assert r.returncode == 1
    empty = tmp_path / "e.txt"
    empty.write_text("")
    r = subprocess.run(["wavemux", "analyze", "--config", _cfg(tmp_path), str(empty)], capture_output=True,
                       text=True, cwd=tmp_path)
    assert r.returncode == 3 and "no data" in r.stderr
    r = subprocess.run(["wavemux", "modes", "--n", "256"], capture_output=True, text=True, env=dict(os.environ))
    assert r.returncode == 0 and r.stdout.startswith("M_x=")
