import math

import pytest

from wavemux import config as C
from wavemux.protocol import ProtocolConfig
from wavemux.simulator import SimConfig

from conftest import PRESETS

MIN = "schema_version = 1\n"


@pytest.mark.parametrize("name", ["multimode_memory", "g2_map", "autocorr", "lossless"])
def test_presets_validate_and_build(name):
    cfg = C.load(PRESETS / f"{name}.cfg")
    assert isinstance(C.sim_config(cfg), SimConfig)
    assert isinstance(C.protocol_config(cfg), ProtocolConfig)
    assert len(C.digest(cfg)) == 64


def test_defaults_are_filled():
    cfg = C.loads(MIN)
    assert cfg["source"]["sigma_x"] == 4.45
    assert cfg["detection"]["pixel_pitch"] == 2.1
    assert cfg["memory"]["tau1"] == math.inf
    assert C.memory_params(cfg) is None
    sim = C.sim_config(cfg)
    assert sim.n_frames == 1000 and sim.master_seed == 0


def test_digest_ignores_output_and_key_order():
    a = C.loads(MIN + '[source]\np_mode = 0.01\nsigma_x = 4.0\n[output]\ndir = "a"\n')
    b = C.loads(MIN + '[output]\ndir = "b"\n[source]\nsigma_x = 4.0\np_mode = 0.01\n')
    assert C.digest(a) == C.digest(b)
    c = C.loads(MIN + '[source]\np_mode = 0.01\nsigma_x = 4.0000001\n')
    assert C.digest(a) != C.digest(c)


def test_digest_is_stable_across_calls():
    cfg = C.load(PRESETS / "multimode_memory.cfg")
    assert C.digest(cfg) == C.digest(C.load(PRESETS / "multimode_memory.cfg"))


def test_explicit_default_equals_implicit():
    assert C.digest(C.loads(MIN)) == C.digest(C.loads(MIN + "[detection]\neta_S = 0.08\n"))


def test_overrides():
    cfg = C.loads(MIN)
    out = C.apply_overrides(cfg, seed=5, frames=12)
    assert out["simulation"]["master_seed"] == 5 and out["protocol"]["master_seed"] == 5
    assert out["simulation"]["n_frames"] == 12
    assert cfg["simulation"]["n_frames"] == 1000
    assert C.digest(out) != C.digest(cfg)
    with pytest.raises(C.ConfigSchemaError):
        C.apply_overrides(cfg, frames=0)


@pytest.mark.parametrize("text,where", [
    ("", "schema_version"),
    ("schema_version = 2\n", "schema_version"),
    (MIN + "[source]\nsigma_x = -1.0\n", "source/sigma_x"),
    (MIN + "[source]\nbogus = 1\n", "bogus"),
    (MIN + "[detection]\neta_S = 1.5\n", "detection/eta_S"),
    (MIN + '[simulation]\nn_frames = "ten"\n', "simulation/n_frames"),
    (MIN + '[analysis]\nproducts = ["nope"]\n', "analysis/products"),
    (MIN + "[memory]\nxi_table = [[1.0]]\n", "memory/xi_table"),
    (MIN + "[nonsense]\n", "nonsense"),
    ("schema_version = = 1", "TOML"),
])
def test_schema_errors(text, where):
    with pytest.raises(C.ConfigSchemaError) as ei:
        C.loads(text)
    assert where in str(ei.value)
    assert ei.value.errors


def test_all_errors_are_reported_together():
    with pytest.raises(C.ConfigSchemaError) as ei:
        C.loads(MIN + "[detection]\neta_S = 2.0\neta_AS = -1.0\n")
    assert len(ei.value.errors) == 2


def test_non_utf8_file(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_bytes(b"schema_version = 1\n# \xff\xfe\n")
    with pytest.raises(C.ConfigSchemaError, match="UTF-8"):
        C.load(p)


def test_domain_errors_become_schema_errors():
    cfg = C.loads(MIN + "[memory]\nenabled = true\nxi_table = [[5.0, 1.0], [1.0, 2.0]]\n")
    with pytest.raises(C.ConfigSchemaError, match="increasing"):
        C.sim_config(cfg)


def test_memory_and_protocol_mapping():
    cfg = C.loads(MIN + "[memory]\nenabled = true\nalpha1 = 0.5\ntau1 = 20.0\n"
                  "[protocol]\nuse_memory = true\nk_w = [1.0, 2.0]\n")
    m = C.memory_params(cfg)
    assert m.alpha1 == 0.5 and m.tau1 == 20.0
    p = C.protocol_config(cfg)
    assert p.memory == m and p.k_w == (1.0, 2.0)
