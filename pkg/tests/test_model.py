import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from wavemux.model import (
    MODE_SCALING, DetectionParams, MemoryParams, SourceParams, UnitAudit, beat_period, biphoton_amplitude,
    chi_expr, chi_expr_nb, chi_R_of_t, coincidence_probability, coincidence_probability_checked,
    decoherence_rate, g2_model, mode_cell_pitch, mode_number_scaling, roi_acceptance_f, roi_acceptance_xy,
    tmsv_g2, xi_per_roi,
)


def f_quadrature(kappa, sigma):
    """Independent route: integrate the Gaussian pair density over both squares numerically."""
    h = kappa / 2
    dens = lambda ka, ks: math.exp(-(ks + ka) ** 2 / (2 * sigma * sigma)) / (math.sqrt(2 * math.pi) * kappa * sigma)
    val, _ = integrate.dblquad(dens, -h, h, -h, h, epsabs=1e-13, epsrel=1e-12)
    return val * val


@pytest.mark.parametrize("ratio", [0.1, 0.5, 1.0, 2.0, 5.0, 10.0])
@pytest.mark.parametrize("sigma", [1.0, 4.45])
def test_acceptance_matches_quadrature(ratio, sigma):
    assert abs(roi_acceptance_f(ratio * sigma, sigma) - f_quadrature(ratio * sigma, sigma)) <= 1e-6


def test_acceptance_limits():
    # the closed form approaches 1 only as 1 - 2 sqrt(2/pi) / x
    x = 1e3
    assert 1.0 - roi_acceptance_f(x * 4.45, 4.45) == pytest.approx(2 * math.sqrt(2 / math.pi) / x, rel=1e-3)
    assert abs(roi_acceptance_f(1e10, 1.0) - 1.0) < 1e-9
    assert roi_acceptance_f(1e-6, 1.0) < 1e-12
    # small-x series joins the closed form smoothly
    x = np.array([0.00999, 0.01, 0.01001])
    f = roi_acceptance_f(x, 1.0)
    assert np.all(np.diff(f) > 0)
    assert abs(f[1] - (x[1] / math.sqrt(2 * math.pi)) ** 2) / f[1] < 1e-4


def test_acceptance_large_ratio_asymptote():
    x = 1e3
    expected = (1 - math.sqrt(2 / math.pi) / x) ** 2
    assert abs(roi_acceptance_f(x, 1.0) - expected) < 1e-9


@settings(max_examples=200, deadline=None)
@given(k1=st.floats(1e-3, 1e3), k2=st.floats(1e-3, 1e3), sigma=st.floats(0.1, 50))
def test_acceptance_monotone_and_bounded(k1, k2, sigma):
    lo, hi = sorted((k1, k2))
    flo, fhi = roi_acceptance_f(lo, sigma), roi_acceptance_f(hi, sigma)
    assert 0 < flo <= fhi + 1e-15 < 1 + 1e-15


def test_acceptance_xy_reduces_to_isotropic():
    assert roi_acceptance_xy(21.0, 4.45, 4.45) == pytest.approx(roi_acceptance_f(21.0, 4.45), rel=1e-14)
    fxy = roi_acceptance_xy(21.0, 4.45, 4.76)
    assert roi_acceptance_f(21.0, 4.76) < fxy < roi_acceptance_f(21.0, 4.45)


@pytest.mark.parametrize("kappa,sigma", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0), (math.nan, 1.0)])
def test_acceptance_rejects_bad_input(kappa, sigma):
    with pytest.raises(ValueError):
        roi_acceptance_f(kappa, sigma)


def test_biphoton_amplitude():
    assert biphoton_amplitude(1.0, -1.0, 2.0) == 1.0
    assert biphoton_amplitude(1.0, 1.0, 1.0) == pytest.approx(math.exp(-2.0))
    with pytest.raises(ValueError):
        biphoton_amplitude(0.0, 0.0, -1.0)
    with pytest.raises(ValueError):
        biphoton_amplitude(np.inf, 0.0, 1.0)


def test_g2_model_values():
    # no noise: 1 + f/p
    assert g2_model(0.01, 0.08, 0.08, 0.35, 1.0, 0.0) == pytest.approx(101.0)
    assert g2_model(0.01, 0.08, 0.08, 0.35, 0.5, 0.0) == pytest.approx(51.0)
    # noise equal to the signal halves the excess
    sig = 0.01 * 0.08 * 0.35
    assert g2_model(0.01, 0.08, 0.08, 0.35, 1.0, sig) == pytest.approx(51.0)
    arr = g2_model(np.array([0.01, 0.02]), 0.08, 0.08, 0.35, 1.0, 0.0)
    assert arr == pytest.approx([101.0, 51.0])


@pytest.mark.parametrize("args", [(0.0, 0.08, 0.08, 0.35, 1.0, 0.0), (0.01, 0.0, 0.08, 0.35, 1.0, 0.0),
                                  (0.01, 0.08, 0.0, 0.35, 1.0, 0.0)])
def test_g2_model_undefined(args):
    with pytest.raises(ValueError):
        g2_model(*args)


@settings(max_examples=100, deadline=None)
@given(p=st.floats(1e-5, 1.0), f=st.floats(0.0, 1.0), xi=st.floats(0.0, 1e-2))
def test_g2_model_at_least_one_and_falls_with_noise(p, f, xi):
    g = g2_model(p, 0.08, 0.08, 0.35, f, xi)
    assert g >= 1.0
    assert g2_model(p, 0.08, 0.08, 0.35, f, xi + 1e-3) <= g


def test_tmsv():
    assert tmsv_g2(1.0) == 3.0
    assert tmsv_g2(0.01) == pytest.approx(102.0)
    with pytest.raises(ValueError):
        tmsv_g2(0.0)


def test_coincidence_probability():
    p = coincidence_probability(0.01, 10, 21.0, 4.45, 0.08, 0.08, 0.35, 1e-3, 2e-3, f=0.5)
    assert p == pytest.approx(0.01 * 10 * 0.5 * 0.08 * 0.08 * 0.35 + 2e-6)
    assert coincidence_probability_checked(1.0, 1000, 420.0, 4.45, 1.0, 1.0, 1.0, 1.0, 1.0)[1] is False
    with pytest.raises(ValueError):
        coincidence_probability(0.01, 0, 21.0, 4.45, 0.08, 0.08, 0.35, 0.0, 0.0)
    with pytest.raises(ValueError):
        coincidence_probability(0.01, 10, 21.0, 4.45, 1.5, 0.08, 0.35, 0.0, 0.0)


def test_chi_expression():
    w = 2 * math.pi * 0.051
    assert chi_expr(0.0, 0.58, 0.04, 10.0, 10.0, w) == pytest.approx(0.62 ** 2)
    # half a beat period later the two species interfere destructively
    t = math.pi / w
    expected = (0.58 - 0.04) ** 2
    assert chi_expr(t, 0.58, 0.04, math.inf, math.inf, w) == pytest.approx(expected)
    assert chi_expr_nb(t, 0.58, 0.04, 30.0, 20.0, w) == pytest.approx(chi_expr(t, 0.58, 0.04, 30.0, 20.0, w))


def test_memory_params_and_retrieval():
    mem = MemoryParams(alpha1=0.58, alpha2=0.04, tau1=100.0, tau2=50.0, omega=2 * math.pi * 0.051,
                       xi_table=((0.0, 0.01), (10.0, 0.03)))
    assert mem.chi(0.0) == pytest.approx(0.62 ** 2)
    assert mem.xi(5.0) == pytest.approx(0.02)
    assert mem.xi(100.0) == pytest.approx(0.03)
    assert mem.beat_period == pytest.approx(19.6078, abs=1e-3)
    with pytest.raises(ValueError):
        chi_R_of_t(-1.0, mem)
    with pytest.raises(ValueError):
        MemoryParams(alpha1=0.9, alpha2=0.2)
    with pytest.raises(ValueError):
        MemoryParams(xi_table=((1.0, 0.0), (0.5, 0.0)))


def test_decoherence_and_units():
    # 1.45 cm/s thermal speed at |K| = 100 mm^-1
    assert decoherence_rate(100.0) == pytest.approx(1.45e-3)
    assert decoherence_rate(-100.0) == decoherence_rate(100.0)
    assert beat_period(2 * math.pi * 0.051) == pytest.approx(19.61, abs=0.01)
    assert beat_period(0.0) == math.inf
    audit = UnitAudit()
    assert 1.45 * audit.cm_per_s_to_mm_per_us == pytest.approx(1.45e-5)


def test_mode_scaling_helpers():
    assert mode_number_scaling(420.0, 4.45) == pytest.approx(MODE_SCALING * 420 / 8.9)
    assert mode_cell_pitch(4.45) == pytest.approx(420 / mode_number_scaling(420.0, 4.45))
    assert xi_per_roi(4.0, 21.0, 420.0, 420.0) == pytest.approx(0.01)


@pytest.mark.parametrize("kwargs", [dict(sigma_x=0.0), dict(p_mode=-1.0), dict(envelope="disc"),
                                    dict(envelope="gaussian"), dict(fov_kappa_y=0.0)])
def test_source_params_validation(kwargs):
    with pytest.raises(ValueError):
        SourceParams(**kwargs)


def test_detection_params_validation():
    with pytest.raises(ValueError):
        DetectionParams(eta_S=1.2)
    with pytest.raises(ValueError):
        DetectionParams(pixel_pitch=0.0)
    assert DetectionParams().sensor_shape(420.0, 420.0) == (200, 200)
    with pytest.raises(ValueError):
        DetectionParams(sensor_px_x=10).sensor_shape(420.0, 420.0)
