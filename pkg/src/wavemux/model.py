"""Closed-form physics shared by the simulator and the analysis code.

Units throughout: wavevectors in mm^-1, times in us, rates in us^-1.

Width convention: ``sigma`` is the standard deviation of ``k_S + k_AS`` over
detected pairs, i.e. the width a Gaussian fit to the centre-of-mass
coincidence histogram returns.  Acceptance ``f(kappa)``, the simulator's
conjugate jitter and the mode-count scaling all use it this way.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from ._accel import njit

MODE_SCALING = 0.565
# 1.45 cm/s expressed in mm/us
V_THERMAL_RB = 1.45e-5
LARMOR_OMEGA = 2 * math.pi * 0.051
SMALL_ROI = 1e-2


@dataclass(frozen=True)
class SourceParams:
    """Pair-emission model: correlation widths, field of view, per-mode pair mean.

    ``envelope`` is ``"uniform"`` (singles flat over the field of view) or
    ``"gaussian"``, in which case the per-mode mean falls off as
    ``exp(-k^2 / 2 envelope_width^2)`` from its peak value ``p_mode``.
    """

    sigma_x: float = 4.45
    sigma_y: float = 4.76
    fov_kappa_x: float = 420.0
    fov_kappa_y: float = 420.0
    p_mode: float = 0.0
    envelope: str = "uniform"
    envelope_width: float = 0.0
    ensemble_waist: float | None = None

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ValueError("correlation widths must be positive")
        if not (self.fov_kappa_x > 0 and self.fov_kappa_y > 0):
            raise ValueError("field-of-view sides must be positive")
        if not (self.p_mode >= 0 and math.isfinite(self.p_mode)):
            raise ValueError("p_mode must be a finite non-negative number")
        if self.envelope not in ("uniform", "gaussian"):
            raise ValueError(f"unknown envelope {self.envelope!r}")
        if self.envelope == "gaussian" and not self.envelope_width > 0:
            raise ValueError("gaussian envelope needs envelope_width > 0")
        if self.ensemble_waist is not None and not self.ensemble_waist > 0:
            raise ValueError("ensemble_waist must be positive")

    def diffraction_width(self):
        """Far-field spread ``2/w`` of an ensemble of waist ``w`` (mm^-1)."""
        if self.ensemble_waist is None:
            raise ValueError("ensemble_waist not set")
        return 2.0 / self.ensemble_waist


@dataclass(frozen=True)
class DetectionParams:
    eta_S: float = 0.08
    eta_AS: float = 0.08
    chi_R0: float = 0.35
    dark_rate: float = 0.0
    pixel_pitch: float = 2.1
    sensor_px_x: int | None = None
    sensor_px_y: int | None = None

    def __post_init__(self):
        for name in ("eta_S", "eta_AS", "chi_R0"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not (self.dark_rate >= 0 and math.isfinite(self.dark_rate)):
            raise ValueError("dark_rate must be finite and non-negative")
        if not self.pixel_pitch > 0:
            raise ValueError("pixel_pitch must be positive")
        for name in ("sensor_px_x", "sensor_px_y"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be at least 1")

    def sensor_shape(self, fov_x, fov_y):
        """Pixels per arm region; defaults to just covering the field of view."""
        nx = self.sensor_px_x if self.sensor_px_x is not None else math.ceil(fov_x / self.pixel_pitch - 1e-9)
        ny = self.sensor_px_y if self.sensor_px_y is not None else math.ceil(fov_y / self.pixel_pitch - 1e-9)
        if nx * self.pixel_pitch < fov_x * (1 - 1e-9) or ny * self.pixel_pitch < fov_y * (1 - 1e-9):
            raise ValueError("sensor is smaller than the field of view")
        return int(nx), int(ny)


@dataclass(frozen=True)
class MemoryParams:
    """Two-species spin-wave retrieval model and AS-arm noise table.

    ``xi_table`` holds ``(storage_time, xi)`` points, linearly interpolated and
    held constant outside the table.  ``xi`` is the mean number of noise
    photons per frame over the whole AS field of view; a square ROI of side
    ``kappa`` sees ``xi * kappa^2 / (fov_x * fov_y)`` (see :func:`xi_per_roi`).

    With ``wavevector_decay`` the Gaussian decay scales of both species are
    replaced by ``1 / (|K| v_thermal)`` for a spin wave of wavevector ``K``.
    """

    alpha1: float = math.sqrt(0.35)
    alpha2: float = 0.0
    tau1: float = math.inf
    tau2: float = math.inf
    omega: float = 0.0
    v_thermal: float = V_THERMAL_RB
    xi_table: tuple = ((0.0, 0.0),)
    wavevector_decay: bool = False

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("spin-wave amplitudes must be non-negative")
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise ValueError("decay constants must be positive")
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        if not self.v_thermal > 0:
            raise ValueError("v_thermal must be positive")
        if not 0.0 <= (self.alpha1 + self.alpha2) ** 2 <= 1.0:
            raise ValueError("(alpha1 + alpha2)^2 is the zero-time retrieval efficiency and must lie in [0, 1]")
        table = tuple((float(t), float(x)) for t, x in self.xi_table)
        if not table:
            raise ValueError("xi_table must have at least one point")
        if any(x < 0 for _, x in table):
            raise ValueError("xi values must be non-negative")
        ts = [t for t, _ in table]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("xi_table times must be strictly increasing")
        object.__setattr__(self, "xi_table", table)

    def xi(self, t):
        ts = np.array([p[0] for p in self.xi_table])
        xs = np.array([p[1] for p in self.xi_table])
        return np.interp(t, ts, xs)

    def chi(self, t):
        return chi_R_of_t(t, self)

    @property
    def beat_period(self):
        return beat_period(self.omega)


def _finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite input")


def biphoton_amplitude(k_S, k_AS, sigma):
    """Peak-normalised pair amplitude ``exp(-(k_S + k_AS)^2 / 2 sigma^2)``.

    Here ``sigma`` is the width of the amplitude itself; the coincidence
    density ``|amplitude|^2`` has width ``sigma / sqrt(2)``.
    """
    _finite(k_S, k_AS, sigma)
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    s = np.add(k_S, k_AS)
    return np.exp(-(s * s) / (2.0 * np.square(sigma)))


def _acceptance_1d(x):
    # x = kappa / sigma
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < SMALL_ROI
    xs = x[small]
    # sqrt(2/pi) * sum_n (-1)^n x^(2n+1) / (2^n n! (2n+1)(2n+2))
    series = xs / 2 - xs ** 3 / 24 + xs ** 5 / 240 - xs ** 7 / 2688
    out[small] = math.sqrt(2 / math.pi) * series
    xl = x[~small]
    out[~small] = erf(xl / math.sqrt(2)) + math.sqrt(2 / math.pi) * np.expm1(-xl * xl / 2) / xl
    return out


def roi_acceptance_f(kappa, sigma):
    """Probability that the conjugate partner of an S photon in a square ROI of
    side ``kappa`` lands in the conjugate ROI, for sum-variable width ``sigma``.

    The one-dimensional acceptance is squared; for anisotropic widths use
    :func:`roi_acceptance_xy`.
    """
    _finite(kappa, sigma)
    kappa = np.asarray(kappa, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(kappa <= 0) or np.any(sigma <= 0):
        raise ValueError("kappa and sigma must be positive")
    res = _acceptance_1d(kappa / sigma) ** 2
    return float(res) if res.ndim == 0 else res


def roi_acceptance_xy(kappa, sigma_x, sigma_y):
    """Product of the per-axis acceptances for an anisotropic source."""
    return np.sqrt(roi_acceptance_f(kappa, sigma_x) * roi_acceptance_f(kappa, sigma_y))


def coincidence_probability(p_mode, M, kappa, sigma, eta_S, eta_AS, chi_R, p_S, p_AS, f=None):
    """Net S-AS coincidence probability: conjugate pairs plus accidentals.

    ``p_mode * M`` is the mean pair number inside the ROI.  Pass ``f`` to
    override the isotropic acceptance (e.g. with :func:`roi_acceptance_xy`).
    A result above 1 means the inputs are inconsistent; it is returned as-is
    and flagged by :func:`coincidence_probability_checked`.
    """
    for name, v in (("p_mode", p_mode), ("eta_S", eta_S), ("eta_AS", eta_AS),
                    ("chi_R", chi_R), ("p_S", p_S), ("p_AS", p_AS)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")
    if M < 1:
        raise ValueError("M must be at least 1")
    if f is None:
        f = roi_acceptance_f(kappa, sigma)
    return p_mode * M * f * eta_S * eta_AS * chi_R + p_S * p_AS


def coincidence_probability_checked(*args, **kwargs):
    """Same as :func:`coincidence_probability` but also returns a consistency flag."""
    p = coincidence_probability(*args, **kwargs)
    return p, bool(p <= 1.0)


def g2_model(p, eta_S, eta_AS, chi_R, f_kappa, xi):
    """Cross-correlation predicted for a conjugate ROI pair.

    ``p`` is the mean pair number generated inside the ROI per trial (``p_mode``
    times the ROI mode count) and ``xi`` the AS-arm noise click probability in
    the ROI.  Works elementwise on arrays.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise ValueError("g2 is undefined for p <= 0")
    denom = p * eta_S * (p * eta_AS * chi_R + xi)
    if np.any(np.asarray(denom) == 0):
        raise ValueError("g2 denominator vanishes (eta_S = 0 or no AS light)")
    res = 1.0 + p * eta_S * eta_AS * chi_R * f_kappa / denom
    return float(res) if np.ndim(res) == 0 else res


def tmsv_g2(pbar):
    """Cross-correlation ``2 + 1/pbar`` of a two-mode squeezed vacuum with mean ``pbar``."""
    pbar = np.asarray(pbar, dtype=float)
    if np.any(pbar <= 0):
        raise ValueError("pbar must be positive")
    res = 2.0 + 1.0 / pbar
    return float(res) if res.ndim == 0 else res


def chi_expr(t, alpha1, alpha2, tau1, tau2, omega):
    """``|a1 exp(-t^2/2tau1^2) + a2 exp(i omega t) exp(-t^2/2tau2^2)|^2`` in real arithmetic."""
    g1 = np.exp(-t * t / (2.0 * tau1 * tau1))
    g2 = np.exp(-t * t / (2.0 * tau2 * tau2))
    return (alpha1 * g1) ** 2 + (alpha2 * g2) ** 2 + 2.0 * alpha1 * alpha2 * np.cos(omega * t) * g1 * g2


chi_expr_nb = njit(chi_expr)


def chi_R_of_t(t, mem):
    """Retrieval efficiency after storage time ``t`` (us)."""
    t = np.asarray(t, dtype=float)
    _finite(t)
    if np.any(t < 0):
        raise ValueError("storage time must be non-negative")
    res = chi_expr(t, mem.alpha1, mem.alpha2, mem.tau1, mem.tau2, mem.omega)
    return float(res) if res.ndim == 0 else res


def decoherence_rate(K, v_thermal=V_THERMAL_RB):
    """Motional dephasing rate ``|K| v`` in us^-1 (K in mm^-1, v in mm/us)."""
    if v_thermal <= 0:
        raise ValueError("v_thermal must be positive")
    K = np.asarray(K, dtype=float)
    res = np.abs(K) * v_thermal
    return float(res) if res.ndim == 0 else res


def beat_period(omega):
    if omega <= 0:
        return math.inf
    return 2 * math.pi / omega


def mode_number_scaling(kappa, sigma):
    """Approximate Schmidt number ``0.565 kappa / 2 sigma`` of one axis."""
    if np.any(np.asarray(kappa) <= 0) or np.any(np.asarray(sigma) <= 0):
        raise ValueError("kappa and sigma must be positive")
    res = MODE_SCALING * np.asarray(kappa, dtype=float) / (2.0 * np.asarray(sigma, dtype=float))
    return float(res) if res.ndim == 0 else res


def mode_cell_pitch(sigma):
    """Side of one independent mode cell along an axis, ``2 sigma / 0.565``."""
    return 2.0 * sigma / MODE_SCALING


def xi_per_roi(xi_full, kappa, fov_x, fov_y):
    """Scale whole-field AS noise down to a square ROI of side ``kappa``."""
    return xi_full * kappa * kappa / (fov_x * fov_y)


@dataclass(frozen=True)
class UnitAudit:
    """Conversion factors used to bring quoted numbers into package units."""

    cm_per_s_to_mm_per_us: float = 1e-5
    khz_to_rad_per_us: float = 2 * math.pi * 1e-3
    per_us_to_per_s: float = 1e6
    notes: tuple = field(default=(
        "wavevector: mm^-1",
        "time: us",
        "rate: us^-1",
        "speed: mm/us (1.45 cm/s = 1.45e-5 mm/us)",
        "Larmor 51 kHz -> omega = 2*pi*0.051 rad/us, period 19.6 us",
    ))
